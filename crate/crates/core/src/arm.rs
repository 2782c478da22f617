//! Kinematics of a 7-DOF serial arm with a two-jaw gripper.
//!
//! Frames use standard DH: `T_k = Rz(theta_k + offset_k) Tz(d_k) Tx(a_k) Rx(alpha_k)`.
//! Frame index 0 is the base, frame `k` (1..=7) sits after joint `k`; frame 7 is
//! the wrist flange. The approach axis of the gripper is the flange z-axis.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3xX, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Point3, Pose6};
use crate::io::{read_json, IoError};

pub const DOF: usize = 7;
/// Valid `fk_link` indices: 0..=6 for links 1-7, 7 and 8 for the jaws.
pub const LINK_COUNT: usize = DOF + 2;

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("link index {0} out of range 0..{LINK_COUNT}")]
    BadLink(usize),
    #[error("arm description has {0} DH rows, expected {DOF}")]
    RowCount(usize),
    #[error("joint {0}: lower limit is not below upper limit")]
    Limits(usize),
    #[error("collision sphere {0} references frame {1} (valid 0..=7)")]
    SphereFrame(usize, usize),
    #[error("jaw offsets must mirror each other across the wrist x-z plane")]
    JawSymmetry,
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointState(pub [f64; DOF]);

impl JointState {
    pub fn zeros() -> Self {
        Self([0.0; DOF])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut q = [0.0; DOF];
        q.copy_from_slice(&v[..DOF]);
        Self(q)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn lerp(&self, other: &JointState, t: f64) -> JointState {
        let mut q = [0.0; DOF];
        for (i, v) in q.iter_mut().enumerate() {
            *v = self.0[i] + (other.0[i] - self.0[i]) * t;
        }
        Self(q)
    }

    pub fn distance(&self, other: &JointState) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<usize> for JointState {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for JointState {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<JointState>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<JointState>) -> Self {
        Self { waypoints }
    }

    /// `n` waypoints interpolated linearly in joint space, both ends included.
    pub fn linear(from: &JointState, to: &JointState, n: usize) -> Self {
        assert!(n >= 2);
        Self::new((0..n).map(|k| from.lerp(to, k as f64 / (n - 1) as f64)).collect())
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn first(&self) -> &JointState {
        &self.waypoints[0]
    }

    pub fn last(&self) -> &JointState {
        self.waypoints.last().expect("non-empty trajectory")
    }

    /// Row-major flattening: waypoint after waypoint.
    pub fn flatten(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|q| q.0).collect()
    }

    pub fn unflatten(v: &[f64]) -> Self {
        assert_eq!(v.len() % DOF, 0);
        Self::new(v.chunks(DOF).map(JointState::from_slice).collect())
    }

    /// Resamples to `n` waypoints by piecewise-linear interpolation in joint space.
    pub fn resample(&self, n: usize) -> Self {
        assert!(n >= 2 && self.len() >= 2);
        if n == self.len() {
            return self.clone();
        }
        let segs = (self.len() - 1) as f64;
        Self::new(
            (0..n)
                .map(|k| {
                    let s = k as f64 / (n - 1) as f64 * segs;
                    let i = (s.floor() as usize).min(self.len() - 2);
                    self.waypoints[i].lerp(&self.waypoints[i + 1], s - i as f64)
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

impl DhRow {
    pub fn transform(&self, theta: f64) -> Isometry3<f64> {
        let th = theta + self.theta_offset;
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), th)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        let t = Vector3::new(self.a * th.cos(), self.a * th.sin(), self.d);
        Isometry3::from_parts(Translation3::from(t), rot)
    }
}

/// Collision sphere rigidly attached to frame `frame` (0 = base, 7 = flange).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSphere {
    pub frame: usize,
    pub center: [f64; 3],
    pub radius: f64,
    /// Gripper spheres are exempt from object clearance.
    #[serde(default)]
    pub gripper: bool,
}

/// World-frame collision sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedSphere {
    pub center: Point3,
    pub radius: f64,
    pub gripper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    #[serde(default)]
    pub base: Pose6,
    pub dh_rows: Vec<DhRow>,
    pub joint_lower: [f64; DOF],
    pub joint_upper: [f64; DOF],
    /// Jaw positions in the flange frame.
    pub jaw_offsets: [[f64; 3]; 2],
    pub link_spheres: Vec<LinkSphere>,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::default_arm()
    }
}

impl ArmModel {
    /// Bundled arm: a 7-DOF spherical-wrist arm with about 1 m of total link length.
    pub fn default_arm() -> Self {
        use std::f64::consts::FRAC_PI_2 as H;
        let row = |alpha: f64, d: f64| DhRow { a: 0.0, alpha, d, theta_offset: 0.0 };
        let dh_rows = vec![row(-H, 0.30), row(H, 0.0), row(H, 0.35), row(-H, 0.0), row(-H, 0.30), row(H, 0.0), row(0.0, 0.08)];
        let deg = |v: f64| v.to_radians();
        let joint_upper = [deg(170.0), deg(120.0), deg(170.0), deg(120.0), deg(170.0), deg(120.0), 3.5];
        let joint_lower = joint_upper.map(|v| -v);
        let s = |frame: usize, z: f64, radius: f64| LinkSphere { frame, center: [0.0, 0.0, z], radius, gripper: false };
        let g = |center: [f64; 3], radius: f64| LinkSphere { frame: 7, center, radius, gripper: true };
        let link_spheres = vec![
            s(0, 0.10, 0.07),
            s(0, 0.22, 0.07),
            s(2, 0.0, 0.065),
            s(2, 0.12, 0.06),
            s(2, 0.24, 0.06),
            s(3, 0.0, 0.055),
            s(4, 0.10, 0.05),
            s(4, 0.20, 0.05),
            s(5, 0.0, 0.045),
            s(6, 0.04, 0.04),
            g([0.0, 0.0, 0.03], 0.03),
            g([0.0, 0.04, 0.06], 0.01),
            g([0.0, -0.04, 0.06], 0.01),
            g([0.0, 0.04, 0.10], 0.01),
            g([0.0, -0.04, 0.10], 0.01),
        ];
        Self { base: Pose6::identity(), dh_rows, joint_lower, joint_upper, jaw_offsets: [[0.0, 0.04, 0.10], [0.0, -0.04, 0.10]], link_spheres }
    }

    pub fn validate(&self) -> Result<(), ArmError> {
        if self.dh_rows.len() != DOF {
            return Err(ArmError::RowCount(self.dh_rows.len()));
        }
        for i in 0..DOF {
            if !(self.joint_lower[i] < self.joint_upper[i]) {
                return Err(ArmError::Limits(i));
            }
        }
        for (k, s) in self.link_spheres.iter().enumerate() {
            if s.frame > DOF {
                return Err(ArmError::SphereFrame(k, s.frame));
            }
        }
        let [j1, j2] = self.jaw_offsets;
        if (j1[0] - j2[0]).abs() > 1e-12 || (j1[1] + j2[1]).abs() > 1e-12 || (j1[2] - j2[2]).abs() > 1e-12 {
            return Err(ArmError::JawSymmetry);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArmError> {
        let arm: ArmModel = read_json(path)?;
        arm.validate()?;
        Ok(arm)
    }

    /// Frames 0..=7: base, then after each joint.
    pub fn frames(&self, q: &JointState) -> [Isometry3<f64>; DOF + 1] {
        let mut out = [Isometry3::identity(); DOF + 1];
        out[0] = self.base.isometry();
        for k in 0..DOF {
            out[k + 1] = out[k] * self.dh_rows[k].transform(q[k]);
        }
        out
    }

    /// Flange (wrist) frame.
    pub fn wrist(&self, q: &JointState) -> Isometry3<f64> {
        self.frames(q)[DOF]
    }

    pub fn fk_link(&self, q: &JointState, link: usize) -> Result<Pose6, ArmError> {
        if link >= LINK_COUNT {
            return Err(ArmError::BadLink(link));
        }
        let frames = self.frames(q);
        let iso = if link < DOF {
            frames[link + 1]
        } else {
            let o = self.jaw_offsets[link - DOF];
            frames[DOF] * Translation3::new(o[0], o[1], o[2])
        };
        Ok(Pose6::from_isometry(&iso))
    }

    /// Jaw midpoint with the wrist orientation, as an isometry.
    pub fn jaw_midpoint_iso(&self, q: &JointState) -> Isometry3<f64> {
        self.wrist(q) * Translation3::from(self.jaw_mid_offset())
    }

    pub fn jaw_midpoint(&self, q: &JointState) -> Pose6 {
        Pose6::from_isometry(&self.jaw_midpoint_iso(q))
    }

    pub fn jaw_mid_offset(&self) -> Vector3<f64> {
        let [a, b] = self.jaw_offsets;
        (Vector3::from(a) + Vector3::from(b)) * 0.5
    }

    pub fn within_limits(&self, q: &JointState) -> bool {
        (0..DOF).all(|i| q[i] >= self.joint_lower[i] && q[i] <= self.joint_upper[i])
    }

    pub fn clamp(&self, q: &JointState) -> JointState {
        let mut out = *q;
        for i in 0..DOF {
            out[i] = out[i].clamp(self.joint_lower[i], self.joint_upper[i]);
        }
        out
    }

    pub fn mid_limits(&self) -> JointState {
        let mut q = JointState::zeros();
        for i in 0..DOF {
            q[i] = 0.5 * (self.joint_lower[i] + self.joint_upper[i]);
        }
        q
    }

    /// All collision spheres in world coordinates.
    pub fn spheres(&self, q: &JointState) -> Vec<PlacedSphere> {
        let frames = self.frames(q);
        self.link_spheres
            .iter()
            .map(|s| PlacedSphere { center: frames[s.frame] * Point3::from(s.center), radius: s.radius, gripper: s.gripper })
            .collect()
    }

    /// Analytic positional Jacobian (3x7) of a point fixed in the flange frame.
    pub fn position_jacobian(&self, q: &JointState, point_in_flange: &Vector3<f64>) -> Matrix3xX<f64> {
        let frames = self.frames(q);
        let p = frames[DOF] * Point3::from(*point_in_flange);
        let mut j = Matrix3xX::zeros(DOF);
        for k in 0..DOF {
            // Joint k rotates about the z-axis of the frame preceding it.
            let z = frames[k].rotation * Vector3::z();
            let o = frames[k].translation.vector;
            j.set_column(k, &z.cross(&(p.coords - o)));
        }
        j
    }
}

/// Damped least-squares IK toward a target jaw-midpoint position and, for each
/// index in `angles`, the matching Euler angle of `target`. Joint limits are
/// enforced by clamping after every step. Returns the final configuration and
/// its residual norm.
pub(crate) fn ik_dls(arm: &ArmModel, seed: &JointState, target: &Pose6, angles: &[usize], iters: usize) -> (JointState, f64) {
    let residual = |q: &JointState| -> DVector<f64> {
        let m = arm.jaw_midpoint(q);
        let mut r = Vec::with_capacity(3 + angles.len());
        r.extend((m.position - target.position).iter().copied());
        for &i in angles {
            // Angle errors are scaled to be commensurate with ~0.1 m position errors.
            r.push(0.1 * wrap_angle(m.orientation[i] - target.orientation[i]));
        }
        DVector::from_vec(r)
    };
    let mut q = arm.clamp(seed);
    let mut r = residual(&q);
    let mut lambda = 1e-2;
    let h = 1e-6;
    for _ in 0..iters {
        if r.norm() < 1e-7 {
            break;
        }
        let mut jac = DMatrix::zeros(r.len(), DOF);
        for k in 0..DOF {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let d = (residual(&qp) - residual(&qm)) / (2.0 * h);
            jac.set_column(k, &d);
        }
        let jt = jac.transpose();
        let mut improved = false;
        for _ in 0..8 {
            let a = &jt * &jac + DMatrix::identity(DOF, DOF) * lambda;
            let Some(step) = a.cholesky().map(|c| c.solve(&(&jt * &r))) else { break };
            let mut cand = q;
            for k in 0..DOF {
                cand[k] -= step[k];
            }
            let cand = arm.clamp(&cand);
            let rc = residual(&cand);
            if rc.norm() < r.norm() {
                q = cand;
                r = rc;
                lambda = (lambda * 0.5).max(1e-6);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    let norm = r.norm();
    (q, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    fn dh_matrix(row: &DhRow, theta: f64) -> Matrix4<f64> {
        let (st, ct) = (theta + row.theta_offset).sin_cos();
        let (sa, ca) = row.alpha.sin_cos();
        Matrix4::new(
            ct, -st * ca, st * sa, row.a * ct, //
            st, ct * ca, -ct * sa, row.a * st, //
            0.0, sa, ca, row.d, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    fn chain_oracle(arm: &ArmModel, q: &JointState, upto: usize) -> Matrix4<f64> {
        let mut m = arm.base.isometry().to_homogeneous();
        for k in 0..upto {
            m *= dh_matrix(&arm.dh_rows[k], q[k]);
        }
        m
    }

    fn random_q(seed: u64) -> JointState {
        use rand::Rng;
        let arm = ArmModel::default_arm();
        let mut rng = crate::rng::indexed(seed, 0);
        let mut q = JointState::zeros();
        for i in 0..DOF {
            q[i] = rng.random_range(arm.joint_lower[i]..arm.joint_upper[i]);
        }
        q
    }

    #[test]
    fn zero_configuration_matches_matrix_chain() {
        let arm = ArmModel::default_arm();
        let q = JointState::zeros();
        for link in 0..DOF {
            let pose = arm.fk_link(&q, link).unwrap();
            let m = chain_oracle(&arm, &q, link + 1);
            let iso = pose.isometry().to_homogeneous();
            assert!((iso - m).abs().max() < 1e-12, "link {link}");
        }
        // Straight-up arm: flange at the sum of the d offsets.
        assert_abs_diff_eq!(arm.wrist(&q).translation.vector, Vector3::new(0.0, 0.0, 1.03), epsilon = 1e-12);
    }

    #[test]
    fn random_configurations_match_matrix_chain() {
        let arm = ArmModel::default_arm();
        for s in 0..20 {
            let q = random_q(s);
            let m = chain_oracle(&arm, &q, DOF);
            assert!((arm.wrist(&q).to_homogeneous() - m).abs().max() < 1e-12);
        }
    }

    #[test]
    fn joint_one_rotates_downstream_links() {
        let arm = ArmModel::default_arm();
        let q = random_q(3);
        let mut q2 = q;
        let delta = 0.37;
        q2[0] += delta;
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), delta);
        for link in 0..LINK_COUNT {
            let a = arm.fk_link(&q, link).unwrap().position;
            let b = arm.fk_link(&q2, link).unwrap().position;
            assert!((rot * a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn bad_link_and_jaw_midpoint() {
        let arm = ArmModel::default_arm();
        let q = random_q(5);
        assert!(matches!(arm.fk_link(&q, 9), Err(ArmError::BadLink(9))));
        let j1 = arm.fk_link(&q, 7).unwrap().position;
        let j2 = arm.fk_link(&q, 8).unwrap().position;
        let mid = arm.jaw_midpoint(&q);
        assert!((mid.position - Point3::from((j1.coords + j2.coords) * 0.5)).norm() < 1e-12);
        // On the flange approach axis.
        let w = arm.wrist(&q);
        let local = w.inverse() * mid.position;
        assert!(local.x.abs() < 1e-12 && local.y.abs() < 1e-12 && local.z > 0.0);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let arm = ArmModel::default_arm();
        let off = arm.jaw_mid_offset();
        for s in 0..10 {
            let q = random_q(100 + s);
            let j = arm.position_jacobian(&q, &off);
            let h = 1e-6;
            for k in 0..DOF {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let d = (arm.jaw_midpoint(&qp).position - arm.jaw_midpoint(&qm).position) / (2.0 * h);
                assert!((d - j.column(k)).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn limits_are_inclusive() {
        let arm = ArmModel::default_arm();
        assert!(arm.within_limits(&JointState(arm.joint_lower)));
        assert!(arm.within_limits(&arm.mid_limits()));
        let mut q = JointState(arm.joint_upper);
        q[3] += 1e-6;
        assert!(!arm.within_limits(&q));
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let arm = ArmModel::default_arm();
        arm.validate().unwrap();
        let text = serde_json::to_string(&arm).unwrap();
        let back: ArmModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, arm);
        let mut bad = arm.clone();
        bad.jaw_offsets[1][1] = 0.03;
        assert!(matches!(bad.validate(), Err(ArmError::JawSymmetry)));
        bad = arm.clone();
        bad.joint_lower[2] = bad.joint_upper[2];
        assert!(matches!(bad.validate(), Err(ArmError::Limits(2))));
    }

    #[test]
    fn trajectory_flatten_and_resample() {
        let a = random_q(1);
        let b = random_q(2);
        let t = Trajectory::linear(&a, &b, 5);
        assert_eq!(Trajectory::unflatten(&t.flatten()), t);
        let r = t.resample(9);
        assert_eq!(r.len(), 9);
        for k in 0..9 {
            let expect = a.lerp(&b, k as f64 / 8.0);
            assert!(r.waypoints[k].distance(&expect) < 1e-12);
        }
    }

    #[test]
    fn ik_reaches_top_down_pose() {
        let arm = ArmModel::default_arm();
        let target = Pose6::new(Point3::new(0.55, 0.05, 0.12), [std::f64::consts::PI, 0.0, 0.3]);
        let seed = JointState([0.0, 0.5, 0.0, -1.2, 0.0, 1.0, 0.0]);
        let (q, res) = ik_dls(&arm, &seed, &target, &[0, 1, 2], 200);
        assert!(res < 1e-5, "residual {res}");
        assert!(arm.within_limits(&q));
        let m = arm.jaw_midpoint(&q);
        assert!((m.position - target.position).norm() < 1e-5);
    }

    #[test]
    fn jaw_midpoint_is_mean_of_jaws() {
        let arm = ArmModel::default_arm();
        for seed in 0..1000 {
            let q = random_q(10_000 + seed);
            let j1 = arm.fk_link(&q, 7).unwrap().position;
            let j2 = arm.fk_link(&q, 8).unwrap().position;
            let mid = arm.jaw_midpoint(&q).position;
            assert!((mid.coords - (j1.coords + j2.coords) * 0.5).norm() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fk_is_locally_lipschitz(seed in 0u64..10_000, dir in prop::array::uniform7(-1.0f64..1.0)) {
            let arm = ArmModel::default_arm();
            let q = random_q(seed);
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let mut q2 = q;
            for i in 0..DOF { q2[i] += dir[i] / n * 1e-3; }
            let total: f64 = arm.dh_rows.iter().map(|r| r.a.abs() + r.d.abs()).sum::<f64>() + 0.1;
            for link in 0..LINK_COUNT {
                let a = arm.fk_link(&q, link).unwrap().position;
                let b = arm.fk_link(&q2, link).unwrap().position;
                prop_assert!((a - b).norm() <= 2.0 * total * 1e-3);
            }
        }

    }
}
