//! Reconstruction metrics against ground-truth meshes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Isometry3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ArmModel, JointState, Trajectory, DOF};
use crate::cem::{goal_reached, CemParams, TransitionSpec};
use crate::geom::{Point3, PointCloud, PointLabel, Pose6, TriMesh};
use crate::nlopt::NlError;
use crate::rng;
use crate::scene::{render, Scene};
use crate::sdf::{CameraModel, TableBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("reconstruction is empty")]
    EmptyRecon,
    #[error("coverage needs at least 100 surface samples (got {0})")]
    TooFewSamples(usize),
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn point_triangle_distance(p: &Point3, tri: &[Point3; 3]) -> f64 {
    (p - closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2])).norm()
}

/// Distance from `p` to the nearest point of the mesh surface.
pub fn point_mesh_distance(p: &Point3, mesh: &TriMesh) -> f64 {
    (0..mesh.faces.len()).map(|f| point_triangle_distance(p, &mesh.triangle(f))).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HausdorffStats {
    pub mean: f64,
    pub max: f64,
    pub std: f64,
}

/// One-directional Hausdorff statistics: for every reconstructed point, the
/// exact distance to the truth surface.
pub fn hausdorff(recon: &PointCloud, truth: &TriMesh) -> Result<HausdorffStats, EvalError> {
    if recon.is_empty() {
        return Err(EvalError::EmptyRecon);
    }
    let d: Vec<f64> = recon.points.iter().map(|p| point_mesh_distance(p, truth)).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let max = d.iter().copied().fold(0.0, f64::max);
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(HausdorffStats { mean, max, std: var.sqrt() })
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &TriMesh, samples: usize, seed: u64) -> Vec<Point3> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    let mut rng = rng::indexed(seed, 0);
    (0..samples)
        .map(|_| {
            let x = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c < x).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect()
}

/// Fixed-radius neighbour queries over a point set.
pub struct PointHash {
    cell: f64,
    grid: HashMap<(i64, i64, i64), Vec<Point3>>,
}

impl PointHash {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        let mut grid: HashMap<(i64, i64, i64), Vec<Point3>> = HashMap::new();
        for p in points {
            grid.entry(Self::key(p, cell)).or_default().push(*p);
        }
        Self { cell, grid }
    }

    fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    /// Whether any stored point lies within `radius <= cell` of `q`.
    pub fn any_within(&self, q: &Point3, radius: f64) -> bool {
        debug_assert!(radius <= self.cell);
        let (x, y, z) = Self::key(q, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = self.grid.get(&(x + dx, y + dy, z + dz)) {
                        if v.iter().any(|p| (p - q).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Fraction of area-weighted truth samples with a reconstructed point within `radius`.
pub fn coverage(recon: &PointCloud, truth: &TriMesh, radius: f64, samples: usize, seed: u64) -> Result<f64, EvalError> {
    if samples < 100 {
        return Err(EvalError::TooFewSamples(samples));
    }
    if recon.is_empty() {
        return Ok(0.0);
    }
    let hash = PointHash::new(&recon.points, radius);
    let pts = sample_surface(truth, samples, seed);
    let hit = pts.iter().filter(|p| hash.any_within(p, radius)).count();
    Ok(hit as f64 / samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerId {
    Gmm,
    Heuristic180,
    Direct,
}

impl PlannerId {
    pub const ALL: [PlannerId; 3] = [PlannerId::Gmm, PlannerId::Heuristic180, PlannerId::Direct];

    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerId::Gmm => "gmm",
            PlannerId::Heuristic180 => "heuristic180",
            PlannerId::Direct => "direct",
        }
    }
}

impl fmt::Display for PlannerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlannerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "gmm" => Ok(PlannerId::Gmm),
            "heuristic180" => Ok(PlannerId::Heuristic180),
            "direct" => Ok(PlannerId::Direct),
            other => Err(format!("unknown planner '{other}' (expected gmm, heuristic180 or direct)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("wrist joint has less than pi of travel in either direction")]
    NoHeadroom,
    #[error("transition solve did not converge (violation {0:e})")]
    NotConverged(f64),
    #[error("transition ends outside the goal tolerance")]
    GoalMissed,
    #[error(transparent)]
    Solver(#[from] NlError),
}

fn checked_transition(spec: &TransitionSpec<'_>, params: &CemParams, goal_check: &Pose6) -> Result<Trajectory, BaselineError> {
    let report = spec.solve(&params.solver)?;
    if !report.converged {
        return Err(BaselineError::NotConverged(report.max_violation));
    }
    if !goal_reached(spec.arm, &report.trajectory, goal_check, params) {
        return Err(BaselineError::GoalMissed);
    }
    Ok(report.trajectory)
}

/// Straight to the goal with the goal orientation as given; limits and table
/// clearance only, no view constraint.
pub fn plan_direct(arm: &ArmModel, table: &TableBox, x_d: &Pose6, q_grasp: &JointState, params: &CemParams) -> Result<Trajectory, BaselineError> {
    let spec = TransitionSpec { arm, table, start: *q_grasp, goal: *x_d, horizon: params.m, p_t: params.p_t, epsilon: params.epsilon, cone: None };
    checked_transition(&spec, params, x_d)
}

/// Signed wrist sweep of magnitude pi that stays within the last joint's limits.
pub fn wrist_flip(arm: &ArmModel, q: &JointState) -> Result<f64, BaselineError> {
    let j = DOF - 1;
    let pi = std::f64::consts::PI;
    if q[j] + pi <= arm.joint_upper[j] {
        Ok(pi)
    } else if q[j] - pi >= arm.joint_lower[j] {
        Ok(-pi)
    } else {
        Err(BaselineError::NoHeadroom)
    }
}

/// Turns the last joint by pi over the first half of the waypoints, then moves
/// to the goal keeping the object turned (goal orientation composed with a half
/// turn about the approach axis).
pub fn plan_heuristic180(arm: &ArmModel, table: &TableBox, x_d: &Pose6, q_grasp: &JointState, params: &CemParams) -> Result<Trajectory, BaselineError> {
    let delta = wrist_flip(arm, q_grasp)?;
    let mut q_flip = *q_grasp;
    q_flip[DOF - 1] += delta;
    let n_prefix = params.m / 2 + 1;
    let prefix = Trajectory::linear(q_grasp, &q_flip, n_prefix);
    let turned = Pose6::from_rotation(x_d.position, &(x_d.rotation() * Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI)));
    let horizon = params.m - n_prefix + 1;
    let spec = TransitionSpec { arm, table, start: q_flip, goal: turned, horizon, p_t: params.p_t, epsilon: params.epsilon, cone: None };
    let suffix = checked_transition(&spec, params, &turned)?;
    let mut waypoints = prefix.waypoints;
    waypoints.extend_from_slice(&suffix.waypoints[1..]);
    Ok(Trajectory::new(waypoints))
}

/// Object points captured along a trajectory, in the object's initial frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedCloud {
    pub cloud: PointCloud,
    /// Waypoint whose frame contributed each point.
    pub source: Vec<usize>,
}

/// Renders the carried object at every waypoint, keeps the object-labelled
/// returns, maps them back through the known object pose and keeps the first
/// point landing in each `voxel`-sized cell (so fused points stay on the
/// rendered surface).
#[allow(clippy::too_many_arguments)]
pub fn execute_and_fuse(
    scene: &Scene,
    camera: &CameraModel,
    arm: &ArmModel,
    traj: &Trajectory,
    grasp_tf: &Isometry3<f64>,
    noise_sigma: f64,
    seed: u64,
    voxel: f64,
) -> FusedCloud {
    let mesh = scene.world_mesh();
    let mut cells: BTreeMap<(i64, i64, i64), (Point3, usize)> = BTreeMap::new();
    for (i, q) in traj.waypoints.iter().enumerate() {
        let pose = arm.wrist(q) * grasp_tf;
        let inv = pose.inverse();
        let frame = render(camera, Some(&mesh.transformed(&pose)), Some(&scene.table), noise_sigma, rng::indexed(seed, i as u64).random());
        let labels = frame.cloud.labels.as_ref().expect("rendered frames are labelled");
        for (p, l) in frame.cloud.points.iter().zip(labels) {
            if *l != PointLabel::Object {
                continue;
            }
            let x = inv * (frame.sensor * p);
            let key = ((x.x / voxel).floor() as i64, (x.y / voxel).floor() as i64, (x.z / voxel).floor() as i64);
            cells.entry(key).or_insert((x, i));
        }
    }
    let (points, source) = cells.into_values().unzip();
    FusedCloud { cloud: PointCloud::new(points), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub planner: PlannerId,
    pub hausdorff_mean: f64,
    pub hausdorff_max: f64,
    pub hausdorff_std: f64,
    pub coverage_fraction: f64,
    pub points: usize,
}

impl ReconReport {
    pub fn evaluate(planner: PlannerId, fused: &PointCloud, truth: &TriMesh, radius: f64, samples: usize, seed: u64) -> Result<Self, EvalError> {
        let h = hausdorff(fused, truth)?;
        let c = coverage(fused, truth, radius, samples, seed)?;
        Ok(Self { planner, hausdorff_mean: h.mean, hausdorff_max: h.max, hausdorff_std: h.std, coverage_fraction: c, points: fused.len() })
    }

    pub const CSV_HEADER: &'static str = "planner,hausdorff_mean,hausdorff_max,hausdorff_std,coverage,points";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.6},{}",
            self.planner, self.hausdorff_mean, self.hausdorff_max, self.hausdorff_std, self.coverage_fraction, self.points
        )
    }
}
