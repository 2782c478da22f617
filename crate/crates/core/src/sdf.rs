//! Signed distances and constraint violations: robot clearance to point clouds,
//! the table bounding box and the truncated camera viewing cone.

use nalgebra::{Isometry3, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ArmModel, JointState, PlacedSphere};
use crate::geom::{Point3, Pose6};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdfError {
    #[error("camera needs 0 < near < far (got near {near}, far {far})")]
    Range { near: f64, far: f64 },
    #[error("camera half angle {0} outside (0, pi/2)")]
    HalfAngle(f64),
    #[error("beam resolution leaves no rays inside the cone")]
    Beam,
    #[error("table half extents must be positive")]
    Table,
}

/// Serializable camera description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    /// Optical frame; +z is the viewing direction.
    pub pose: Pose6,
    pub half_angle: f64,
    pub near: f64,
    pub far: f64,
    /// Rays per side of the square tangent-plane grid.
    pub beam_resolution: usize,
}

/// Truncated viewing cone plus a discrete set of rays inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub pose: Pose6,
    pub half_angle: f64,
    pub near: f64,
    pub far: f64,
    iso: Isometry3<f64>,
    inv: Isometry3<f64>,
    side: usize,
    step: f64,
    /// Unit ray directions in the camera frame.
    beam: Vec<Vector3<f64>>,
    /// Tangent-plane coordinates `(x/z, y/z)` of each ray.
    beam_uv: Vec<Vector2<f64>>,
    /// Grid cell -> ray index, row-major, `None` outside the cone.
    lookup: Vec<Option<u32>>,
}

/// Camera pose at `eye` whose optical axis points at `target`, with image x
/// horizontal (perpendicular to world z).
pub fn look_at(eye: Point3, target: Point3) -> Pose6 {
    let z = (target - eye).normalize();
    let up = if z.cross(&Vector3::z()).norm() < 1e-9 { Vector3::y() } else { Vector3::z() };
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    Pose6::from_rotation(eye, &rot)
}

impl CameraModel {
    pub fn new(pose: Pose6, half_angle: f64, near: f64, far: f64, beam_resolution: usize) -> Result<Self, SdfError> {
        if !(near > 0.0 && near < far) {
            return Err(SdfError::Range { near, far });
        }
        if !(half_angle > 0.0 && half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(SdfError::HalfAngle(half_angle));
        }
        if beam_resolution == 0 {
            return Err(SdfError::Beam);
        }
        let t = half_angle.tan();
        let n = beam_resolution;
        let step = if n == 1 { 0.0 } else { 2.0 * t / (n - 1) as f64 };
        let mut beam = Vec::new();
        let mut beam_uv = Vec::new();
        let mut lookup = vec![None; n * n];
        for r in 0..n {
            for c in 0..n {
                let (u, v) = if n == 1 { (0.0, 0.0) } else { (-t + c as f64 * step, -t + r as f64 * step) };
                if u * u + v * v <= t * t * (1.0 + 1e-12) {
                    lookup[r * n + c] = Some(beam.len() as u32);
                    beam.push(Vector3::new(u, v, 1.0).normalize());
                    beam_uv.push(Vector2::new(u, v));
                }
            }
        }
        // A 2x2 grid has only corner samples, all outside the cone.
        if beam.is_empty() {
            return Err(SdfError::Beam);
        }
        let iso = pose.isometry();
        Ok(Self { pose, half_angle, near, far, iso, inv: iso.inverse(), side: n, step, beam, beam_uv, lookup })
    }

    pub fn from_params(p: &CameraParams) -> Result<Self, SdfError> {
        Self::new(p.pose, p.half_angle, p.near, p.far, p.beam_resolution)
    }

    pub fn params(&self) -> CameraParams {
        CameraParams { pose: self.pose, half_angle: self.half_angle, near: self.near, far: self.far, beam_resolution: self.side }
    }

    /// Same cone with a different ray density.
    pub fn with_beam(&self, beam_resolution: usize) -> Result<Self, SdfError> {
        Self::new(self.pose, self.half_angle, self.near, self.far, beam_resolution)
    }

    pub fn isometry(&self) -> &Isometry3<f64> {
        &self.iso
    }

    pub fn world_to_camera(&self) -> &Isometry3<f64> {
        &self.inv
    }

    pub fn to_camera(&self, p: &Point3) -> Point3 {
        self.inv * p
    }

    pub fn origin(&self) -> Point3 {
        self.pose.position
    }

    pub fn beam(&self) -> &[Vector3<f64>] {
        &self.beam
    }

    pub fn beam_uv(&self) -> &[Vector2<f64>] {
        &self.beam_uv
    }

    /// World-frame direction of ray `i`.
    pub fn ray_world(&self, i: usize) -> Vector3<f64> {
        self.iso.rotation * self.beam[i]
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Tangent-plane spacing between neighbouring rays (radians at small angles).
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn tan_half(&self) -> f64 {
        self.half_angle.tan()
    }

    /// Ray index at grid cell `(row, col)`, if that cell lies inside the cone.
    pub fn ray_at(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.side || col >= self.side {
            return None;
        }
        self.lookup[row * self.side + col].map(|i| i as usize)
    }

    /// Exact membership of a world point in the truncated cone.
    pub fn contains(&self, p: &Point3) -> bool {
        let c = self.to_camera(p);
        let rho = (c.x * c.x + c.y * c.y).sqrt();
        c.z >= self.near && c.z <= self.far && rho <= c.z * self.tan_half()
    }
}

fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Signed distance from `p` (world) to the truncated cone, negative inside.
/// Computed exactly in the meridian plane `(rho, z)` of the camera frame, where
/// the solid is a trapezoid bounded by the near cap, the lateral edge and the far cap.
pub fn cone_violation(camera: &CameraModel, p: &Point3) -> f64 {
    let c = camera.to_camera(p);
    let rho = (c.x * c.x + c.y * c.y).sqrt();
    let t = camera.tan_half();
    let q = Vector2::new(rho, c.z);
    let n0 = Vector2::new(0.0, camera.near);
    let n1 = Vector2::new(camera.near * t, camera.near);
    let f1 = Vector2::new(camera.far * t, camera.far);
    let f0 = Vector2::new(0.0, camera.far);
    let d = segment_distance(q, n0, n1).min(segment_distance(q, n1, f1)).min(segment_distance(q, f1, f0));
    let inside = c.z >= camera.near && c.z <= camera.far && rho <= c.z * t;
    if inside {
        -d
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableBox {
    pub center: Point3,
    pub half_extents: [f64; 3],
}

impl TableBox {
    pub fn validate(&self) -> Result<(), SdfError> {
        if self.half_extents.iter().all(|&h| h > 0.0) {
            Ok(())
        } else {
            Err(SdfError::Table)
        }
    }

    pub fn top(&self) -> f64 {
        self.center.z + self.half_extents[2]
    }

    /// Exact signed distance of an axis-aligned box, negative inside.
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        let d = (p - self.center).abs() - Vector3::from(self.half_extents);
        let outside = d.map(|v| v.max(0.0)).norm();
        let inside = d.x.max(d.y).max(d.z).min(0.0);
        outside + inside
    }
}

/// Minimum signed distance between the non-gripper spheres and the cloud points.
/// Returns `+inf` for an empty cloud.
pub fn psi_spheres(spheres: &[PlacedSphere], cloud: &[Point3]) -> f64 {
    let mut best = f64::INFINITY;
    for s in spheres.iter().filter(|s| !s.gripper) {
        let mut d2 = f64::INFINITY;
        for p in cloud {
            d2 = d2.min((p - s.center).norm_squared());
        }
        best = best.min(d2.sqrt() - s.radius);
    }
    best
}

pub fn psi_robot_cloud(arm: &ArmModel, q: &JointState, cloud: &[Point3]) -> f64 {
    psi_spheres(&arm.spheres(q), cloud)
}

/// `max(eps - psi, 0)`; zero means the configuration keeps `eps` clearance.
pub fn collision_violation(arm: &ArmModel, q: &JointState, cloud: &[Point3], epsilon: f64) -> f64 {
    (epsilon - psi_robot_cloud(arm, q, cloud)).max(0.0)
}

pub fn box_violation_spheres(table: &TableBox, spheres: &[PlacedSphere], epsilon: f64) -> f64 {
    spheres
        .iter()
        .map(|s| (epsilon - (table.signed_distance(&s.center) - s.radius)).max(0.0))
        .fold(0.0, f64::max)
}

/// Worst clearance violation of any arm sphere (gripper included) against the table.
pub fn box_violation(table: &TableBox, arm: &ArmModel, q: &JointState, epsilon: f64) -> f64 {
    box_violation_spheres(table, &arm.spheres(q), epsilon)
}
