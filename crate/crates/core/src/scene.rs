//! Synthetic world: object mesh on a table, depth-camera simulation, and
//! single-frame segmentation (RANSAC table plane + Euclidean clustering).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point3, PointCloud, PointLabel, Pose6, TriMesh};
use crate::io::{read_json, read_mesh, IoError};
use crate::rng;
use crate::sdf::{look_at, CameraModel, CameraParams, SdfError, TableBox};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("no plane with at least 3 inliers")]
    NoPlane,
    #[error("no points left after removing the table plane")]
    NoObject,
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("unknown bundled scene '{0}' (expected sphere, box or prism)")]
    UnknownBundled(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Camera(#[from] SdfError),
}

/// Scene file contents; `mesh` is resolved relative to the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub name: String,
    pub mesh: PathBuf,
    pub object_pose: Pose6,
    pub table: TableBox,
    pub camera: CameraParams,
    pub goal_pose: Pose6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    /// Object geometry in its own frame.
    pub object_mesh: TriMesh,
    pub object_pose: Pose6,
    pub table: TableBox,
    pub camera: CameraParams,
    /// Goal pose of the jaw midpoint.
    pub goal_pose: Pose6,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.object_mesh.validate().map_err(|e| SceneError::Invalid(e.to_string()))?;
        self.table.validate()?;
        let cam = CameraModel::from_params(&self.camera)?;
        let low = self.world_mesh().min_z();
        if (low - self.table.top()).abs() > 2e-3 {
            return Err(SceneError::Invalid(format!(
                "object must rest on the table: lowest vertex at z={low:.4}, table top at z={:.4}",
                self.table.top()
            )));
        }
        if !cam.contains(&self.goal_pose.position) {
            return Err(SceneError::Invalid("goal position lies outside the camera cone".into()));
        }
        Ok(())
    }

    pub fn world_mesh(&self) -> TriMesh {
        self.object_mesh.transformed(&self.object_pose.isometry())
    }

    pub fn camera_model(&self, beam_resolution: usize) -> Result<CameraModel, SdfError> {
        CameraModel::new(self.camera.pose, self.camera.half_angle, self.camera.near, self.camera.far, beam_resolution)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let file: SceneFile = read_json(path)?;
        let mesh_path = path.parent().unwrap_or(Path::new(".")).join(&file.mesh);
        let mesh = read_mesh(&mesh_path)?;
        let scene = Scene {
            name: file.name,
            object_mesh: mesh,
            object_pose: file.object_pose,
            table: file.table,
            camera: file.camera,
            goal_pose: file.goal_pose,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_file(&self, mesh: &Path) -> SceneFile {
        SceneFile {
            name: self.name.clone(),
            mesh: mesh.to_path_buf(),
            object_pose: self.object_pose,
            table: self.table,
            camera: self.camera,
            goal_pose: self.goal_pose,
        }
    }

    /// Built-in scenes: `sphere`, `box` and `prism` (an L-shaped extrusion).
    pub fn bundled(name: &str) -> Result<Self, SceneError> {
        let (mesh, pose) = match name {
            "sphere" => (TriMesh::icosphere(0.035, 3), Pose6::new(Point3::new(0.55, 0.0, 0.035), [0.0; 3])),
            "box" => (
                TriMesh::cuboid(Vector3::new(0.05, 0.035, 0.025)),
                Pose6::new(Point3::new(0.55, 0.0, 0.025), [0.0, 0.0, 0.2]),
            ),
            "prism" => {
                let l = [(0.0, 0.0), (0.08, 0.0), (0.08, 0.03), (0.03, 0.03), (0.03, 0.08), (0.0, 0.08)];
                let shifted: Vec<(f64, f64)> = l.iter().map(|&(x, y)| (x - 0.03, y - 0.03)).collect();
                (TriMesh::prism(&shifted, 0.03), Pose6::new(Point3::new(0.55, 0.0, 0.03), [0.0, 0.0, 0.4]))
            }
            other => return Err(SceneError::UnknownBundled(other.to_string())),
        };
        let scene = Scene {
            name: name.to_string(),
            object_mesh: mesh,
            object_pose: pose,
            table: TableBox { center: Point3::new(0.7, 0.0, -0.025), half_extents: [0.4, 0.6, 0.025] },
            camera: CameraParams {
                pose: look_at(Point3::new(1.3, 0.0, 0.55), Point3::new(0.55, 0.07, 0.12)),
                half_angle: 0.45,
                near: 0.2,
                far: 2.0,
                beam_resolution: 241,
            },
            goal_pose: Pose6::new(Point3::new(0.55, 0.15, 0.22), [std::f64::consts::PI, 0.0, 0.0]),
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Depth image as a point cloud in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    /// Points in the camera frame, labelled by the surface they came from.
    pub cloud: PointCloud,
    pub ray_index: Vec<usize>,
    /// Camera-to-world transform at capture.
    pub sensor: Isometry3<f64>,
}

impl DepthFrame {
    pub fn world_cloud(&self) -> PointCloud {
        self.cloud.transformed(&self.sensor)
    }
}

/// Ray-triangle intersection (Moller-Trumbore); returns the hit distance `t > 0`.
pub fn ray_triangle(origin: &Point3, dir: &Vector3<f64>, tri: &[Point3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-12).then_some(t)
}

/// Entry distance of a ray into an axis-aligned box (slab test).
pub fn ray_box(origin: &Point3, dir: &Vector3<f64>, table: &TableBox) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let lo = table.center[k] - table.half_extents[k];
        let hi = table.center[k] + table.half_extents[k];
        if dir[k].abs() < 1e-300 {
            if origin[k] < lo || origin[k] > hi {
                return None;
            }
            continue;
        }
        let a = (lo - origin[k]) / dir[k];
        let b = (hi - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 <= t1 && t0 > 1e-12 {
        Some(t0)
    } else {
        None
    }
}

/// Renders a world-frame mesh (labelled object) and an optional table box.
/// Noise is drawn per ray from a counter-based stream, so the result does not
/// depend on the worker count.
pub fn render(
    camera: &CameraModel,
    object: Option<&TriMesh>,
    table: Option<&TableBox>,
    noise_sigma: f64,
    seed: u64,
) -> DepthFrame {
    let origin = camera.origin();
    let bound = object.map(|m| m.bounding_sphere());
    let hits: Vec<Option<(Point3, PointLabel, usize)>> = (0..camera.beam().len())
        .into_par_iter()
        .map(|i| {
            let dir = camera.ray_world(i);
            let mut best: Option<(f64, PointLabel)> = None;
            if let (Some(mesh), Some((c, r))) = (object, bound) {
                let oc = c - origin;
                let along = oc.dot(&dir);
                if (oc - dir * along).norm_squared() <= r * r * (1.0 + 1e-9) {
                    for f in 0..mesh.faces.len() {
                        if let Some(t) = ray_triangle(&origin, &dir, &mesh.triangle(f)) {
                            if best.is_none_or(|(bt, _)| t < bt) {
                                best = Some((t, PointLabel::Object));
                            }
                        }
                    }
                }
            }
            if let Some(tb) = table {
                if let Some(t) = ray_box(&origin, &dir, tb) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, PointLabel::Table));
                    }
                }
            }
            let (t, label) = best?;
            if t < camera.near || t > camera.far {
                return None;
            }
            let noise = if noise_sigma > 0.0 {
                let n: f64 = rng::indexed(seed, i as u64).sample(StandardNormal);
                noise_sigma * n
            } else {
                0.0
            };
            Some((Point3::from(camera.beam()[i] * (t + noise)), label, i))
        })
        .collect();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut ray_index = Vec::new();
    for (p, l, i) in hits.into_iter().flatten() {
        points.push(p);
        labels.push(l);
        ray_index.push(i);
    }
    DepthFrame { cloud: PointCloud::with_labels(points, labels), ray_index, sensor: *camera.isometry() }
}

pub fn render_depth(scene: &Scene, camera: &CameraModel, noise_sigma: f64, seed: u64) -> DepthFrame {
    render(camera, Some(&scene.world_mesh()), Some(&scene.table), noise_sigma, seed)
}

/// Plane `n . x + d = 0` with unit `n`.
pub type Plane = [f64; 4];

fn plane_distance(plane: &Plane, p: &Point3) -> f64 {
    plane[0] * p.x + plane[1] * p.y + plane[2] * p.z + plane[3]
}

fn least_squares_plane(points: &[Point3], idx: &[usize]) -> Option<Plane> {
    let n = idx.len() as f64;
    let c = idx.iter().fold(Vector3::zeros(), |a, &i| a + points[i].coords) / n;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i].coords - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    if !normal.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some([normal.x, normal.y, normal.z, -normal.dot(&c)])
}

/// RANSAC plane fit on a camera-frame cloud; the winning model is refit by
/// least squares on its inliers and the normal faces the camera origin.
pub fn segment_table(frame: &DepthFrame, distance_threshold: f64, iterations: usize, seed: u64) -> Result<(Plane, Vec<usize>), SceneError> {
    let pts = &frame.cloud.points;
    if pts.len() < 3 {
        return Err(SceneError::NoPlane);
    }
    let mut rng = rng::indexed(seed, 0);
    let count_inliers = |plane: &Plane| pts.iter().filter(|p| plane_distance(plane, p).abs() <= distance_threshold).count();
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iterations {
        let a = rng.random_range(0..pts.len());
        let b = rng.random_range(0..pts.len());
        let c = rng.random_range(0..pts.len());
        let n = (pts[b] - pts[a]).cross(&(pts[c] - pts[a]));
        let norm = n.norm();
        if norm < 1e-12 {
            continue;
        }
        let n = n / norm;
        let plane = [n.x, n.y, n.z, -n.dot(&pts[a].coords)];
        let count = count_inliers(&plane);
        if best.is_none_or(|(bc, _)| count > bc) {
            best = Some((count, plane));
        }
    }
    let (count, mut plane) = best.ok_or(SceneError::NoPlane)?;
    if count < 3 {
        return Err(SceneError::NoPlane);
    }
    let inliers: Vec<usize> = (0..pts.len()).filter(|&i| plane_distance(&plane, &pts[i]).abs() <= distance_threshold).collect();
    if let Some(refit) = least_squares_plane(pts, &inliers) {
        let refit_inliers: Vec<usize> =
            (0..pts.len()).filter(|&i| plane_distance(&refit, &pts[i]).abs() <= distance_threshold).collect();
        if refit_inliers.len() >= inliers.len() {
            plane = refit;
        }
    }
    // Camera sits at the origin of the frame: orient so that d > 0.
    if plane[3] < 0.0 {
        plane = plane.map(|v| -v);
    }
    let inliers: Vec<usize> = (0..pts.len()).filter(|&i| plane_distance(&plane, &pts[i]).abs() <= distance_threshold).collect();
    if inliers.len() < 3 {
        return Err(SceneError::NoPlane);
    }
    Ok((plane, inliers))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clustering with edge radius `tol`. Returns one label per point;
/// labels are the smallest point index of each cluster.
pub fn cluster_labels(points: &[Point3], tol: f64) -> Vec<usize> {
    let key = |p: &Point3| ((p.x / tol).floor() as i64, (p.y / tol).floor() as i64, (p.z / tol).floor() as i64);
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut parent: Vec<usize> = (0..points.len()).collect();
    let tol2 = tol * tol;
    for (i, p) in points.iter().enumerate() {
        let (x, y, z) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cell) = grid.get(&(x + dx, y + dy, z + dz)) else { continue };
                    for &j in cell {
                        if j > i && (points[j] - p).norm_squared() <= tol2 {
                            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                            if a != b {
                                parent[a.max(b)] = a.min(b);
                            }
                        }
                    }
                }
            }
        }
    }
    (0..points.len()).map(|i| find(&mut parent, i)).collect()
}

/// Largest Euclidean cluster outside the plane inliers, in world coordinates.
pub fn cluster_object(frame: &DepthFrame, plane_inliers: &[usize], cluster_tol: f64) -> Result<PointCloud, SceneError> {
    let mut is_plane = vec![false; frame.cloud.len()];
    for &i in plane_inliers {
        is_plane[i] = true;
    }
    let rest: Vec<usize> = (0..frame.cloud.len()).filter(|&i| !is_plane[i]).collect();
    if rest.is_empty() {
        return Err(SceneError::NoObject);
    }
    let pts: Vec<Point3> = rest.iter().map(|&i| frame.cloud.points[i]).collect();
    let labels = cluster_labels(&pts, cluster_tol);
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for &l in &labels {
        *sizes.entry(l).or_default() += 1;
    }
    // Largest cluster; ties go to the cluster with the smallest first index.
    let (&winner, _) = sizes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).expect("non-empty");
    let chosen: Vec<Point3> = pts.iter().zip(&labels).filter(|(_, &l)| l == winner).map(|(p, _)| frame.sensor * p).collect();
    Ok(PointCloud::new(chosen))
}

/// Voxel-downsamples a training cloud to at most `max_points`.
pub fn training_set(cloud: &PointCloud, max_points: usize) -> PointCloud {
    cloud.downsample_to(max_points, 0.002).0
}
