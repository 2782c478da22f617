//! Points, rigid poses, point clouds, triangle meshes and PCA bounding frames.
//!
//! Orientation convention: every [`Pose6`] stores extrinsic X-Y-Z Euler angles
//! `[roll, pitch, yaw]`, i.e. `R = Rz(yaw) * Ry(pitch) * Rx(roll)`. This is the
//! convention of `nalgebra::Rotation3::from_euler_angles` and it is used for
//! every serialized pose (scenario files, grasp plans, logs).

use std::f64::consts::PI;

use nalgebra::{Isometry3, Matrix3, Rotation3, SymmetricEigen, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud covariance has rank {rank} < 3")]
    DegenerateCloud { rank: usize },
    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    FaceIndex { face: usize, index: usize, count: usize },
    #[error("face {0} has zero area")]
    DegenerateFace(usize),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Position plus extrinsic X-Y-Z Euler angles (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6 {
    pub position: Point3,
    /// `[roll, pitch, yaw]`, extrinsic X-Y-Z.
    pub orientation: [f64; 3],
}

impl Default for Pose6 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6 {
    pub fn identity() -> Self {
        Self { position: Point3::origin(), orientation: [0.0; 3] }
    }

    pub fn new(position: Point3, orientation: [f64; 3]) -> Self {
        Self { position, orientation: orientation.map(wrap_angle) }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Point3::new(x, y, z), [0.0; 3])
    }

    pub fn from_rotation(position: Point3, rotation: &Rotation3<f64>) -> Self {
        let (r, p, y) = rotation.euler_angles();
        Self::new(position, [r, p, y])
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::from_rotation(Point3::from(iso.translation.vector), &iso.rotation.to_rotation_matrix())
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        let [r, p, y] = self.orientation;
        Rotation3::from_euler_angles(r, p, y)
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position.coords),
            UnitQuaternion::from_rotation_matrix(&self.rotation()),
        )
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        transform_point(self, p)
    }

    pub fn inverse(&self) -> Pose6 {
        Pose6::from_isometry(&self.isometry().inverse())
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose6) -> Pose6 {
        Pose6::from_isometry(&(self.isometry() * other.isometry()))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.orientation.iter().all(|v| v.is_finite())
    }
}

/// Rotates `p` by the pose orientation, then translates.
pub fn transform_point(pose: &Pose6, p: &Point3) -> Point3 {
    pose.rotation() * p + pose.position.coords
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Table,
    Object,
    Other,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<PointLabel>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points, labels: None }
    }

    pub fn with_labels(points: Vec<Point3>, labels: Vec<PointLabel>) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per point");
        Self { points, labels: Some(labels) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| iso * p).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Replaces every occupied voxel of edge `edge` by the centroid of its points.
    /// Output order follows the voxel keys, so it does not depend on input order
    /// beyond floating-point summation.
    pub fn voxel_downsample(&self, edge: f64) -> PointCloud {
        assert!(edge > 0.0);
        let mut cells: std::collections::BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = Default::default();
        for p in &self.points {
            let key = (
                (p.x / edge).floor() as i64,
                (p.y / edge).floor() as i64,
                (p.z / edge).floor() as i64,
            );
            let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
            e.0 += p.coords;
            e.1 += 1;
        }
        PointCloud::new(cells.into_values().map(|(s, n)| Point3::from(s / n as f64)).collect())
    }

    /// Voxel-downsamples with a growing voxel edge until at most `max_points` remain.
    /// Returns the cloud and the edge that was used (0 when no downsampling was needed).
    pub fn downsample_to(&self, max_points: usize, start_edge: f64) -> (PointCloud, f64) {
        if self.len() <= max_points {
            return (self.clone(), 0.0);
        }
        let mut edge = start_edge;
        loop {
            let ds = self.voxel_downsample(edge);
            if ds.len() <= max_points {
                return (ds, edge);
            }
            edge *= 1.25;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self, GeomError> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        for (fi, f) in self.faces.iter().enumerate() {
            for &i in f {
                if i >= self.vertices.len() {
                    return Err(GeomError::FaceIndex { face: fi, index: i, count: self.vertices.len() });
                }
            }
            if self.face_area(fi) <= 1e-16 {
                return Err(GeomError::DegenerateFace(fi));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, face: usize) -> [Point3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> TriMesh {
        TriMesh { vertices: self.vertices.iter().map(|p| iso * p).collect(), faces: self.faces.clone() }
    }

    pub fn min_z(&self) -> f64 {
        self.vertices.iter().map(|p| p.z).fold(f64::INFINITY, f64::min)
    }

    /// Smallest sphere around the vertex centroid that contains every vertex.
    pub fn bounding_sphere(&self) -> (Point3, f64) {
        let c = PointCloud::new(self.vertices.clone()).centroid().unwrap_or_else(Point3::origin);
        let r = self.vertices.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        (c, r)
    }

    /// Axis-aligned box mesh centred at the origin (12 outward-facing triangles).
    pub fn cuboid(half: Vector3<f64>) -> TriMesh {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            vertices.push(Point3::new(sx * half.x, sy * half.y, sz * half.z));
        }
        let faces = vec![
            [0, 2, 1], [1, 2, 3], // -z
            [4, 5, 6], [5, 7, 6], // +z
            [0, 1, 4], [1, 5, 4], // -y
            [2, 6, 3], [3, 6, 7], // +y
            [0, 4, 2], [2, 4, 6], // -x
            [1, 3, 5], [3, 7, 5], // +x
        ];
        TriMesh { vertices, faces }
    }

    /// Icosphere of the given radius centred at the origin.
    pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vector3<f64>> = [
            (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
            (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
            (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoint: std::collections::HashMap<(usize, usize), usize> = Default::default();
            let mut mid = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        TriMesh { vertices: verts.into_iter().map(|v| Point3::from(v * radius)).collect(), faces }
    }

    /// Extrudes a simple counter-clockwise polygon in the xy-plane from `z = -h` to `z = +h`.
    /// The polygon must be star-shaped with respect to its first vertex.
    pub fn prism(polygon: &[(f64, f64)], half_height: f64) -> TriMesh {
        let n = polygon.len();
        let mut vertices = Vec::with_capacity(2 * n);
        for &(x, y) in polygon {
            vertices.push(Point3::new(x, y, -half_height));
        }
        for &(x, y) in polygon {
            vertices.push(Point3::new(x, y, half_height));
        }
        let mut faces = Vec::new();
        for i in 1..n - 1 {
            faces.push([0, i + 1, i]);
            faces.push([n, n + i, n + i + 1]);
        }
        for i in 0..n {
            let j = (i + 1) % n;
            faces.push([i, j, n + j]);
            faces.push([i, n + j, n + i]);
        }
        TriMesh { vertices, faces }
    }
}

/// Oriented bounding frame from principal component analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObbFrame {
    /// Centroid and principal axes (columns of the rotation: major, middle, minor).
    pub pose: Pose6,
    pub half_extents: Vector3<f64>,
    /// Set when the covariance was rank deficient and the frame was completed arbitrarily.
    #[serde(default)]
    pub degenerate: bool,
}

impl ObbFrame {
    pub fn axes(&self) -> Matrix3<f64> {
        self.pose.rotation().into_inner()
    }

    pub fn centroid(&self) -> Point3 {
        self.pose.position
    }

    /// Expresses a world point in the frame's local coordinates.
    pub fn to_local(&self, p: &Point3) -> Vector3<f64> {
        self.axes().transpose() * (p - self.pose.position)
    }
}

fn covariance(points: &[Point3], centroid: &Point3) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov / points.len() as f64
}

/// Orients the eigenvector columns: each axis gets a non-negative dot product with
/// the world axis of the same index (ties go toward +z), then the frame is made
/// right-handed by flipping whichever of the first two axes is least determined.
fn orient_axes(mut axes: Matrix3<f64>) -> Matrix3<f64> {
    for i in 0..3 {
        let mut col = axes.column(i).into_owned();
        let d = col[i];
        if d < -1e-12 || (d.abs() <= 1e-12 && col.z < 0.0) {
            col = -col;
        }
        axes.set_column(i, &col);
    }
    if axes.determinant() < 0.0 {
        let flip = if axes[(0, 0)].abs() <= axes[(1, 1)].abs() { 0 } else { 1 };
        let col = -axes.column(flip).into_owned();
        axes.set_column(flip, &col);
    }
    axes
}

fn frame_from_axes(points: &[Point3], centroid: Point3, axes: Matrix3<f64>, degenerate: bool) -> ObbFrame {
    let mut half = Vector3::zeros();
    for p in points {
        let local = axes.transpose() * (p - centroid);
        for i in 0..3 {
            half[i] = f64::max(half[i], local[i].abs());
        }
    }
    half.apply(|h| *h = h.max(1e-6));
    let rot = Rotation3::from_matrix_unchecked(axes);
    ObbFrame { pose: Pose6::from_rotation(centroid, &rot), half_extents: half, degenerate }
}

fn principal_axes(points: &[Point3]) -> Result<(Point3, Matrix3<f64>, usize), GeomError> {
    let centroid = PointCloud::new(points.to_vec()).centroid().ok_or(GeomError::EmptyCloud)?;
    let cov = covariance(points, &centroid);
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::zeros();
    for (k, &i) in order.iter().enumerate() {
        axes.set_column(k, &eig.eigenvectors.column(i));
    }
    let largest = eig.eigenvalues[order[0]];
    // Spread below 1e-10 m is rounding noise around repeated points.
    let floor = (1e-12 * cov.trace()).max(1e-20);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > floor && largest > 0.0).count();
    Ok((centroid, axes, rank))
}

/// PCA frame: centroid, eigenvectors sorted by descending eigenvalue, and
/// half-extents covering every point. Fails on rank-deficient clouds.
pub fn pca_pose(cloud: &PointCloud) -> Result<ObbFrame, GeomError> {
    let (centroid, axes, rank) = principal_axes(&cloud.points)?;
    if rank < 3 {
        return Err(GeomError::DegenerateCloud { rank });
    }
    Ok(frame_from_axes(&cloud.points, centroid, orient_axes(axes), false))
}

/// Like [`pca_pose`] but completes rank-deficient frames with arbitrary orthogonal
/// axes and sets [`ObbFrame::degenerate`].
pub fn pca_pose_lenient(cloud: &PointCloud) -> Result<ObbFrame, GeomError> {
    let (centroid, axes, rank) = principal_axes(&cloud.points)?;
    if rank == 3 {
        return Ok(frame_from_axes(&cloud.points, centroid, orient_axes(axes), false));
    }
    let x = if rank >= 1 { axes.column(0).into_owned() } else { Vector3::x() };
    let y = if rank >= 2 {
        axes.column(1).into_owned()
    } else {
        let helper = if x.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        x.cross(&helper).normalize()
    };
    let z = x.cross(&y).normalize();
    let completed = Matrix3::from_columns(&[x, y, z]);
    Ok(frame_from_axes(&cloud.points, centroid, orient_axes(completed), true))
}
