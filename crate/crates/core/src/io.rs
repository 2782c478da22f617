//! ASCII PLY and OBJ reading/writing for point clouds and triangle meshes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geom::{GeomError, Point3, PointCloud, TriMesh};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: String, source: std::io::Error },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Mesh(#[from] GeomError),
    #[error("{0}: unsupported mesh extension (expected .ply or .obj)")]
    Extension(String),
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Fs { path: path.display().to_string(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| IoError::Fs { path: dir.display().to_string(), source })?;
    }
    fs::write(path, text).map_err(|source| IoError::Fs { path: path.display().to_string(), source })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.display().to_string(), source })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| IoError::Json { path: path.display().to_string(), source })?;
    text.push('\n');
    write_text(path, &text)
}

/// Renders a point cloud as ASCII PLY. Each entry of `scalars` adds one
/// per-vertex `double` property and must have one value per point.
pub fn ply_cloud_string(cloud: &PointCloud, scalars: &[(&str, &[f64])]) -> String {
    for (name, values) in scalars {
        assert_eq!(values.len(), cloud.len(), "scalar property {name} length");
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    for (name, _) in scalars {
        let _ = writeln!(s, "property double {name}");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        for (_, values) in scalars {
            let _ = write!(s, " {}", values[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_ply_cloud(path: &Path, cloud: &PointCloud, scalars: &[(&str, &[f64])]) -> Result<(), IoError> {
    write_text(path, &ply_cloud_string(cloud, scalars))
}

pub fn ply_mesh_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", mesh.faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for p in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    for [a, b, c] in &mesh.faces {
        let _ = writeln!(s, "3 {a} {b} {c}");
    }
    s
}

pub fn write_ply_mesh(path: &Path, mesh: &TriMesh) -> Result<(), IoError> {
    write_text(path, &ply_mesh_string(mesh))
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// Parsed ASCII PLY: vertex positions, optional triangulated faces and named
/// per-vertex scalar properties.
#[derive(Debug, Clone, Default)]
pub struct PlyData {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
    pub scalars: Vec<(String, Vec<f64>)>,
}

pub fn parse_ply(text: &str, origin: &str) -> Result<PlyData, IoError> {
    let err = |line: usize, msg: &str| IoError::Parse { path: origin.to_string(), line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(1, "missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (n, line) = lines.next().ok_or_else(|| err(0, "unterminated header"))?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(err(n + 1, "only ASCII PLY is supported"));
                }
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| err(n + 1, "element name"))?.to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(n + 1, "element count"))?;
                elements.push(PlyElement { name, count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| err(n + 1, "property before element"))?;
                let name = line.split_whitespace().last().unwrap_or_default().to_string();
                el.props.push(name);
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let mut data = PlyData::default();
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let xyz: Option<[usize; 3]> = if is_vertex {
            let find = |k: &str| el.props.iter().position(|p| p == k);
            match (find("x"), find("y"), find("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(err(0, "vertex element lacks x/y/z")),
            }
        } else {
            None
        };
        let scalar_cols: Vec<usize> = if is_vertex {
            (0..el.props.len()).filter(|i| !xyz.unwrap().contains(i)).collect()
        } else {
            Vec::new()
        };
        let mut scalar_vals: Vec<Vec<f64>> = vec![Vec::with_capacity(el.count); scalar_cols.len()];
        for _ in 0..el.count {
            let (n, line) = lines.next().ok_or_else(|| err(0, "truncated body"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err(n + 1, "non-numeric value"))?;
            if let Some([x, y, z]) = xyz {
                if vals.len() < el.props.len() {
                    return Err(err(n + 1, "too few vertex values"));
                }
                data.vertices.push(Point3::new(vals[x], vals[y], vals[z]));
                for (k, &c) in scalar_cols.iter().enumerate() {
                    scalar_vals[k].push(vals[c]);
                }
            } else if is_face {
                let count = *vals.first().ok_or_else(|| err(n + 1, "empty face"))? as usize;
                if count < 3 || vals.len() < count + 1 {
                    return Err(err(n + 1, "bad face index list"));
                }
                let idx: Vec<usize> = vals[1..=count].iter().map(|&v| v as usize).collect();
                for k in 1..count - 1 {
                    data.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
        }
        for (k, &c) in scalar_cols.iter().enumerate() {
            data.scalars.push((el.props[c].clone(), std::mem::take(&mut scalar_vals[k])));
        }
    }
    Ok(data)
}

pub fn read_ply_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let data = parse_ply(&read(path)?, &path.display().to_string())?;
    Ok(PointCloud::new(data.vertices))
}

pub fn parse_obj(text: &str, origin: &str) -> Result<(Vec<Point3>, Vec<[usize; 3]>), IoError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let v: Vec<f64> = tok.take(3).filter_map(|t| t.parse().ok()).collect();
                if v.len() != 3 {
                    return Err(IoError::Parse { path: origin.into(), line: n + 1, msg: "bad vertex".into() });
                }
                vertices.push(Point3::new(v[0], v[1], v[2]));
            }
            Some("f") => {
                // "f 1/2/3 4//5 6" -> 1-based vertex indices before the first slash.
                let idx: Vec<usize> = tok
                    .filter_map(|t| t.split('/').next().and_then(|s| s.parse::<i64>().ok()))
                    .map(|i| if i < 0 { (vertices.len() as i64 + i) as usize } else { (i - 1) as usize })
                    .collect();
                if idx.len() < 3 {
                    return Err(IoError::Parse { path: origin.into(), line: n + 1, msg: "bad face".into() });
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// Loads a triangle mesh from `.ply` or `.obj`.
pub fn read_mesh(path: &Path) -> Result<TriMesh, IoError> {
    let text = read(path)?;
    let origin = path.display().to_string();
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    let (vertices, faces) = match ext.as_deref() {
        Some("ply") => {
            let d = parse_ply(&text, &origin)?;
            (d.vertices, d.faces)
        }
        Some("obj") => parse_obj(&text, &origin)?,
        _ => return Err(IoError::Extension(origin)),
    };
    Ok(TriMesh::new(vertices, faces)?)
}
