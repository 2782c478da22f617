//! Active perception for object reconstruction: GPIS surface estimation,
//! grasp selection and CEM trajectory planning for in-hand viewpoint changes.

pub mod arm;
pub mod cem;
pub mod evalrec;
pub mod geom;
pub mod grasp;
pub mod gpis;
pub mod io;
pub mod nlopt;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod sdf;

pub use geom::{Point3, PointCloud, PointLabel, Pose6, TriMesh};
