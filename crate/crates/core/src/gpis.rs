//! Gaussian process implicit surfaces.
//!
//! The implicit function is modelled by a zero-mean GP with a squared-exponential
//! kernel. Surface observations carry label 0. [`GpisModel::fit_object`] adds the
//! signed evidence needed for an inside/outside decision: one interior anchor at
//! the PCA centroid (label -1) and one exterior anchor per principal direction at
//! 1.5x the half-extent (label +1).

use std::f64::consts::{E, PI};

use log::debug;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{pca_pose_lenient, GeomError, ObbFrame, Point3, PointCloud};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpisError {
    #[error("no training points")]
    NoTrainingData,
    #[error("kernel matrix not factorizable after jitter {jitter:e}")]
    SingularKernel { jitter: f64 },
    #[error("no grid point lies on the estimated surface")]
    EmptySurface,
    #[error("conditional entropy of an empty query set")]
    EmptyQuery,
    #[error("invalid hyperparameters: {0}")]
    BadHyper(&'static str),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpisHyper {
    /// Kernel amplitude sigma (the kernel peaks at sigma^2).
    pub signal_sigma: f64,
    /// Length scale in meters.
    pub length_scale: f64,
    /// Output noise variance added to the kernel diagonal.
    pub noise: f64,
    /// Surface confidence threshold on the posterior mean.
    pub eta: f64,
}

impl Default for GpisHyper {
    fn default() -> Self {
        Self { signal_sigma: 1.0, length_scale: 0.025, noise: 0.1, eta: 0.1 }
    }
}

impl GpisHyper {
    pub fn validate(&self) -> Result<(), GpisError> {
        if !(self.signal_sigma > 0.0) {
            return Err(GpisError::BadHyper("signal_sigma must be > 0"));
        }
        if !(self.length_scale > 0.0) {
            return Err(GpisError::BadHyper("length_scale must be > 0"));
        }
        if !(self.noise >= 0.0) {
            return Err(GpisError::BadHyper("noise must be >= 0"));
        }
        if !(self.eta > 0.0) {
            return Err(GpisError::BadHyper("eta must be > 0"));
        }
        Ok(())
    }

    fn variance(&self) -> f64 {
        self.signal_sigma * self.signal_sigma
    }
}

/// Squared-exponential kernel `sigma^2 exp(-|a-b|^2 / (2 L^2))`.
pub fn kernel(a: &Point3, b: &Point3, hyper: &GpisHyper) -> f64 {
    let d2 = (a - b).norm_squared();
    hyper.variance() * (-d2 / (2.0 * hyper.length_scale * hyper.length_scale)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceClass {
    Outside,
    Surface,
    Inside,
}

#[derive(Debug, Clone)]
pub struct GpisModel {
    train: Vec<Point3>,
    labels: DVector<f64>,
    hyper: GpisHyper,
    /// Lower-triangular factor of `K(S_t,S_t) + (noise + jitter) I`.
    factor: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    surface_count: usize,
}

pub(crate) const JITTER_START: f64 = 1e-10;
pub(crate) const JITTER_MAX: f64 = 1e-4;

/// Cholesky with the escalating jitter policy: no jitter first, then
/// `1e-10 * scale`, growing x10 up to `1e-4 * scale`.
pub(crate) fn cholesky_with_jitter(mut m: DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64), f64> {
    let n = m.nrows();
    let mut jitter = 0.0;
    loop {
        if let Some(ch) = m.clone().cholesky() {
            if jitter > 0.0 {
                debug!("cholesky succeeded with jitter {jitter:e} (n = {n})");
            }
            return Ok((ch.l(), jitter));
        }
        let next = if jitter == 0.0 { JITTER_START * scale } else { jitter * 10.0 };
        if next > JITTER_MAX * scale * (1.0 + 1e-9) {
            return Err(jitter);
        }
        for i in 0..n {
            m[(i, i)] += next - jitter;
        }
        jitter = next;
    }
}

impl GpisModel {
    /// Fits surface-only training data (every label 0).
    pub fn fit(train: &PointCloud, hyper: GpisHyper) -> Result<Self, GpisError> {
        let n = train.len();
        Self::fit_labeled(train.points.clone(), vec![0.0; n], hyper)
    }

    pub fn fit_labeled(points: Vec<Point3>, labels: Vec<f64>, hyper: GpisHyper) -> Result<Self, GpisError> {
        hyper.validate()?;
        assert_eq!(points.len(), labels.len(), "one label per training point");
        if points.is_empty() {
            return Err(GpisError::NoTrainingData);
        }
        let n = points.len();
        let mut k = DMatrix::from_fn(n, n, |i, j| kernel(&points[i], &points[j], &hyper));
        for i in 0..n {
            k[(i, i)] += hyper.noise;
        }
        let (factor, jitter) =
            cholesky_with_jitter(k, hyper.variance()).map_err(|jitter| GpisError::SingularKernel { jitter })?;
        let y = DVector::from_vec(labels);
        let z = factor.solve_lower_triangular(&y).expect("factor has non-zero diagonal");
        let alpha = factor.tr_solve_lower_triangular(&z).expect("factor has non-zero diagonal");
        let surface_count = y.iter().filter(|&&v| v == 0.0).count();
        Ok(Self { train: points, labels: y, hyper, factor, alpha, jitter, surface_count })
    }

    /// Fits on-surface points plus the interior/exterior anchors derived from
    /// their PCA frame. Returns the model and that frame.
    pub fn fit_object(surface: &PointCloud, hyper: GpisHyper) -> Result<(Self, ObbFrame), GpisError> {
        let obb = pca_pose_lenient(surface)?;
        let axes = obb.axes();
        let c = obb.centroid();
        let mut points = surface.points.clone();
        let mut labels = vec![0.0; points.len()];
        points.push(c);
        labels.push(-1.0);
        for i in 0..3 {
            let offset: Vector3<f64> = axes.column(i) * (1.5 * obb.half_extents[i]);
            points.push(c + offset);
            labels.push(1.0);
            points.push(c - offset);
            labels.push(1.0);
        }
        let model = Self::fit_labeled(points, labels, hyper)?;
        Ok((model, obb))
    }

    pub fn hyper(&self) -> &GpisHyper {
        &self.hyper
    }

    pub fn train_points(&self) -> &[Point3] {
        &self.train
    }

    pub fn train_labels(&self) -> &DVector<f64> {
        &self.labels
    }

    /// Number of training points labelled as on-surface.
    pub fn surface_count(&self) -> usize {
        self.surface_count
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn kstar(&self, q: &Point3) -> DVector<f64> {
        DVector::from_iterator(self.train.len(), self.train.iter().map(|x| kernel(x, q, &self.hyper)))
    }

    pub fn mean(&self, q: &Point3) -> f64 {
        let inv = 1.0 / (2.0 * self.hyper.length_scale * self.hyper.length_scale);
        let s2 = self.hyper.variance();
        self.train
            .iter()
            .zip(self.alpha.iter())
            .map(|(x, a)| a * s2 * (-(x - q).norm_squared() * inv).exp())
            .sum()
    }

    /// Posterior mean and (clamped, non-negative) variance of the latent function.
    pub fn posterior(&self, q: &Point3) -> (f64, f64) {
        let ks = self.kstar(q);
        let mean = ks.dot(&self.alpha);
        let v = self.factor.solve_lower_triangular(&ks).expect("factor has non-zero diagonal");
        let var = (self.hyper.variance() - v.norm_squared()).max(0.0);
        (mean, var)
    }

    pub fn classify(&self, q: &Point3) -> SurfaceClass {
        classify_mean(self.mean(q), self.hyper.eta)
    }

    /// Posterior covariance of noisy observations at `query` given the training set.
    pub fn conditional_covariance(&self, query: &[Point3]) -> DMatrix<f64> {
        let d = query.len();
        let n = self.train.len();
        let ktc = DMatrix::from_fn(n, d, |i, j| kernel(&self.train[i], &query[j], &self.hyper));
        let v = self.factor.solve_lower_triangular(&ktc).expect("factor has non-zero diagonal");
        let mut sigma = DMatrix::from_fn(d, d, |i, j| kernel(&query[i], &query[j], &self.hyper));
        sigma -= v.transpose() * v;
        for i in 0..d {
            sigma[(i, i)] += self.hyper.noise;
        }
        // Symmetrize rounding noise before factorizing.
        let st = sigma.transpose();
        (sigma + st) * 0.5
    }

    /// Differential entropy of the query set given the training set:
    /// `0.5 * ln((2 pi e)^d |Sigma|)` with `d = |query|`.
    pub fn conditional_entropy(&self, query: &[Point3]) -> Result<f64, GpisError> {
        if query.is_empty() {
            return Err(GpisError::EmptyQuery);
        }
        let d = query.len() as f64;
        let sigma = self.conditional_covariance(query);
        let (l, _) = cholesky_with_jitter(sigma, self.hyper.variance())
            .map_err(|jitter| GpisError::SingularKernel { jitter })?;
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(0.5 * (d * (2.0 * PI * E).ln() + logdet))
    }
}

pub fn classify_mean(mean: f64, eta: f64) -> SurfaceClass {
    if mean > eta {
        SurfaceClass::Outside
    } else if mean < -eta {
        SurfaceClass::Inside
    } else {
        SurfaceClass::Surface
    }
}

/// Sorted indices of a uniform random subset of size `max` (all indices when `n <= max`).
pub fn subsample_indices(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = rng::indexed(seed, n as u64);
    let mut idx = sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Estimated on-surface points with their posterior moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSet {
    pub cloud: PointCloud,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Grid spacing the points were extracted on.
    pub spacing: f64,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Samples the posterior mean on a regular grid aligned with `bounds` and padded
/// by three length scales, and keeps the points classified as surface
/// (`|mu| <= eta`) that touch an inside grid point (`mu < -eta`) in their
/// 26-neighbourhood. The neighbourhood test removes the far field, where a
/// zero-mean GP reverts to `mu = 0` without any surface being present.
pub fn extract_surface(model: &GpisModel, bounds: &ObbFrame, resolution: f64) -> Result<SurfaceSet, GpisError> {
    assert!(resolution > 0.0, "resolution must be positive");
    let eta = model.hyper.eta;
    let pad = 3.0 * model.hyper.length_scale;
    let axes = bounds.axes();
    let c = bounds.centroid();
    let mut counts = [0usize; 3];
    let mut start = [0.0; 3];
    for i in 0..3 {
        let extent = bounds.half_extents[i] + pad;
        let steps = (2.0 * extent / resolution).ceil() as usize;
        counts[i] = steps + 1;
        start[i] = -(steps as f64) * resolution / 2.0;
    }
    let [nx, ny, nz] = counts;
    let at = |i: usize, j: usize, k: usize| -> Point3 {
        let local = Vector3::new(
            start[0] + i as f64 * resolution,
            start[1] + j as f64 * resolution,
            start[2] + k as f64 * resolution,
        );
        c + axes * local
    };
    let idx = |i: usize, j: usize, k: usize| (i * ny + j) * nz + k;
    let mut mu = vec![0.0; nx * ny * nz];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                mu[idx(i, j, k)] = model.mean(&at(i, j, k));
            }
        }
    }
    let mut points = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if mu[idx(i, j, k)].abs() > eta {
                    continue;
                }
                let mut touches_inside = false;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            let (a, b, e) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if a < 0 || b < 0 || e < 0 || a >= nx as i64 || b >= ny as i64 || e >= nz as i64 {
                                continue;
                            }
                            if mu[idx(a as usize, b as usize, e as usize)] < -eta {
                                touches_inside = true;
                                break 'nb;
                            }
                        }
                    }
                }
                if touches_inside {
                    points.push(at(i, j, k));
                }
            }
        }
    }
    if points.is_empty() {
        return Err(GpisError::EmptySurface);
    }
    let (mean, variance): (Vec<f64>, Vec<f64>) = points.iter().map(|p| model.posterior(p)).unzip();
    debug!("extracted {} surface points from a {nx}x{ny}x{nz} grid", points.len());
    Ok(SurfaceSet { cloud: PointCloud::new(points), mean, variance, spacing: resolution })
}
