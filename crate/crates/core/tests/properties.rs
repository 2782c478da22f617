use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::Rng;

use recon_core::cem::{fit_gmm_vectors, percentile, trajectory_cost, EmOptions};
use recon_core::geom::{ObbFrame, TriMesh};
use recon_core::gpis::{extract_surface, kernel, GpisHyper, GpisModel};
use recon_core::rng::indexed;
use recon_core::scene::render;
use recon_core::sdf::{look_at, CameraModel};
use recon_core::{Point3, PointCloud};

fn cloud(seed: u64, n: usize, half: f64) -> Vec<Point3> {
    let mut rng = indexed(seed, 0);
    (0..n)
        .map(|_| Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}

fn hyper(sigma: f64, length: f64, noise: f64) -> GpisHyper {
    GpisHyper { signal_sigma: sigma, length_scale: length, noise, eta: 0.1 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factor_reproduces_kernel(seed in 0u64..1000, n in 1usize..40, sigma in 0.5f64..2.0, length in 0.01f64..0.06, noise in 0.001f64..0.2) {
        let h = hyper(sigma, length, noise);
        let pts = cloud(seed, n, 0.05);
        let model = GpisModel::fit(&PointCloud::new(pts.clone()), h).unwrap();
        let k = DMatrix::from_fn(n, n, |i, j| kernel(&pts[i], &pts[j], &h) + if i == j { noise + model.jitter() } else { 0.0 });
        let l = model.factor();
        let rel = (l * l.transpose() - &k).norm() / k.norm();
        prop_assert!(rel <= 1e-8, "{rel}");
        prop_assert_eq!(model.train_labels().len(), model.train_points().len());
    }

    #[test]
    fn posterior_variance_is_bounded(seed in 0u64..1000, n in 1usize..30, sigma in 0.5f64..2.0) {
        let h = hyper(sigma, 0.03, 0.1);
        let model = GpisModel::fit(&PointCloud::new(cloud(seed, n, 0.05)), h).unwrap();
        for q in cloud(seed + 1, 10, 0.08) {
            let (m, v) = model.posterior(&q);
            prop_assert!(m.is_finite());
            prop_assert!((0.0..=sigma * sigma + 1e-12).contains(&v));
        }
    }

    /// Chain rule: adding a query point with positive conditional variance
    /// never lowers the entropy, so the planning cost never rises.
    #[test]
    fn entropy_grows_with_the_query_set(seed in 0u64..1000, n in 1usize..30, d in 1usize..20) {
        let h = GpisHyper::default();
        let model = GpisModel::fit(&PointCloud::new(cloud(seed, n, 0.05)), h).unwrap();
        let query = cloud(seed + 7, d + 1, 0.07);
        let small = model.conditional_entropy(&query[..d]).unwrap();
        let big = model.conditional_entropy(&query).unwrap();
        prop_assert!(big >= small - 1e-8, "{small} -> {big}");
        prop_assert!(trajectory_cost(&model, &query, 400) <= trajectory_cost(&model, &query[..d], 400) + 1e-8);
    }

    #[test]
    fn extracted_points_lie_in_the_band(seed in 0u64..200) {
        let mut rng = indexed(seed, 1);
        let half = Vector3::new(rng.random_range(0.02..0.05), rng.random_range(0.02..0.05), rng.random_range(0.02..0.05));
        let mesh = TriMesh::cuboid(half);
        let (model, obb): (GpisModel, ObbFrame) = GpisModel::fit_object(&PointCloud::new(mesh.vertices.clone()), GpisHyper::default()).unwrap();
        let s = extract_surface(&model, &obb, 0.01).unwrap();
        for (p, mu) in s.cloud.points.iter().zip(&s.mean) {
            prop_assert!(mu.abs() <= 0.1);
            prop_assert!((model.mean(p) - mu).abs() <= 1e-12);
        }
    }

    #[test]
    fn gmm_weights_sum_to_one(seed in 0u64..1000, n in 4usize..60, dim in 1usize..6, k in 1usize..4) {
        let mut rng = indexed(seed, 2);
        let data: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))).collect();
        let fit = fit_gmm_vectors(&data, k.min(n), seed, &EmOptions::default()).unwrap();
        let total: f64 = fit.policy.components().iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        for c in fit.policy.components() {
            prop_assert!(c.covariance.clone().cholesky().is_some());
        }
        for w in fit.objective_history.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn percentile_is_a_member_and_monotone(costs in prop::collection::vec(-1e3f64..1e3, 1..80), p in 0.01f64..1.0) {
        let g = percentile(&costs, p);
        prop_assert!(costs.contains(&g));
        prop_assert!(g <= percentile(&costs, (p + 0.1).min(1.0)));
        let below = costs.iter().filter(|&&c| c <= g).count();
        prop_assert!(below as f64 >= (p * costs.len() as f64).ceil().min(costs.len() as f64));
    }

    #[test]
    fn rendered_points_lie_on_their_rays(seed in 0u64..500, noise in 0.0f64..0.003) {
        let mut rng = indexed(seed, 3);
        let eye = Point3::new(rng.random_range(0.4..0.8), rng.random_range(-0.3..0.3), rng.random_range(0.2..0.6));
        let camera = CameraModel::new(look_at(eye, Point3::origin()), rng.random_range(0.2..0.6), 0.05, 3.0, 41).unwrap();
        let mesh = TriMesh::icosphere(0.1, 2);
        let frame = render(&camera, Some(&mesh), None, noise, seed);
        prop_assert!(!frame.cloud.is_empty());
        for (p, &i) in frame.cloud.points.iter().zip(&frame.ray_index) {
            let d = camera.beam()[i];
            prop_assert!(d.cross(&p.coords).norm() <= 1e-9);
            prop_assert!(d.dot(&p.coords) > 0.0);
        }
    }

    #[test]
    fn beam_rays_stay_inside_the_cone(half_angle in 0.05f64..1.5, res in 0usize..60) {
        let built = CameraModel::new(look_at(Point3::new(1.0, 0.0, 0.5), Point3::origin()), half_angle, 0.1, 2.0, res);
        let Ok(camera) = built else {
            prop_assert!(res == 0 || res == 2, "resolution {res} rejected");
            return Ok(());
        };
        prop_assert!(!camera.beam().is_empty());
        for d in camera.beam() {
            prop_assert!((d.norm() - 1.0).abs() <= 1e-12);
            prop_assert!(d.z.clamp(-1.0, 1.0).acos() <= half_angle + 1e-12);
        }
    }
}
