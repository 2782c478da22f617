//! Cross-entropy trajectory search over a Gaussian-mixture importance density,
//! scored by the conditional entropy of the surface points the camera would see.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Isometry3, UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ik_dls, ArmModel, JointState, Trajectory, DOF};
use crate::geom::{Point3, PointCloud, Pose6};
use crate::gpis::{cholesky_with_jitter, subsample_indices, GpisModel, SurfaceSet};
use crate::grasp::{grasp_waypoints, table_clearance};
use crate::nlopt::{solve, NlError, SolveOptions, SolveReport, TrajectoryFn, TrajectoryProblem, WaypointConstraint, WaypointSum};
use crate::rng;
use crate::sdf::{cone_violation, CameraModel, TableBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CemError {
    #[error("no initial trajectory converged")]
    AllInfeasible,
    #[error("no scored trajectory reaches the goal tolerance")]
    NoGoalReached,
    #[error("need at least {need} elite samples, got {have}")]
    TooFewElites { have: usize, need: usize },
    #[error("constrained sampling stalled after {attempts} consecutive rejections ({accepted} accepted)")]
    SamplingStalled { accepted: usize, attempts: usize },
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Solver(#[from] NlError),
}

// ---------------------------------------------------------------------------
// Gaussian mixture

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub weight: f64,
}

/// Mixture with cached Cholesky factors.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPolicy {
    components: Vec<GmmComponent>,
    factors: Vec<DMatrix<f64>>,
    log_dets: Vec<f64>,
}

impl GmmPolicy {
    /// Normalizes the weights and factors every covariance (jitter is added if needed).
    pub fn new(mut components: Vec<GmmComponent>) -> Result<Self, CemError> {
        if components.is_empty() {
            return Err(CemError::Empty);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= total;
        }
        let mut factors = Vec::with_capacity(components.len());
        let mut log_dets = Vec::with_capacity(components.len());
        for c in &components {
            let scale = c.covariance.diagonal().max().max(1e-12);
            let (l, _) = cholesky_with_jitter(c.covariance.clone(), scale).map_err(|_| CemError::Empty)?;
            log_dets.push(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>());
            factors.push(l);
        }
        Ok(Self { components, factors, log_dets })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn component_log_density(&self, k: usize, x: &DVector<f64>) -> f64 {
        let d = x.len() as f64;
        let diff = x - &self.components[k].mean;
        let z = self.factors[k].solve_lower_triangular(&diff).expect("factor is non-singular");
        -0.5 * (d * (2.0 * PI).ln() + self.log_dets[k] + z.norm_squared())
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = (0..self.components.len())
            .map(|k| self.components[k].weight.ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Picks a component in proportion to its weight.
    pub fn choose<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        self.components.len() - 1
    }

    /// `mu_k + L_k r` with `r` standard normal.
    pub fn draw<R: Rng>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let r = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.components[k].mean + &self.factors[k] * r
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// Diagonal regularizer added to every covariance.
    pub regularizer: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { regularizer: 1e-6, max_iterations: 200, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub policy: GmmPolicy,
    /// Penalized log-likelihood after every M-step.
    pub objective_history: Vec<f64>,
}

fn kmeans_pp<R: Rng>(data: &[DVector<f64>], k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let mut centres = vec![data[rng.random_range(0..data.len())].clone()];
    while centres.len() < k {
        let d2: Vec<f64> = data
            .iter()
            .map(|x| centres.iter().map(|c| (x - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = data.len() - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        centres.push(data[pick].clone());
    }
    centres
}

/// EM on vectors. The regularizer enters as a fixed penalty `-lambda/2 * tr(Sigma_k^-1)`
/// per component with `lambda = reg * n`, which makes the covariance update
/// `(scatter_k + lambda I) / n_k` exact for the penalized objective. A component
/// that owns all the data gets its scatter plus exactly `reg * I`.
pub fn fit_gmm_vectors(data: &[DVector<f64>], n_c: usize, seed: u64, opts: &EmOptions) -> Result<GmmFit, CemError> {
    if n_c == 0 || data.len() < n_c {
        return Err(CemError::TooFewElites { have: data.len(), need: n_c.max(1) });
    }
    let n = data.len();
    let d = data[0].len();
    let lambda = opts.regularizer * n as f64;
    let mut rng = rng::indexed(seed, 0x656d);
    let centres = kmeans_pp(data, n_c, &mut rng);

    // Hard assignment to the nearest seed, lowest index on ties.
    let mut resp = DMatrix::<f64>::zeros(n, n_c);
    for (i, x) in data.iter().enumerate() {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (k, c) in centres.iter().enumerate() {
            let dd = (x - c).norm_squared();
            if dd < bd {
                bd = dd;
                best = k;
            }
        }
        resp[(i, best)] = 1.0;
    }

    let mut previous: Option<Vec<GmmComponent>> = None;
    let mut history = Vec::new();
    let mut policy;
    loop {
        // M-step.
        let mut comps = Vec::with_capacity(n_c);
        for k in 0..n_c {
            let nk: f64 = resp.column(k).sum();
            if nk < 1e-10 {
                let mut c = match &previous {
                    Some(p) => p[k].clone(),
                    None => GmmComponent { mean: centres[k].clone(), covariance: DMatrix::identity(d, d) * opts.regularizer, weight: 0.0 },
                };
                c.weight = nk / n as f64;
                comps.push(c);
                continue;
            }
            let mut mean = DVector::zeros(d);
            for (i, x) in data.iter().enumerate() {
                mean.axpy(resp[(i, k)], x, 1.0);
            }
            mean /= nk;
            let mut scatter = DMatrix::identity(d, d) * lambda;
            for (i, x) in data.iter().enumerate() {
                let diff = x - &mean;
                scatter.ger(resp[(i, k)], &diff, &diff, 1.0);
            }
            comps.push(GmmComponent { mean, covariance: scatter / nk, weight: nk / n as f64 });
        }
        // Guard against a component whose weight underflowed to exactly zero.
        for c in &mut comps {
            c.weight = c.weight.max(1e-300);
        }
        policy = GmmPolicy::new(comps.clone())?;

        // E-step and objective at the new parameters.
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let terms: Vec<f64> = (0..n_c).map(|k| policy.components[k].weight.ln() + policy.component_log_density(k, x)).collect();
            let lse = log_sum_exp(&terms);
            ll += lse;
            for k in 0..n_c {
                resp[(i, k)] = (terms[k] - lse).exp();
            }
        }
        let mut penalty = 0.0;
        for l in &policy.factors {
            let inv = l.clone().try_inverse().expect("triangular factor is invertible");
            penalty += inv.norm_squared();
        }
        let objective = ll - 0.5 * lambda * penalty;
        let done = history.last().is_some_and(|&prev: &f64| objective - prev <= opts.tolerance * (1.0 + prev.abs()));
        history.push(objective);
        previous = Some(comps);
        if done || history.len() >= opts.max_iterations {
            break;
        }
    }
    Ok(GmmFit { policy, objective_history: history })
}

/// EM over flattened trajectories.
pub fn fit_gmm(elite: &[Trajectory], n_c: usize, seed: u64) -> Result<GmmPolicy, CemError> {
    let data: Vec<DVector<f64>> = elite.iter().map(|t| DVector::from_vec(t.flatten())).collect();
    Ok(fit_gmm_vectors(&data, n_c, seed, &EmOptions::default())?.policy)
}

/// Rejection sampling: `project` is applied to every draw before `feasible`
/// is tested. Fails after `max_attempts` consecutive rejections.
pub fn sample_constrained<R: Rng>(
    gmm: &GmmPolicy,
    n: usize,
    rng: &mut R,
    max_attempts: usize,
    project: impl Fn(DVector<f64>) -> DVector<f64>,
    feasible: impl Fn(&DVector<f64>) -> bool,
) -> Result<Vec<DVector<f64>>, CemError> {
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    while out.len() < n {
        let k = gmm.choose(rng);
        let z = project(gmm.draw(k, rng));
        if feasible(&z) {
            out.push(z);
            misses = 0;
        } else {
            misses += 1;
            if misses >= max_attempts {
                return Err(CemError::SamplingStalled { accepted: out.len(), attempts: misses });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generic CEM loop

pub trait CemProblem: Sync {
    fn cost(&self, x: &DVector<f64>) -> f64;
    fn feasible(&self, _x: &DVector<f64>) -> bool {
        true
    }
    fn project(&self, x: DVector<f64>) -> DVector<f64> {
        x
    }
    /// Whether `x` may be returned as the answer.
    fn admissible(&self, _x: &DVector<f64>) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemOptions {
    pub samples: usize,
    pub components: usize,
    /// Quantile used for the elite threshold (0.1 = 10th percentile).
    pub percentile: f64,
    /// Relative best-cost change that counts as stalled.
    pub eps_c: f64,
    /// Elite threshold: stop once every elite cost is at most this.
    pub delta: Option<f64>,
    pub max_iterations: usize,
    /// Fraction of the population used when no sample meets the threshold.
    pub fallback_fraction: f64,
    /// Consecutive rejections allowed per requested sample.
    pub attempts_per_sample: usize,
}

impl Default for CemOptions {
    fn default() -> Self {
        Self {
            samples: 50,
            components: 2,
            percentile: 0.1,
            eps_c: 1e-3,
            delta: None,
            max_iterations: 10,
            fallback_fraction: 0.1,
            attempts_per_sample: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceReason {
    BestCostStalled,
    EliteThresholdMet,
    IterationCap,
    SamplingStalled,
}

/// One row of the planner log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemIteration {
    pub iteration: usize,
    /// Threshold used to select this iteration's elite (`null` for infinity).
    pub gamma: Option<f64>,
    pub elite_size: usize,
    pub elite_worst: f64,
    pub best_cost: Option<f64>,
    pub em_iterations: usize,
}

/// Live loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct CemState {
    pub iteration: usize,
    pub gamma: f64,
    pub elite: Vec<usize>,
    pub best: Option<DVector<f64>>,
    pub best_cost: f64,
    pub converged: bool,
    pub reason: Option<ConvergenceReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemLog {
    pub initial_best_cost: Option<f64>,
    pub iterations: Vec<CemIteration>,
    pub reason: ConvergenceReason,
    pub best_cost: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CemOutcome {
    pub state: CemState,
    pub log: CemLog,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Nearest-rank percentile (`p` in (0, 1]).
pub fn percentile(costs: &[f64], p: f64) -> f64 {
    let mut s = costs.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

fn select_elite(costs: &[f64], gamma: f64, opts: &CemOptions) -> Vec<usize> {
    let mut elite: Vec<usize> = (0..costs.len()).filter(|&i| costs[i] <= gamma).collect();
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    if elite.is_empty() {
        let m = ((opts.fallback_fraction * costs.len() as f64).ceil() as usize).max(1);
        elite = order[..m.min(order.len())].to_vec();
    }
    if elite.len() < opts.components {
        for &i in &order {
            if elite.len() >= opts.components {
                break;
            }
            if !elite.contains(&i) {
                elite.push(i);
            }
        }
    }
    elite.sort_unstable();
    elite
}

fn score<P: CemProblem>(problem: &P, pop: &[DVector<f64>]) -> Vec<f64> {
    pop.par_iter().map(|x| problem.cost(x)).collect()
}

/// Runs the loop from an initial population. `seed` drives sampling and EM seeding.
pub fn run_cem<P: CemProblem>(problem: &P, initial: Vec<DVector<f64>>, opts: &CemOptions, seed: u64) -> Result<CemOutcome, CemError> {
    if initial.is_empty() {
        return Err(CemError::Empty);
    }
    let mut sampler = ChaCha8Rng::seed_from_u64(seed);
    let mut pop: Vec<DVector<f64>> = initial.into_iter().map(|x| problem.project(x)).collect();
    let mut costs = score(problem, &pop);
    let mut state = CemState {
        iteration: 0,
        gamma: f64::INFINITY,
        elite: Vec::new(),
        best: None,
        best_cost: f64::INFINITY,
        converged: false,
        reason: None,
    };
    let update_best = |state: &mut CemState, pop: &[DVector<f64>], costs: &[f64]| {
        for (x, &c) in pop.iter().zip(costs) {
            if c < state.best_cost && problem.admissible(x) {
                state.best_cost = c;
                state.best = Some(x.clone());
            }
        }
    };
    update_best(&mut state, &pop, &costs);
    let initial_best_cost = finite(state.best_cost);
    let mut rows = Vec::new();
    let n_samples = opts.samples.max(1);

    for j in 0..opts.max_iterations {
        state.iteration = j;
        state.elite = select_elite(&costs, state.gamma, opts);
        let elite_worst = state.elite.iter().map(|&i| costs[i]).fold(f64::NEG_INFINITY, f64::max);
        let data: Vec<DVector<f64>> = state.elite.iter().map(|&i| pop[i].clone()).collect();
        let fit = fit_gmm_vectors(&data, opts.components, sampler.random(), &EmOptions::default())?;
        let mut row = CemIteration {
            iteration: j,
            gamma: finite(state.gamma),
            elite_size: state.elite.len(),
            elite_worst,
            best_cost: finite(state.best_cost),
            em_iterations: fit.objective_history.len(),
        };
        let drawn = sample_constrained(
            &fit.policy,
            n_samples,
            &mut sampler,
            opts.attempts_per_sample * n_samples,
            |x| problem.project(x),
            |x| problem.feasible(x),
        );
        let Ok(next) = drawn else {
            rows.push(row);
            state.reason = Some(ConvergenceReason::SamplingStalled);
            break;
        };
        pop = next;
        costs = score(problem, &pop);
        let previous_best = state.best_cost;
        update_best(&mut state, &pop, &costs);
        state.gamma = percentile(&costs, opts.percentile).min(state.gamma);
        row.best_cost = finite(state.best_cost);
        rows.push(row);

        if opts.delta.is_some_and(|d| elite_worst <= d) {
            state.reason = Some(ConvergenceReason::EliteThresholdMet);
            break;
        }
        // The first round refits the unselected initial population, so a flat
        // best cost there says nothing about convergence.
        if j > 0 && previous_best.is_finite() && (previous_best - state.best_cost).abs() <= opts.eps_c * previous_best.abs() {
            state.reason = Some(ConvergenceReason::BestCostStalled);
            break;
        }
    }
    let reason = state.reason.unwrap_or(ConvergenceReason::IterationCap);
    state.reason = Some(reason);
    state.converged = reason != ConvergenceReason::SamplingStalled;
    let log = CemLog { initial_best_cost, iterations: rows, reason, best_cost: finite(state.best_cost) };
    Ok(CemOutcome { state, log })
}

// ---------------------------------------------------------------------------
// Visibility and cost

/// Sorted indices into `surface` of the points seen by at least one ray at some waypoint.
/// A ray sees the nearest point in front of the camera (smallest ray parameter,
/// then lowest index) whose perpendicular distance to the ray is at most
/// `beam_factor * surface.spacing`, provided its posterior mean is `<= eta`.
pub fn raycast_indices(
    surface: &SurfaceSet,
    gpis: &GpisModel,
    camera: &CameraModel,
    traj: &Trajectory,
    arm: &ArmModel,
    grasp_tf: &Isometry3<f64>,
    beam_factor: f64,
) -> Vec<usize> {
    let eta = gpis.hyper().eta;
    let r = beam_factor * surface.spacing;
    let r2 = r * r;
    let beam = camera.beam();
    let side = camera.side() as isize;
    let step = camera.step();
    let t0 = -camera.tan_half();
    let slack = (1.0 + 2.0 * camera.tan_half().powi(2)).sqrt();
    let mut seen = BTreeSet::new();
    for q in &traj.waypoints {
        let object = camera.world_to_camera() * arm.wrist(q) * grasp_tf;
        let mut hit: Vec<Option<(f64, usize)>> = vec![None; beam.len()];
        let mut offer = |ray: usize, t: f64, idx: usize| {
            let slot = &mut hit[ray];
            if slot.is_none_or(|(bt, bi)| t < bt || (t == bt && idx < bi)) {
                *slot = Some((t, idx));
            }
        };
        for (idx, x) in surface.cloud.points.iter().enumerate() {
            let p = object * x;
            let test = |ray: usize| -> Option<f64> {
                let d = &beam[ray];
                let t = d.dot(&p.coords);
                (t > 0.0 && d.cross(&p.coords).norm_squared() <= r2).then_some(t)
            };
            if p.z <= 1e-9 {
                for ray in 0..beam.len() {
                    if let Some(t) = test(ray) {
                        offer(ray, t, idx);
                    }
                }
                continue;
            }
            // Any ray within r of p meets the plane z = 1 within this window of p/z.
            let (pu, pv) = (p.x / p.z, p.y / p.z);
            let w = r * slack / p.z * (1.0 + 1e-9) + 1e-12;
            let lo_c = (((pu - w - t0) / step).floor() as isize).max(0);
            let hi_c = (((pu + w - t0) / step).ceil() as isize).min(side - 1);
            let lo_r = (((pv - w - t0) / step).floor() as isize).max(0);
            let hi_r = (((pv + w - t0) / step).ceil() as isize).min(side - 1);
            for row in lo_r..=hi_r {
                for col in lo_c..=hi_c {
                    if let Some(ray) = camera.ray_at(row as usize, col as usize) {
                        if let Some(t) = test(ray) {
                            offer(ray, t, idx);
                        }
                    }
                }
            }
        }
        for (_, idx) in hit.into_iter().flatten() {
            if surface.mean[idx] <= eta {
                seen.insert(idx);
            }
        }
    }
    seen.into_iter().collect()
}

/// Visible subset `S_c` of the estimated surface along `traj`.
pub fn raycast_gpis(
    surface: &SurfaceSet,
    gpis: &GpisModel,
    camera: &CameraModel,
    traj: &Trajectory,
    arm: &ArmModel,
    grasp_tf: &Isometry3<f64>,
    beam_factor: f64,
) -> PointCloud {
    surface.cloud.select(&raycast_indices(surface, gpis, camera, traj, arm, grasp_tf, beam_factor))
}

/// Cost of an empty visible set; any non-empty set scores below it.
pub const WORST_COST: f64 = 1e6;

/// Negative conditional entropy of the visible set, capped at `max_points`
/// by a fixed-seed uniform subsample.
pub fn trajectory_cost(gpis: &GpisModel, s_c: &[Point3], max_points: usize) -> f64 {
    if s_c.is_empty() {
        return WORST_COST;
    }
    let idx = subsample_indices(s_c.len(), max_points, 0);
    let pts: Vec<Point3> = idx.iter().map(|&i| s_c[i]).collect();
    match gpis.conditional_entropy(&pts) {
        Ok(h) => -h,
        Err(_) => WORST_COST,
    }
}

// ---------------------------------------------------------------------------
// Transition problems

/// Geodesic angle between two orientations.
pub fn orientation_error(a: &Pose6, b: &Pose6) -> f64 {
    (a.rotation().inverse() * b.rotation()).angle()
}

/// Object kept in view: the estimated centroid, carried by the gripper, must stay in the cone.
#[derive(Debug, Clone, Copy)]
pub struct ConeConstraint<'a> {
    pub camera: &'a CameraModel,
    /// Object centroid in the initial (world) frame.
    pub centroid: Point3,
    pub grasp_tf: Isometry3<f64>,
}

impl ConeConstraint<'_> {
    pub fn carried(&self, arm: &ArmModel, q: &JointState) -> Point3 {
        arm.wrist(q) * self.grasp_tf * self.centroid
    }

    pub fn violation(&self, arm: &ArmModel, q: &JointState) -> f64 {
        cone_violation(self.camera, &self.carried(arm, q))
    }
}

/// Moves the jaw midpoint from the start configuration to `goal` over `horizon`
/// waypoints (start included), tracking the straight line in position.
#[derive(Debug, Clone, Copy)]
pub struct TransitionSpec<'a> {
    pub arm: &'a ArmModel,
    pub table: &'a TableBox,
    pub start: JointState,
    pub goal: Pose6,
    pub horizon: usize,
    pub p_t: f64,
    pub epsilon: f64,
    pub cone: Option<ConeConstraint<'a>>,
}

impl TransitionSpec<'_> {
    /// Transition cost of a full trajectory.
    pub fn cost(&self, traj: &Trajectory) -> f64 {
        let wps = self.waypoints();
        let h = self.horizon - 1;
        (1..=h).map(|k| self.term(k, &traj.waypoints[k], &wps)).sum()
    }

    fn waypoints(&self) -> Vec<Point3> {
        let x0 = self.arm.jaw_midpoint(&self.start);
        grasp_waypoints(&x0, &self.goal, self.horizon - 1).iter().map(|w| w.position).collect()
    }

    fn term(&self, k: usize, q: &JointState, wps: &[Point3]) -> f64 {
        let m = self.arm.jaw_midpoint(q);
        if k == self.horizon - 1 {
            self.p_t * ((m.position - self.goal.position).norm_squared() + orientation_error(&m, &self.goal).powi(2))
        } else {
            (m.position - wps[k - 1]).norm_squared()
        }
    }

    /// Largest violation of limits, table clearance and (if set) the cone, waypoints `1..`.
    pub fn violation(&self, traj: &Trajectory) -> f64 {
        trajectory_violation(self.arm, self.table, self.epsilon, self.cone.as_ref(), traj)
    }

    pub fn solve(&self, opts: &SolveOptions) -> Result<SolveReport, NlError> {
        assert!(self.horizon >= 3);
        let (q_goal, _) = ik_dls(self.arm, &self.start, &self.goal, &[0, 1, 2], 300);
        let init = Trajectory::linear(&self.start, &q_goal, self.horizon);
        let wps = self.waypoints();
        let objective = WaypointSum(move |k: usize, q: &JointState| self.term(k, q, &wps));
        let mut constraints: Vec<Box<dyn TrajectoryFn + '_>> = Vec::new();
        let (arm, table, eps) = (self.arm, self.table, self.epsilon);
        for k in 1..self.horizon as isize {
            constraints.push(Box::new(WaypointConstraint { index: k, f: move |q: &JointState| table_clearance(table, arm, q, eps) }));
            if let Some(cone) = self.cone {
                constraints.push(Box::new(WaypointConstraint { index: k, f: move |q: &JointState| cone.violation(arm, q) }));
            }
        }
        let problem = TrajectoryProblem {
            horizon: self.horizon,
            objective: Box::new(objective),
            constraints,
            lower: self.arm.joint_lower,
            upper: self.arm.joint_upper,
            start: self.start,
        };
        solve(&problem, &init, opts)
    }
}

/// Constraint check used for sampling and post-hoc validation (0 when feasible).
pub fn trajectory_violation(arm: &ArmModel, table: &TableBox, epsilon: f64, cone: Option<&ConeConstraint<'_>>, traj: &Trajectory) -> f64 {
    let mut v: f64 = 0.0;
    for q in &traj.waypoints[1..] {
        if !q.is_finite() {
            return f64::INFINITY;
        }
        for j in 0..DOF {
            v = v.max(arm.joint_lower[j] - q[j]).max(q[j] - arm.joint_upper[j]);
        }
        v = v.max(table_clearance(table, arm, q, epsilon));
        if let Some(c) = cone {
            v = v.max(c.violation(arm, q));
        }
    }
    v.max(0.0)
}

// ---------------------------------------------------------------------------
// Reconstruction-aware planner

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemParams {
    /// Initial trajectories (one per surrogate goal) and samples per iteration.
    pub n_o: usize,
    pub n_c: usize,
    /// Waypoints per trajectory, grasp configuration included.
    pub m: usize,
    pub p_t: f64,
    pub percentile: f64,
    pub eps_c: f64,
    pub delta: Option<f64>,
    pub max_iterations: usize,
    pub epsilon: f64,
    pub goal_position_tol: f64,
    pub goal_angle_tol: f64,
    /// Euler angle indices (0-based) held to `goal_angle_tol` at the endpoint.
    pub goal_angles: [bool; 3],
    pub max_entropy_points: usize,
    pub beam_factor: f64,
    /// Rays per side of the camera grid used for planning.
    pub planning_beam: usize,
    pub attempts_per_sample: usize,
    pub solver: SolveOptions,
}

impl Default for CemParams {
    fn default() -> Self {
        Self {
            n_o: 50,
            n_c: 2,
            m: 15,
            p_t: 0.5,
            percentile: 0.1,
            eps_c: 1e-3,
            delta: None,
            max_iterations: 10,
            epsilon: 0.01,
            goal_position_tol: 0.02,
            goal_angle_tol: 0.2,
            goal_angles: [false; 3],
            max_entropy_points: 400,
            beam_factor: 1.5,
            planning_beam: 61,
            attempts_per_sample: 100,
            solver: SolveOptions::default(),
        }
    }
}

impl CemParams {
    pub fn cem_options(&self) -> CemOptions {
        CemOptions {
            samples: self.n_o,
            components: self.n_c,
            percentile: self.percentile,
            eps_c: self.eps_c,
            delta: self.delta,
            max_iterations: self.max_iterations,
            fallback_fraction: 0.1,
            attempts_per_sample: self.attempts_per_sample,
        }
    }
}

/// Everything the planner needs once the object is in hand.
#[derive(Debug, Clone, Copy)]
pub struct ReconContext<'a> {
    pub arm: &'a ArmModel,
    pub table: &'a TableBox,
    pub camera: &'a CameraModel,
    pub gpis: &'a GpisModel,
    pub surface: &'a SurfaceSet,
    /// Object pose in the wrist frame at grasp time: `wrist(q_grasp)^-1` when the
    /// object's initial frame is the world frame.
    pub grasp_tf: Isometry3<f64>,
    pub centroid: Point3,
    pub q_grasp: JointState,
    pub goal: Pose6,
    pub params: &'a CemParams,
}

impl<'a> ReconContext<'a> {
    pub fn cone(&self) -> ConeConstraint<'a> {
        ConeConstraint { camera: self.camera, centroid: self.centroid, grasp_tf: self.grasp_tf }
    }

    pub fn transition(&self, goal: Pose6, with_cone: bool) -> TransitionSpec<'a> {
        TransitionSpec {
            arm: self.arm,
            table: self.table,
            start: self.q_grasp,
            goal,
            horizon: self.params.m,
            p_t: self.params.p_t,
            epsilon: self.params.epsilon,
            cone: with_cone.then(|| self.cone()),
        }
    }

    pub fn visible(&self, traj: &Trajectory) -> Vec<usize> {
        raycast_indices(self.surface, self.gpis, self.camera, traj, self.arm, &self.grasp_tf, self.params.beam_factor)
    }

    pub fn cost(&self, traj: &Trajectory) -> f64 {
        let idx = self.visible(traj);
        let pts: Vec<Point3> = idx.iter().map(|&i| self.surface.cloud.points[i]).collect();
        trajectory_cost(self.gpis, &pts, self.params.max_entropy_points)
    }

    pub fn violation(&self, traj: &Trajectory) -> f64 {
        trajectory_violation(self.arm, self.table, self.params.epsilon, Some(&self.cone()), traj)
    }

    /// Endpoint filter on the jaw midpoint.
    pub fn reaches_goal(&self, traj: &Trajectory) -> bool {
        goal_reached(self.arm, traj, &self.goal, self.params)
    }
}

pub fn goal_reached(arm: &ArmModel, traj: &Trajectory, goal: &Pose6, params: &CemParams) -> bool {
    let m = arm.jaw_midpoint(traj.last());
    if (m.position - goal.position).norm() > params.goal_position_tol {
        return false;
    }
    (0..3).all(|i| !params.goal_angles[i] || crate::geom::wrap_angle(m.orientation[i] - goal.orientation[i]).abs() <= params.goal_angle_tol)
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_orientation<R: Rng>(rng: &mut R) -> UnitQuaternion<f64> {
    loop {
        let v = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-9 {
            return UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(v));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitTrajectory {
    pub goal: Pose6,
    pub trajectory: Trajectory,
    pub converged: bool,
}

/// Surrogate goals at `x_d`'s position with random orientations, each reached by
/// a cone-constrained transition solve.
pub fn init_trajectories(ctx: &ReconContext<'_>, seed: u64) -> Result<Vec<InitTrajectory>, CemError> {
    let n_o = ctx.params.n_o;
    assert!(n_o >= 2, "need at least two initial trajectories");
    let mut rng = rng::indexed(seed, 0);
    let goals: Vec<Pose6> = (0..n_o)
        .map(|_| {
            let rot = random_orientation(&mut rng).to_rotation_matrix();
            Pose6::from_rotation(ctx.goal.position, &rot)
        })
        .collect();
    let solved: Vec<Result<InitTrajectory, NlError>> = goals
        .par_iter()
        .map(|g| {
            let spec = ctx.transition(*g, true);
            let report = spec.solve(&ctx.params.solver)?;
            Ok(InitTrajectory { goal: *g, converged: report.converged, trajectory: report.trajectory })
        })
        .collect();
    let mut out = Vec::with_capacity(n_o);
    for r in solved {
        match r {
            Ok(t) => out.push(t),
            Err(e) => log::warn!("surrogate goal skipped: {e}"),
        }
    }
    if !out.iter().any(|t| t.converged) {
        return Err(CemError::AllInfeasible);
    }
    Ok(out)
}

struct TrajectorySearch<'c, 'a> {
    ctx: &'c ReconContext<'a>,
}

impl CemProblem for TrajectorySearch<'_, '_> {
    fn cost(&self, x: &DVector<f64>) -> f64 {
        self.ctx.cost(&Trajectory::unflatten(x.as_slice()))
    }

    fn feasible(&self, x: &DVector<f64>) -> bool {
        self.ctx.violation(&Trajectory::unflatten(x.as_slice())) == 0.0
    }

    fn project(&self, mut x: DVector<f64>) -> DVector<f64> {
        for j in 0..DOF {
            x[j] = self.ctx.q_grasp[j];
        }
        x
    }

    fn admissible(&self, x: &DVector<f64>) -> bool {
        let t = Trajectory::unflatten(x.as_slice());
        self.ctx.violation(&t) <= self.ctx.params.solver.feasibility_tol && self.ctx.reaches_goal(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconPlan {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub visible_points: usize,
    pub initial_converged: usize,
    pub log: CemLog,
}

/// Initializes from surrogate goals, then refines with the cross-entropy loop.
/// `goal_seed` drives the surrogate orientations, `sample_seed` the sampler and EM.
pub fn plan_reconstruction_aware(ctx: &ReconContext<'_>, goal_seed: u64, sample_seed: u64) -> Result<ReconPlan, CemError> {
    let init = init_trajectories(ctx, goal_seed)?;
    let initial_converged = init.iter().filter(|t| t.converged).count();
    let initial: Vec<DVector<f64>> = init.iter().map(|t| DVector::from_vec(t.trajectory.resample(ctx.params.m).flatten())).collect();
    let search = TrajectorySearch { ctx };
    let outcome = run_cem(&search, initial, &ctx.params.cem_options(), sample_seed)?;
    let Some(best) = outcome.state.best else {
        return Err(CemError::NoGoalReached);
    };
    let trajectory = Trajectory::unflatten(best.as_slice());
    let visible_points = ctx.visible(&trajectory).len();
    Ok(ReconPlan { trajectory, cost: outcome.state.best_cost, visible_points, initial_converged, log: outcome.log })
}

/// Object pose in the wrist frame for an object whose initial frame is the world.
pub fn grasp_transform(arm: &ArmModel, q_grasp: &JointState) -> Isometry3<f64> {
    arm.wrist(q_grasp).inverse()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::TriMesh;
    use crate::gpis::{extract_surface, GpisHyper};
    use crate::sdf::look_at;
    use approx::assert_abs_diff_eq;

    fn gauss(rng: &mut ChaCha8Rng, mean: &[f64], sd: f64) -> DVector<f64> {
        DVector::from_iterator(mean.len(), mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)))
    }

    #[test]
    fn em_recovers_two_separated_gaussians() {
        let mut rng = rng::indexed(1, 0);
        let a = [0.0, 0.0, 0.0, 0.0];
        let b = [3.0, -2.0, 1.0, 4.0];
        let mut data = Vec::new();
        for i in 0..400 {
            data.push(gauss(&mut rng, if i % 2 == 0 { &a } else { &b }, 0.1));
        }
        let fit = fit_gmm_vectors(&data, 2, 7, &EmOptions::default()).unwrap();
        for w in fit.objective_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let comps = fit.policy.components();
        let (ca, cb) = if comps[0].mean[0] < 1.5 { (&comps[0], &comps[1]) } else { (&comps[1], &comps[0]) };
        assert!((&ca.mean - DVector::from_row_slice(&a)).norm() < 0.05);
        assert!((&cb.mean - DVector::from_row_slice(&b)).norm() < 0.05);
        assert!((ca.weight - 0.5).abs() < 0.1 && (cb.weight - 0.5).abs() < 0.1);
        assert_abs_diff_eq!(ca.weight + cb.weight, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn single_component_is_sample_moments() {
        let mut rng = rng::indexed(2, 0);
        let data: Vec<DVector<f64>> = (0..30).map(|_| gauss(&mut rng, &[1.0, 2.0, 3.0], 0.5)).collect();
        let fit = fit_gmm_vectors(&data, 1, 0, &EmOptions::default()).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().fold(DVector::zeros(3), |acc, x| acc + x) / n;
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for x in &data {
            cov += (x - &mean) * (x - &mean).transpose();
        }
        cov /= n;
        cov += DMatrix::identity(3, 3) * 1e-6;
        let c = &fit.policy.components()[0];
        assert_abs_diff_eq!((&c.mean - mean).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((&c.covariance - cov).norm(), 0.0, epsilon = 1e-12);
        assert_eq!(c.weight, 1.0);
    }

    #[test]
    fn identical_elites_give_regularizer() {
        let t = Trajectory::linear(&JointState([0.1; DOF]), &JointState([0.2; DOF]), 3);
        let elite = vec![t.clone(); 6];
        let g = fit_gmm(&elite, 2, 3).unwrap();
        let main = g.components().iter().max_by(|a, b| a.weight.total_cmp(&b.weight)).unwrap();
        let d = 3 * DOF;
        assert_abs_diff_eq!((&main.covariance - DMatrix::identity(d, d) * 1e-6).norm(), 0.0, epsilon = 1e-15);
        assert_eq!(fit_gmm(&elite[..1], 2, 3).unwrap_err(), CemError::TooFewElites { have: 1, need: 2 });
    }

    fn two_component() -> GmmPolicy {
        GmmPolicy::new(vec![
            GmmComponent { mean: DVector::from_row_slice(&[0.0, 0.0]), covariance: DMatrix::identity(2, 2), weight: 0.3 },
            GmmComponent { mean: DVector::from_row_slice(&[10.0, 0.0]), covariance: DMatrix::identity(2, 2), weight: 0.7 },
        ])
        .unwrap()
    }

    #[test]
    fn component_usage_follows_weights() {
        let g = two_component();
        let mut rng = rng::indexed(5, 0);
        let n = 10_000;
        let xs = sample_constrained(&g, n, &mut rng, 100 * n, |x| x, |_| true).unwrap();
        assert_eq!(xs.len(), n);
        let from_second = xs.iter().filter(|x| x[0] > 5.0).count() as f64;
        let sd = (n as f64 * 0.7 * 0.3).sqrt();
        assert!((from_second - 0.7 * n as f64).abs() <= 3.0 * sd, "{from_second}");

        let mut r1 = rng::indexed(6, 0);
        let mut r2 = rng::indexed(6, 0);
        assert_eq!(sample_constrained(&g, 20, &mut r1, 2000, |x| x, |_| true).unwrap(), sample_constrained(&g, 20, &mut r2, 2000, |x| x, |_| true).unwrap());
        let stalled = sample_constrained(&g, 5, &mut r1, 500, |x| x, |x| x[1] > 100.0);
        assert_eq!(stalled, Err(CemError::SamplingStalled { accepted: 0, attempts: 500 }));
    }

    #[test]
    fn percentile_and_elites() {
        let c: Vec<f64> = (1..=50).map(|v| v as f64).collect();
        assert_eq!(percentile(&c, 0.1), 5.0);
        assert_eq!(percentile(&c, 1.0), 50.0);
        let opts = CemOptions::default();
        assert_eq!(select_elite(&c, f64::INFINITY, &opts).len(), 50);
        assert_eq!(select_elite(&c, 0.5, &opts), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_elite(&[3.0, 1.0, 2.0], 0.0, &opts), vec![1, 2]);
    }

    struct Quadratic {
        target: DVector<f64>,
    }

    impl CemProblem for Quadratic {
        fn cost(&self, x: &DVector<f64>) -> f64 {
            (x - &self.target).norm_squared()
        }
    }

    #[test]
    fn cem_descends_a_quadratic() {
        let mut rng = rng::indexed(9, 0);
        let target = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let initial: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0))).collect();
        let opts = CemOptions { samples: 200, components: 1, ..Default::default() };
        let out = run_cem(&Quadratic { target }, initial, &opts, 4).unwrap();
        assert!(out.state.best_cost < 1e-2, "{}", out.state.best_cost);
        let gammas: Vec<f64> = out.log.iterations.iter().map(|r| r.gamma.unwrap_or(f64::INFINITY)).collect();
        assert!(gammas.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.log.iterations[0].gamma.is_none());
        assert_eq!(out.log.iterations[0].elite_size, 200);
    }

    fn sphere_scene() -> (GpisModel, SurfaceSet) {
        sphere_scene_at(0.005)
    }

    fn sphere_scene_at(resolution: f64) -> (GpisModel, SurfaceSet) {
        let mesh = TriMesh::icosphere(0.05, 2);
        let cloud = PointCloud::new(mesh.vertices.clone());
        let (model, obb) = GpisModel::fit_object(&cloud, GpisHyper::default()).unwrap();
        let surface = extract_surface(&model, &obb, resolution).unwrap();
        (model, surface)
    }

    /// Exhaustive nearest-hit over every (ray, point) pair.
    fn oracle(surface: &SurfaceSet, gpis: &GpisModel, cam: &CameraModel, object: &[Isometry3<f64>], r: f64) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        for pose in object {
            let pts: Vec<Point3> = surface.cloud.points.iter().map(|x| cam.world_to_camera() * pose * x).collect();
            for d in cam.beam() {
                let mut best: Option<(f64, usize)> = None;
                for (i, p) in pts.iter().enumerate() {
                    let t = d.dot(&p.coords);
                    if t > 0.0 && d.cross(&p.coords).norm_squared() <= r * r && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
                if let Some((_, i)) = best {
                    if surface.mean[i] <= gpis.hyper().eta {
                        seen.insert(i);
                    }
                }
            }
        }
        seen.into_iter().collect()
    }

    #[test]
    fn raycast_sees_front_hemisphere_only() {
        let (gpis, surface) = sphere_scene_at(0.0025);
        let arm = ArmModel::default_arm();
        let q = JointState([0.2, 0.4, -0.1, -1.0, 0.3, 0.8, 0.1]);
        let tf = grasp_transform(&arm, &q);
        let cam = CameraModel::new(look_at(Point3::new(0.0, 0.0, 0.6), Point3::origin()), 0.4, 0.1, 2.0, 81).unwrap();
        let traj = Trajectory::new(vec![q]);
        let idx = raycast_indices(&surface, &gpis, &cam, &traj, &arm, &tf, 1.5);
        assert!(!idx.is_empty());
        assert_eq!(idx, oracle(&surface, &gpis, &cam, &[Isometry3::identity()], 1.5 * surface.spacing));
        for &i in &idx {
            // Outward normal of the estimated surface: the mean's gradient.
            let p = surface.cloud.points[i];
            let h = 1e-5;
            let n = nalgebra::Vector3::from_fn(|k, _| {
                let mut e = nalgebra::Vector3::zeros();
                e[k] = h;
                gpis.mean(&(p + e)) - gpis.mean(&(p - e))
            })
            .normalize();
            let to_cam = (cam.origin() - surface.cloud.points[i]).normalize();
            assert!(n.dot(&to_cam) >= 95f64.to_radians().cos(), "point {i} faces away");
        }

        let behind = CameraModel::new(look_at(Point3::new(0.0, 0.0, 0.6), Point3::new(0.0, 0.0, 1.6)), 0.4, 0.1, 2.0, 81).unwrap();
        assert!(raycast_indices(&surface, &gpis, &behind, &traj, &arm, &tf, 1.5).is_empty());
    }

    #[test]
    fn flip_adds_the_far_side() {
        let (gpis, surface) = sphere_scene();
        let arm = ArmModel::default_arm();
        let q0 = JointState([0.0, 0.5, 0.0, -1.2, 0.0, 0.9, 0.0]);
        let mut q1 = q0;
        q1[6] += PI;
        // Object centred between the jaws.
        let tf = Isometry3::translation(0.0, 0.0, arm.jaw_mid_offset().z);
        let centre = arm.jaw_midpoint(&q0).position;
        let axis = arm.wrist(&q0).rotation * nalgebra::Vector3::z();
        let eye = centre + axis.cross(&nalgebra::Vector3::y()).normalize() * 0.6;
        let cam = CameraModel::new(look_at(eye, centre), 0.4, 0.1, 2.0, 81).unwrap();
        let a = raycast_indices(&surface, &gpis, &cam, &Trajectory::new(vec![q0]), &arm, &tf, 1.5);
        let b = raycast_indices(&surface, &gpis, &cam, &Trajectory::new(vec![q1]), &arm, &tf, 1.5);
        let both = raycast_indices(&surface, &gpis, &cam, &Trajectory::new(vec![q0, q1]), &arm, &tf, 1.5);
        let union: BTreeSet<usize> = a.iter().chain(&b).copied().collect();
        assert_eq!(both, union.into_iter().collect::<Vec<_>>());
        assert!(both.len() > a.len() && both.len() > b.len(), "{} {} {}", a.len(), b.len(), both.len());
    }

    #[test]
    fn entropy_cost_prefers_unexplored_points() {
        let (gpis, surface) = sphere_scene();
        assert_eq!(trajectory_cost(&gpis, &[], 400), WORST_COST);
        let trained: Vec<Point3> = gpis.train_points()[..20].to_vec();
        let far: Vec<Point3> = (0..20).map(|i| Point3::new(1.0 + 0.2 * i as f64, 0.0, 0.0)).collect();
        assert!(trajectory_cost(&gpis, &far, 400) < trajectory_cost(&gpis, &trained, 400));
        let pts: Vec<Point3> = surface.cloud.points[..60].to_vec();
        let mut rev = pts.clone();
        rev.reverse();
        assert_abs_diff_eq!(trajectory_cost(&gpis, &pts, 400), trajectory_cost(&gpis, &rev, 400), epsilon = 1e-9);
        assert!(trajectory_cost(&gpis, &pts, 400) < WORST_COST);
    }

    #[test]
    fn transition_reaches_goal() {
        let arm = ArmModel::default_arm();
        let table = TableBox { center: Point3::new(0.7, 0.0, -0.025), half_extents: [0.4, 0.6, 0.025] };
        let goal = Pose6::new(Point3::new(0.55, 0.15, 0.22), [PI, 0.0, 0.0]);
        let (start, _) = ik_dls(&arm, &JointState([0.0, 0.6, 0.0, -1.4, 0.0, 1.1, 0.0]), &Pose6::new(Point3::new(0.55, 0.05, 0.035), [PI, 0.0, 0.0]), &[0, 1, 2], 300);
        let spec = TransitionSpec { arm: &arm, table: &table, start, goal, horizon: 15, p_t: 0.5, epsilon: 0.01, cone: None };
        let report = spec.solve(&SolveOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.trajectory.waypoints[0], start);
        assert!(goal_reached(&arm, &report.trajectory, &goal, &CemParams::default()));
        assert!(spec.violation(&report.trajectory) <= 1e-4);
        assert_abs_diff_eq!(spec.cost(&report.trajectory), report.objective_value, epsilon = 1e-9);
    }

    #[test]
    fn random_orientations_are_deterministic_and_spread() {
        let mut a = rng::indexed(1, 0);
        let mut b = rng::indexed(1, 0);
        let qa: Vec<_> = (0..200).map(|_| random_orientation(&mut a)).collect();
        let qb: Vec<_> = (0..200).map(|_| random_orientation(&mut b)).collect();
        assert_eq!(qa, qb);
        // Mean of z-axis images of uniform rotations is near zero.
        let m = qa.iter().fold(nalgebra::Vector3::zeros(), |acc, q| acc + q * nalgebra::Vector3::z()) / 200.0;
        assert!(m.norm() < 0.2, "{m}");
    }
}
