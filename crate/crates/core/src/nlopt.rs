//! Box-bounded, inequality-constrained local optimization over joint trajectories.
//!
//! Augmented Lagrangian outer loop around a projected L-BFGS inner solver. The
//! first waypoint is fixed to the start state; the decision vector is the
//! flattened remaining waypoints.

use log::trace;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{JointState, Trajectory, DOF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlError {
    #[error("constraint violation {violation:e} above tolerance after {iterations} outer iterations")]
    Infeasible { violation: f64, iterations: usize },
    #[error("invalid initial trajectory: {0}")]
    BadInit(String),
}

/// A scalar function of a trajectory. Gradients are with respect to every
/// waypoint entry (`len * DOF` values); entries of waypoint 0 are ignored.
pub trait TrajectoryFn: Sync {
    fn value(&self, traj: &Trajectory) -> f64;

    fn gradient(&self, traj: &Trajectory, step: f64) -> Vec<f64> {
        fd_gradient(|t| self.value(t), traj, step)
    }
}

/// Central finite differences over waypoints `1..`.
pub fn fd_gradient(f: impl Fn(&Trajectory) -> f64, traj: &Trajectory, step: f64) -> Vec<f64> {
    let mut g = vec![0.0; traj.len() * DOF];
    let mut t = traj.clone();
    for k in 1..traj.len() {
        for j in 0..DOF {
            let x = traj.waypoints[k][j];
            t.waypoints[k][j] = x + step;
            let fp = f(&t);
            t.waypoints[k][j] = x - step;
            let fm = f(&t);
            t.waypoints[k][j] = x;
            g[k * DOF + j] = (fp - fm) / (2.0 * step);
        }
    }
    g
}

fn fd_joint(f: &impl Fn(&JointState) -> f64, q: &JointState, step: f64) -> [f64; DOF] {
    let mut g = [0.0; DOF];
    let mut p = *q;
    for j in 0..DOF {
        p[j] = q[j] + step;
        let fp = f(&p);
        p[j] = q[j] - step;
        let fm = f(&p);
        p[j] = q[j];
        g[j] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Arbitrary closure; gradient by full central differences.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&Trajectory) -> f64 + Sync> TrajectoryFn for FnObjective<F> {
    fn value(&self, traj: &Trajectory) -> f64 {
        (self.0)(traj)
    }
}

/// `sum_k f(k, q_k)` over waypoints `1..`; the gradient differentiates each
/// term with respect to its own waypoint only.
pub struct WaypointSum<F>(pub F);

impl<F: Fn(usize, &JointState) -> f64 + Sync> TrajectoryFn for WaypointSum<F> {
    fn value(&self, traj: &Trajectory) -> f64 {
        traj.waypoints.iter().enumerate().skip(1).map(|(k, q)| (self.0)(k, q)).sum()
    }

    fn gradient(&self, traj: &Trajectory, step: f64) -> Vec<f64> {
        let mut g = vec![0.0; traj.len() * DOF];
        for (k, q) in traj.waypoints.iter().enumerate().skip(1) {
            let gk = fd_joint(&|p: &JointState| (self.0)(k, p), q, step);
            g[k * DOF..(k + 1) * DOF].copy_from_slice(&gk);
        }
        g
    }
}

/// Constraint `f(q_k) <= 0` on a single waypoint `k` (negative `k` counts from the end).
pub struct WaypointConstraint<F> {
    pub index: isize,
    pub f: F,
}

impl<F> WaypointConstraint<F> {
    fn resolve(&self, len: usize) -> usize {
        if self.index < 0 {
            (len as isize + self.index) as usize
        } else {
            self.index as usize
        }
    }
}

impl<F: Fn(&JointState) -> f64 + Sync> TrajectoryFn for WaypointConstraint<F> {
    fn value(&self, traj: &Trajectory) -> f64 {
        (self.f)(&traj.waypoints[self.resolve(traj.len())])
    }

    fn gradient(&self, traj: &Trajectory, step: f64) -> Vec<f64> {
        let k = self.resolve(traj.len());
        let mut g = vec![0.0; traj.len() * DOF];
        if k > 0 {
            let gk = fd_joint(&self.f, &traj.waypoints[k], step);
            g[k * DOF..(k + 1) * DOF].copy_from_slice(&gk);
        }
        g
    }
}

pub struct TrajectoryProblem<'a> {
    pub horizon: usize,
    pub objective: Box<dyn TrajectoryFn + 'a>,
    /// Feasible iff every value is `<= 0`.
    pub constraints: Vec<Box<dyn TrajectoryFn + 'a>>,
    pub lower: [f64; DOF],
    pub upper: [f64; DOF],
    pub start: JointState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub feasibility_tol: f64,
    pub fd_step: f64,
    /// Inner stopping tolerance on the projected-gradient infinity norm.
    pub inner_tol: f64,
    pub initial_penalty: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_outer: 50, max_inner: 100, feasibility_tol: 1e-4, fd_step: 1e-6, inner_tol: 1e-9, initial_penalty: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub trajectory: Trajectory,
    pub objective_value: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Merit `f + 1e4 * violation` of the incumbent after each outer iteration.
    pub merit_history: Vec<f64>,
}

impl SolveReport {
    pub fn check(&self) -> Result<&Self, NlError> {
        if self.converged {
            Ok(self)
        } else {
            Err(NlError::Infeasible { violation: self.max_violation, iterations: self.iterations })
        }
    }
}

const MERIT_WEIGHT: f64 = 1e4;
const LBFGS_MEMORY: usize = 8;

struct Ctx<'p, 'a> {
    problem: &'p TrajectoryProblem<'a>,
    opts: &'p SolveOptions,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Ctx<'_, '_> {
    fn traj(&self, x: &[f64]) -> Trajectory {
        let mut w = Vec::with_capacity(self.problem.horizon);
        w.push(self.problem.start);
        w.extend(x.chunks(DOF).map(JointState::from_slice));
        Trajectory::new(w)
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    fn constraint_values(&self, t: &Trajectory) -> Vec<f64> {
        self.problem.constraints.iter().map(|c| c.value(t)).collect()
    }

    fn lagrangian(&self, x: &[f64], lambda: &[f64], rho: f64) -> f64 {
        let t = self.traj(x);
        let mut v = self.problem.objective.value(&t);
        for (c, &l) in self.problem.constraints.iter().zip(lambda) {
            let s = (c.value(&t) + l / rho).max(0.0);
            v += 0.5 * rho * s * s - l * l / (2.0 * rho);
        }
        v
    }

    fn lagrangian_grad(&self, x: &[f64], lambda: &[f64], rho: f64) -> Vec<f64> {
        let t = self.traj(x);
        let step = self.opts.fd_step;
        let full = self.problem.objective.gradient(&t, step);
        let mut g: Vec<f64> = full[DOF..].to_vec();
        for (c, &l) in self.problem.constraints.iter().zip(lambda) {
            let w = (rho * c.value(&t) + l).max(0.0);
            if w > 0.0 {
                let gc = c.gradient(&t, step);
                for (gi, ci) in g.iter_mut().zip(&gc[DOF..]) {
                    *gi += w * ci;
                }
            }
        }
        g
    }

    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| ((xi - gi).clamp(self.lo[i], self.hi[i]) - xi).abs())
            .fold(0.0, f64::max)
    }

    /// Projected L-BFGS with Armijo backtracking along the projection arc.
    fn inner(&self, x: &mut Vec<f64>, lambda: &[f64], rho: f64) -> usize {
        let n = x.len();
        let mut fx = self.lagrangian(x, lambda, rho);
        let mut g = self.lagrangian_grad(x, lambda, rho);
        let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
        let mut it = 0;
        while it < self.opts.max_inner {
            it += 1;
            if self.projected_gradient_norm(x, &g) <= self.opts.inner_tol {
                break;
            }
            let free: Vec<bool> = (0..n)
                .map(|i| !((x[i] <= self.lo[i] && g[i] > 0.0) || (x[i] >= self.hi[i] && g[i] < 0.0)))
                .collect();
            let mut accepted = None;
            for attempt in 0..2 {
                let dir = if attempt == 0 && !mem.is_empty() {
                    two_loop(&g, &mem, &free)
                } else {
                    let scale = if mem.is_empty() { 1.0 / g.iter().map(|v| v.abs()).fold(1.0, f64::max) } else { 1.0 };
                    g.iter().zip(&free).map(|(gi, &f)| if f { -gi * scale } else { 0.0 }).collect()
                };
                let slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
                if !(slope < 0.0) {
                    continue;
                }
                let mut alpha = 1.0;
                for _ in 0..40 {
                    let mut cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
                    self.project(&mut cand);
                    let decrease: f64 = cand.iter().zip(x.iter()).zip(&g).map(|((c, xi), gi)| (c - xi) * gi).sum();
                    let fc = self.lagrangian(&cand, lambda, rho);
                    if fc <= fx + 1e-4 * decrease && decrease < 0.0 {
                        accepted = Some((cand, fc));
                        break;
                    }
                    alpha *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
                mem.clear();
            }
            let Some((cand, fc)) = accepted else { break };
            let gc = self.lagrangian_grad(&cand, lambda, rho);
            let s: Vec<f64> = cand.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            if sy > 1e-16 {
                if mem.len() == LBFGS_MEMORY {
                    mem.remove(0);
                }
                mem.push((s, y, 1.0 / sy));
            }
            let small = (fx - fc).abs() <= 1e-15 * fx.abs().max(1.0);
            *x = cand;
            fx = fc;
            g = gc;
            if small {
                break;
            }
        }
        it
    }
}

fn two_loop(g: &[f64], mem: &[(Vec<f64>, Vec<f64>, f64)], free: &[bool]) -> Vec<f64> {
    let mask = |v: &mut Vec<f64>| {
        for (x, &f) in v.iter_mut().zip(free) {
            if !f {
                *x = 0.0;
            }
        }
    };
    let mut q = g.to_vec();
    mask(&mut q);
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, r) in mem.iter().rev() {
        let a = r * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    let (s, y, _) = mem.last().expect("non-empty memory");
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let gamma = if yy > 0.0 { sy / yy } else { 1.0 };
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for ((s, y, r), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = r * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    mask(&mut q);
    q.iter().map(|v| -v).collect()
}

fn max_violation(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

/// Solves the problem from `init`. Always returns a report; `converged` tells
/// whether the incumbent satisfies every constraint within the tolerance.
pub fn solve(problem: &TrajectoryProblem<'_>, init: &Trajectory, opts: &SolveOptions) -> Result<SolveReport, NlError> {
    if init.len() != problem.horizon || problem.horizon < 2 {
        return Err(NlError::BadInit(format!("expected {} waypoints, got {}", problem.horizon, init.len())));
    }
    if init.waypoints[0] != problem.start {
        return Err(NlError::BadInit("first waypoint differs from the start state".into()));
    }
    if !init.waypoints.iter().all(|q| q.is_finite()) {
        return Err(NlError::BadInit("non-finite joint value".into()));
    }
    let m = problem.horizon - 1;
    let lo: Vec<f64> = (0..m).flat_map(|_| problem.lower).collect();
    let hi: Vec<f64> = (0..m).flat_map(|_| problem.upper).collect();
    let ctx = Ctx { problem, opts, lo, hi };
    let mut x: Vec<f64> = init.waypoints[1..].iter().flat_map(|q| q.0).collect();
    let before = x.clone();
    ctx.project(&mut x);
    // Interpolation can land an ulp outside a limit; only real violations are rejected.
    if x.iter().zip(&before).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(NlError::BadInit("initial trajectory violates the joint bounds".into()));
    }

    let evaluate = |x: &[f64]| {
        let t = ctx.traj(x);
        let f = problem.objective.value(&t);
        let v = max_violation(&ctx.constraint_values(&t));
        (t, f, v)
    };
    let (t0, f0, v0) = evaluate(&x);
    let mut best = (t0, f0, v0, f0 + MERIT_WEIGHT * v0);
    let mut lambda = vec![0.0; problem.constraints.len()];
    let mut rho = opts.initial_penalty;
    let mut prev_violation = f64::INFINITY;
    let mut history = Vec::new();
    let mut iterations = 0;
    for outer in 0..opts.max_outer {
        iterations = outer + 1;
        let x_prev = x.clone();
        let inner_its = ctx.inner(&mut x, &lambda, rho);
        let t = ctx.traj(&x);
        let g = ctx.constraint_values(&t);
        let f = problem.objective.value(&t);
        let v = max_violation(&g);
        let merit = f + MERIT_WEIGHT * v;
        if merit <= best.3 {
            best = (t, f, v, merit);
        }
        history.push(best.3);
        trace!("outer {outer}: f {f:.6e} violation {v:.3e} rho {rho:.1e} inner {inner_its}");
        let complementarity = g.iter().zip(&lambda).map(|(gi, li)| (li * gi).abs()).fold(0.0, f64::max);
        let step = x.iter().zip(&x_prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if v <= opts.feasibility_tol && (problem.constraints.is_empty() || (complementarity <= 1e-9 && step <= 1e-9)) {
            break;
        }
        for (l, gi) in lambda.iter_mut().zip(&g) {
            *l = (*l + rho * gi).max(0.0);
        }
        if v > 0.25 * prev_violation && v > opts.feasibility_tol * 1e-3 {
            rho = (rho * 10.0).min(1e9);
        }
        prev_violation = v;
    }
    let (trajectory, objective_value, violation, _) = best;
    Ok(SolveReport {
        trajectory,
        objective_value,
        max_violation: violation,
        iterations,
        converged: violation <= opts.feasibility_tol,
        merit_history: history,
    })
}
