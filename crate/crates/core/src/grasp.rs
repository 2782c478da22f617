//! Grasp trajectory planning on the estimated surface with the three-way
//! free-angle sweep.

use nalgebra::{Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ik_dls, ArmModel, JointState, Trajectory};
use crate::geom::{pca_pose_lenient, wrap_angle, GeomError, Point3, PointCloud, Pose6};
use crate::nlopt::{solve, NlError, SolveOptions, TrajectoryFn, TrajectoryProblem, WaypointConstraint, WaypointSum};
use crate::sdf::{box_violation, collision_violation, psi_spheres, TableBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("none of the three free-angle solves produced a feasible grasp")]
    NoFeasibleGrasp { candidates: Vec<GraspCandidate> },
    #[error("start configuration outside the joint limits")]
    StartOutOfLimits,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Solver(#[from] NlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraspParams {
    /// Number of waypoints after the start configuration.
    pub horizon: usize,
    pub p_g: f64,
    /// Weight of the squared angle errors relative to squared meters in the final term.
    pub angle_weight: f64,
    /// Clearance margin in meters.
    pub epsilon: f64,
    /// Half-width of the band around each constrained target angle (radians).
    pub angle_band: f64,
    /// Maximum final jaw-midpoint position error for a usable grasp.
    pub position_tol: f64,
    /// Tolerance applied when re-validating constraints post hoc.
    pub violation_tol: f64,
    pub solver: SolveOptions,
}

impl Default for GraspParams {
    fn default() -> Self {
        Self {
            horizon: 10,
            p_g: 0.5,
            angle_weight: 1.0,
            epsilon: 0.01,
            angle_band: 0.01,
            position_tol: 0.015,
            violation_tol: 1e-4,
            solver: SolveOptions::default(),
        }
    }
}

/// Outcome of one free-angle solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    /// 1-based index of the angle left unconstrained.
    pub free_angle_index: usize,
    pub cost: f64,
    pub converged: bool,
    pub feasible: bool,
    pub max_violation: f64,
    pub final_position_error: f64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspPlan {
    pub trajectory: Trajectory,
    /// 1-based index of the unconstrained Euler angle.
    pub free_angle_index: usize,
    pub cost: f64,
    pub target_pose: Pose6,
    pub candidates: Vec<GraspCandidate>,
}

impl GraspPlan {
    pub fn grasp_configuration(&self) -> &JointState {
        self.trajectory.last()
    }
}

/// Linear interpolation from `x0` to `xf`: returns `x_1..x_H` with `x_H = xf`.
/// Angles move along the shortest arc.
pub fn grasp_waypoints(x0: &Pose6, xf: &Pose6, h: usize) -> Vec<Pose6> {
    assert!(h >= 2, "at least two waypoints");
    (1..=h)
        .map(|k| {
            if k == h {
                return *xf;
            }
            let s = k as f64 / h as f64;
            let position = x0.position + (xf.position - x0.position) * s;
            let mut orientation = [0.0; 3];
            for i in 0..3 {
                orientation[i] = x0.orientation[i] + wrap_angle(xf.orientation[i] - x0.orientation[i]) * s;
            }
            Pose6::new(position, orientation)
        })
        .collect()
}

/// Grasp orientation from the principal frame: the gripper approaches along the
/// minor axis from its positive side (flange z = -minor axis).
pub fn grasp_target(surface: &PointCloud) -> Result<Pose6, GeomError> {
    let obb = pca_pose_lenient(surface)?;
    let rot = obb.pose.rotation() * Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
    Ok(Pose6::from_rotation(obb.pose.position, &rot))
}

fn constrained(f: usize) -> impl Iterator<Item = usize> {
    (0..3).filter(move |&i| i + 1 != f)
}

fn final_term(arm: &ArmModel, q: &JointState, target: &Pose6, f: usize, angle_weight: f64) -> f64 {
    let m = arm.jaw_midpoint(q);
    let mut e = (m.position - target.position).norm_squared();
    for i in constrained(f) {
        e += angle_weight * wrap_angle(m.orientation[i] - target.orientation[i]).powi(2);
    }
    e
}

/// `p_g * |final error|^2 + sum_{k<H} |position tracking error|^2`; angle `f`
/// (1-based) is excluded everywhere. `waypoints` are `x_1..x_H`.
pub fn grasp_cost(arm: &ArmModel, traj: &Trajectory, waypoints: &[Pose6], target: &Pose6, p_g: f64, f: usize, angle_weight: f64) -> f64 {
    assert_eq!(waypoints.len() + 1, traj.len());
    let h = waypoints.len();
    let mut cost = p_g * final_term(arm, &traj.waypoints[h], target, f, angle_weight);
    for k in 1..h {
        cost += (arm.jaw_midpoint(&traj.waypoints[k]).position - waypoints[k - 1].position).norm_squared();
    }
    cost
}

/// Largest clearance, table and band violation over the trajectory (waypoints `1..`).
pub fn grasp_violation(arm: &ArmModel, traj: &Trajectory, obstacles: &[Point3], table: &TableBox, target: &Pose6, f: usize, params: &GraspParams) -> f64 {
    let mut v: f64 = 0.0;
    for q in &traj.waypoints[1..] {
        if !obstacles.is_empty() {
            v = v.max(collision_violation(arm, q, obstacles, params.epsilon));
        }
        v = v.max(box_violation(table, arm, q, params.epsilon));
        if !arm.within_limits(q) {
            v = v.max(1.0);
        }
    }
    let m = arm.jaw_midpoint(traj.last());
    for i in constrained(f) {
        v = v.max(wrap_angle(m.orientation[i] - target.orientation[i]).abs() - params.angle_band);
    }
    v.max(0.0)
}

#[allow(clippy::too_many_arguments)]
fn solve_free_angle(
    arm: &ArmModel,
    obstacles: &[Point3],
    table: &TableBox,
    q0: &JointState,
    target: &Pose6,
    waypoints: &[Pose6],
    f: usize,
    params: &GraspParams,
) -> Result<GraspCandidate, NlError> {
    let h = params.horizon;
    let angles: Vec<usize> = constrained(f).collect();
    let (q_goal, _) = ik_dls(arm, q0, target, &angles, 300);
    let init = Trajectory::linear(q0, &q_goal, h + 1);

    let wp: Vec<Point3> = waypoints.iter().map(|w| w.position).collect();
    let (p_g, aw) = (params.p_g, params.angle_weight);
    let objective = WaypointSum(move |k: usize, q: &JointState| {
        if k == h {
            p_g * final_term(arm, q, target, f, aw)
        } else {
            (arm.jaw_midpoint(q).position - wp[k - 1]).norm_squared()
        }
    });
    let mut constraints: Vec<Box<dyn TrajectoryFn + '_>> = Vec::new();
    let eps = params.epsilon;
    for k in 1..=h as isize {
        if !obstacles.is_empty() {
            constraints.push(Box::new(WaypointConstraint { index: k, f: move |q: &JointState| eps - psi_spheres(&arm.spheres(q), obstacles) }));
        }
        constraints.push(Box::new(WaypointConstraint {
            index: k,
            f: move |q: &JointState| table_clearance(table, arm, q, eps),
        }));
    }
    let band = params.angle_band;
    for &i in &angles {
        let t = target.orientation[i];
        constraints.push(Box::new(WaypointConstraint { index: -1, f: move |q: &JointState| wrap_angle(arm.jaw_midpoint(q).orientation[i] - t) - band }));
        constraints.push(Box::new(WaypointConstraint { index: -1, f: move |q: &JointState| -wrap_angle(arm.jaw_midpoint(q).orientation[i] - t) - band }));
    }
    let problem = TrajectoryProblem { horizon: h + 1, objective: Box::new(objective), constraints, lower: arm.joint_lower, upper: arm.joint_upper, start: *q0 };
    let report = solve(&problem, &init, &params.solver)?;
    let traj = report.trajectory;
    let cost = grasp_cost(arm, &traj, waypoints, target, params.p_g, f, params.angle_weight);
    let violation = grasp_violation(arm, &traj, obstacles, table, target, f, params);
    let final_position_error = (arm.jaw_midpoint(traj.last()).position - target.position).norm();
    let feasible = report.converged && violation <= params.violation_tol && final_position_error <= params.position_tol;
    Ok(GraspCandidate { free_angle_index: f, cost, converged: report.converged, feasible, max_violation: violation, final_position_error, trajectory: traj })
}

/// Smooth-ish table clearance: `max_s (eps - (sd(s) - r_s))`, feasible when `<= 0`.
pub(crate) fn table_clearance(table: &TableBox, arm: &ArmModel, q: &JointState, eps: f64) -> f64 {
    arm.spheres(q).iter().map(|s| eps - (table.signed_distance(&s.center) - s.radius)).fold(f64::NEG_INFINITY, f64::max)
}

/// Plans a grasp of the object whose estimated surface is `surface`, keeping
/// the non-gripper links `epsilon` away from `obstacles` and the table.
pub fn plan_grasp(
    arm: &ArmModel,
    surface: &PointCloud,
    obstacles: &PointCloud,
    table: &TableBox,
    q0: &JointState,
    params: &GraspParams,
) -> Result<GraspPlan, GraspError> {
    if !arm.within_limits(q0) {
        return Err(GraspError::StartOutOfLimits);
    }
    let target = grasp_target(surface)?;
    plan_grasp_to(arm, &target, obstacles, table, q0, params)
}

/// Grasp planning toward an explicit target pose.
pub fn plan_grasp_to(
    arm: &ArmModel,
    target: &Pose6,
    obstacles: &PointCloud,
    table: &TableBox,
    q0: &JointState,
    params: &GraspParams,
) -> Result<GraspPlan, GraspError> {
    let x0 = arm.jaw_midpoint(q0);
    let waypoints = grasp_waypoints(&x0, target, params.horizon);
    let candidates: Vec<GraspCandidate> = (1..=3usize)
        .into_par_iter()
        .map(|f| solve_free_angle(arm, &obstacles.points, table, q0, target, &waypoints, f, params))
        .collect::<Result<_, _>>()?;
    let best = candidates
        .iter()
        .filter(|c| c.feasible)
        .min_by(|a, b| a.cost.total_cmp(&b.cost).then(a.free_angle_index.cmp(&b.free_angle_index)));
    match best {
        Some(c) => Ok(GraspPlan {
            trajectory: c.trajectory.clone(),
            free_angle_index: c.free_angle_index,
            cost: c.cost,
            target_pose: *target,
            candidates: candidates.clone(),
        }),
        None => Err(GraspError::NoFeasibleGrasp { candidates }),
    }
}
