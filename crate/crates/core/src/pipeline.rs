//! End-to-end runs: render, segment, fit, grasp, plan, fuse and evaluate, with
//! every intermediate written to an output directory.

use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::arm::{ik_dls, ArmModel, JointState, Trajectory};
use crate::cem::{grasp_transform, plan_reconstruction_aware, CemLog, CemParams, ReconContext};
use crate::evalrec::{execute_and_fuse, plan_direct, plan_heuristic180, PlannerId, ReconReport};
use crate::geom::{Point3, PointCloud, Pose6};
use crate::gpis::{extract_surface, GpisHyper, GpisModel, SurfaceSet};
use crate::grasp::{plan_grasp, GraspParams, GraspPlan};
use crate::io::{read_json, write_json, write_ply_cloud, write_ply_mesh, write_text};
use crate::rng::substream_seed;
use crate::scene::{cluster_object, render_depth, segment_table, training_set, Scene};
use crate::sdf::CameraModel;

/// Failure class of a run; each maps to its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Segmentation,
    Grasp,
    Planning,
    Evaluation,
    Io,
}

impl Stage {
    pub fn exit_code(&self) -> i32 {
        match self {
            Stage::Io => 1,
            Stage::Config => 2,
            Stage::Segmentation => 3,
            Stage::Grasp => 4,
            Stage::Planning => 5,
            Stage::Evaluation => 6,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Segmentation => "segmentation",
            Stage::Grasp => "grasp",
            Stage::Planning => "planning",
            Stage::Evaluation => "evaluation",
            Stage::Io => "io",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunError {
    pub stage: Stage,
    pub message: String,
}

impl RunError {
    fn new(stage: Stage, e: impl fmt::Display) -> Self {
        Self { stage, message: e.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for RunError {}

/// Sensing, perception and evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionParams {
    pub noise_sigma: f64,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub cluster_tolerance: f64,
    pub max_training_points: usize,
    pub surface_resolution: f64,
    pub fuse_voxel: f64,
    pub coverage_radius: f64,
    pub coverage_samples: usize,
    /// Noise of the depth frames captured while executing the trajectory.
    pub execution_noise_sigma: f64,
}

impl Default for PerceptionParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0005,
            ransac_threshold: 0.004,
            ransac_iterations: 200,
            cluster_tolerance: 0.01,
            max_training_points: 300,
            surface_resolution: 0.005,
            fuse_voxel: 0.002,
            coverage_radius: 0.005,
            coverage_samples: 5000,
            execution_noise_sigma: 0.0005,
        }
    }
}

/// Run description. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Scene JSON path, or `bundled:<sphere|box|prism>`.
    pub scene: String,
    /// Arm JSON path; the built-in arm when absent.
    #[serde(default)]
    pub arm: Option<PathBuf>,
    #[serde(default)]
    pub gpis: GpisHyper,
    #[serde(default = "default_planner")]
    pub planner: PlannerId,
    #[serde(default)]
    pub cem: CemParams,
    #[serde(default)]
    pub grasp: GraspParams,
    #[serde(default)]
    pub perception: PerceptionParams,
    /// Start configuration; found by IK above the table when absent.
    #[serde(default)]
    pub home: Option<JointState>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_planner() -> PlannerId {
    PlannerId::Gmm
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ScenarioConfig {
    pub fn bundled(name: &str) -> Self {
        Self {
            scene: format!("bundled:{name}"),
            arm: None,
            gpis: GpisHyper::default(),
            planner: PlannerId::Gmm,
            cem: CemParams::default(),
            grasp: GraspParams::default(),
            perception: PerceptionParams::default(),
            home: None,
            seed: 0,
            out_dir: default_out(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let mut cfg: ScenarioConfig = read_json(path).map_err(|e| RunError::new(Stage::Config, e))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.base_dir.as_os_str().is_empty() {
            cfg.base_dir = PathBuf::from(".");
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::new(Stage::Config, m));
        self.gpis.validate().map_err(|e| RunError::new(Stage::Config, e))?;
        let c = &self.cem;
        if c.n_o < 2 {
            return bad(format!("cem.n_o must be at least 2 (got {})", c.n_o));
        }
        if c.n_c == 0 || c.n_c > c.n_o {
            return bad(format!("cem.n_c must be in 1..=n_o (got {})", c.n_c));
        }
        if c.m < 3 {
            return bad(format!("cem.m must be at least 3 (got {})", c.m));
        }
        if !(c.percentile > 0.0 && c.percentile <= 1.0) {
            return bad(format!("cem.percentile must be in (0, 1] (got {})", c.percentile));
        }
        if c.eps_c < 0.0 || c.max_iterations == 0 || c.planning_beam < 2 || c.beam_factor <= 0.0 || c.max_entropy_points == 0 {
            return bad("cem parameters out of range".into());
        }
        if self.grasp.horizon < 2 || self.grasp.p_g < 0.0 || self.grasp.epsilon < 0.0 || self.grasp.angle_band <= 0.0 {
            return bad("grasp parameters out of range".into());
        }
        let p = &self.perception;
        if p.noise_sigma < 0.0
            || p.execution_noise_sigma < 0.0
            || p.ransac_threshold <= 0.0
            || p.ransac_iterations == 0
            || p.cluster_tolerance <= 0.0
            || p.max_training_points < 10
            || p.surface_resolution <= 0.0
            || p.fuse_voxel <= 0.0
            || p.coverage_radius <= 0.0
            || p.coverage_samples < 100
        {
            return bad("perception parameters out of range".into());
        }
        Ok(())
    }

    fn load_scene(&self) -> Result<Scene, RunError> {
        let scene = match self.scene.strip_prefix("bundled:") {
            Some(name) => Scene::bundled(name),
            None => Scene::load(&self.resolve(Path::new(&self.scene))),
        };
        scene.map_err(|e| RunError::new(Stage::Config, e))
    }

    fn load_arm(&self) -> Result<ArmModel, RunError> {
        match &self.arm {
            Some(p) => ArmModel::load(&self.resolve(p)).map_err(|e| RunError::new(Stage::Config, e)),
            None => Ok(ArmModel::default_arm()),
        }
    }
}

/// Jaws 0.3 m above the table pointing down, reached from a fixed seed.
pub fn default_home(arm: &ArmModel) -> JointState {
    let seed = JointState([0.0, 0.6, 0.0, -1.4, 0.0, 1.1, 0.0]);
    let target = Pose6::new(Point3::new(0.5, 0.0, 0.3), [std::f64::consts::PI, 0.0, 0.0]);
    ik_dls(arm, &arm.clamp(&seed), &target, &[0, 1, 2], 300).0
}

/// Everything up to and including the grasp; shared by all planners.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scene: Scene,
    pub arm: ArmModel,
    pub camera: CameraModel,
    pub planning_camera: CameraModel,
    pub segmented: PointCloud,
    pub gpis: GpisModel,
    pub surface: SurfaceSet,
    pub home: JointState,
    pub grasp: GraspPlan,
}

/// Loads and validates inputs. Nothing is written.
pub fn load_inputs(cfg: &ScenarioConfig) -> Result<(Scene, ArmModel), RunError> {
    cfg.validate()?;
    let scene = cfg.load_scene()?;
    let arm = cfg.load_arm()?;
    Ok((scene, arm))
}

struct Writer {
    dir: Option<PathBuf>,
    artifacts: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir).map_err(|e| RunError::new(Stage::Io, format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: Some(dir.to_path_buf()), artifacts: Vec::new() })
    }

    fn discard() -> Self {
        Self { dir: None, artifacts: Vec::new() }
    }

    fn record<E: fmt::Display>(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<(), E>) -> Result<(), RunError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        write(&dir.join(name)).map_err(|e| RunError::new(Stage::Io, e))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.as_ref().expect("writer has a directory").join(name)
    }
}

/// Perception and grasp planning without writing anything.
pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared, RunError> {
    let (scene, arm) = load_inputs(cfg)?;
    perceive(cfg, scene, arm, &mut Writer::discard())
}

fn perceive(cfg: &ScenarioConfig, scene: Scene, arm: ArmModel, out: &mut Writer) -> Result<Prepared, RunError> {
    let p = &cfg.perception;
    let seg = |e: &dyn fmt::Display| RunError::new(Stage::Segmentation, e);
    let camera = scene.camera_model(scene.camera.beam_resolution).map_err(|e| RunError::new(Stage::Config, e))?;
    let planning_camera = scene.camera_model(cfg.cem.planning_beam).map_err(|e| RunError::new(Stage::Config, e))?;

    let frame = render_depth(&scene, &camera, p.noise_sigma, substream_seed(cfg.seed, "render"));
    let (_, inliers) = segment_table(&frame, p.ransac_threshold, p.ransac_iterations, substream_seed(cfg.seed, "ransac")).map_err(|e| seg(&e))?;
    let segmented = cluster_object(&frame, &inliers, p.cluster_tolerance).map_err(|e| seg(&e))?;
    out.record("segmented.ply", |p| write_ply_cloud(p, &segmented, &[]))?;
    info!("segmented {} object points", segmented.len());

    let train = training_set(&segmented, p.max_training_points);
    let (gpis, obb) = GpisModel::fit_object(&train, cfg.gpis).map_err(|e| seg(&e))?;
    let surface = extract_surface(&gpis, &obb, p.surface_resolution).map_err(|e| seg(&e))?;
    out.record("surface.ply", |p| write_ply_cloud(p, &surface.cloud, &[("mu", &surface.mean), ("var", &surface.variance)]))?;
    info!("GPIS trained on {} points; {} estimated surface points", gpis.train_points().len(), surface.len());

    let home = cfg.home.unwrap_or_else(|| default_home(&arm));
    let grasp = match plan_grasp(&arm, &surface.cloud, &surface.cloud, &scene.table, &home, &cfg.grasp) {
        Ok(g) => g,
        Err(e) => return Err(RunError::new(Stage::Grasp, e)),
    };
    out.record("grasp.json", |p| write_json(p, &GraspRecord::new(&grasp)))?;
    info!("grasp with free angle {} and cost {:.3e}", grasp.free_angle_index, grasp.cost);
    Ok(Prepared { scene, arm, camera, planning_camera, segmented, gpis, surface, home, grasp })
}

#[derive(Debug, Clone, Serialize)]
struct GraspRecord<'a> {
    free_angle_index: usize,
    cost: f64,
    target_pose: Pose6,
    waypoints: &'a [JointState],
    candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, Serialize)]
struct CandidateRecord {
    free_angle_index: usize,
    cost: f64,
    converged: bool,
    feasible: bool,
    max_violation: f64,
    final_position_error: f64,
}

impl<'a> GraspRecord<'a> {
    fn new(g: &'a GraspPlan) -> Self {
        Self {
            free_angle_index: g.free_angle_index,
            cost: g.cost,
            target_pose: g.target_pose,
            waypoints: &g.trajectory.waypoints,
            candidates: g
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    free_angle_index: c.free_angle_index,
                    cost: c.cost,
                    converged: c.converged,
                    feasible: c.feasible,
                    max_violation: c.max_violation,
                    final_position_error: c.final_position_error,
                })
                .collect(),
        }
    }
}

/// Planner output plus its log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub planner: PlannerId,
    pub waypoints: Vec<JointState>,
    /// Visible estimated-surface points along the trajectory.
    pub visible_points: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerLog {
    pub planner: PlannerId,
    /// Present for the GMM planner only.
    pub cem: Option<CemLog>,
    pub initial_converged: Option<usize>,
}

impl Prepared {
    /// Object pose in the wrist frame after grasping.
    pub fn grasp_tf(&self) -> nalgebra::Isometry3<f64> {
        grasp_transform(&self.arm, self.grasp.grasp_configuration())
    }

    pub fn context<'a>(&'a self, params: &'a CemParams) -> ReconContext<'a> {
        ReconContext {
            arm: &self.arm,
            table: &self.scene.table,
            camera: &self.planning_camera,
            gpis: &self.gpis,
            surface: &self.surface,
            grasp_tf: self.grasp_tf(),
            centroid: self.surface.cloud.centroid().expect("surface is non-empty"),
            q_grasp: *self.grasp.grasp_configuration(),
            goal: self.scene.goal_pose,
            params,
        }
    }

    pub fn plan(&self, cfg: &ScenarioConfig, planner: PlannerId) -> Result<(Trajectory, PlannerLog), RunError> {
        let plan_err = |e: &dyn fmt::Display| RunError::new(Stage::Planning, e);
        let q = self.grasp.grasp_configuration();
        match planner {
            PlannerId::Gmm => {
                let ctx = self.context(&cfg.cem);
                let r = plan_reconstruction_aware(&ctx, substream_seed(cfg.seed, "cem-goals"), substream_seed(cfg.seed, "cem-sampling"))
                    .map_err(|e| plan_err(&e))?;
                let log = PlannerLog { planner, cem: Some(r.log), initial_converged: Some(r.initial_converged) };
                Ok((r.trajectory, log))
            }
            PlannerId::Direct => {
                let t = plan_direct(&self.arm, &self.scene.table, &self.scene.goal_pose, q, &cfg.cem).map_err(|e| plan_err(&e))?;
                Ok((t, PlannerLog { planner, cem: None, initial_converged: None }))
            }
            PlannerId::Heuristic180 => {
                let t = plan_heuristic180(&self.arm, &self.scene.table, &self.scene.goal_pose, q, &cfg.cem).map_err(|e| plan_err(&e))?;
                Ok((t, PlannerLog { planner, cem: None, initial_converged: None }))
            }
        }
    }

    /// Visible-set size and entropy cost of any trajectory under the planning model.
    pub fn score(&self, cfg: &ScenarioConfig, traj: &Trajectory) -> (usize, f64) {
        let ctx = self.context(&cfg.cem);
        (ctx.visible(traj).len(), ctx.cost(traj))
    }

    pub fn execute(&self, cfg: &ScenarioConfig, traj: &Trajectory) -> PointCloud {
        let p = &cfg.perception;
        execute_and_fuse(
            &self.scene,
            &self.camera,
            &self.arm,
            traj,
            &self.grasp_tf(),
            p.execution_noise_sigma,
            substream_seed(cfg.seed, "eval"),
            p.fuse_voxel,
        )
        .cloud
    }

    pub fn evaluate(&self, cfg: &ScenarioConfig, planner: PlannerId, fused: &PointCloud) -> Result<ReconReport, RunError> {
        let p = &cfg.perception;
        ReconReport::evaluate(planner, fused, &self.scene.world_mesh(), p.coverage_radius, p.coverage_samples, substream_seed(cfg.seed, "eval"))
            .map_err(|e| RunError::new(Stage::Evaluation, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: String,
    pub planner: PlannerId,
    pub seed: u64,
    pub status: String,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub artifacts: Vec<String>,
}

/// Result of a successful run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ReconReport,
    pub trajectory: Trajectory,
    pub out_dir: PathBuf,
}

fn finish(cfg: &ScenarioConfig, scene: &str, planner: PlannerId, out: &mut Writer, result: &Result<ReconReport, RunError>) -> Result<(), RunError> {
    let (status, failed_stage, error) = match result {
        Ok(_) => ("ok".to_string(), None, None),
        Err(e) => ("failed".to_string(), Some(e.stage), Some(e.message.clone())),
    };
    let mut artifacts = out.artifacts.clone();
    artifacts.push("manifest.json".into());
    let manifest = Manifest { scene: scene.to_string(), planner, seed: cfg.seed, status, failed_stage, error, artifacts };
    write_json(&out.path("manifest.json"), &manifest).map_err(|e| RunError::new(Stage::Io, e))
}

fn plan_execute_evaluate(cfg: &ScenarioConfig, prep: &Prepared, planner: PlannerId, out: &mut Writer) -> Result<(ReconReport, Trajectory), RunError> {
    let (traj, log) = prep.plan(cfg, planner)?;
    let (visible_points, cost) = prep.score(cfg, &traj);
    let record = PlanRecord { planner, waypoints: traj.waypoints.clone(), visible_points, cost };
    out.record("trajectory.json", |p| write_json(p, &record))?;
    out.record("cem_log.json", |p| write_json(p, &log))?;
    info!("{planner}: {} waypoints, {visible_points} visible surface points", traj.len());

    let fused = prep.execute(cfg, &traj);
    out.record("fused.ply", |p| write_ply_cloud(p, &fused, &[]))?;
    let report = prep.evaluate(cfg, planner, &fused)?;
    let csv = format!("{}\n{}\n", ReconReport::CSV_HEADER, report.csv_row());
    out.record("metrics.csv", |p| write_text(p, &csv))?;
    Ok((report, traj))
}

/// Full pipeline for `cfg.planner`, writing artifacts and a manifest into `cfg.out_dir`.
/// Config errors are reported before anything is written.
pub fn cmd_run(cfg: &ScenarioConfig) -> Result<RunOutcome, RunError> {
    let (scene, arm) = load_inputs(cfg)?;
    let dir = cfg.resolve(&cfg.out_dir);
    let mut out = Writer::new(&dir)?;
    let name = scene.name.clone();
    let result = perceive(cfg, scene, arm, &mut out).and_then(|prep| plan_execute_evaluate(cfg, &prep, cfg.planner, &mut out));
    let report = result.as_ref().map(|(r, _)| r.clone()).map_err(Clone::clone);
    finish(cfg, &name, cfg.planner, &mut out, &report)?;
    let (report, trajectory) = result?;
    Ok(RunOutcome { report, trajectory, out_dir: dir })
}

/// One row of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub object: String,
    pub planner: PlannerId,
    pub status: String,
    pub report: Option<ReconReport>,
    /// Visible estimated-surface points of the planned trajectory.
    pub visible_points: Option<usize>,
}

impl CompareRow {
    pub const CSV_HEADER: &'static str = "object,planner,status,hausdorff_mean,hausdorff_std,hausdorff_max,coverage,points,visible_points";

    pub fn csv_row(&self) -> String {
        let vis = self.visible_points.map(|v| v.to_string()).unwrap_or_default();
        match &self.report {
            Some(r) => format!(
                "{},{},{},{:.9},{:.9},{:.9},{:.6},{},{}",
                self.object, self.planner, self.status, r.hausdorff_mean, r.hausdorff_std, r.hausdorff_max, r.coverage_fraction, r.points, vis
            ),
            None => format!("{},{},{},,,,,,{}", self.object, self.planner, self.status, vis),
        }
    }
}

/// Runs every planner on the same perception and grasp (shared seed), one
/// subdirectory per planner, and writes `comparison.csv`. Per-planner failures
/// become rows with a failure status.
pub fn cmd_compare(cfg: &ScenarioConfig, planners: &[PlannerId]) -> Result<Vec<CompareRow>, RunError> {
    if planners.len() < 2 {
        return Err(RunError::new(Stage::Config, "compare needs at least two planners"));
    }
    let (scene, arm) = load_inputs(cfg)?;
    let dir = cfg.resolve(&cfg.out_dir);
    let mut shared = Writer::new(&dir.join("shared"))?;
    let name = scene.name.clone();
    let prepared = perceive(cfg, scene, arm, &mut shared);
    let mut rows = Vec::new();
    for &planner in planners {
        let mut out = Writer::new(&dir.join(planner.as_str()))?;
        let result = match &prepared {
            Ok(prep) => plan_execute_evaluate(cfg, prep, planner, &mut out).map(|(r, t)| (r, prep.score(cfg, &t).0)),
            Err(e) => Err(e.clone()),
        };
        let report = result.as_ref().map(|(r, _)| r.clone()).map_err(Clone::clone);
        finish(cfg, &name, planner, &mut out, &report)?;
        rows.push(match result {
            Ok((r, vis)) => CompareRow { object: name.clone(), planner, status: "ok".into(), report: Some(r), visible_points: Some(vis) },
            Err(e) => CompareRow { object: name.clone(), planner, status: format!("failed:{}", e.stage), report: None, visible_points: None },
        });
    }
    let mut csv = String::from(CompareRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&dir.join("comparison.csv"), &csv).map_err(|e| RunError::new(Stage::Io, e))?;
    Ok(rows)
}

/// Writes each bundled scene (scene JSON, mesh PLY), the default arm and a
/// ready-to-run config into `dir`.
pub fn write_bundled_scenarios(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let io = |e: &dyn fmt::Display| RunError::new(Stage::Io, e);
    std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
    write_json(&dir.join("arm.json"), &ArmModel::default_arm()).map_err(|e| io(&e))?;
    let mut configs = Vec::new();
    for name in ["sphere", "box", "prism"] {
        let scene = Scene::bundled(name).map_err(|e| io(&e))?;
        let mesh = format!("{name}.ply");
        write_ply_mesh(&dir.join(&mesh), &scene.object_mesh).map_err(|e| io(&e))?;
        let scene_file = format!("{name}.scene.json");
        write_json(&dir.join(&scene_file), &scene.to_file(Path::new(&mesh))).map_err(|e| io(&e))?;
        let mut cfg = ScenarioConfig::bundled(name);
        cfg.scene = scene_file;
        cfg.arm = Some(PathBuf::from("arm.json"));
        cfg.out_dir = PathBuf::from(format!("out/{name}"));
        let path = dir.join(format!("{name}.config.json"));
        write_json(&path, &cfg).map_err(|e| io(&e))?;
        configs.push(path);
    }
    Ok(configs)
}
