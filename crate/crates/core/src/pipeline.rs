//! Frame-by-frame orchestration: segmentation, association, tracking and map
//! update, plus whole-sequence runs with reports and artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{coverage, revealed_region, AuditReport, Coverage, OcclusionAudit};
use crate::frontend::{associate_segments, extract_segments, fuse_masks, FrontendConfig};
use crate::geometry::{PinholeCamera, RigidTransform, Vec3};
use crate::io::{canonical_pose, export_frames, write_trajectory, Dataset, DatasetError, Frame};
use crate::mapping::{
    integrate_frame, update_object_pose, IntegrationConfig, IntegrationStats, LabelImage, MapView, PoseUpdateStats,
};
use crate::mesh::{extract_mesh, write_ply, TriangleMesh};
use crate::persist::{load_map, save_map, PersistError};
use crate::scene::{EvaluationSpec, ScenePlan};
use crate::simulator::Scene;
use crate::tracking::{find_correspondences, point_to_plane_error, track_object, TrackResult, TrackingConfig};
use crate::voxel::{GlobalMap, GridParams, MapError, MapMode, ObjectId};

/// Stage names in execution order, as they appear in `timing.dat`.
pub const STAGES: [&str; 4] = ["segmentation", "association", "tracking", "map_update"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("map file {path}: {source}")]
    Persist { path: PathBuf, source: PersistError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// Process exit status: 1 for bad invocations, 2 for bad data.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub integration: IntegrationConfig,
    pub frontend: FrontendConfig,
    pub tracking: TrackingConfig,
    /// Rotations up to this angle are treated as registration noise and only the
    /// translation of the segment centroid is applied.
    pub min_motion_rotation_deg: f64,
    /// Apply small motions as whole-voxel shifts. An interpolating transport
    /// loses a layer of voxels at the trailing boundary of the object field, and
    /// over a confidently mapped background that layer never grows back, so a
    /// long slide would wear the object away. Lattice shifts are exact; the
    /// sub-voxel remainder shows up again in the next registration.
    pub lattice_translation: bool,
    /// Without lattice shifts, centroid translations up to this length are not applied.
    pub min_motion_translation: f64,
    /// A registration counts as motion only when its mean squared residual is at
    /// most this fraction of the residual of the object left where it is. The
    /// default 1.0 only rejects registrations that fit worse than no motion.
    /// Lower values keep a resting object from creeping when its model carries
    /// truncation artifacts, at the price of dropping borderline real motions.
    pub static_error_ratio: f64,
}

impl MapperConfig {
    pub fn new(params: &GridParams) -> Self {
        Self {
            integration: IntegrationConfig::new(params),
            frontend: FrontendConfig::default(),
            tracking: TrackingConfig::new(params),
            min_motion_rotation_deg: 1.0,
            lattice_translation: true,
            min_motion_translation: 0.5 * params.voxel_size,
            static_error_ratio: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.frontend.validate()?;
        let i = &self.integration;
        if !(i.truncation_distance > 0.0 && i.sample_weight > 0.0 && i.max_weight >= i.sample_weight) {
            return Err("integration needs a positive truncation and sample weight not above max_weight".into());
        }
        if let Some(start) = i.dropoff_start {
            if !(start >= 0.0 && start < i.truncation_distance) {
                return Err(format!("dropoff_start must lie in [0, truncation), got {start}"));
            }
        }
        let t = &self.tracking;
        if !(t.max_correspondence_distance > 0.0) || t.max_iterations == 0 || t.min_points < 6 {
            return Err("tracking needs a positive gate, at least one iteration and min_points >= 6".into());
        }
        if !(self.min_motion_translation >= 0.0 && self.min_motion_rotation_deg >= 0.0) {
            return Err("motion thresholds must be non-negative".into());
        }
        if !(self.static_error_ratio > 0.0 && self.static_error_ratio <= 1.0) {
            return Err(format!("static_error_ratio must lie in (0, 1], got {}", self.static_error_ratio));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackStats {
    pub object: ObjectId,
    pub iterations: usize,
    pub converged: bool,
    pub inliers: usize,
    pub final_error: f64,
    /// Error of the same segment against the model with no motion at all.
    pub static_error: Option<f64>,
    /// Whether the motion passed the gate and moved the object.
    pub applied: bool,
    pub translation: [f64; 3],
    pub rotation_deg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame: u32,
    pub segments: usize,
    pub new_objects: Vec<ObjectId>,
    pub tracked: Vec<TrackStats>,
    pub pose_update: PoseUpdateStats,
    pub integration: IntegrationStats,
    pub allocated_blocks: usize,
}

/// Wall-clock milliseconds per stage; kept out of the report so reports stay
/// reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub frame: u32,
    pub stages_ms: [f64; 4],
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Incremental mapper holding the map and per-object trajectories.
#[derive(Clone, Debug)]
pub struct Mapper {
    map: GlobalMap,
    cfg: MapperConfig,
    poses: BTreeMap<ObjectId, RigidTransform>,
    /// Last registration per object, reused as the next initial guess.
    last_registration: BTreeMap<ObjectId, RigidTransform>,
    trajectories: BTreeMap<ObjectId, Vec<(u32, RigidTransform)>>,
}

impl Mapper {
    pub fn new(map: GlobalMap, cfg: MapperConfig) -> Self {
        Self {
            map,
            cfg,
            poses: BTreeMap::new(),
            last_registration: BTreeMap::new(),
            trajectories: BTreeMap::new(),
        }
    }

    pub fn map(&self) -> &GlobalMap {
        &self.map
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    pub fn into_map(self) -> GlobalMap {
        self.map
    }

    /// Pose of every non-background object per processed frame, relative to the
    /// pose at which it was first mapped.
    pub fn trajectories(&self) -> &BTreeMap<ObjectId, Vec<(u32, RigidTransform)>> {
        &self.trajectories
    }

    /// Runs one frame through all four stages. `before_integration` sees the map
    /// after the pose updates of this frame and before its depth is fused.
    pub fn process_frame(
        &mut self,
        cam: &PinholeCamera,
        frame: &Frame,
        mut before_integration: impl FnMut(&GlobalMap),
    ) -> Result<(FrameStats, FrameTiming), MapError> {
        let cfg = self.cfg;
        let mut timing = FrameTiming {
            frame: frame.index,
            ..Default::default()
        };

        let t = Instant::now();
        let segments = extract_segments(
            &frame.depth,
            &frame.labels,
            cam,
            &frame.camera_pose,
            cfg.frontend.min_segment_points,
        )?;
        let segments = fuse_masks(segments, &frame.masks, cfg.frontend.tau_overlap);
        let segment_count = segments.len();
        timing.stages_ms[0] = ms_since(t);

        let t = Instant::now();
        let association = associate_segments(&mut self.map, segments, cfg.frontend.vote_fraction_min);
        timing.stages_ms[1] = ms_since(t);

        // Only objects that have been detected at some point are tracked.
        let t = Instant::now();
        let map = &self.map;
        let candidates: Vec<_> = association
            .segments
            .iter()
            .filter_map(|s| {
                let id = s.matched_object?;
                let volume = map.object(id)?;
                let fresh = association.new_objects.contains(&id);
                (!id.is_background() && !fresh && volume.is_semantic()).then_some((id, s))
            })
            .collect();
        let results: Vec<_> = candidates
            .par_iter()
            .map(|(id, seg)| {
                let mesh = extract_mesh(map.object(*id).expect("candidate exists"));
                let guess = self.last_registration.get(id).copied().unwrap_or_else(RigidTransform::identity);
                let track = track_object(&seg.points, &mesh, &guess, &cfg.tracking);
                let at_rest = find_correspondences(&seg.points, &mesh, &RigidTransform::identity(), cfg.tracking.max_correspondence_distance)
                    .map(|set| StaticFit {
                        error: point_to_plane_error(&RigidTransform::identity(), &set),
                        inliers: set.len(),
                    })
                    .ok();
                (*id, seg.centroid(), track, at_rest)
            })
            .collect();
        timing.stages_ms[2] = ms_since(t);

        let t = Instant::now();
        let mut stats = FrameStats {
            frame: frame.index,
            segments: segment_count,
            new_objects: association.new_objects.clone(),
            ..Default::default()
        };
        for (id, centroid, result, at_rest) in results {
            let track = match result {
                Ok(track) => track,
                Err(e) => {
                    log::debug!("frame {}: object {id} not tracked: {e}", frame.index);
                    self.last_registration.remove(&id);
                    continue;
                }
            };
            let motion = track.object_motion();
            let moved = explains_motion(&track, at_rest.as_ref(), cfg.static_error_ratio);
            // an unconvincing registration means the object is where the model says
            let registration = if moved { track.transform } else { RigidTransform::identity() };
            self.last_registration.insert(id, registration);
            let applied = moved
                .then(|| gated_motion(&motion, &centroid, &cfg, self.map.params().voxel_size))
                .flatten();
            if let Some(applied) = &applied {
                let s = update_object_pose(&mut self.map, id, applied)?;
                stats.pose_update.deactivated += s.deactivated;
                stats.pose_update.transported += s.transported;
                stats.pose_update.demoted += s.demoted;
                stats.pose_update.dropped += s.dropped;
                let pose = self.poses.entry(id).or_insert_with(RigidTransform::identity);
                *pose = applied.compose(pose);
            }
            let angle = motion.rotation_angle().to_degrees();
            let t = motion.translation();
            stats.tracked.push(TrackStats {
                object: id,
                iterations: track.iterations,
                converged: track.converged,
                inliers: track.inlier_count,
                final_error: track.final_error,
                static_error: at_rest.map(|f| f.error),
                applied: applied.is_some(),
                translation: [t.x, t.y, t.z],
                rotation_deg: angle,
            });
        }
        before_integration(&self.map);

        let mut labels: LabelImage = frame.labels.map(|&l| (l == 0).then_some(ObjectId::BACKGROUND));
        for (label, d) in labels.data_mut().iter_mut().zip(frame.depth.data()) {
            if !(*d > 0.0 && d.is_finite()) {
                *label = None;
            }
        }
        for seg in &association.segments {
            for &(u, v) in &seg.pixels {
                *labels.get_mut(u, v) = seg.matched_object;
            }
        }
        stats.integration = integrate_frame(
            &mut self.map,
            &frame.depth,
            &labels,
            cam,
            &frame.camera_pose,
            &cfg.integration,
        )?;
        timing.stages_ms[3] = ms_since(t);

        for id in self.map.objects().keys().filter(|id| !id.is_background()) {
            let pose = *self.poses.entry(*id).or_insert_with(RigidTransform::identity);
            self.trajectories.entry(*id).or_default().push((frame.index, pose));
        }
        stats.allocated_blocks = self.map.allocated_blocks();
        Ok((stats, timing))
    }
}

/// The part of an estimated `motion` that is applied to the map, if any.
#[derive(Clone, Copy, Debug)]
struct StaticFit {
    error: f64,
    inliers: usize,
}

/// Model selection between "moved as registered" and "did not move". Many
/// points losing their partner at rest means a large motion; otherwise the
/// registration has to cut the per-point residual clearly below the static one.
/// Without this, a camera sweeping over new faces of a resting object pulls the
/// registration a degree or two off, and that error would be written into the map.
fn explains_motion(track: &TrackResult, at_rest: Option<&StaticFit>, ratio: f64) -> bool {
    let Some(rest) = at_rest else { return true };
    if track.inlier_count == 0 {
        return false;
    }
    if (rest.inliers as f64) < 0.9 * track.inlier_count as f64 {
        return true;
    }
    let mse = |e: f64, n: usize| e / n.max(1) as f64;
    mse(track.final_error, track.inlier_count) <= ratio * mse(rest.error, rest.inliers)
}

fn gated_motion(motion: &RigidTransform, centroid: &Vec3, cfg: &MapperConfig, voxel_size: f64) -> Option<RigidTransform> {
    if motion.rotation_angle().to_degrees() > cfg.min_motion_rotation_deg {
        return Some(*motion);
    }
    let d = motion.transform_point(centroid) - centroid;
    if cfg.lattice_translation {
        let steps = (d / voxel_size).map(f64::round);
        (steps != Vec3::zeros()).then(|| RigidTransform::from_translation(steps * voxel_size))
    } else {
        (d.norm() > cfg.min_motion_translation).then(|| RigidTransform::from_translation(d))
    }
}

/// Where frames come from.
#[derive(Clone, Debug, PartialEq)]
pub enum InputSource {
    Scene(ScenePlan),
    Dataset { root: PathBuf, mask_pattern: Option<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: MapMode,
    pub grid: GridParams,
    pub mapper: MapperConfig,
    pub source: InputSource,
    /// Artifacts are written here when set.
    pub output: Option<PathBuf>,
    /// Overrides the scene's noise seed.
    pub seed: Option<u64>,
    pub load_map: Option<PathBuf>,
    pub save_map: Option<PathBuf>,
}

impl PipelineConfig {
    /// Defaults: 1 cm voxels, truncation of ten voxels.
    pub fn new(source: InputSource, mode: MapMode) -> Self {
        let grid = GridParams::with_truncation_multiple(0.01, 10.0).expect("default grid is valid");
        Self {
            mode,
            grid,
            mapper: MapperConfig::new(&grid),
            source,
            output: None,
            seed: None,
            load_map: None,
            save_map: None,
        }
    }

    /// Replaces the grid and rederives the grid-dependent defaults.
    pub fn with_grid(mut self, grid: GridParams) -> Self {
        let frontend = self.mapper.frontend;
        self.grid = grid;
        self.mapper = MapperConfig::new(&grid);
        self.mapper.frontend = frontend;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.grid.validate()?;
        self.mapper.validate().map_err(PipelineError::Config)?;
        if let Some(path) = &self.load_map {
            if !path.is_file() {
                return Err(PipelineError::Config(format!("--load-map: {} does not exist", path.display())));
            }
        }
        if let InputSource::Dataset { root, .. } = &self.source {
            if !root.is_dir() {
                return Err(PipelineError::Config(format!("--dataset: {} is not a directory", root.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    /// Axis-angle, radians.
    pub rotation: [f64; 3],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        let (p, r) = (t.translation(), t.axis_angle());
        Self {
            translation: [p.x, p.y, p.z],
            rotation: [r.x, r.y, r.z],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub id: ObjectId,
    pub semantic: bool,
    pub observed_voxels: usize,
    pub blocks: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub pose: PoseRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub removed_objects: Vec<ObjectId>,
    /// Coverage of the surface region hidden under foreground at the last frame.
    pub revealed: Coverage,
    pub audit: AuditReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: MapMode,
    pub frames: u32,
    pub stage_order: Vec<String>,
    pub peak_allocated_blocks: usize,
    pub final_allocated_blocks: usize,
    pub objects: Vec<ObjectSummary>,
    pub evaluation: Option<EvaluationReport>,
    pub per_frame: Vec<FrameStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeDelta {
    /// tsdfpp minus standard.
    pub completeness: Option<f64>,
    pub holes: Option<i64>,
    pub audit_changed: Option<i64>,
    /// tsdfpp peak block count over standard peak block count.
    pub peak_block_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tsdfpp: ModeReport,
    pub standard: ModeReport,
    pub delta: ModeDelta,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: ModeReport,
    pub timing: Vec<FrameTiming>,
    pub map: GlobalMap,
    pub trajectories: BTreeMap<ObjectId, Vec<(u32, RigidTransform)>>,
}

enum FrameSource {
    Scene(Scene),
    Dataset(Dataset),
}

impl FrameSource {
    fn open(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Ok(match &cfg.source {
            InputSource::Scene(plan) => {
                let mut scene = plan.scene.clone();
                if let Some(seed) = cfg.seed {
                    scene.seed = seed;
                }
                FrameSource::Scene(scene)
            }
            InputSource::Dataset { root, mask_pattern } => FrameSource::Dataset(Dataset::open(root, mask_pattern.clone())?),
        })
    }

    fn camera(&self) -> PinholeCamera {
        match self {
            FrameSource::Scene(s) => s.camera,
            FrameSource::Dataset(d) => *d.camera(),
        }
    }

    fn len(&self) -> u32 {
        match self {
            FrameSource::Scene(s) => s.frames,
            FrameSource::Dataset(d) => d.len() as u32,
        }
    }

    fn frame(&self, index: u32) -> Result<Frame, PipelineError> {
        match self {
            FrameSource::Scene(s) => Ok(scene_frame(s, index).0),
            FrameSource::Dataset(d) => Ok(d.frame(index as usize)?),
        }
    }
}

/// Renders frame `index` of `scene`. The frame carries the canonical form of the
/// camera pose so that an exported copy of the sequence replays identically;
/// the raw pose is returned alongside for export.
pub fn scene_frame(scene: &Scene, index: u32) -> (Frame, RigidTransform) {
    let r = scene.render(index);
    let frame = Frame {
        index,
        camera_pose: canonical_pose(&r.camera_pose),
        depth: r.depth,
        labels: r.labels,
        masks: r.masks,
    };
    (frame, r.camera_pose)
}

/// Writes the simulated sequence in the dataset layout.
pub fn export_scene(scene: &Scene, seed: Option<u64>, root: &Path) -> Result<(), PipelineError> {
    let mut scene = scene.clone();
    if let Some(seed) = seed {
        scene.seed = seed;
    }
    let (frames, raw): (Vec<Frame>, Vec<RigidTransform>) = (0..scene.frames).map(|k| scene_frame(&scene, k)).unzip();
    export_frames(root, &scene.camera, &frames, &raw).map_err(io_err(root))
}

fn evaluate(map: &GlobalMap, scene: &Scene, spec: &EvaluationSpec, audit: Option<OcclusionAudit>) -> EvaluationReport {
    let removed: Vec<ObjectId> = map.objects().keys().copied().filter(|id| !id.is_background()).collect();
    let mut view = MapView::new(map);
    for id in &removed {
        view = view.without(*id).expect("id from map");
    }
    let meshes = view.scene_meshes();
    let parts: Vec<&TriangleMesh> = meshes.iter().map(|(_, m)| m).collect();
    let samples = revealed_region(scene, spec, scene.frames.saturating_sub(1));
    let vs = map.params().voxel_size;
    EvaluationReport {
        removed_objects: removed,
        revealed: coverage(&samples, &parts, vs, 2.0 * vs, spec.hole_min_samples),
        audit: audit.map(|a| a.finish(map)).unwrap_or_default(),
    }
}

fn object_summaries(mapper: &Mapper) -> Vec<ObjectSummary> {
    let map = mapper.map();
    map.objects()
        .values()
        .map(|v| {
            let mesh = extract_mesh(v);
            let pose = mapper
                .trajectories()
                .get(&v.id())
                .and_then(|t| t.last())
                .map_or_else(RigidTransform::identity, |(_, p)| *p);
            ObjectSummary {
                id: v.id(),
                semantic: v.is_semantic(),
                observed_voxels: v.observed_voxel_count(),
                blocks: v.grid().block_count(),
                mesh_vertices: mesh.vertices.len(),
                mesh_triangles: mesh.triangles.len(),
                pose: PoseRecord::from(&pose),
            }
        })
        .collect()
}

/// Processes the configured sequence in one map mode.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let source = FrameSource::open(cfg)?;
    let cam = source.camera();
    let map = match &cfg.load_map {
        Some(path) => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            let map = load_map(&mut io::BufReader::new(file)).map_err(|source| PipelineError::Persist {
                path: path.clone(),
                source,
            })?;
            if map.mode() != cfg.mode || map.params() != &cfg.grid {
                return Err(PipelineError::Config(format!(
                    "{} holds a {} map with {} m voxels; the run is configured for {} with {} m voxels",
                    path.display(),
                    map.mode().label(),
                    map.params().voxel_size,
                    cfg.mode.label(),
                    cfg.grid.voxel_size
                )));
            }
            map
        }
        None => GlobalMap::new(cfg.grid, cfg.mode),
    };
    let mut mapper = Mapper::new(map, cfg.mapper);
    let (scene, spec) = match (&source, &cfg.source) {
        (FrameSource::Scene(s), InputSource::Scene(plan)) => (Some(s), plan.evaluation),
        _ => (None, None),
    };
    let mut audit = match (scene, &spec) {
        (Some(s), Some(e)) => OcclusionAudit::new(s, e, &cfg.grid),
        _ => None,
    };

    let mut per_frame = Vec::new();
    let mut timing = Vec::new();
    let mut peak = mapper.map().allocated_blocks();
    for k in 0..source.len() {
        let frame = source.frame(k)?;
        if let (Some(a), Some(s)) = (audit.as_mut(), scene) {
            a.begin_frame(s, k, mapper.map());
        }
        let (stats, t) = mapper.process_frame(&cam, &frame, |m| {
            if let Some(a) = audit.as_mut() {
                a.check_uncovered(m);
            }
        })?;
        log::info!(
            "{} frame {k}: {} segments, {} tracked, {} samples, {} blocks",
            cfg.mode.label(),
            stats.segments,
            stats.tracked.len(),
            stats.integration.samples,
            stats.allocated_blocks
        );
        peak = peak.max(stats.allocated_blocks);
        per_frame.push(stats);
        timing.push(t);
    }

    let evaluation = match (scene, &spec) {
        (Some(s), Some(e)) if s.frames > 0 => Some(evaluate(mapper.map(), s, e, audit)),
        _ => None,
    };
    let report = ModeReport {
        mode: cfg.mode,
        frames: source.len(),
        stage_order: STAGES.iter().map(|s| s.to_string()).collect(),
        peak_allocated_blocks: peak,
        final_allocated_blocks: mapper.map().allocated_blocks(),
        objects: object_summaries(&mapper),
        evaluation,
        per_frame,
    };
    let trajectories = mapper.trajectories().clone();
    let out = RunOutput {
        report,
        timing,
        map: mapper.into_map(),
        trajectories,
    };
    if let Some(dir) = &cfg.output {
        write_artifacts(dir, &out)?;
    }
    if let Some(path) = &cfg.save_map {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        save_map(&out.map, &mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    }
    Ok(out)
}

/// Runs the same frame stream through both map modes.
pub fn compare_modes(cfg: &PipelineConfig) -> Result<(ComparisonReport, RunOutput, RunOutput), PipelineError> {
    if cfg.load_map.is_some() || cfg.save_map.is_some() {
        return Err(PipelineError::Config("--compare cannot be combined with --load-map or --save-map".into()));
    }
    let run = |mode: MapMode| {
        let mut c = cfg.clone();
        c.mode = mode;
        c.output = cfg.output.as_ref().map(|d| d.join(mode.label()));
        run_pipeline(&c)
    };
    let plus = run(MapMode::TsdfPlusPlus)?;
    let standard = run(MapMode::StandardTsdf)?;
    let (a, b) = (&plus.report, &standard.report);
    let both = a.evaluation.as_ref().zip(b.evaluation.as_ref());
    let delta = ModeDelta {
        completeness: both.map(|(x, y)| x.revealed.completeness - y.revealed.completeness),
        holes: both.map(|(x, y)| x.revealed.holes as i64 - y.revealed.holes as i64),
        audit_changed: both.map(|(x, y)| x.audit.changed as i64 - y.audit.changed as i64),
        peak_block_ratio: a.peak_allocated_blocks as f64 / b.peak_allocated_blocks.max(1) as f64,
    };
    let report = ComparisonReport {
        tsdfpp: plus.report.clone(),
        standard: standard.report.clone(),
        delta,
    };
    if let Some(dir) = &cfg.output {
        write_json(&dir.join("comparison.json"), &report)?;
    }
    Ok((report, plus, standard))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), PipelineError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Writes report, timing columns, meshes and trajectories under `dir`.
pub fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<(), PipelineError> {
    for sub in ["meshes", "trajectories"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir))?;
    }
    write_json(&dir.join("report.json"), &out.report)?;
    write_file(&dir.join("timing.dat"), |w| {
        writeln!(w, "# frame {} total (milliseconds)", STAGES.join(" "))?;
        for t in &out.timing {
            let s = t.stages_ms;
            writeln!(w, "{} {:.3} {:.3} {:.3} {:.3} {:.3}", t.frame, s[0], s[1], s[2], s[3], s.iter().sum::<f64>())?;
        }
        Ok(())
    })?;
    for (id, volume) in out.map.objects() {
        let mesh = extract_mesh(volume);
        write_file(&dir.join("meshes").join(format!("object_{}.ply", id.0)), |w| write_ply(w, &[(*id, &mesh)]))?;
    }
    let view = MapView::new(&out.map);
    let visible = view.scene_meshes();
    let parts: Vec<(ObjectId, &TriangleMesh)> = visible.iter().map(|(id, m)| (*id, m)).collect();
    write_file(&dir.join("scene.ply"), |w| write_ply(w, &parts))?;
    if let Some(eval) = &out.report.evaluation {
        let mut view = MapView::new(&out.map);
        for id in &eval.removed_objects {
            view = view.without(*id)?;
        }
        let remaining = view.scene_meshes();
        let parts: Vec<(ObjectId, &TriangleMesh)> = remaining.iter().map(|(id, m)| (*id, m)).collect();
        write_file(&dir.join("scene_after_removal.ply"), |w| write_ply(w, &parts))?;
    }
    for (id, poses) in &out.trajectories {
        let stamped: Vec<(f64, RigidTransform)> = poses.iter().map(|(k, p)| (*k as f64, *p)).collect();
        write_file(&dir.join("trajectories").join(format!("object_{}.txt", id.0)), |w| write_trajectory(w, &stamped))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_json() {
        let report = ModeReport {
            mode: MapMode::StandardTsdf,
            frames: 2,
            stage_order: STAGES.iter().map(|s| s.to_string()).collect(),
            peak_allocated_blocks: 7,
            final_allocated_blocks: 6,
            objects: vec![ObjectSummary {
                id: ObjectId(1),
                semantic: true,
                observed_voxels: 12,
                blocks: 1,
                mesh_vertices: 3,
                mesh_triangles: 1,
                pose: PoseRecord::from(&RigidTransform::from_axis_angle(
                    crate::geometry::Vec3::new(0.1, -0.2, 0.3),
                    crate::geometry::Vec3::new(0.1 / 3.0, 1e-17, -2.5),
                )),
            }],
            evaluation: Some(EvaluationReport {
                removed_objects: vec![ObjectId(1)],
                revealed: Coverage {
                    samples: 3,
                    covered: 2,
                    completeness: 2.0 / 3.0,
                    holes: 1,
                },
                audit: AuditReport { checked: 4, changed: 0 },
            }),
            per_frame: vec![FrameStats {
                frame: 1,
                tracked: vec![TrackStats {
                    object: ObjectId(1),
                    iterations: 3,
                    converged: true,
                    inliers: 120,
                    final_error: 1.234e-7,
                    static_error: Some(2.5e-7),
                    applied: true,
                    translation: [0.01, 0.0, -0.0],
                    rotation_deg: 0.1,
                }],
                ..Default::default()
            }],
        };
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: ModeReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }
}
