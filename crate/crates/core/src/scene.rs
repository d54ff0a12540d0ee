//! TOML scene scripts for the simulator.
//!
//! ```toml
//! frames = 70
//! noise_sigma = 0.001          # meters
//! seed = 7
//! mask_degradation = 0         # pixels; > 0 dilates, < 0 erodes detector masks
//!
//! [camera]
//! fx = 260.0
//! fy = 260.0
//! cx = 159.5
//! cy = 119.5
//! width = 320
//! height = 240
//!
//! [camera_path]                # kind = "orbit" | "fixed" | "keyframes"
//! kind = "orbit"
//! center = [0.0, 0.0, 0.0]
//! radius = 1.0
//! elevation_deg = 35.0
//! azimuth_start_deg = -40.0
//! azimuth_end_deg = -25.0
//!
//! [[primitives]]               # shape = "plane" | "box" | "sphere"
//! shape = "box"
//! center = [0.0, 0.0, 0.01]
//! half_extents = [0.08, 0.05, 0.01]
//! instance = 1                 # 0 = static background structure
//! semantic = true              # seen by the simulated detector
//! [[primitives.keyframes]]     # optional; rotation is axis-angle in radians
//! frame = 29
//! translation = [-0.55, 0.0, 0.0]
//! rotation = [0.0, 0.0, 0.0]
//!
//! [evaluation]                 # optional removal experiment
//! surface_primitive = 0        # index of the background surface to audit
//! ```

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{PinholeCamera, RigidTransform, Vec3};
use crate::simulator::{CameraPath, Primitive, Scene, SceneError, ScriptedTrajectory, Shape};

#[derive(Debug, Error)]
pub enum SceneFileError {
    #[error("cannot read scene file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scene file: {0}")]
    Parse(String),
    #[error("scene file: {0}")]
    Invalid(String),
}

impl From<SceneError> for SceneFileError {
    fn from(e: SceneError) -> Self {
        SceneFileError::Invalid(e.to_string())
    }
}

/// Parameters of the removal experiment run at the end of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    /// Index of the background surface primitive whose revealed region is measured.
    pub surface_primitive: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Minimum uncovered samples for a connected patch to count as a hole.
    #[serde(default = "default_hole_min_samples")]
    pub hole_min_samples: usize,
    /// Audit footprints are shrunk by this many voxels to skip boundary cells.
    #[serde(default = "default_audit_shrink")]
    pub audit_shrink_voxels: f64,
    /// Audited voxels lie within this many voxels of the surface.
    #[serde(default = "default_audit_band")]
    pub audit_band_voxels: f64,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

fn default_samples() -> usize {
    10_000
}
fn default_hole_min_samples() -> usize {
    5
}
fn default_audit_shrink() -> f64 {
    3.0
}
fn default_audit_band() -> f64 {
    1.5
}
fn default_eval_seed() -> u64 {
    0x5eed
}

/// A scene plus its optional evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlan {
    pub scene: Scene,
    pub evaluation: Option<EvaluationSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    frames: u32,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    mask_degradation: i32,
    camera: PinholeCamera,
    camera_path: CameraPathSpec,
    #[serde(default)]
    primitives: Vec<PrimitiveSpec>,
    evaluation: Option<EvaluationSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
enum CameraPathSpec {
    Orbit {
        center: [f64; 3],
        radius: f64,
        elevation_deg: f64,
        azimuth_start_deg: f64,
        azimuth_end_deg: f64,
    },
    Fixed {
        eye: [f64; 3],
        target: [f64; 3],
        #[serde(default = "z_up")]
        up: [f64; 3],
    },
    Keyframes {
        keyframes: Vec<CameraKeyframe>,
        #[serde(default = "z_up")]
        up: [f64; 3],
    },
}

fn z_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraKeyframe {
    frame: u32,
    eye: [f64; 3],
    target: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
enum ShapeKind {
    Plane,
    Box,
    Sphere,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrimitiveSpec {
    shape: ShapeKind,
    center: [f64; 3],
    normal: Option<[f64; 3]>,
    half_size: Option<[f64; 2]>,
    half_extents: Option<[f64; 3]>,
    radius: Option<f64>,
    #[serde(default)]
    instance: u16,
    #[serde(default)]
    semantic: bool,
    #[serde(default)]
    keyframes: Vec<KeyframeSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeSpec {
    frame: u32,
    #[serde(default)]
    translation: [f64; 3],
    #[serde(default)]
    rotation: [f64; 3],
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl PrimitiveSpec {
    fn build(self, index: usize) -> Result<Primitive, SceneFileError> {
        let missing = |field: &str, shape: &str| {
            SceneFileError::Invalid(format!("primitives[{index}]: a {shape} requires '{field}'"))
        };
        let center = v3(self.center);
        let shape = match self.shape {
            ShapeKind::Plane => Shape::Plane {
                center,
                normal: v3(self.normal.ok_or_else(|| missing("normal", "plane"))?).normalize(),
                half_size: self.half_size.ok_or_else(|| missing("half_size", "plane"))?,
            },
            ShapeKind::Box => Shape::Box {
                center,
                half_extents: v3(self.half_extents.ok_or_else(|| missing("half_extents", "box"))?),
            },
            ShapeKind::Sphere => Shape::Sphere {
                center,
                radius: self.radius.ok_or_else(|| missing("radius", "sphere"))?,
            },
        };
        let keyframes = self
            .keyframes
            .into_iter()
            .map(|k| (k.frame, RigidTransform::from_axis_angle(v3(k.rotation), v3(k.translation))))
            .collect();
        let trajectory = ScriptedTrajectory::new(keyframes)
            .map_err(|e| SceneFileError::Invalid(format!("primitives[{index}]: {e}")))?;
        Ok(Primitive::new(shape, self.instance, self.semantic).with_trajectory(trajectory))
    }
}

pub fn parse_scene(text: &str) -> Result<ScenePlan, SceneFileError> {
    let file: SceneFile = toml::from_str(text).map_err(|e| SceneFileError::Parse(e.to_string()))?;
    let camera_path = match file.camera_path {
        CameraPathSpec::Orbit {
            center,
            radius,
            elevation_deg,
            azimuth_start_deg,
            azimuth_end_deg,
        } => {
            if !(radius > 0.0) {
                return Err(SceneFileError::Invalid(format!("camera_path.radius must be positive, got {radius}")));
            }
            CameraPath::Orbit {
                center: v3(center),
                radius,
                elevation_deg,
                azimuth_start_deg,
                azimuth_end_deg,
            }
        }
        CameraPathSpec::Fixed { eye, target, up } => CameraPath::Fixed(RigidTransform::look_at(v3(eye), v3(target), v3(up))),
        CameraPathSpec::Keyframes { keyframes, up } => {
            let poses = keyframes
                .into_iter()
                .map(|k| (k.frame, RigidTransform::look_at(v3(k.eye), v3(k.target), v3(up))))
                .collect();
            CameraPath::Keyframes(ScriptedTrajectory::new(poses)?)
        }
    };
    let primitives = file
        .primitives
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.build(i))
        .collect::<Result<Vec<_>, _>>()?;
    let scene = Scene {
        camera: file.camera,
        camera_path,
        primitives,
        frames: file.frames,
        noise_sigma: file.noise_sigma,
        seed: file.seed,
        mask_degradation: file.mask_degradation,
    };
    scene.validate()?;
    if let Some(eval) = &file.evaluation {
        match scene.primitives.get(eval.surface_primitive) {
            Some(p) if matches!(p.shape, Shape::Plane { .. }) && !p.is_foreground() => {}
            _ => {
                return Err(SceneFileError::Invalid(format!(
                    "evaluation.surface_primitive = {} must name a background plane",
                    eval.surface_primitive
                )))
            }
        }
        if eval.samples == 0 {
            return Err(SceneFileError::Invalid("evaluation.samples must be positive".into()));
        }
    }
    Ok(ScenePlan {
        scene,
        evaluation: file.evaluation,
    })
}

pub fn load_scene(path: &Path) -> Result<ScenePlan, SceneFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene(&text)
}
