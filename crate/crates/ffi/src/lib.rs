//! C ABI over the `tsdfpp` mapping library.
//!
//! Every function returns a [`TsdfppStatus`]; on failure a message for the calling
//! thread is kept until the next failing call and can be read with
//! [`tsdfpp_last_error`]. Maps and meshes are opaque handles owned by the caller
//! and released with their `_free` function.
//!
//! Poses are row-major 4×4 rigid transforms (the last row is ignored). Camera
//! poses map camera coordinates to world coordinates, with the camera looking
//! along +z, x right and y down. Label images use [`TSDFPP_NO_LABEL`] for
//! pixels without a segment.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::Matrix3;
use tsdfpp::geometry::{PinholeCamera, RigidTransform, Vec3};
use tsdfpp::image::Image;
use tsdfpp::mapping::{integrate_frame, raycast, update_object_pose, IntegrationConfig};
use tsdfpp::mesh::{extract_mesh, TriangleMesh};
use tsdfpp::persist::{load_map, save_map};
use tsdfpp::pipeline::{run_pipeline, InputSource, PipelineConfig};
use tsdfpp::scene::load_scene;
use tsdfpp::voxel::{GlobalMap, GridParams, MapMode, ObjectId};

/// Label value for pixels that belong to no segment.
pub const TSDFPP_NO_LABEL: u32 = u32::MAX;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsdfppStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownObject = 3,
    Io = 4,
    BadFile = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsdfppMode {
    /// Layered multi-object map.
    Layered = 0,
    /// One surface per voxel.
    Standard = 1,
}

impl From<TsdfppMode> for MapMode {
    fn from(m: TsdfppMode) -> Self {
        match m {
            TsdfppMode::Layered => MapMode::TsdfPlusPlus,
            TsdfppMode::Standard => MapMode::StandardTsdf,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TsdfppCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TsdfppIntegrationStats {
    pub samples: u64,
    pub reinforced: u64,
    pub weakened: u64,
    pub swapped: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TsdfppRunSummary {
    pub frames: u32,
    pub objects: u32,
    pub peak_allocated_blocks: u64,
    /// Revealed-region completeness, or -1 when the scene has no evaluation.
    pub completeness: f64,
    pub holes: u32,
    pub audit_checked: u64,
    pub audit_changed: u64,
}

/// Opaque map handle.
pub struct TsdfppMap {
    map: GlobalMap,
    integration: IntegrationConfig,
}

/// Opaque triangle mesh handle.
pub struct TsdfppMesh {
    mesh: TriangleMesh,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TsdfppStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(TsdfppStatus::InvalidArgument, msg.into())
    }
}

impl From<tsdfpp::voxel::MapError> for Failure {
    fn from(e: tsdfpp::voxel::MapError) -> Self {
        use tsdfpp::voxel::MapError;
        let status = match e {
            MapError::UnknownObject(_) => TsdfppStatus::UnknownObject,
            _ => TsdfppStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TsdfppStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(TsdfppStatus::Panic, format!("internal error: {msg}")))
    });
    match outcome {
        Ok(()) => TsdfppStatus::Ok,
        Err(Failure(status, msg)) => {
            let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
            LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
            status
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(TsdfppStatus::NullPointer, format!("{name} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(TsdfppStatus::NullPointer, format!("{name} is null")))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(TsdfppStatus::NullPointer, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::invalid(format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn pose_arg(p: *const f64, name: &str) -> Result<RigidTransform, Failure> {
    if p.is_null() {
        return Err(Failure(TsdfppStatus::NullPointer, format!("{name} is null")));
    }
    let m = std::slice::from_raw_parts(p, 16);
    let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    RigidTransform::new(rotation, Vec3::new(m[3], m[7], m[11]))
        .map_err(|e| Failure::invalid(format!("{name}: {e}")))
}

fn camera_arg(c: &TsdfppCamera) -> Result<PinholeCamera, Failure> {
    PinholeCamera::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height).map_err(|e| Failure::invalid(format!("camera: {e}")))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL, or 0
/// when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates an empty map holding only the background model.
///
/// # Safety
/// `out` must point to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_new(
    voxel_size: f64,
    voxels_per_block_side: u32,
    truncation_distance: f64,
    mode: TsdfppMode,
    out: *mut *mut TsdfppMap,
) -> TsdfppStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let params = GridParams::new(voxel_size, voxels_per_block_side as usize, truncation_distance)?;
        let handle = TsdfppMap {
            map: GlobalMap::new(params, mode.into()),
            integration: IntegrationConfig::new(&params),
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `map` must be null or a handle from this library that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_free(map: *mut TsdfppMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Registers a new object model and returns its id.
///
/// # Safety
/// `map` must be a valid handle and `out_id` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_add_object(map: *mut TsdfppMap, semantic: bool, out_id: *mut u32) -> TsdfppStatus {
    guard(|| {
        let map = deref_mut(map, "map")?;
        let out_id = deref_mut(out_id, "out_id")?;
        *out_id = map.map.allocate_object(semantic).0;
        Ok(())
    })
}

/// Number of object models, the background included.
///
/// # Safety
/// `map` must be a valid handle and `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_object_count(map: *const TsdfppMap, out_count: *mut u32) -> TsdfppStatus {
    guard(|| {
        let map = deref(map, "map")?;
        *deref_mut(out_count, "out_count")? = map.map.objects().len() as u32;
        Ok(())
    })
}

/// Fuses one depth frame. `depth` holds ranges along each pixel ray in meters
/// (0 or non-finite for no measurement) and `labels` the object id of each
/// pixel; both are row-major `width × height` arrays. `stats` may be null.
///
/// # Safety
/// All pointers except `stats` must be valid; the images must hold
/// `width × height` elements.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_integrate(
    map: *mut TsdfppMap,
    camera: *const TsdfppCamera,
    camera_pose: *const f64,
    depth: *const f32,
    labels: *const u32,
    stats: *mut TsdfppIntegrationStats,
) -> TsdfppStatus {
    guard(|| {
        let map = deref_mut(map, "map")?;
        let cam = camera_arg(deref(camera, "camera")?)?;
        let pose = pose_arg(camera_pose, "camera_pose")?;
        if depth.is_null() || labels.is_null() {
            return Err(Failure(TsdfppStatus::NullPointer, "depth and labels must not be null".into()));
        }
        let n = cam.width as usize * cam.height as usize;
        let depth = Image::from_vec(cam.width, cam.height, std::slice::from_raw_parts(depth, n).to_vec())
            .expect("sized from the camera");
        let labels = std::slice::from_raw_parts(labels, n)
            .iter()
            .map(|&l| (l != TSDFPP_NO_LABEL).then_some(ObjectId(l)))
            .collect();
        let labels = Image::from_vec(cam.width, cam.height, labels).expect("sized from the camera");
        let s = integrate_frame(&mut map.map, &depth, &labels, &cam, &pose, &map.integration)?;
        if let Some(out) = stats.as_mut() {
            *out = TsdfppIntegrationStats {
                samples: s.samples as u64,
                reinforced: s.reinforced as u64,
                weakened: s.weakened as u64,
                swapped: s.swapped as u64,
            };
        }
        Ok(())
    })
}

/// Moves object `id` by the world-frame rigid `motion`.
///
/// # Safety
/// `map` must be a valid handle and `motion` point to 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_update_pose(map: *mut TsdfppMap, id: u32, motion: *const f64) -> TsdfppStatus {
    guard(|| {
        let map = deref_mut(map, "map")?;
        let motion = pose_arg(motion, "motion")?;
        update_object_pose(&mut map.map, ObjectId(id), &motion)?;
        Ok(())
    })
}

/// Renders the map from `camera_pose`. Each output array holds
/// `width × height` elements; misses get range 0 and [`TSDFPP_NO_LABEL`].
///
/// # Safety
/// All pointers must be valid and the outputs sized for the camera.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_raycast(
    map: *const TsdfppMap,
    camera: *const TsdfppCamera,
    camera_pose: *const f64,
    out_depth: *mut f32,
    out_labels: *mut u32,
) -> TsdfppStatus {
    guard(|| {
        let map = deref(map, "map")?;
        let cam = camera_arg(deref(camera, "camera")?)?;
        let pose = pose_arg(camera_pose, "camera_pose")?;
        if out_depth.is_null() || out_labels.is_null() {
            return Err(Failure(TsdfppStatus::NullPointer, "outputs must not be null".into()));
        }
        let n = cam.width as usize * cam.height as usize;
        let depth = std::slice::from_raw_parts_mut(out_depth, n);
        let labels = std::slice::from_raw_parts_mut(out_labels, n);
        for (i, hit) in raycast(&map.map, &cam, &pose).data().iter().enumerate() {
            depth[i] = hit.as_ref().map_or(0.0, |h| h.depth as f32);
            labels[i] = hit.as_ref().map_or(TSDFPP_NO_LABEL, |h| h.object.0);
        }
        Ok(())
    })
}

/// Extracts the surface of object `id`.
///
/// # Safety
/// `map` must be a valid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_extract_mesh(map: *const TsdfppMap, id: u32, out: *mut *mut TsdfppMesh) -> TsdfppStatus {
    guard(|| {
        let map = deref(map, "map")?;
        let out = deref_mut(out, "out")?;
        let volume = map
            .map
            .object(ObjectId(id))
            .ok_or_else(|| Failure(TsdfppStatus::UnknownObject, format!("unknown object id {id}")))?;
        *out = Box::into_raw(Box::new(TsdfppMesh { mesh: extract_mesh(volume) }));
        Ok(())
    })
}

/// # Safety
/// `mesh` must be null or a handle from this library that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_mesh_free(mesh: *mut TsdfppMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// # Safety
/// `mesh` must be a valid handle; the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_mesh_size(mesh: *const TsdfppMesh, out_vertices: *mut usize, out_triangles: *mut usize) -> TsdfppStatus {
    guard(|| {
        let mesh = &deref(mesh, "mesh")?.mesh;
        *deref_mut(out_vertices, "out_vertices")? = mesh.vertices.len();
        *deref_mut(out_triangles, "out_triangles")? = mesh.triangles.len();
        Ok(())
    })
}

/// Copies vertex positions (3 doubles each) and triangle vertex indices (3 each).
/// Either output may be null to skip it.
///
/// # Safety
/// Non-null outputs must be sized as reported by [`tsdfpp_mesh_size`].
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_mesh_copy(mesh: *const TsdfppMesh, out_vertices: *mut f64, out_triangles: *mut u32) -> TsdfppStatus {
    guard(|| {
        let mesh = &deref(mesh, "mesh")?.mesh;
        if !out_vertices.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_vertices, 3 * mesh.vertices.len());
            for (chunk, v) in dst.chunks_exact_mut(3).zip(&mesh.vertices) {
                chunk.copy_from_slice(&[v.x, v.y, v.z]);
            }
        }
        if !out_triangles.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_triangles, 3 * mesh.triangles.len());
            for (chunk, t) in dst.chunks_exact_mut(3).zip(&mesh.triangles) {
                chunk.copy_from_slice(t);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `map` must be a valid handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_save(map: *const TsdfppMap, path: *const c_char) -> TsdfppStatus {
    guard(|| {
        let map = deref(map, "map")?;
        let path = path_arg(path, "path")?;
        let io = |e: std::io::Error| Failure(TsdfppStatus::Io, format!("{}: {e}", path.display()));
        let mut out = BufWriter::new(File::create(&path).map_err(io)?);
        save_map(&map.map, &mut out).map_err(io)?;
        out.flush().map_err(io)
    })
}

/// Loads a map written by [`tsdfpp_map_save`] or the command line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_map_load(path: *const c_char, out: *mut *mut TsdfppMap) -> TsdfppStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = deref_mut(out, "out")?;
        let file = File::open(&path).map_err(|e| Failure(TsdfppStatus::Io, format!("{}: {e}", path.display())))?;
        let map = load_map(&mut BufReader::new(file)).map_err(|e| {
            let status = match e {
                tsdfpp::persist::PersistError::Io(_) => TsdfppStatus::Io,
                _ => TsdfppStatus::BadFile,
            };
            Failure(status, format!("{}: {e}", path.display()))
        })?;
        let integration = IntegrationConfig::new(map.params());
        *out = Box::into_raw(Box::new(TsdfppMap { map, integration }));
        Ok(())
    })
}

/// Runs the full pipeline on a scene script. `out_dir` may be null to skip
/// writing meshes and reports; `summary` may be null.
///
/// # Safety
/// `scene_path` must be a NUL-terminated string; `out_dir` null or one.
#[no_mangle]
pub unsafe extern "C" fn tsdfpp_run_scene(
    scene_path: *const c_char,
    mode: TsdfppMode,
    out_dir: *const c_char,
    summary: *mut TsdfppRunSummary,
) -> TsdfppStatus {
    guard(|| {
        let path = path_arg(scene_path, "scene_path")?;
        let plan = load_scene(&path).map_err(|e| Failure::invalid(e.to_string()))?;
        let mut cfg = PipelineConfig::new(InputSource::Scene(plan), mode.into());
        if !out_dir.is_null() {
            cfg.output = Some(path_arg(out_dir, "out_dir")?);
        }
        let out = run_pipeline(&cfg).map_err(|e| {
            let status = if e.exit_code() == 1 { TsdfppStatus::InvalidArgument } else { TsdfppStatus::BadFile };
            Failure(status, e.to_string())
        })?;
        if let Some(s) = summary.as_mut() {
            let r = &out.report;
            let e = r.evaluation.as_ref();
            *s = TsdfppRunSummary {
                frames: r.frames,
                objects: r.objects.len() as u32,
                peak_allocated_blocks: r.peak_allocated_blocks as u64,
                completeness: e.map_or(-1.0, |e| e.revealed.completeness),
                holes: e.map_or(0, |e| e.revealed.holes as u32),
                audit_checked: e.map_or(0, |e| e.audit.checked as u64),
                audit_changed: e.map_or(0, |e| e.audit.changed as u64),
            };
        }
        Ok(())
    })
}
