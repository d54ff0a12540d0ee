use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use tsdfpp_ffi::*;

const IDENTITY: [f64; 16] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];

fn camera() -> TsdfppCamera {
    TsdfppCamera {
        fx: 80.0,
        fy: 80.0,
        cx: 39.5,
        cy: 29.5,
        width: 80,
        height: 60,
    }
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { tsdfpp_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(n.min(255)).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn new_map(mode: TsdfppMode) -> *mut TsdfppMap {
    let mut map = ptr::null_mut();
    assert_eq!(unsafe { tsdfpp_map_new(0.01, 8, 0.1, mode, &mut map) }, TsdfppStatus::Ok);
    assert!(!map.is_null());
    map
}

/// Ranges to a wall facing the camera at `distance` along the optical axis.
fn wall(cam: &TsdfppCamera, distance: f64) -> Vec<f32> {
    let mut out = Vec::new();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let x = (u as f64 - cam.cx) / cam.fx;
            let y = (v as f64 - cam.cy) / cam.fy;
            out.push((distance * (1.0 + x * x + y * y).sqrt()) as f32);
        }
    }
    out
}

fn integrated_wall() -> *mut TsdfppMap {
    let map = new_map(TsdfppMode::Layered);
    let cam = camera();
    let depth = wall(&cam, 1.0);
    let labels = vec![0u32; depth.len()];
    let mut stats = TsdfppIntegrationStats::default();
    for _ in 0..3 {
        let status = unsafe { tsdfpp_map_integrate(map, &cam, IDENTITY.as_ptr(), depth.as_ptr(), labels.as_ptr(), &mut stats) };
        assert_eq!(status, TsdfppStatus::Ok, "{}", last_error());
    }
    assert!(stats.samples > 0);
    assert_eq!(stats.swapped, 0);
    map
}

fn mesh_of(map: *const TsdfppMap, id: u32) -> (Vec<f64>, Vec<u32>) {
    unsafe {
        let mut mesh = ptr::null_mut();
        assert_eq!(tsdfpp_map_extract_mesh(map, id, &mut mesh), TsdfppStatus::Ok);
        let (mut nv, mut nt) = (0usize, 0usize);
        assert_eq!(tsdfpp_mesh_size(mesh, &mut nv, &mut nt), TsdfppStatus::Ok);
        let mut vertices = vec![0.0; 3 * nv];
        let mut triangles = vec![0u32; 3 * nt];
        assert_eq!(tsdfpp_mesh_copy(mesh, vertices.as_mut_ptr(), triangles.as_mut_ptr()), TsdfppStatus::Ok);
        tsdfpp_mesh_free(mesh);
        (vertices, triangles)
    }
}

#[test]
fn bad_parameters_report_a_message() {
    let mut map = ptr::null_mut();
    let status = unsafe { tsdfpp_map_new(-0.01, 8, 0.1, TsdfppMode::Layered, &mut map) };
    assert_eq!(status, TsdfppStatus::InvalidArgument);
    assert!(map.is_null());
    assert!(last_error().contains("voxel_size"), "{}", last_error());

    let status = unsafe { tsdfpp_map_new(0.01, 8, 0.1, TsdfppMode::Layered, ptr::null_mut()) };
    assert_eq!(status, TsdfppStatus::NullPointer);
    assert_eq!(last_error(), "out is null");
}

#[test]
fn error_message_is_truncated_to_the_buffer() {
    unsafe {
        tsdfpp_map_new(0.01, 8, 0.1, TsdfppMode::Layered, ptr::null_mut());
        let mut buf = [1 as c_char; 4];
        assert_eq!(tsdfpp_last_error(buf.as_mut_ptr(), buf.len()), "out is null".len());
        assert_eq!(buf.map(|c| c as u8), *b"out\0");
        assert_eq!(tsdfpp_last_error(ptr::null_mut(), 0), "out is null".len());
    }
}

#[test]
fn wall_is_integrated_meshed_and_rendered() {
    let map = integrated_wall();
    let (vertices, triangles) = mesh_of(map, 0);
    assert!(!triangles.is_empty());
    let worst = vertices.chunks_exact(3).map(|v| (v[2] - 1.0).abs()).fold(0.0, f64::max);
    assert!(worst < 0.005, "wall vertices off by {worst}");

    let cam = camera();
    let n = (cam.width * cam.height) as usize;
    let (mut depth, mut labels) = (vec![-1.0f32; n], vec![7u32; n]);
    let status = unsafe { tsdfpp_map_raycast(map, &cam, IDENTITY.as_ptr(), depth.as_mut_ptr(), labels.as_mut_ptr()) };
    assert_eq!(status, TsdfppStatus::Ok);
    let center = (cam.height / 2 * cam.width + cam.width / 2) as usize;
    assert!((depth[center] - 1.0).abs() < 0.01, "{}", depth[center]);
    assert_eq!(labels[center], 0);
    assert!(labels.iter().all(|&l| l == 0 || l == TSDFPP_NO_LABEL));
    assert!(depth.iter().zip(&labels).all(|(d, l)| (*l == TSDFPP_NO_LABEL) == (*d == 0.0)));
    unsafe { tsdfpp_map_free(map) };
}

#[test]
fn pose_updates_check_their_arguments() {
    let map = new_map(TsdfppMode::Layered);
    unsafe {
        let mut id = 0;
        assert_eq!(tsdfpp_map_add_object(map, true, &mut id), TsdfppStatus::Ok);
        assert_eq!(id, 1);
        let mut count = 0;
        assert_eq!(tsdfpp_map_object_count(map, &mut count), TsdfppStatus::Ok);
        assert_eq!(count, 2);

        let mut shift = IDENTITY;
        shift[3] = 0.02;
        assert_eq!(tsdfpp_map_update_pose(map, id, shift.as_ptr()), TsdfppStatus::Ok);
        assert_eq!(tsdfpp_map_update_pose(map, 99, shift.as_ptr()), TsdfppStatus::UnknownObject);
        assert_eq!(tsdfpp_map_update_pose(map, 0, shift.as_ptr()), TsdfppStatus::InvalidArgument);
        let mut skew = IDENTITY;
        skew[1] = 0.3;
        assert_eq!(tsdfpp_map_update_pose(map, id, skew.as_ptr()), TsdfppStatus::InvalidArgument);
        assert!(last_error().contains("motion"));
        assert_eq!(tsdfpp_map_update_pose(map, id, ptr::null()), TsdfppStatus::NullPointer);
        tsdfpp_map_free(map);
    }
}

#[test]
fn integration_rejects_unknown_labels() {
    let map = new_map(TsdfppMode::Standard);
    let cam = camera();
    let depth = wall(&cam, 1.0);
    let labels = vec![5u32; depth.len()];
    let status = unsafe { tsdfpp_map_integrate(map, &cam, IDENTITY.as_ptr(), depth.as_ptr(), labels.as_ptr(), ptr::null_mut()) };
    assert_eq!(status, TsdfppStatus::UnknownObject);
    let broken = TsdfppCamera { fx: 0.0, ..cam };
    let status = unsafe { tsdfpp_map_integrate(map, &broken, IDENTITY.as_ptr(), depth.as_ptr(), labels.as_ptr(), ptr::null_mut()) };
    assert_eq!(status, TsdfppStatus::InvalidArgument);
    unsafe { tsdfpp_map_free(map) };
}

#[test]
fn saved_maps_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("wall.map").to_str().unwrap()).unwrap();
    let map = integrated_wall();
    unsafe {
        assert_eq!(tsdfpp_map_save(map, path.as_ptr()), TsdfppStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(tsdfpp_map_load(path.as_ptr(), &mut loaded), TsdfppStatus::Ok);
        assert_eq!(mesh_of(map, 0), mesh_of(loaded, 0));
        tsdfpp_map_free(loaded);
        tsdfpp_map_free(map);

        let garbage = dir.path().join("garbage.map");
        std::fs::write(&garbage, b"not a map").unwrap();
        let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(tsdfpp_map_load(garbage.as_ptr(), &mut out), TsdfppStatus::BadFile);
        let missing = CString::new(dir.path().join("missing.map").to_str().unwrap()).unwrap();
        assert_eq!(tsdfpp_map_load(missing.as_ptr(), &mut out), TsdfppStatus::Io);
        assert!(last_error().contains("missing.map"));
        assert!(out.is_null());
    }
}

#[test]
fn scene_runs_end_to_end() {
    let scene = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes/static.toml");
    let scene = CString::new(scene.to_str().unwrap()).unwrap();
    let mut summary = TsdfppRunSummary::default();
    let status = unsafe { tsdfpp_run_scene(scene.as_ptr(), TsdfppMode::Layered, ptr::null(), &mut summary) };
    assert_eq!(status, TsdfppStatus::Ok, "{}", last_error());
    assert_eq!(summary.frames, 20);
    assert_eq!(summary.objects, 2);
    assert_eq!(summary.completeness, -1.0);

    let missing = CString::new("/nonexistent.toml").unwrap();
    let status = unsafe { tsdfpp_run_scene(missing.as_ptr(), TsdfppMode::Layered, ptr::null(), ptr::null_mut()) };
    assert_eq!(status, TsdfppStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tsdfpp.h");
    assert!(header.is_file(), "build script did not write {}", header.display());
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .output()
        else {
            eprintln!("{compiler} not available, skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
