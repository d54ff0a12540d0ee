//! Depth fusion with confidence voting, object pose updates by field transport,
//! layered raycasting and the non-destructive removal view.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{interpolate_grid, trilinear_interpolate, PinholeCamera, RigidTransform, Vec3};
use crate::image::{DepthImage, Image};
use crate::mesh::{extract_mesh_filtered, TriangleMesh};
use crate::voxel::{
    BlockGrid, BlockIndex, ConfidenceUpdate, GlobalMap, GridIndex, GridParams, MapError, ObjectId, TsdfVoxel,
};

/// Per-pixel object assignment after association; `None` pixels are not fused.
pub type LabelImage = Image<Option<ObjectId>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub truncation_distance: f64,
    pub max_weight: f64,
    /// Weight of a single observation.
    pub sample_weight: f64,
    /// Samples further than this behind the measured surface get a weight that
    /// falls linearly to zero at the truncation distance. `None` keeps every
    /// sample at full weight.
    pub dropoff_start: Option<f64>,
}

impl IntegrationConfig {
    pub fn new(params: &GridParams) -> Self {
        Self {
            truncation_distance: params.truncation_distance,
            max_weight: 1.0e4,
            sample_weight: 1.0,
            dropoff_start: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub samples: usize,
    pub reinforced: usize,
    pub weakened: usize,
    pub swapped: usize,
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    g: GridIndex,
    id: ObjectId,
    distance: f64,
}

/// Weighted running average of one observation into `voxel`.
pub fn fuse_sample(voxel: &mut TsdfVoxel, distance: f64, cfg: &IntegrationConfig) {
    let w_new = sample_weight(distance, cfg);
    if w_new <= 0.0 {
        return;
    }
    let w = voxel.weight;
    let fused = (w * voxel.distance + w_new * distance) / (w + w_new);
    voxel.distance = fused.clamp(-cfg.truncation_distance, cfg.truncation_distance);
    voxel.weight = (w + w_new).min(cfg.max_weight);
}

/// Behind the surface a projective sample is only a guess (the space may be
/// the far side of a thin object or the shadow of a silhouette edge), so it
/// counts for less the deeper it lies.
pub fn sample_weight(distance: f64, cfg: &IntegrationConfig) -> f64 {
    match cfg.dropoff_start {
        Some(start) if distance < -start => {
            let t = cfg.truncation_distance;
            cfg.sample_weight * ((t + distance) / (t - start)).clamp(0.0, 1.0)
        }
        _ => cfg.sample_weight,
    }
}

/// Fuses one depth frame into the map.
///
/// Every voxel whose center projects onto a labelled pixel with a valid range and
/// lies within the truncation band of that measurement receives one sample: the
/// global voxel first votes on its active object, then the projective distance
/// (measured range minus voxel range) is averaged into whichever object is active.
pub fn integrate_frame(
    map: &mut GlobalMap,
    depth: &DepthImage,
    labels: &LabelImage,
    cam: &PinholeCamera,
    camera_pose: &RigidTransform,
    cfg: &IntegrationConfig,
) -> Result<IntegrationStats, MapError> {
    check_dimensions(depth.dimensions(), cam)?;
    check_dimensions(labels.dimensions(), cam)?;
    let used: BTreeSet<ObjectId> = labels.data().iter().flatten().copied().collect();
    if let Some(missing) = used.iter().find(|id| map.object(**id).is_none()) {
        return Err(MapError::UnknownObject(*missing));
    }

    let params = *map.params();
    let blocks = candidate_blocks(&params, depth, labels, cam, camera_pose, cfg.truncation_distance);
    let world_to_cam = camera_pose.inverse();
    let samples: Vec<Sample> = blocks
        .par_iter()
        .flat_map_iter(|b| {
            let mut out = Vec::new();
            for offset in 0..params.voxels_per_block() {
                let g = params.voxel_in_block(b, offset);
                let p_cam = world_to_cam.transform_point(&params.grid_to_world(&g));
                let Some((u, v)) = cam.project_to_pixel(&p_cam) else {
                    continue;
                };
                let (range, label) = (*depth.get(u, v) as f64, *labels.get(u, v));
                let Some(id) = label else { continue };
                if !(range > 0.0 && range.is_finite()) {
                    continue;
                }
                let distance = range - p_cam.norm();
                if distance.abs() <= cfg.truncation_distance {
                    out.push(Sample { g, id, distance });
                }
            }
            out
        })
        .collect();

    let single_layer = map.mode().is_single_layer();
    let (global, objects) = map.split_mut();
    let mut stats = IntegrationStats::default();
    for s in samples {
        let background_observed = objects[&ObjectId::BACKGROUND].weight_at(&s.g) > 0.0;
        let pinned = |o: ObjectId| o.is_background() && background_observed;
        let voxel = global.get_or_allocate(&s.g)?;
        let outcome = voxel.update_confidence(s.id, pinned, single_layer);
        let active = voxel.active_id().expect("confidence update always leaves an active layer");
        match outcome {
            ConfidenceUpdate::Reinforced | ConfidenceUpdate::Initialized | ConfidenceUpdate::Promoted => {
                stats.reinforced += 1
            }
            ConfidenceUpdate::Weakened => stats.weakened += 1,
            ConfidenceUpdate::Swapped { former, activation } => {
                stats.swapped += 1;
                if single_layer && activation.dropped == Some(former) {
                    // one field per voxel: the surface changes owner, not value
                    let carried = objects
                        .get_mut(&former)
                        .and_then(|o| o.grid_mut().get_mut(&s.g).map(std::mem::take));
                    if let Some(carried) = carried.filter(|v| v.is_observed()) {
                        if let Some(target) = objects.get_mut(&active) {
                            target.set_voxel(&s.g, carried)?;
                        }
                    }
                }
            }
        }
        let volume = objects.get_mut(&active).ok_or(MapError::UnknownObject(active))?;
        fuse_sample(volume.grid_mut().get_or_allocate(&s.g)?, s.distance, cfg);
        stats.samples += 1;
    }
    Ok(stats)
}

fn check_dimensions(dims: (u32, u32), cam: &PinholeCamera) -> Result<(), MapError> {
    if dims != (cam.width, cam.height) {
        return Err(MapError::DimensionMismatch(format!(
            "image is {}x{}, camera expects {}x{}",
            dims.0, dims.1, cam.width, cam.height
        )));
    }
    Ok(())
}

/// Blocks touched by the truncation band of any labelled pixel, sorted.
fn candidate_blocks(
    params: &GridParams,
    depth: &DepthImage,
    labels: &LabelImage,
    cam: &PinholeCamera,
    camera_pose: &RigidTransform,
    truncation: f64,
) -> Vec<BlockIndex> {
    let step = 0.5 * params.voxel_size;
    let origin = *camera_pose.translation();
    let mut blocks: Vec<BlockIndex> = (0..cam.height)
        .into_par_iter()
        .flat_map_iter(|v| {
            let mut row = Vec::new();
            for u in 0..cam.width {
                let range = *depth.get(u, v) as f64;
                if labels.get(u, v).is_none() || !(range > 0.0 && range.is_finite()) {
                    continue;
                }
                let dir = camera_pose.transform_vector(&cam.ray_direction(u, v));
                let (start, end) = ((range - truncation).max(0.0), range + truncation);
                let mut s = start;
                loop {
                    row.push(params.block_of(&params.world_to_grid(&(origin + dir * s))));
                    if s >= end {
                        break;
                    }
                    s = (s + step).min(end);
                }
            }
            row.sort_unstable();
            row.dedup();
            row
        })
        .collect();
    blocks.sort_unstable();
    blocks.dedup();
    blocks
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseUpdateStats {
    pub deactivated: usize,
    pub transported: usize,
    pub demoted: usize,
    pub dropped: usize,
}

/// Moves object `id` by `motion` (old pose to new pose, global frame).
///
/// The object is first withdrawn from every global voxel, letting the inactive
/// layer take over. Its field is then resampled at each destination voxel center
/// `p` from `motion⁻¹·p` by trilinear interpolation of distance and weight, keeping
/// only samples whose interpolation neighbors are all observed. Finally the object
/// becomes active with confidence 1 wherever the moved field is defined, pushing
/// the incumbent down a layer.
pub fn update_object_pose(map: &mut GlobalMap, id: ObjectId, motion: &RigidTransform) -> Result<PoseUpdateStats, MapError> {
    if id.is_background() {
        return Err(MapError::BackgroundImmovable);
    }
    if map.object(id).is_none() {
        return Err(MapError::UnknownObject(id));
    }
    let params = *map.params();
    let single_layer = map.mode().is_single_layer();
    let (global, objects) = map.split_mut();
    let mut stats = PoseUpdateStats::default();

    let source = &objects[&id];
    for b in source.grid().sorted_block_indices() {
        if let Some(block) = global.block_mut(&b) {
            for voxel in block.iter_mut() {
                stats.deactivated += voxel.deactivate(id) as usize;
            }
        }
    }

    let moved = transport(source.grid(), motion, &params);

    for (g, v) in moved.iter() {
        if !v.is_observed() {
            continue;
        }
        stats.transported += 1;
        let background_observed = objects[&ObjectId::BACKGROUND].weight_at(&g) > 0.0;
        let voxel = global.get_or_allocate(&g)?;
        let act = voxel.activate(id, |o| o.is_background() && background_observed, single_layer);
        stats.demoted += act.demoted.is_some() as usize;
        if let Some(dropped) = act.dropped {
            stats.dropped += 1;
            if single_layer {
                if let Some(v) = objects.get_mut(&dropped).and_then(|o| o.grid_mut().get_mut(&g)) {
                    *v = TsdfVoxel::default();
                }
            }
        }
    }
    objects.get_mut(&id).expect("checked above").replace_grid(moved);
    Ok(stats)
}

/// Resamples `source` under `motion`, working in voxel units so that identity and
/// integral lattice shifts reproduce stored values exactly.
fn transport(source: &BlockGrid<TsdfVoxel>, motion: &RigidTransform, params: &GridParams) -> BlockGrid<TsdfVoxel> {
    let mut moved = BlockGrid::new(*params);
    let Some((lo, hi)) = source.block_bounds() else {
        return moved;
    };
    let n = params.voxels_per_block_side as f64;
    let rt = motion.rotation().transpose();
    let t_grid = motion.translation() / params.voxel_size;
    let forward = |q: Vec3| motion.rotation() * q + t_grid;
    let backward = |q: Vec3| rt * (q - t_grid);

    let (dst_lo, dst_hi) = transformed_block_range(&lo, &hi, n, forward);
    let mut candidates = Vec::new();
    for x in dst_lo[0] - 1..=dst_hi[0] + 1 {
        for y in dst_lo[1] - 1..=dst_hi[1] + 1 {
            for z in dst_lo[2] - 1..=dst_hi[2] + 1 {
                let b = BlockIndex([x, y, z]);
                let (src_lo, src_hi) = transformed_block_range(&BlockIndex(b.0.map(|c| c - 1)), &BlockIndex(b.0.map(|c| c + 1)), n, backward);
                let overlaps = (src_lo[0]..=src_hi[0]).any(|sx| {
                    (src_lo[1]..=src_hi[1]).any(|sy| (src_lo[2]..=src_hi[2]).any(|sz| source.contains_block(&BlockIndex([sx, sy, sz]))))
                });
                if overlaps {
                    candidates.push(b);
                }
            }
        }
    }

    let filled: Vec<(BlockIndex, Box<[TsdfVoxel]>)> = candidates
        .par_iter()
        .filter_map(|b| {
            let mut data = vec![TsdfVoxel::default(); params.voxels_per_block()];
            let mut any = false;
            for (offset, slot) in data.iter_mut().enumerate() {
                let g = params.voxel_in_block(b, offset);
                let q_dst = Vec3::new(g.x as f64 + 0.5, g.y as f64 + 0.5, g.z as f64 + 0.5);
                let r = interpolate_grid(source, &backward(q_dst));
                if r.valid && r.weight > 0.0 {
                    *slot = TsdfVoxel::new(r.value, r.weight);
                    any = true;
                }
            }
            any.then(|| (*b, data.into_boxed_slice()))
        })
        .collect();
    for (b, data) in filled {
        moved.insert_block(b, data);
    }
    moved
}

/// Block index range covering the image of blocks `lo..=hi` under `f`, where `f`
/// maps voxel-unit coordinates and `n` is the block side in voxels.
fn transformed_block_range(lo: &BlockIndex, hi: &BlockIndex, n: f64, f: impl Fn(Vec3) -> Vec3) -> ([i32; 3], [i32; 3]) {
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for corner in 0..8 {
        let pick = |k: usize, axis: usize| {
            if corner & (1 << k) != 0 {
                (hi.0[axis] + 1) as f64 * n
            } else {
                lo.0[axis] as f64 * n
            }
        };
        let q = f(Vec3::new(pick(0, 0), pick(1, 1), pick(2, 2)));
        min = min.inf(&q);
        max = max.sup(&q);
    }
    let to_block = |c: f64| (c / n).floor() as i32;
    (
        [to_block(min.x), to_block(min.y), to_block(min.z)],
        [to_block(max.x), to_block(max.y), to_block(max.z)],
    )
}

/// Non-destructive view of a map with some objects hidden: wherever a hidden
/// object is active, its inactive neighbor shows through.
#[derive(Clone, Debug)]
pub struct MapView<'a> {
    map: &'a GlobalMap,
    removed: BTreeSet<ObjectId>,
}

impl<'a> MapView<'a> {
    pub fn new(map: &'a GlobalMap) -> Self {
        Self {
            map,
            removed: BTreeSet::new(),
        }
    }

    pub fn without(mut self, id: ObjectId) -> Result<Self, MapError> {
        if self.map.object(id).is_none() {
            return Err(MapError::UnknownObject(id));
        }
        self.removed.insert(id);
        Ok(self)
    }

    pub fn map(&self) -> &'a GlobalMap {
        self.map
    }

    pub fn removed(&self) -> &BTreeSet<ObjectId> {
        &self.removed
    }

    pub fn active_at(&self, g: &GridIndex) -> Option<ObjectId> {
        let voxel = self.map.voxel(g)?;
        [voxel.active_id(), voxel.inactive_id()]
            .into_iter()
            .flatten()
            .find(|id| !self.removed.contains(id))
    }

    /// Surface of `id` restricted to cells where it is the visible layer.
    pub fn object_mesh(&self, id: ObjectId) -> Result<TriangleMesh, MapError> {
        let volume = self.map.object(id).ok_or(MapError::UnknownObject(id))?;
        Ok(extract_mesh_filtered(volume, |g| self.active_at(g) == Some(id)))
    }

    /// Visible-layer meshes of every object that is not hidden, by ascending id.
    pub fn scene_meshes(&self) -> Vec<(ObjectId, TriangleMesh)> {
        self.map
            .objects()
            .keys()
            .filter(|id| !self.removed.contains(id))
            .map(|&id| (id, self.object_mesh(id).expect("id from map")))
            .filter(|(_, m)| !m.is_empty())
            .collect()
    }
}

/// Hides `id` from `map` without modifying it.
pub fn simulate_removal(map: &GlobalMap, id: ObjectId) -> Result<MapView<'_>, MapError> {
    MapView::new(map).without(id)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaycastHit {
    pub pixel: (u32, u32),
    pub point: Vec3,
    pub object: ObjectId,
    /// Range from the camera center along the pixel ray.
    pub depth: f64,
}

pub fn raycast(map: &GlobalMap, cam: &PinholeCamera, camera_pose: &RigidTransform) -> Image<Option<RaycastHit>> {
    raycast_view(&MapView::new(map), cam, camera_pose)
}

/// One march per pixel through the global volume, sampling only the visible
/// layer; reports the first positive-to-negative crossing of a single object.
pub fn raycast_view(view: &MapView<'_>, cam: &PinholeCamera, camera_pose: &RigidTransform) -> Image<Option<RaycastHit>> {
    let map = view.map();
    let params = *map.params();
    let bounds = map.global().block_bounds().map(|(lo, hi)| {
        let bs = params.block_size();
        let lo = Vec3::new(lo.0[0] as f64, lo.0[1] as f64, lo.0[2] as f64) * bs;
        let hi = Vec3::new(hi.0[0] as f64 + 1.0, hi.0[1] as f64 + 1.0, hi.0[2] as f64 + 1.0) * bs;
        (lo, hi)
    });
    let origin = *camera_pose.translation();
    let hits: Vec<Option<RaycastHit>> = (0..cam.height)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..cam.width).map(move |u| {
                let (lo, hi) = bounds?;
                let dir = camera_pose.transform_vector(&cam.ray_direction(u, v));
                let (t0, t1) = slab_interval(&origin, &dir, &lo, &hi)?;
                let (t, object) = march(view, &params, &origin, &dir, t0, t1)?;
                Some(RaycastHit {
                    pixel: (u, v),
                    point: origin + dir * t,
                    object,
                    depth: t,
                })
            })
        })
        .collect();
    Image::from_vec(cam.width, cam.height, hits).expect("one entry per pixel")
}

fn march(view: &MapView<'_>, params: &GridParams, origin: &Vec3, dir: &Vec3, t0: f64, t1: f64) -> Option<(f64, ObjectId)> {
    let map = view.map();
    // samples sit at whole multiples of the step from the camera, so the result
    // does not depend on where the ray happens to enter the map bounds
    let step = 0.25 * params.voxel_size;
    let mut previous: Option<(f64, f64, ObjectId)> = None;
    let mut k = (t0 / step).ceil();
    while k * step <= t1 {
        let t = k * step;
        let p = origin + dir * t;
        let (g, b) = params.locate(&p);
        if !map.global().contains_block(&b) {
            previous = None;
            let lo = Vec3::new(b.0[0] as f64, b.0[1] as f64, b.0[2] as f64) * params.block_size();
            let exit = slab_interval(origin, dir, &lo, &lo.add_scalar(params.block_size())).map_or(t, |(_, e)| e);
            k = (exit / step).floor().max(k) + 1.0;
            continue;
        }
        let sample = view.active_at(&g).and_then(|id| {
            let r = trilinear_interpolate(map.object(id)?, &p);
            r.valid.then_some((r.value, id))
        });
        match sample {
            Some((d, id)) => {
                if let Some((tp, dp, ip)) = previous {
                    if ip == id && dp > 0.0 && d <= 0.0 {
                        return Some((tp + (t - tp) * dp / (dp - d), id));
                    }
                }
                previous = Some((t, d, id));
            }
            None => previous = None,
        }
        k += 1.0;
    }
    None
}

/// Parameter interval where the ray lies inside the axis-aligned box, clipped to `t ≥ 0`.
fn slab_interval(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k] - origin[k]) / dir[k], (hi[k] - origin[k]) / dir[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{MapMode, Slot};

    fn camera() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap()
    }

    /// Fronto-parallel plane `distance` meters ahead of a camera looking along +z.
    fn plane_depth(cam: &PinholeCamera, distance: f64) -> DepthImage {
        let mut img = Image::filled(cam.width, cam.height, 0.0f32);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let d = cam.ray_direction(u, v);
                *img.get_mut(u, v) = (distance / d.z) as f32;
            }
        }
        img
    }

    #[test]
    fn fuse_sample_arithmetic() {
        let cfg = IntegrationConfig::new(&GridParams::default());
        let mut v = TsdfVoxel::new(0.04, 1.0);
        fuse_sample(&mut v, 0.06, &cfg);
        assert!((v.distance - 0.05).abs() < 1e-15);
        assert_eq!(v.weight, 2.0);
        let mut full = TsdfVoxel::new(0.0, cfg.max_weight);
        fuse_sample(&mut full, 0.01, &cfg);
        assert_eq!(full.weight, cfg.max_weight);
    }

    #[test]
    fn dropoff_weights_fall_behind_the_surface() {
        let mut cfg = IntegrationConfig::new(&GridParams::default());
        assert_eq!(sample_weight(-0.09, &cfg), 1.0);
        cfg.dropoff_start = Some(0.01);
        assert_eq!(sample_weight(0.08, &cfg), 1.0);
        assert_eq!(sample_weight(-0.01, &cfg), 1.0);
        assert!((sample_weight(-0.055, &cfg) - 0.5).abs() < 1e-12);
        assert_eq!(sample_weight(-0.1, &cfg), 0.0);
        let mut v = TsdfVoxel::new(0.02, 1.0);
        fuse_sample(&mut v, -0.1, &cfg);
        assert_eq!(v, TsdfVoxel::new(0.02, 1.0));
        fuse_sample(&mut v, -0.055, &cfg);
        assert!((v.distance - (0.02 - 0.5 * 0.055) / 1.5).abs() < 1e-15);
        assert_eq!(v.weight, 1.5);
    }

    #[test]
    fn plane_voxel_gets_projective_distance() {
        let params = GridParams::default();
        let cfg = IntegrationConfig::new(&params);
        let cam = camera();
        let mut map = GlobalMap::new(params, MapMode::TsdfPlusPlus);
        // optical axis through voxel centers; plane 2 m ahead
        let pose = RigidTransform::from_translation(Vec3::new(0.005, 0.005, -0.005));
        let depth = plane_depth(&cam, 2.0);
        let labels = Image::filled(cam.width, cam.height, Some(ObjectId::BACKGROUND));
        integrate_frame(&mut map, &depth, &labels, &cam, &pose, &cfg).unwrap();
        let v = map.background().voxel(&GridIndex::new(0, 0, 194)).unwrap();
        assert!((v.distance - 0.05).abs() < 1e-6, "{v:?}");
        assert_eq!(v.weight, 1.0);
        assert_eq!(map.voxel(&GridIndex::new(0, 0, 194)).unwrap().active, Some(Slot::new(ObjectId::BACKGROUND, 1)));
        map.check_invariants().unwrap();
    }

    #[test]
    fn unknown_label_is_rejected() {
        let params = GridParams::default();
        let cam = camera();
        let mut map = GlobalMap::new(params, MapMode::TsdfPlusPlus);
        let depth = plane_depth(&cam, 1.0);
        let labels = Image::filled(cam.width, cam.height, Some(ObjectId(9)));
        let err = integrate_frame(&mut map, &depth, &labels, &cam, &RigidTransform::identity(), &IntegrationConfig::new(&params));
        assert!(matches!(err, Err(MapError::UnknownObject(ObjectId(9)))));
    }

    #[test]
    fn plane_raycast_depth() {
        let params = GridParams::default();
        let cfg = IntegrationConfig::new(&params);
        let cam = camera();
        let mut map = GlobalMap::new(params, MapMode::TsdfPlusPlus);
        let depth = plane_depth(&cam, 2.0);
        let labels = Image::filled(cam.width, cam.height, Some(ObjectId::BACKGROUND));
        let pose = RigidTransform::identity();
        integrate_frame(&mut map, &depth, &labels, &cam, &pose, &cfg).unwrap();
        let hits = raycast(&map, &cam, &pose);
        let center = hits.get(40, 30).expect("center pixel hits the plane");
        assert!((center.depth - 2.0).abs() <= params.voxel_size / 2.0, "{}", center.depth);
        assert_eq!(center.object, ObjectId::BACKGROUND);
    }

    #[test]
    fn empty_map_raycast_misses() {
        let map = GlobalMap::new(GridParams::default(), MapMode::TsdfPlusPlus);
        let hits = raycast(&map, &camera(), &RigidTransform::identity());
        assert!(hits.data().iter().all(Option::is_none));
    }

    #[test]
    fn background_cannot_move() {
        let mut map = GlobalMap::new(GridParams::default(), MapMode::TsdfPlusPlus);
        assert!(matches!(
            update_object_pose(&mut map, ObjectId::BACKGROUND, &RigidTransform::identity()),
            Err(MapError::BackgroundImmovable)
        ));
        assert!(matches!(
            update_object_pose(&mut map, ObjectId(4), &RigidTransform::identity()),
            Err(MapError::UnknownObject(_))
        ));
    }

    #[test]
    fn removal_view_is_non_destructive() {
        let params = GridParams::default();
        let mut map = GlobalMap::new(params, MapMode::TsdfPlusPlus);
        let a = map.allocate_object(true);
        let g = GridIndex::new(1, 2, 3);
        map.object_mut(ObjectId::BACKGROUND).unwrap().set_voxel(&g, TsdfVoxel::new(0.01, 1.0)).unwrap();
        map.object_mut(a).unwrap().set_voxel(&g, TsdfVoxel::new(-0.01, 1.0)).unwrap();
        let voxel = map.get_or_allocate_voxel(&g).unwrap();
        voxel.active = Some(Slot::new(a, 2));
        voxel.inactive = Some(Slot::new(ObjectId::BACKGROUND, 5));
        let before = map.clone();
        let view = simulate_removal(&map, a).unwrap();
        assert_eq!(view.active_at(&g), Some(ObjectId::BACKGROUND));
        assert_eq!(MapView::new(&map).active_at(&g), Some(a));
        assert_eq!(map, before);
        assert!(simulate_removal(&map, ObjectId(77)).is_err());
    }
}
