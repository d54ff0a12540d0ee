//! Ground-truth measurements for simulated scenes: how much of a surface the map
//! still reconstructs once foreground objects are taken away, and whether the
//! background field was touched while it was covered.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;
use crate::scene::EvaluationSpec;
use crate::simulator::{plane_axes, Primitive, Scene, Shape};
use crate::voxel::{GlobalMap, GridIndex, GridParams, TsdfVoxel};

/// World-frame rectangle of a plane primitive at `frame`.
#[derive(Clone, Copy, Debug)]
struct PlaneRect {
    center: Vec3,
    normal: Vec3,
    u: Vec3,
    v: Vec3,
    half_size: [f64; 2],
}

impl PlaneRect {
    fn of(p: &Primitive, frame: u32) -> Option<Self> {
        let Shape::Plane {
            center,
            normal,
            half_size,
        } = p.shape
        else {
            return None;
        };
        let pose = p.pose_at(frame);
        let (u, v) = plane_axes(&normal);
        Some(Self {
            center: pose.transform_point(&center),
            normal: pose.transform_vector(&normal),
            u: pose.transform_vector(&u),
            v: pose.transform_vector(&v),
            half_size,
        })
    }

    fn local(&self, p: &Vec3) -> (f64, f64, f64) {
        let d = p - self.center;
        (d.dot(&self.u), d.dot(&self.v), d.dot(&self.normal))
    }

    fn inside(&self, a: f64, b: f64) -> bool {
        a.abs() <= self.half_size[0] && b.abs() <= self.half_size[1]
    }
}

/// Whether something stands on the surface at `p`: a ray along the surface normal
/// hits a foreground primitive.
fn covered_by_foreground(scene: &Scene, frame: u32, p: &Vec3, normal: &Vec3) -> bool {
    let origin = p + normal * 1e-6;
    scene
        .primitives
        .iter()
        .filter(|q| q.is_foreground())
        .any(|q| q.ray_intersect(frame, &origin, normal).is_some())
}

/// Uniform samples of the surface region hidden under foreground primitives at
/// `frame`. Returns fewer than `spec.samples` points only when the region is too
/// small to hit within the rejection budget.
pub fn revealed_region(scene: &Scene, spec: &EvaluationSpec, frame: u32) -> Vec<Vec3> {
    let Some(surface) = scene.primitives.get(spec.surface_primitive) else {
        return Vec::new();
    };
    let Some(rect) = PlaneRect::of(surface, frame) else {
        return Vec::new();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pose = surface.pose_at(frame);
    let budget = spec.samples.saturating_mul(1000);
    let mut out = Vec::with_capacity(spec.samples);
    for _ in 0..budget {
        if out.len() == spec.samples {
            break;
        }
        let (local, _) = surface.shape.sample_surface(&mut rng);
        let p = pose.transform_point(&local);
        if covered_by_foreground(scene, frame, &p, &rect.normal) {
            out.push(p);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub samples: usize,
    pub covered: usize,
    /// Covered fraction; 1 for an empty sample set.
    pub completeness: f64,
    pub holes: usize,
}

/// A sample is covered when some mesh vertex lies within `tolerance`. Uncovered
/// samples closer than `adjacency` are connected; components of at least
/// `hole_min_samples` are holes.
pub fn coverage(samples: &[Vec3], meshes: &[&TriangleMesh], tolerance: f64, adjacency: f64, hole_min_samples: usize) -> Coverage {
    let cell = |p: &Vec3| cell_of(p, tolerance);
    let mut grid: HashMap<[i64; 3], Vec<Vec3>> = HashMap::new();
    for v in meshes.iter().flat_map(|m| &m.vertices) {
        grid.entry(cell(v)).or_default().push(*v);
    }
    let near = |p: &Vec3| {
        let c = cell(p);
        neighbor_cells(c).any(|k| grid.get(&k).is_some_and(|vs| vs.iter().any(|v| (v - p).norm() <= tolerance)))
    };
    let uncovered: Vec<Vec3> = samples.iter().filter(|p| !near(p)).copied().collect();
    let covered = samples.len() - uncovered.len();
    let holes = count_clusters(&uncovered, adjacency)
        .into_iter()
        .filter(|&n| n >= hole_min_samples)
        .count();
    Coverage {
        samples: samples.len(),
        covered,
        completeness: if samples.is_empty() {
            1.0
        } else {
            covered as f64 / samples.len() as f64
        },
        holes,
    }
}

fn cell_of(p: &Vec3, size: f64) -> [i64; 3] {
    [(p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64]
}

fn neighbor_cells(c: [i64; 3]) -> impl Iterator<Item = [i64; 3]> {
    (-1..=1).flat_map(move |dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [c[0] + dx, c[1] + dy, c[2] + dz])))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Sizes of the connected components of `points` under the `radius` neighbor relation.
fn count_clusters(points: &[Vec3], radius: f64) -> Vec<usize> {
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p, radius)).or_default().push(i);
    }
    let mut parent: Vec<usize> = (0..points.len()).collect();
    for (i, p) in points.iter().enumerate() {
        for key in neighbor_cells(cell_of(p, radius)) {
            for &j in grid.get(&key).map_or(&[][..], |b| b.as_slice()) {
                if j > i && (points[j] - p).norm() <= radius {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..points.len() {
        *sizes.entry(find(&mut parent, i)).or_default() += 1;
    }
    sizes.into_values().collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Occlusion episodes of observed surface voxels that were compared.
    pub checked: usize,
    /// Episodes after which the background voxel differed bitwise.
    pub changed: usize,
}

fn same_bits(a: Option<TsdfVoxel>, b: Option<TsdfVoxel>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.distance.to_bits() == b.distance.to_bits() && a.weight.to_bits() == b.weight.to_bits(),
        (None, None) => true,
        _ => false,
    }
}

/// Watches background voxels near a surface while foreground primitives cover
/// them. A snapshot is taken when a voxel becomes covered and compared bitwise
/// when it is uncovered again, or at [`OcclusionAudit::finish`].
#[derive(Clone, Debug)]
pub struct OcclusionAudit {
    cells: Vec<GridIndex>,
    centers: Vec<Vec3>,
    rect: PlaneRect,
    shrink: f64,
    covered: Vec<bool>,
    leaving: Vec<bool>,
    snapshots: Vec<Option<TsdfVoxel>>,
    report: AuditReport,
}

impl OcclusionAudit {
    pub fn new(scene: &Scene, spec: &EvaluationSpec, params: &GridParams) -> Option<Self> {
        let rect = PlaneRect::of(scene.primitives.get(spec.surface_primitive)?, 0)?;
        let band = spec.audit_band_voxels * params.voxel_size;
        let reach = rect.u.abs() * rect.half_size[0] + rect.v.abs() * rect.half_size[1] + Vec3::repeat(band);
        let lo = params.world_to_grid(&(rect.center - reach));
        let hi = params.world_to_grid(&(rect.center + reach));
        let mut cells = Vec::new();
        let mut centers = Vec::new();
        for z in lo.z..=hi.z {
            for y in lo.y..=hi.y {
                for x in lo.x..=hi.x {
                    let g = GridIndex::new(x, y, z);
                    let c = params.grid_to_world(&g);
                    let (a, b, h) = rect.local(&c);
                    if h.abs() <= band && rect.inside(a, b) {
                        cells.push(g);
                        centers.push(c);
                    }
                }
            }
        }
        let n = cells.len();
        Some(Self {
            cells,
            centers,
            rect,
            shrink: spec.audit_shrink_voxels * params.voxel_size,
            covered: vec![false; n],
            leaving: vec![false; n],
            snapshots: vec![None; n],
            report: AuditReport::default(),
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Covered at `frame` with a margin: the center and the corners of a square of
    /// half-width `shrink` around its foot point all lie under foreground.
    fn is_covered(&self, scene: &Scene, frame: u32, c: &Vec3) -> bool {
        let (a, b, _) = self.rect.local(c);
        let foot = self.rect.center + self.rect.u * a + self.rect.v * b;
        let n = self.rect.normal;
        if !covered_by_foreground(scene, frame, &foot, &n) {
            return false;
        }
        let s = self.shrink;
        [(s, s), (s, -s), (-s, s), (-s, -s)]
            .iter()
            .all(|&(da, db)| covered_by_foreground(scene, frame, &(foot + self.rect.u * da + self.rect.v * db), &n))
    }

    /// Call before frame `frame` is processed: snapshots voxels that become
    /// covered and marks the ones that become visible again.
    pub fn begin_frame(&mut self, scene: &Scene, frame: u32, map: &GlobalMap) {
        let now: Vec<bool> = self.centers.iter().map(|c| self.is_covered(scene, frame, c)).collect();
        let bg = map.background();
        for (i, &cov) in now.iter().enumerate() {
            if cov && !self.covered[i] {
                self.snapshots[i] = bg.voxel(&self.cells[i]).copied().filter(TsdfVoxel::is_observed);
            }
            self.leaving[i] = !cov && self.covered[i];
        }
        self.covered = now;
    }

    /// Call after the frame's pose updates and before its integration: compares
    /// voxels that just became visible against their snapshot.
    pub fn check_uncovered(&mut self, map: &GlobalMap) {
        for i in 0..self.cells.len() {
            if std::mem::take(&mut self.leaving[i]) {
                self.compare(i, map);
            }
        }
    }

    /// Compares every voxel still covered at the end of the sequence.
    pub fn finish(mut self, map: &GlobalMap) -> AuditReport {
        self.check_uncovered(map);
        for i in 0..self.cells.len() {
            if self.covered[i] {
                self.compare(i, map);
            }
        }
        self.report
    }

    fn compare(&mut self, i: usize, map: &GlobalMap) {
        if let Some(before) = self.snapshots[i].take() {
            self.report.checked += 1;
            let after = map.background().voxel(&self.cells[i]).copied();
            if !same_bits(Some(before), after) {
                log::debug!("audit: background voxel {:?} changed from {:?} to {:?}", self.cells[i], before, after);
                self.report.changed += 1;
            }
        }
    }
}
