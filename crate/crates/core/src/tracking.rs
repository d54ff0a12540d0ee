//! Frame-to-model object tracking: point-to-plane ICP against the vertices of the
//! object's extracted mesh, minimized with Levenberg–Marquardt.

use std::collections::HashMap;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_from_axis_angle, RigidTransform, Vec3};
use crate::mesh::TriangleMesh;
use crate::voxel::GridParams;

#[derive(Debug, Error, PartialEq)]
pub enum TrackingError {
    #[error("target mesh has no vertices")]
    EmptyMesh,
    #[error("segment has {have} points, tracking needs at least {need}")]
    InsufficientPoints { have: usize, need: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingConfig {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub min_points: usize,
}

impl TrackingConfig {
    pub fn new(params: &GridParams) -> Self {
        Self {
            max_correspondence_distance: 5.0 * params.voxel_size,
            max_iterations: 30,
            rel_tol: 1e-6,
            min_points: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub source: Vec3,
    pub target: Vec3,
    pub normal: Vec3,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Uniform hash grid over mesh vertices with cell size equal to the search radius,
/// so every vertex within the radius lies in the 27 cells around a query.
pub struct VertexIndex<'a> {
    mesh: &'a TriangleMesh,
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> VertexIndex<'a> {
    pub fn new(mesh: &'a TriangleMesh, radius: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, (v, n)) in mesh.vertices.iter().zip(&mesh.normals).enumerate() {
            if n.norm_squared() > 0.0 {
                cells.entry(cell_of(v, radius)).or_default().push(i as u32);
            }
        }
        Self {
            mesh,
            cell: radius,
            cells,
        }
    }

    /// Nearest vertex within the radius; ties go to the smallest vertex index.
    pub fn nearest(&self, p: &Vec3) -> Option<(u32, f64)> {
        let c = cell_of(p, self.cell);
        let mut best: Option<(u32, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &i in ids {
                        let d2 = (self.mesh.vertices[i as usize] - p).norm_squared();
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                        };
                        if better {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        best.filter(|(_, d2)| d2.sqrt() <= self.cell).map(|(i, d2)| (i, d2.sqrt()))
    }
}

fn cell_of(p: &Vec3, size: f64) -> [i64; 3] {
    [(p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64]
}

/// Pairs each transformed segment point with its nearest mesh vertex, dropping
/// pairs farther apart than `max_dist`.
pub fn find_correspondences(
    points: &[Vec3],
    mesh: &TriangleMesh,
    transform: &RigidTransform,
    max_dist: f64,
) -> Result<CorrespondenceSet, TrackingError> {
    if mesh.vertices.is_empty() {
        return Err(TrackingError::EmptyMesh);
    }
    let index = VertexIndex::new(mesh, max_dist);
    Ok(correspond(&index, points, transform))
}

fn correspond(index: &VertexIndex<'_>, points: &[Vec3], transform: &RigidTransform) -> CorrespondenceSet {
    let pairs = points
        .iter()
        .filter_map(|s| {
            let (i, _) = index.nearest(&transform.transform_point(s))?;
            Some(Correspondence {
                source: *s,
                target: index.mesh.vertices[i as usize],
                normal: index.mesh.normals[i as usize],
            })
        })
        .collect();
    CorrespondenceSet { pairs }
}

/// `Σ ((T·s − o)·n)²`.
pub fn point_to_plane_error(transform: &RigidTransform, set: &CorrespondenceSet) -> f64 {
    set.pairs
        .iter()
        .map(|c| {
            let r = (transform.transform_point(&c.source) - c.target).dot(&c.normal);
            r * r
        })
        .sum()
}

/// Applies the increment `ξ = (ω, v)` about `center`: `p ↦ exp(ω)(T·p − c) + c + v`.
pub fn apply_increment(transform: &RigidTransform, xi: &Vector6<f64>, center: &Vec3) -> RigidTransform {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let v = Vec3::new(xi[3], xi[4], xi[5]);
    let r = rotation_from_axis_angle(&omega);
    let step = RigidTransform::from_axis_angle(omega, center - r * center + v);
    step.compose(transform)
}

/// Residuals `(T·s − o)·n` and their Jacobian rows with respect to the increment
/// of [`apply_increment`] at `ξ = 0`.
pub fn residuals_and_jacobian(
    transform: &RigidTransform,
    set: &CorrespondenceSet,
    center: &Vec3,
) -> (Vec<f64>, Vec<Vector6<f64>>) {
    let mut residuals = Vec::with_capacity(set.len());
    let mut rows = Vec::with_capacity(set.len());
    for c in &set.pairs {
        let p = transform.transform_point(&c.source);
        residuals.push((p - c.target).dot(&c.normal));
        let a = (p - center).cross(&c.normal);
        rows.push(Vector6::new(a.x, a.y, a.z, c.normal.x, c.normal.y, c.normal.z));
    }
    (residuals, rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackResult {
    /// Maps segment points onto the model: the inverse of the object's motion.
    pub transform: RigidTransform,
    pub final_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub inlier_count: usize,
}

impl TrackResult {
    /// Motion of the object from the model pose to the observed pose.
    pub fn object_motion(&self) -> RigidTransform {
        self.transform.inverse()
    }
}

/// Registers `points` to `mesh` starting from `initial`.
pub fn track_object(
    points: &[Vec3],
    mesh: &TriangleMesh,
    initial: &RigidTransform,
    cfg: &TrackingConfig,
) -> Result<TrackResult, TrackingError> {
    if points.len() < cfg.min_points {
        return Err(TrackingError::InsufficientPoints {
            have: points.len(),
            need: cfg.min_points,
        });
    }
    if mesh.vertices.is_empty() {
        return Err(TrackingError::EmptyMesh);
    }
    let index = VertexIndex::new(mesh, cfg.max_correspondence_distance);
    let mut transform = *initial;
    let mut lambda = 1e-4;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let set = correspond(&index, points, &transform);
        if set.len() < 6 {
            break;
        }
        let center = set.pairs.iter().map(|c| transform.transform_point(&c.source)).sum::<Vec3>() / set.len() as f64;
        let (residuals, rows) = residuals_and_jacobian(&transform, &set, &center);
        let error: f64 = residuals.iter().map(|r| r * r).sum();
        if error == 0.0 {
            converged = true;
            break;
        }
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (r, j) in residuals.iter().zip(&rows) {
            h += j * j.transpose();
            g += j * *r;
        }
        let mut accepted = None;
        for _ in 0..10 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let xi = -chol.solve(&g);
            let candidate = apply_increment(&transform, &xi, &center);
            let new_error = point_to_plane_error(&candidate, &set);
            if new_error < error {
                lambda = (lambda / 10.0).max(1e-12);
                accepted = Some((candidate, new_error));
                break;
            }
            lambda *= 10.0;
        }
        let Some((candidate, new_error)) = accepted else {
            converged = true;
            break;
        };
        transform = candidate;
        if (error - new_error) / error < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    let set = correspond(&index, points, &transform);
    Ok(TrackResult {
        transform,
        final_error: point_to_plane_error(&transform, &set),
        iterations,
        converged,
        inlier_count: set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_mesh() -> TriangleMesh {
        // Dense point samples on the faces of a 10 cm cube with face normals.
        let mut mesh = TriangleMesh::default();
        let steps = 21;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                for i in 0..steps {
                    for j in 0..steps {
                        let a = -0.05 + 0.1 * i as f64 / (steps - 1) as f64;
                        let b = -0.05 + 0.1 * j as f64 / (steps - 1) as f64;
                        let mut p = Vec3::zeros();
                        p[axis] = 0.05 * sign;
                        p[(axis + 1) % 3] = a;
                        p[(axis + 2) % 3] = b;
                        let mut n = Vec3::zeros();
                        n[axis] = sign;
                        mesh.vertices.push(p);
                        mesh.normals.push(n);
                    }
                }
            }
        }
        mesh
    }

    fn cfg() -> TrackingConfig {
        TrackingConfig::new(&GridParams::default())
    }

    #[test]
    fn self_pairing() {
        let mesh = cube_mesh();
        let set = find_correspondences(&mesh.vertices, &mesh, &RigidTransform::identity(), 0.05).unwrap();
        assert_eq!(set.len(), mesh.vertices.len());
        assert!(set.pairs.iter().all(|c| c.source == c.target));
        let far = RigidTransform::from_translation(Vec3::new(0.2, 0.0, 0.0));
        let none = find_correspondences(&mesh.vertices, &mesh, &far, 0.05).unwrap();
        assert!(none.is_empty());
        assert_eq!(
            find_correspondences(&mesh.vertices, &TriangleMesh::default(), &far, 0.05),
            Err(TrackingError::EmptyMesh)
        );
    }

    #[test]
    fn unit_offset_error() {
        let set = CorrespondenceSet {
            pairs: vec![Correspondence {
                source: Vec3::new(0.0, 0.0, 1.0),
                target: Vec3::zeros(),
                normal: Vec3::z(),
            }],
        };
        assert_eq!(point_to_plane_error(&RigidTransform::identity(), &set), 1.0);
    }

    #[test]
    fn identity_guess_on_exact_model() {
        let mesh = cube_mesh();
        let r = track_object(&mesh.vertices, &mesh, &RigidTransform::identity(), &cfg()).unwrap();
        assert!(r.converged);
        assert!(r.transform.max_abs_diff(&RigidTransform::identity()) < 1e-6);
        assert!(r.final_error < 1e-12);
    }

    #[test]
    fn recovers_translation() {
        let mesh = cube_mesh();
        let motion = RigidTransform::from_translation(Vec3::new(0.05, 0.0, 0.0));
        let seg: Vec<Vec3> = mesh.vertices.iter().map(|p| motion.transform_point(p)).collect();
        let r = track_object(&seg, &mesh, &RigidTransform::identity(), &cfg()).unwrap();
        let est = r.object_motion();
        assert!((est.translation() - motion.translation()).norm() < 1e-4, "{:?}", est.translation());
        assert!(est.rotation_angle().to_degrees() < 0.01);
    }

    #[test]
    fn too_few_points() {
        let mesh = cube_mesh();
        let err = track_object(&mesh.vertices[..10], &mesh, &RigidTransform::identity(), &cfg());
        assert_eq!(err, Err(TrackingError::InsufficientPoints { have: 10, need: 100 }));
    }
}
