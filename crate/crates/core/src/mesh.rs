//! Marching-cubes extraction of object surfaces and PLY export.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};

use crate::geometry::Vec3;
use crate::mc_tables::TRIANGLE_TABLE;
use crate::voxel::{GridIndex, ObjectId, ObjectVolume};

/// Cube corner offsets in marching-cubes order.
const CORNERS: [(i64, i64, i64); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// `V − E + F` over the unique undirected triangle edges.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Per-vertex normals as the normalized sum of incident face cross products,
    /// which weights each face by twice its area.
    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in t {
                acc[i as usize] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
    }
}

/// Zero isosurface of `volume` over all allocated cells.
pub fn extract_mesh(volume: &ObjectVolume) -> TriangleMesh {
    extract_mesh_filtered(volume, |_| true)
}

/// Like [`extract_mesh`], but only cells whose eight corners all satisfy
/// `include` are triangulated.
pub fn extract_mesh_filtered(volume: &ObjectVolume, include: impl Fn(&GridIndex) -> bool) -> TriangleMesh {
    let params = *volume.params();
    let mut mesh = TriangleMesh::default();
    let mut vertex_of_edge: HashMap<(GridIndex, u8), u32> = HashMap::new();
    let mut values = [0.0f64; 8];
    let mut points = [Vec3::zeros(); 8];
    let mut corner_index = [GridIndex::new(0, 0, 0); 8];

    for (g, v) in volume.grid().iter() {
        if !v.is_observed() {
            continue;
        }
        let mut complete = true;
        for (k, &(dx, dy, dz)) in CORNERS.iter().enumerate() {
            let c = g.offset(dx, dy, dz);
            match volume.voxel(&c) {
                Some(cv) if cv.is_observed() && include(&c) => {
                    values[k] = cv.distance;
                    corner_index[k] = c;
                    points[k] = params.grid_to_world(&c);
                }
                _ => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        let mut case = 0usize;
        for (k, &d) in values.iter().enumerate() {
            if d < 0.0 {
                case |= 1 << k;
            }
        }
        if case == 0 || case == 255 {
            continue;
        }
        let row = &TRIANGLE_TABLE[case];
        for tri in row.chunks(3) {
            if tri[0] < 0 {
                break;
            }
            let mut ids = [0u32; 3];
            for (slot, &e) in ids.iter_mut().zip(tri) {
                let (a, b) = EDGES[e as usize];
                let lo = corner_index[a].min(corner_index[b]);
                let axis = axis_of(&corner_index[a], &corner_index[b]);
                *slot = *vertex_of_edge.entry((lo, axis)).or_insert_with(|| {
                    let (da, db) = (values[a], values[b]);
                    let t = da / (da - db);
                    mesh.vertices.push(points[a] + (points[b] - points[a]) * t);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                // the table winds counter-clockwise around the negative side
                mesh.triangles.push([ids[0], ids[2], ids[1]]);
            }
        }
    }
    mesh.recompute_normals();
    mesh
}

fn axis_of(a: &GridIndex, b: &GridIndex) -> u8 {
    if a.x != b.x {
        0
    } else if a.y != b.y {
        1
    } else {
        2
    }
}

/// Display color of an object: neutral gray for the background, evenly spread
/// hues for everything else.
pub fn object_color(id: ObjectId) -> [u8; 3] {
    if id.is_background() {
        return [170, 170, 170];
    }
    let hue = (id.0 as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let scale = |c: f64| (55.0 + 200.0 * c).round() as u8;
    [scale(r), scale(g), scale(b)]
}

/// Binary little-endian PLY with position, normal and per-object color.
pub fn write_ply<W: Write>(out: &mut W, parts: &[(ObjectId, &TriangleMesh)]) -> io::Result<()> {
    let vertex_count: usize = parts.iter().map(|(_, m)| m.vertices.len()).sum();
    let face_count: usize = parts.iter().map(|(_, m)| m.triangles.len()).sum();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {vertex_count}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {face_count}\nproperty list uchar int vertex_indices\nend_header\n"
    )?;
    for (id, mesh) in parts {
        let color = object_color(*id);
        for (p, n) in mesh.vertices.iter().zip(&mesh.normals) {
            for c in p.iter().chain(n.iter()) {
                out.write_all(&(*c as f32).to_le_bytes())?;
            }
            out.write_all(&color)?;
        }
    }
    let mut base = 0i32;
    for (_, mesh) in parts {
        for t in &mesh.triangles {
            out.write_all(&[3u8])?;
            for &i in t {
                out.write_all(&(base + i as i32).to_le_bytes())?;
            }
        }
        base += mesh.vertices.len() as i32;
    }
    Ok(())
}
