//! Tetrahedral lattice over `[-1, 1]^3`, the SDF field living on its
//! vertices, and marching-tetrahedra extraction with analytic position
//! derivatives.
//!
//! Every cube is cut into six tetrahedra around its main diagonal (Kuhn
//! split), so neighboring cubes share conforming face diagonals. Grid edges
//! are enumerated in lexicographic `(a, b)` order with `a < b`; edge ids are
//! positions in that list.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid resolution must be at least 1")]
    ZeroResolution,

    #[error("field has {actual} values, grid has {expected} vertices")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("edge endpoints must have strictly opposite signs, got {0} and {1}")]
    SameSign(f64, f64),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Edge directions from the lower endpoint, ordered by linear index offset.
const EDGE_DIRS: [[usize; 3]; 7] = [
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Local tet edge order used by [`TetGrid::tet_edges`].
pub const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

const NO_EDGE: u32 = u32::MAX;

/// Negative values are inside; zero counts as outside.
#[inline]
pub fn is_inside(s: f64) -> bool {
    s < 0.0
}

#[derive(Debug, Clone)]
pub struct TetGrid {
    n: usize,
    vertices: Vec<Vector3<f64>>,
    tets: Vec<[u32; 4]>,
    edges: Vec<[u32; 2]>,
    tet_edges: Vec<[u32; 6]>,
}

/// One Kuhn tet as cube-corner bit patterns (bit 0 = x, 1 = y, 2 = z).
fn kuhn_patterns() -> [[usize; 4]; 6] {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let corner = |bits: usize| Vector3::new((bits & 1) as f64, ((bits >> 1) & 1) as f64, ((bits >> 2) & 1) as f64);
    let mut out = [[0usize; 4]; 6];
    for (slot, perm) in PERMS.iter().enumerate() {
        let v1 = 1 << perm[0];
        let v2 = v1 | (1 << perm[1]);
        let mut tet = [0, v1, v2, 7];
        let (p0, p1, p2, p3) = (corner(tet[0]), corner(tet[1]), corner(tet[2]), corner(tet[3]));
        if (p1 - p0).cross(&(p2 - p0)).dot(&(p3 - p0)) < 0.0 {
            tet.swap(1, 2);
        }
        out[slot] = tet;
    }
    out
}

impl TetGrid {
    /// Uniform lattice with `n` cells per axis: `(n+1)^3` vertices, `6 n^3` tets.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(GridError::ZeroResolution);
        }
        let side = n + 1;
        let vid = |x: usize, y: usize, z: usize| (x + side * (y + side * z)) as u32;
        let h = 2.0 / n as f64;

        let mut vertices = Vec::with_capacity(side * side * side);
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    vertices.push(Vector3::new(-1.0 + h * x as f64, -1.0 + h * y as f64, -1.0 + h * z as f64));
                }
            }
        }

        let mut edges = Vec::with_capacity(7 * vertices.len());
        let mut edge_lookup = vec![NO_EDGE; 7 * vertices.len()];
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    let a = vid(x, y, z);
                    for (d, dir) in EDGE_DIRS.iter().enumerate() {
                        let (bx, by, bz) = (x + dir[0], y + dir[1], z + dir[2]);
                        if bx < side && by < side && bz < side {
                            edge_lookup[a as usize * 7 + d] = edges.len() as u32;
                            edges.push([a, vid(bx, by, bz)]);
                        }
                    }
                }
            }
        }

        let patterns = kuhn_patterns();
        // Per pattern and local edge: (corner bits of lower endpoint, direction index).
        let mut local_edges = [[(0usize, 0usize); 6]; 6];
        for (p, tet) in patterns.iter().enumerate() {
            for (e, &(i, j)) in TET_EDGES.iter().enumerate() {
                let (lo, hi) = (tet[i].min(tet[j]), tet[i].max(tet[j]));
                let delta = [(hi & 1) - (lo & 1), ((hi >> 1) & 1) - ((lo >> 1) & 1), ((hi >> 2) & 1) - ((lo >> 2) & 1)];
                let dir = EDGE_DIRS.iter().position(|d| *d == delta).expect("Kuhn edge direction");
                local_edges[p][e] = (lo, dir);
            }
        }

        let mut tets = Vec::with_capacity(6 * n * n * n);
        let mut tet_edges = Vec::with_capacity(6 * n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let corner = |bits: usize| vid(x + (bits & 1), y + ((bits >> 1) & 1), z + ((bits >> 2) & 1));
                    for (p, tet) in patterns.iter().enumerate() {
                        tets.push(tet.map(corner));
                        tet_edges.push(local_edges[p].map(|(lo, dir)| edge_lookup[corner(lo) as usize * 7 + dir]));
                    }
                }
            }
        }

        Ok(Self {
            n,
            vertices,
            tets,
            edges,
            tet_edges,
        })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn cell_size(&self) -> f64 {
        2.0 / self.n as f64
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn tets(&self) -> &[[u32; 4]] {
        &self.tets
    }

    /// Deduplicated `(a, b)` pairs with `a < b`, lexicographically sorted.
    pub fn edges(&self) -> &[[u32; 2]] {
        &self.edges
    }

    /// Global edge ids of each tet, in [`TET_EDGES`] order.
    pub fn tet_edges(&self) -> &[[u32; 6]] {
        &self.tet_edges
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t].map(|v| self.vertices[v as usize]);
        (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
    }
}

/// Per-vertex SDF values (negative inside) with optional vertex offsets.
///
/// Offsets are stored as unconstrained parameters; the applied displacement
/// is `tanh(param) / n`, i.e. bounded by half a cell per component.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfField {
    pub values: Vec<f64>,
    pub offsets: Option<Vec<Vector3<f64>>>,
}

impl SdfField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, offsets: None }
    }

    pub fn from_fn(grid: &TetGrid, f: impl Fn(&Vector3<f64>) -> f64) -> Self {
        Self::new(grid.vertices().iter().map(f).collect())
    }

    pub fn check(&self, grid: &TetGrid) -> Result<()> {
        let check_len = |actual: usize| {
            if actual != grid.num_vertices() {
                Err(GridError::SizeMismatch {
                    expected: grid.num_vertices(),
                    actual,
                })
            } else {
                Ok(())
            }
        };
        check_len(self.values.len())?;
        if let Some(off) = &self.offsets {
            check_len(off.len())?;
        }
        Ok(())
    }

    /// Applied displacement of grid vertex `k`.
    pub fn displacement(&self, grid: &TetGrid, k: usize) -> Vector3<f64> {
        match &self.offsets {
            Some(off) => off[k].map(f64::tanh) / grid.resolution() as f64,
            None => Vector3::zeros(),
        }
    }

    /// Grid vertex position including its displacement.
    pub fn position(&self, grid: &TetGrid, k: usize) -> Vector3<f64> {
        grid.vertices()[k] + self.displacement(grid, k)
    }
}

/// Gradient with respect to an [`SdfField`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub values: Vec<f64>,
    pub offsets: Option<Vec<Vector3<f64>>>,
}

impl FieldGrad {
    pub fn zeros_like(field: &SdfField) -> Self {
        Self {
            values: vec![0.0; field.values.len()],
            offsets: field.offsets.as_ref().map(|o| vec![Vector3::zeros(); o.len()]),
        }
    }
}

/// Triangle mesh; faces are counterclockwise seen from outside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>) -> Self {
        Self { vertices, faces }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn is_valid(&self) -> bool {
        let nv = self.vertices.len() as u32;
        self.faces
            .iter()
            .all(|f| f.iter().all(|&i| i < nv) && f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
    }
}

/// Zero crossing on grid edge `(a, b)` with its position Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCrossing {
    pub edge: u32,
    pub a: u32,
    pub b: u32,
    /// `s_a / (s_a - s_b)`.
    pub t: f64,
    pub d_sa: Vector3<f64>,
    pub d_sb: Vector3<f64>,
}

/// Provenance of each mesh vertex, indexed like the mesh vertices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VertexProvenance {
    pub crossings: Vec<EdgeCrossing>,
}

impl VertexProvenance {
    pub fn len(&self) -> usize {
        self.crossings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crossings.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeVertex {
    pub position: Vector3<f64>,
    pub d_sa: Vector3<f64>,
    pub d_sb: Vector3<f64>,
}

/// Linear zero crossing between `p_a` (value `s_a`) and `p_b` (value `s_b`).
pub fn edge_vertex(s_a: f64, s_b: f64, p_a: &Vector3<f64>, p_b: &Vector3<f64>) -> Result<EdgeVertex> {
    if !((s_a < 0.0 && s_b > 0.0) || (s_a > 0.0 && s_b < 0.0)) {
        return Err(GridError::SameSign(s_a, s_b));
    }
    let denom = s_a - s_b;
    let t = s_a / denom;
    let edge = p_b - p_a;
    let inv_sq = 1.0 / (denom * denom);
    Ok(EdgeVertex {
        position: p_a + edge * t,
        d_sa: edge * (-s_b * inv_sq),
        d_sb: edge * (s_a * inv_sq),
    })
}

const TET_CHUNK: usize = 1 << 14;

/// Marching tetrahedra. Mesh vertices are numbered in grid-edge id order and
/// faces in tet order, so the output does not depend on the thread count.
pub fn marching_tets(grid: &TetGrid, field: &SdfField) -> Result<(TriMesh, VertexProvenance)> {
    field.check(grid)?;
    let s = &field.values;
    let has_offsets = field.offsets.is_some();
    let pos = |k: u32| -> Vector3<f64> {
        if has_offsets {
            field.position(grid, k as usize)
        } else {
            grid.vertices[k as usize]
        }
    };

    let mut edge_to_vertex = vec![NO_EDGE; grid.edges.len()];
    let mut vertices = Vec::new();
    let mut crossings = Vec::new();
    for (id, &[a, b]) in grid.edges.iter().enumerate() {
        let (sa, sb) = (s[a as usize], s[b as usize]);
        if is_inside(sa) == is_inside(sb) {
            continue;
        }
        // sign(0) counts as positive, so a zero endpoint gets nudged to the
        // smallest positive value to keep the crossing strictly interior.
        let (sa_eff, sb_eff) = (nudge_zero(sa), nudge_zero(sb));
        let ev = edge_vertex(sa_eff, sb_eff, &pos(a), &pos(b))?;
        edge_to_vertex[id] = vertices.len() as u32;
        vertices.push(ev.position);
        crossings.push(EdgeCrossing {
            edge: id as u32,
            a,
            b,
            t: sa_eff / (sa_eff - sb_eff),
            d_sa: ev.d_sa,
            d_sb: ev.d_sb,
        });
    }

    let faces: Vec<[u32; 3]> = grid
        .tets
        .par_chunks(TET_CHUNK)
        .zip(grid.tet_edges.par_chunks(TET_CHUNK))
        .map(|(tets, tet_edges)| {
            let mut out = Vec::new();
            for (tet, edges) in tets.iter().zip(tet_edges) {
                emit_tet(grid, s, tet, edges, &edge_to_vertex, &mut out);
            }
            out
        })
        .collect::<Vec<_>>()
        .concat();

    Ok((TriMesh { vertices, faces }, VertexProvenance { crossings }))
}

#[inline]
fn nudge_zero(s: f64) -> f64 {
    if s == 0.0 {
        f64::MIN_POSITIVE
    } else {
        s
    }
}

fn local_edge(i: usize, j: usize) -> usize {
    let (i, j) = (i.min(j), i.max(j));
    TET_EDGES.iter().position(|&e| e == (i, j)).expect("local edge")
}

fn emit_tet(
    grid: &TetGrid,
    s: &[f64],
    tet: &[u32; 4],
    edges: &[u32; 6],
    edge_to_vertex: &[u32],
    out: &mut Vec<[u32; 3]>,
) {
    let inside = tet.map(|v| is_inside(s[v as usize]));
    let n_inside = inside.iter().filter(|&&b| b).count();
    if n_inside == 0 || n_inside == 4 {
        return;
    }
    // Orientation is decided on the undisplaced lattice using edge midpoints,
    // which is robust regardless of where along an edge the crossing lies.
    let gp = |local: usize| grid.vertices[tet[local] as usize];
    let mid = |i: usize, j: usize| (gp(i) + gp(j)) * 0.5;

    if n_inside == 1 || n_inside == 3 {
        let lone = (0..4).find(|&i| (n_inside == 1) == inside[i]).unwrap();
        let others: Vec<usize> = (0..4).filter(|&i| i != lone).collect();
        let mut tri = [others[0], others[1], others[2]];
        let m: Vec<Vector3<f64>> = tri.iter().map(|&o| mid(lone, o)).collect();
        let normal = (m[1] - m[0]).cross(&(m[2] - m[0]));
        let centroid = (gp(others[0]) + gp(others[1]) + gp(others[2])) / 3.0;
        // Toward positive: away from an inside lone vertex, toward an outside one.
        let outward = if inside[lone] { centroid - gp(lone) } else { gp(lone) - centroid };
        if normal.dot(&outward) < 0.0 {
            tri.swap(1, 2);
        }
        out.push(tri.map(|o| edge_to_vertex[edges[local_edge(lone, o)] as usize]));
        return;
    }

    let ins: Vec<usize> = (0..4).filter(|&i| inside[i]).collect();
    let outs: Vec<usize> = (0..4).filter(|&i| !inside[i]).collect();
    let (a, b, c, d) = (ins[0], ins[1], outs[0], outs[1]);
    // Cyclic quad: AC, AD, BD, BC.
    let mut quad = [(a, c), (a, d), (b, d), (b, c)];
    let m = quad.map(|(i, j)| mid(i, j));
    let normal = (m[2] - m[0]).cross(&(m[3] - m[1]));
    let outward = (gp(c) + gp(d)) * 0.5 - (gp(a) + gp(b)) * 0.5;
    if normal.dot(&outward) < 0.0 {
        quad.swap(1, 3);
    }
    let ids = quad.map(|(i, j)| edges[local_edge(i, j)]);
    let k = (0..4).min_by_key(|&i| ids[i]).unwrap();
    let v = |i: usize| edge_to_vertex[ids[(k + i) % 4] as usize];
    out.push([v(0), v(1), v(2)]);
    out.push([v(0), v(2), v(3)]);
}
