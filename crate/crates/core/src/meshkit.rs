//! Mesh export and quality analysis: boundary loops, roughness, connected
//! components, chamfer distance, and an exact (non-differentiable)
//! silhouette rasterizer with IoU.
//!
//! The rasterizer here shares no code with the soft renderer so evaluation
//! is independent of the training path.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::quat_to_rotmat;
use crate::dataprep::{ImageBuffer, View};
use crate::tetgrid::TriMesh;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("OBJ line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("mesh has no faces")]
    Empty,

    #[error("mesh has zero surface area")]
    ZeroArea,

    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MeshError>;

// ---------------------------------------------------------------------------
// OBJ
// ---------------------------------------------------------------------------

const OBJ_HEADER: &str = "# thinrecon mesh\n";

/// Formats like C's `%.9g`.
fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..9).contains(&exp) {
        format!("{}e{exp}", trim(mantissa))
    } else {
        trim(&format!("{:.*}", (8 - exp) as usize, x))
    }
}

/// Wavefront OBJ text: `v` lines with 9 significant digits, then 1-indexed `f` lines.
pub fn export_obj(mesh: &TriMesh) -> String {
    let mut out = String::from(OBJ_HEADER);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", fmt_g9(v.x), fmt_g9(v.y), fmt_g9(v.z));
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// Parses `v` and `f` records. Polygons are fan-triangulated, `v/vt/vn`
/// references use the vertex index, and negative indices are relative.
pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut mesh = TriMesh::default();
    for (idx, line) in text.lines().enumerate() {
        let err = |msg: String| MeshError::Parse { line: idx + 1, msg };
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    let tok = toks.next().ok_or_else(|| err("vertex needs 3 coordinates".into()))?;
                    *slot = tok.parse().map_err(|_| err(format!("bad coordinate '{tok}'")))?;
                }
                mesh.vertices.push(Vector3::from(c));
            }
            Some("f") => {
                let mut ids = Vec::new();
                for tok in toks {
                    let head = tok.split('/').next().unwrap_or("");
                    let raw: i64 = head.parse().map_err(|_| err(format!("bad index '{tok}'")))?;
                    let n = mesh.vertices.len() as i64;
                    let id = if raw > 0 { raw - 1 } else { n + raw };
                    if raw == 0 || id < 0 || id >= n {
                        return Err(err(format!("index {raw} out of range")));
                    }
                    ids.push(id as u32);
                }
                if ids.len() < 3 {
                    return Err(err("face needs at least 3 vertices".into()));
                }
                for k in 1..ids.len() - 1 {
                    mesh.faces.push([ids[0], ids[k], ids[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    std::fs::write(path, export_obj(mesh)).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

/// Undirected edge with its incident faces and traversal directions.
#[derive(Debug, Clone)]
struct EdgeUse {
    key: [u32; 2],
    faces: Vec<u32>,
    /// `true` where the face traverses `key[0] -> key[1]`.
    forward: Vec<bool>,
}

fn edge_uses(mesh: &TriMesh) -> Vec<EdgeUse> {
    let mut half: Vec<([u32; 2], u32, bool)> = Vec::with_capacity(mesh.faces.len() * 3);
    for (fi, f) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            half.push(([a.min(b), a.max(b)], fi as u32, a < b));
        }
    }
    half.sort_unstable();
    let mut out: Vec<EdgeUse> = Vec::new();
    for (key, face, fwd) in half {
        match out.last_mut() {
            Some(last) if last.key == key => {
                last.faces.push(face);
                last.forward.push(fwd);
            }
            _ => out.push(EdgeUse {
                key,
                faces: vec![face],
                forward: vec![fwd],
            }),
        }
    }
    out
}

/// Boundary loops and non-manifold edges of a mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryReport {
    /// Each loop as a chain of undirected edges.
    pub loops: Vec<Vec<[u32; 2]>>,
    /// Edges with more than two incident faces.
    pub non_manifold_edges: Vec<[u32; 2]>,
}

impl BoundaryReport {
    pub fn loop_count(&self) -> usize {
        self.loops.len()
    }
}

/// Chains the edges that border exactly one face into loops. A chain that
/// cannot be closed (only possible on malformed input) still counts as one.
pub fn boundary_loops(mesh: &TriMesh) -> BoundaryReport {
    let uses = edge_uses(mesh);
    let boundary: Vec<[u32; 2]> = uses.iter().filter(|e| e.faces.len() == 1).map(|e| e.key).collect();
    let non_manifold_edges = uses.iter().filter(|e| e.faces.len() > 2).map(|e| e.key).collect();

    // Vertex -> incident boundary edge indices (ascending).
    let mut incident: std::collections::BTreeMap<u32, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, e) in boundary.iter().enumerate() {
        incident.entry(e[0]).or_default().push(i);
        incident.entry(e[1]).or_default().push(i);
    }
    let mut used = vec![false; boundary.len()];
    let mut loops = Vec::new();
    for start in 0..boundary.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let origin = boundary[start][0];
        let mut current = boundary[start][1];
        let mut chain = vec![boundary[start]];
        while current != origin {
            let next = incident[&current].iter().copied().find(|&i| !used[i]);
            let Some(next) = next else { break };
            used[next] = true;
            let e = boundary[next];
            current = if e[0] == current { e[1] } else { e[0] };
            chain.push(e);
        }
        loops.push(chain);
    }
    BoundaryReport {
        loops,
        non_manifold_edges,
    }
}

/// Every edge borders exactly two faces that traverse it in opposite directions.
pub fn is_watertight(mesh: &TriMesh) -> bool {
    !mesh.faces.is_empty()
        && edge_uses(mesh)
            .iter()
            .all(|e| e.faces.len() == 2 && e.forward[0] != e.forward[1])
}

fn face_normal(mesh: &TriMesh, f: &[u32; 3]) -> Vector3<f64> {
    let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
    (b - a).cross(&(c - a))
}

/// Mean of `1 - cos(theta)` over interior edges, `theta` being the angle
/// between the two adjacent face normals. Edges next to a zero-area face are
/// skipped. Returns 0 when no interior edge exists.
pub fn roughness(mesh: &TriMesh) -> f64 {
    let normals: Vec<Option<Vector3<f64>>> = mesh
        .faces
        .iter()
        .map(|f| {
            let n = face_normal(mesh, f);
            let len = n.norm();
            (len > 0.0).then(|| n / len)
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for e in edge_uses(mesh).iter().filter(|e| e.faces.len() == 2) {
        if let (Some(n0), Some(n1)) = (normals[e.faces[0] as usize], normals[e.faces[1] as usize]) {
            sum += 1.0 - n0.dot(&n1).clamp(-1.0, 1.0);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Number of face components connected through shared edges.
pub fn connected_components(mesh: &TriMesh) -> usize {
    let mut parent: Vec<u32> = (0..mesh.faces.len() as u32).collect();
    for e in edge_uses(mesh) {
        for w in e.faces.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a.max(b) as usize] = a.min(b);
            }
        }
    }
    (0..mesh.faces.len() as u32).filter(|&f| find(&mut parent, f) == f).count()
}

pub fn surface_area(mesh: &TriMesh) -> f64 {
    mesh.faces.iter().map(|f| face_normal(mesh, f).norm() * 0.5).sum()
}

/// Topology and quality summary of a mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshQualityReport {
    pub vertex_count: usize,
    pub face_count: usize,
    pub boundary_loop_count: usize,
    pub non_manifold_edge_count: usize,
    pub watertight: bool,
    pub connected_components: usize,
    pub roughness: f64,
    pub surface_area: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chamfer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_iou: Option<f64>,
}

impl MeshQualityReport {
    pub fn analyze(mesh: &TriMesh) -> Self {
        let boundary = boundary_loops(mesh);
        Self {
            vertex_count: mesh.vertices.len(),
            face_count: mesh.faces.len(),
            boundary_loop_count: boundary.loop_count(),
            non_manifold_edge_count: boundary.non_manifold_edges.len(),
            watertight: is_watertight(mesh),
            connected_components: connected_components(mesh),
            roughness: roughness(mesh),
            surface_area: surface_area(mesh),
            chamfer: None,
            mean_iou: None,
        }
    }

    /// Surface has more than one connected piece ("ghost" geometry).
    pub fn has_ghosts(&self) -> bool {
        self.connected_components > 1
    }
}

// ---------------------------------------------------------------------------
// Chamfer distance
// ---------------------------------------------------------------------------

/// Area-weighted uniform samples on the surface.
pub fn sample_surface(mesh: &TriMesh, count: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if mesh.faces.is_empty() {
        return Err(MeshError::Empty);
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        total += face_normal(mesh, f).norm() * 0.5;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let target = rng.random::<f64>() * total;
            let fi = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
            let [a, b, c] = mesh.faces[fi].map(|i| mesh.vertices[i as usize]);
            let r1 = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
        })
        .collect())
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Exact distance from `p` to the nearest face (brute force).
pub fn distance_to_mesh(p: &Vector3<f64>, mesh: &TriMesh) -> f64 {
    mesh.faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            (closest_point_on_triangle(p, &a, &b, &c) - p).norm_squared()
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

fn mean_distance(samples: &[Vector3<f64>], mesh: &TriMesh) -> f64 {
    let d: Vec<f64> = samples.par_iter().map(|p| distance_to_mesh(p, mesh)).collect();
    d.iter().sum::<f64>() / d.len().max(1) as f64
}

/// Symmetric chamfer distance: the average of the mean nearest-surface
/// distances from samples of `a` to `b` and of `b` to `a`. Both meshes are
/// sampled with the same seed, so the result is symmetric in its arguments.
pub fn chamfer(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    let sa = sample_surface(a, samples, seed)?;
    let sb = sample_surface(b, samples, seed)?;
    Ok(0.5 * (mean_distance(&sa, b) + mean_distance(&sb, a)))
}

// ---------------------------------------------------------------------------
// Hard rasterization
// ---------------------------------------------------------------------------

/// Binary silhouette at `res x res`: 255 where the pixel center lies inside
/// any projected triangle. Shared edges follow a top-left fill rule, so a
/// center on an edge between two triangles is claimed exactly once.
/// Triangles with a vertex at or behind the camera plane are skipped.
pub fn hard_coverage(mesh: &TriMesh, view: &View, res: u32) -> ImageBuffer {
    let intr = &view.intrinsics;
    let sx = res as f64 / intr.width as f64;
    let sy = res as f64 / intr.height as f64;
    let (fx, fy, cx, cy) = (intr.fx() * sx, intr.fy() * sy, intr.cx() * sx, intr.cy() * sy);
    let mut mask = ImageBuffer::new(res, res, 1);
    let Ok(rot) = quat_to_rotmat(view.pose.qvec) else {
        return mask;
    };
    let trans = Vector3::from(view.pose.tvec);

    let screen: Vec<Option<Vector2<f64>>> = mesh
        .vertices
        .iter()
        .map(|x| {
            let c = rot * x + trans;
            (c.z > 1e-9).then(|| Vector2::new(fx * c.x / c.z + cx, fy * c.y / c.z + cy))
        })
        .collect();

    for f in &mesh.faces {
        let (Some(p0), Some(p1), Some(p2)) = (screen[f[0] as usize], screen[f[1] as usize], screen[f[2] as usize])
        else {
            continue;
        };
        fill_triangle(&mut mask, [p0, p1, p2]);
    }
    mask
}

fn edge_fn(a: &Vector2<f64>, b: &Vector2<f64>, q: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x)
}

fn fill_triangle(mask: &mut ImageBuffer, mut p: [Vector2<f64>; 3]) {
    let area = edge_fn(&p[0], &p[1], &p[2]);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    if area < 0.0 {
        p.swap(1, 2);
    }
    // With positive area the interior is where every edge function is >= 0.
    // An edge is "top-left" when its inward normal points down or right.
    let top_left = |a: &Vector2<f64>, b: &Vector2<f64>| {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        dy < 0.0 || (dy == 0.0 && dx > 0.0)
    };
    let edges = [(0, 1), (1, 2), (2, 0)];
    let tl = edges.map(|(i, j)| top_left(&p[i], &p[j]));

    let res_w = mask.width as f64;
    let res_h = mask.height as f64;
    let min_x = p.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (min_x - 0.5).ceil().max(0.0);
    let x1 = (max_x - 0.5).floor().min(res_w - 1.0);
    let y0 = (min_y - 0.5).ceil().max(0.0);
    let y1 = (max_y - 0.5).floor().min(res_h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return;
    }
    for y in y0 as u32..=y1 as u32 {
        for x in x0 as u32..=x1 as u32 {
            let q = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let inside = edges.iter().zip(&tl).all(|(&(i, j), &is_tl)| {
                let w = edge_fn(&p[i], &p[j], &q);
                w > 0.0 || (w == 0.0 && is_tl)
            });
            if inside {
                mask.set(x, y, 0, 255);
            }
        }
    }
}

/// Intersection over union of two binary masks (nonzero = foreground).
/// Two empty masks have IoU 1.
pub fn iou(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(MeshError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_formatting() {
        assert_eq!(fmt_g9(0.5), "0.5");
        assert_eq!(fmt_g9(-0.0), "0");
        assert_eq!(fmt_g9(1.0), "1");
        assert_eq!(fmt_g9(-0.3125), "-0.3125");
        assert_eq!(fmt_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_g9(123456.789123), "123456.789");
        assert_eq!(fmt_g9(1e-7), "1e-7");
        assert_eq!(fmt_g9(2.5e12), "2.5e12");
        assert_eq!(fmt_g9(999.99999999), "1000");
    }

    #[test]
    fn single_triangle_obj() {
        let m = TriMesh::new(
            vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 0.0, 1.0)],
            vec![[0, 1, 2]],
        );
        let text = export_obj(&m);
        assert_eq!(text, "# thinrecon mesh\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\n");
        assert_eq!(export_obj(&TriMesh::default()), OBJ_HEADER);
    }

    #[test]
    fn obj_polygon_and_slashes() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 -1\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(parse_obj("v 0 0\n").is_err());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn iou_examples() {
        let full = ImageBuffer::filled(4, 4, 1, 255);
        let mut left = ImageBuffer::new(4, 4, 1);
        for y in 0..4 {
            for x in 0..2 {
                left.set(x, y, 0, 255);
            }
        }
        let mut right = ImageBuffer::new(4, 4, 1);
        for y in 0..4 {
            for x in 2..4 {
                right.set(x, y, 0, 255);
            }
        }
        assert_eq!(iou(&full, &full).unwrap(), 1.0);
        assert_eq!(iou(&left, &right).unwrap(), 0.0);
        assert_eq!(iou(&left, &full).unwrap(), 0.5);
        let empty = ImageBuffer::new(4, 4, 1);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(iou(&empty, &ImageBuffer::new(2, 2, 1)).is_err());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let cp = |p: [f64; 3]| closest_point_on_triangle(&Vector3::from(p), &a, &b, &c);
        assert!((cp([0.2, 0.2, 1.0]) - Vector3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(cp([-1.0, -1.0, 0.0]), a);
        assert_eq!(cp([2.0, -0.5, 0.0]), b);
        assert_eq!(cp([0.5, -1.0, 0.0]), Vector3::new(0.5, 0.0, 0.0));
        let on_hyp = cp([1.0, 1.0, 0.0]);
        assert!((on_hyp - Vector3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn disjoint_triangles_are_two_components() {
        let m = TriMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(5.0, 0.0, 0.0),
                Vector3::new(6.0, 0.0, 0.0),
                Vector3::new(5.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        assert_eq!(connected_components(&m), 2);
        assert_eq!(boundary_loops(&m).loop_count(), 2);
        assert_eq!(connected_components(&TriMesh::default()), 0);
    }
}
