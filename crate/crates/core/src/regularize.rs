//! Smoothness terms: uniform mesh Laplacian and SDF sign consistency.

use nalgebra::Vector3;

use crate::tetgrid::{is_inside, SdfField, TetGrid, TriMesh};

/// Inputs to the sign regularizer are clamped to this magnitude.
const LOGIT_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegWeights {
    pub lambda_lap: f64,
    pub lambda_sdf: f64,
}

impl RegWeights {
    pub fn new(lambda_lap: f64, lambda_sdf: f64) -> Option<Self> {
        (lambda_lap >= 0.0 && lambda_sdf >= 0.0).then_some(Self { lambda_lap, lambda_sdf })
    }
}

/// Vertex adjacency in CSR form, neighbors sorted ascending.
struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl Adjacency {
    fn from_mesh(mesh: &TriMesh) -> Self {
        let nv = mesh.vertices.len();
        let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(mesh.faces.len() * 6);
        for f in &mesh.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                pairs.push((a, b));
                pairs.push((b, a));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut offsets = vec![0usize; nv + 1];
        for &(a, _) in &pairs {
            offsets[a as usize + 1] += 1;
        }
        for i in 0..nv {
            offsets[i + 1] += offsets[i];
        }
        Self {
            offsets,
            neighbors: pairs.into_iter().map(|(_, b)| b).collect(),
        }
    }

    fn of(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// `L = (1/V) sum_i |v_i - mean_{j in N(i)} v_j|^2` and its gradient.
/// Isolated vertices have a zero Laplacian but still count in `V`.
pub fn laplacian_loss(mesh: &TriMesh) -> (f64, Vec<Vector3<f64>>) {
    let nv = mesh.vertices.len();
    if nv == 0 {
        return (0.0, Vec::new());
    }
    let adj = Adjacency::from_mesh(mesh);
    let delta: Vec<Vector3<f64>> = (0..nv)
        .map(|i| {
            let nb = adj.of(i);
            if nb.is_empty() {
                return Vector3::zeros();
            }
            let mean = nb.iter().map(|&j| mesh.vertices[j as usize]).sum::<Vector3<f64>>() / nb.len() as f64;
            mesh.vertices[i] - mean
        })
        .collect();
    let scale = 1.0 / nv as f64;
    let loss = delta.iter().map(|d| d.norm_squared()).sum::<f64>() * scale;

    // dL/dv_k = (2/V) (delta_k - sum_{i in N(k)} delta_i / |N(i)|)
    let grads = (0..nv)
        .map(|k| {
            let mut g = delta[k];
            for &i in adj.of(k) {
                let i = i as usize;
                g -= delta[i] / adj.of(i).len() as f64;
            }
            g * (2.0 * scale)
        })
        .collect();
    (loss, grads)
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `BCE(sigmoid(s), y) = softplus(s) - y s` with its derivative in `s`.
#[inline]
fn bce_logit(s: f64, y: f64) -> (f64, f64) {
    let x = s.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let d = if s.abs() < LOGIT_CLAMP { sigmoid(x) - y } else { 0.0 };
    (softplus(x) - y * x, d)
}

/// Sign-consistency penalty over grid edges whose endpoints lie on opposite
/// sides of the surface, normalized by the total number of grid edges.
/// Returns the loss and the gradient per grid vertex.
pub fn sdf_sign_loss(grid: &TetGrid, field: &SdfField) -> (f64, Vec<f64>) {
    sign_loss_over_edges(grid.edges(), &field.values)
}

/// [`sdf_sign_loss`] over an arbitrary edge list; the normalizer is
/// `edges.len()`.
pub fn sign_loss_over_edges(edges: &[[u32; 2]], values: &[f64]) -> (f64, Vec<f64>) {
    let mut grads = vec![0.0; values.len()];
    if edges.is_empty() {
        return (0.0, grads);
    }
    let label = |v: f64| if is_inside(v) { 0.0 } else { 1.0 };
    let mut sum = 0.0;
    for &[i, j] in edges {
        let (si, sj) = (values[i as usize], values[j as usize]);
        if is_inside(si) == is_inside(sj) {
            continue;
        }
        let (li, gi) = bce_logit(si, label(sj));
        let (lj, gj) = bce_logit(sj, label(si));
        sum += li + lj;
        grads[i as usize] += gi;
        grads[j as usize] += gj;
    }
    let inv = 1.0 / edges.len() as f64;
    grads.iter_mut().for_each(|g| *g *= inv);
    (sum * inv, grads)
}
