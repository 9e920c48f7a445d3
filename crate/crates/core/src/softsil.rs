//! Differentiable soft-silhouette rendering.
//!
//! Each projected triangle `T_j` influences pixel center `p` through
//! `D_j(p) = sigmoid(delta_j(p) * d^2(p, boundary of T_j) / gamma)`, with
//! `delta_j = +1` inside the triangle and `-1` outside. Coverage is the
//! probabilistic union `S(p) = 1 - prod_j (1 - D_j(p))`. There is no depth
//! test; every triangle in front of the near plane contributes.
//!
//! Each factor `1 - D_j` is formed as `e / (1 + e)` or `1 / (1 + e)` with
//! `e = exp(-|x_j|)`, so neither `D_j` nor `1 - D_j` loses precision to
//! cancellation, and `dS/dx_j = (1 - S) D_j`. Outside contributions are
//! dropped past `D_j = 1e-6`; every factor is scaled by `1 + 1e-6` (and
//! capped at 1) so coverage stays continuous as a pixel leaves a triangle's
//! halo.
//!
//! Pixels are processed in fixed square tiles; each tile owns its triangle
//! list and gradient buffer, and buffers are merged in tile order, so results
//! are bit-identical regardless of how many worker threads run.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::colmap::{CameraIntrinsics, ColmapError, Pose};
use crate::dataprep::{ImageBuffer, View};
use crate::tetgrid::{FieldGrad, SdfField, TetGrid, TriMesh, VertexProvenance};

/// `ln(1e6)`: contributions with `D < 1e-6` outside a triangle are dropped.
const CUTOFF: f64 = 13.815510557964274;
/// `1 / (1 - sigmoid(-CUTOFF))`: factors are scaled by this so a
/// triangle's factor reaches exactly 1 at the cutoff.
const CUTOFF_RESCALE: f64 = 1.000001;
const TILE: u32 = 8;
/// Default softness at the reference resolution.
pub const REFERENCE_GAMMA: f64 = 1.0;
pub const REFERENCE_RES: u32 = 128;
pub const DEFAULT_NEAR_CLIP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("point at depth {depth} is at or behind the near plane {near}")]
    BehindCamera { depth: f64, near: f64 },

    #[error("dimension mismatch: coverage {coverage}x{coverage}, mask {mask_w}x{mask_h}")]
    DimensionMismatch { coverage: u32, mask_w: u32, mask_h: u32 },

    #[error("provenance has {provenance} entries but {grads} vertex gradients were given")]
    ProvenanceMismatch { provenance: usize, grads: usize },

    #[error(transparent)]
    Pose(#[from] ColmapError),
}

pub type Result<T> = std::result::Result<T, RenderError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    /// Softness in squared pixels.
    pub gamma: f64,
    /// Minimum camera-space depth for a vertex to be rendered.
    pub near_clip: f64,
}

impl RasterSettings {
    /// Settings whose soft boundary stays about one pixel wide at `res`.
    pub fn for_resolution(res: u32) -> Self {
        Self::with_reference_gamma(REFERENCE_GAMMA, res)
    }

    /// `gamma_at_128` scaled by `(res / 128)^2`.
    pub fn with_reference_gamma(gamma_at_128: f64, res: u32) -> Self {
        let ratio = res as f64 / REFERENCE_RES as f64;
        Self {
            gamma: gamma_at_128 * ratio * ratio,
            near_clip: DEFAULT_NEAR_CLIP,
        }
    }
}

/// Pixel coordinates, depth and `d(u, v)/dx` of a projected world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: Vector2<f64>,
    pub depth: f64,
    pub jacobian: Matrix2x3<f64>,
}

/// Pinhole camera with cached rotation. Distortion is ignored.
#[derive(Debug, Clone, Copy)]
pub struct PinholeCamera {
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl PinholeCamera {
    pub fn new(intr: &CameraIntrinsics, pose: &Pose) -> Result<Self> {
        Ok(Self {
            rot: pose.rotation()?,
            trans: pose.translation(),
            fx: intr.fx(),
            fy: intr.fy(),
            cx: intr.cx(),
            cy: intr.cy(),
        })
    }

    pub fn project(&self, x: &Vector3<f64>, near_clip: f64) -> Result<Projection> {
        let c = self.rot * x + self.trans;
        if c.z <= near_clip {
            return Err(RenderError::BehindCamera {
                depth: c.z,
                near: near_clip,
            });
        }
        let iz = 1.0 / c.z;
        let d_cam = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * c.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * c.y * iz * iz,
        );
        Ok(Projection {
            uv: Vector2::new(self.fx * c.x * iz + self.cx, self.fy * c.y * iz + self.cy),
            depth: c.z,
            jacobian: d_cam * self.rot,
        })
    }
}

/// Projects a world point: `x_cam = R x + t`, `u = fx X/Z + cx`, `v = fy Y/Z + cy`.
/// Points with `Z <= 0` are rejected.
pub fn project(intr: &CameraIntrinsics, pose: &Pose, x: &Vector3<f64>) -> Result<Projection> {
    PinholeCamera::new(intr, pose)?.project(x, 0.0)
}

/// `res x res` coverage in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageImage {
    pub res: u32,
    pub values: Vec<f64>,
}

impl CoverageImage {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.res + x) as usize]
    }

    /// 8-bit grayscale rendering, for debugging output.
    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_raw(
            self.res,
            self.res,
            1,
            self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
        )
    }
}

/// Precomputed screen-space triangle.
#[derive(Debug, Clone)]
struct ScreenTri {
    verts: [u32; 3],
    p: [Vector2<f64>; 3],
    edge: [Vector2<f64>; 3],
    inv_len2: [f64; 3],
    /// +1 / -1 for counterclockwise / clockwise in pixel space, 0 if degenerate.
    orient: f64,
    /// Inclusive pixel range `[x0, x1] x [y0, y1]` of candidate pixels.
    x0: i32,
    x1: i32,
    y0: i32,
    y1: i32,
}

impl ScreenTri {
    fn new(verts: [u32; 3], p: [Vector2<f64>; 3], radius: f64, res: u32) -> Option<Self> {
        let edge = [p[1] - p[0], p[2] - p[1], p[0] - p[2]];
        let inv_len2 = edge.map(|e| {
            let l2 = e.norm_squared();
            if l2 > 0.0 {
                1.0 / l2
            } else {
                0.0
            }
        });
        let area2 = cross(&edge[0], &(p[2] - p[0]));
        let orient = if area2 > 0.0 {
            1.0
        } else if area2 < 0.0 {
            -1.0
        } else {
            0.0
        };
        let (min_x, max_x) = (p[0].x.min(p[1].x).min(p[2].x), p[0].x.max(p[1].x).max(p[2].x));
        let (min_y, max_y) = (p[0].y.min(p[1].y).min(p[2].y), p[0].y.max(p[1].y).max(p[2].y));
        // Pixel i has its center at i + 0.5.
        let x0 = ((min_x - radius - 0.5).ceil()).max(0.0);
        let x1 = ((max_x + radius - 0.5).floor()).min(res as f64 - 1.0);
        let y0 = ((min_y - radius - 0.5).ceil()).max(0.0);
        let y1 = ((max_y + radius - 0.5).floor()).min(res as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some(Self {
            verts,
            p,
            edge,
            inv_len2,
            orient,
            x0: x0 as i32,
            x1: x1 as i32,
            y0: y0 as i32,
            y1: y1 as i32,
        })
    }

    /// Inclusive pixel range of this triangle inside tile `(tx, ty)`.
    #[inline]
    fn clip_to_tile(&self, tx: u32, ty: u32, res: u32) -> (u32, u32, u32, u32) {
        let x0 = (self.x0 as u32).max(tx * TILE);
        let x1 = (self.x1 as u32).min(((tx + 1) * TILE).min(res) - 1);
        let y0 = (self.y0 as u32).max(ty * TILE);
        let y1 = (self.y1 as u32).min(((ty + 1) * TILE).min(res) - 1);
        (x0, x1, y0, y1)
    }

    /// Signed `x = delta d^2 / gamma` at `q`, or `None` past the cutoff.
    /// Also returns the nearest boundary edge and its clamped parameter.
    #[inline]
    fn eval(&self, q: &Vector2<f64>, gamma: f64) -> Option<(f64, usize, f64, Vector2<f64>)> {
        let limit = gamma * CUTOFF;
        let w = [q - self.p[0], q - self.p[1], q - self.p[2]];
        let c = [0, 1, 2].map(|k| cross(&self.edge[k], &w[k]) * self.orient);
        let inside = self.orient != 0.0 && c.iter().all(|&v| v > 0.0);
        if !inside {
            // The distance to an edge's supporting line bounds the distance
            // to the triangle from points on its outer side.
            for k in 0..3 {
                if c[k] < 0.0 && c[k] * c[k] * self.inv_len2[k] >= limit {
                    return None;
                }
            }
        }
        let mut best = (f64::INFINITY, 0usize, 0.0, Vector2::zeros());
        for (k, w) in w.iter().enumerate() {
            let t = (w.dot(&self.edge[k]) * self.inv_len2[k]).clamp(0.0, 1.0);
            let diff = w - self.edge[k] * t;
            let d2 = diff.norm_squared();
            if d2 < best.0 {
                best = (d2, k, t, diff);
            }
        }
        let (d2, k, t, diff) = best;
        if inside {
            Some((d2 / gamma, k, t, diff))
        } else if d2 >= limit {
            None
        } else {
            Some((-d2 / gamma, k, t, diff))
        }
    }
}

#[inline]
fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Forward result plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct SoftRender {
    pub coverage: CoverageImage,
    /// `1 - S(p)`.
    transmittance: Vec<f64>,
    gamma: f64,
    num_vertices: usize,
    jacobians: Vec<Option<Matrix2x3<f64>>>,
    tris: Vec<ScreenTri>,
    tiles: Vec<Vec<u32>>,
    /// Per tile, every nonzero contribution in triangle-then-pixel order.
    contributions: Vec<Vec<Contribution>>,
}

/// One triangle's influence on one pixel, reduced to what the reverse pass
/// needs: `dx/dp_k = (1 - t) w / D`, `dx/dp_{k+1} = t w / D`, premultiplied by `D`.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    pixel: u32,
    slot: u32,
    k: u32,
    t: f64,
    w: Vector2<f64>,
}

impl SoftRender {
    pub fn res(&self) -> u32 {
        self.coverage.res
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of (triangle, pixel) pairs with a nonzero contribution.
    pub fn num_contributions(&self) -> usize {
        self.contributions.iter().map(Vec::len).sum()
    }

    /// Number of triangles that reached the image.
    pub fn num_rasterized(&self) -> usize {
        self.tris.len()
    }
}

fn tiles_per_side(res: u32) -> u32 {
    res.div_ceil(TILE)
}

/// Camera for a view rendered at `res x res`: intrinsics rescaled from the
/// view's own size when they differ.
pub fn view_camera(view: &View, res: u32) -> Result<PinholeCamera> {
    let intr = if view.intrinsics.width == res as u64 && view.intrinsics.height == res as u64 {
        view.intrinsics.clone()
    } else {
        view.intrinsics.rescaled(res as u64, res as u64)
    };
    PinholeCamera::new(&intr, &view.pose)
}

/// Soft coverage of `mesh` seen from `view` at `res x res` pixels.
pub fn soft_coverage(mesh: &TriMesh, view: &View, res: u32, settings: &RasterSettings) -> Result<SoftRender> {
    let camera = view_camera(view, res)?;
    Ok(soft_coverage_with_camera(mesh, &camera, res, settings))
}

pub fn soft_coverage_with_camera(
    mesh: &TriMesh,
    camera: &PinholeCamera,
    res: u32,
    settings: &RasterSettings,
) -> SoftRender {
    let gamma = settings.gamma;
    let projected: Vec<Option<Projection>> = mesh
        .vertices
        .iter()
        .map(|v| camera.project(v, settings.near_clip).ok())
        .collect();

    let radius = (gamma * CUTOFF).sqrt();
    let tris: Vec<ScreenTri> = mesh
        .faces
        .iter()
        .filter_map(|f| {
            let p = [projected[f[0] as usize]?, projected[f[1] as usize]?, projected[f[2] as usize]?];
            ScreenTri::new(*f, p.map(|q| q.uv), radius, res)
        })
        .collect();

    let side = tiles_per_side(res);
    let mut tiles = vec![Vec::new(); (side * side) as usize];
    for (idx, tri) in tris.iter().enumerate() {
        for ty in (tri.y0 as u32 / TILE)..=(tri.y1 as u32 / TILE) {
            for tx in (tri.x0 as u32 / TILE)..=(tri.x1 as u32 / TILE) {
                tiles[(ty * side + tx) as usize].push(idx as u32);
            }
        }
    }

    let scale = -2.0 / gamma;
    let (tile_logs, contributions): (Vec<Vec<f64>>, Vec<Vec<Contribution>>) = tiles
        .par_iter()
        .enumerate()
        .map(|(tile_idx, list)| {
            let (tx, ty) = (tile_idx as u32 % side, tile_idx as u32 / side);
            let width = ((tx + 1) * TILE).min(res) - tx * TILE;
            let height = ((ty + 1) * TILE).min(res) - ty * TILE;
            let mut out = vec![1.0; (width * height) as usize];
            let mut contribs = Vec::with_capacity(
                list.iter()
                    .map(|&ti| {
                        let (x0, x1, y0, y1) = tris[ti as usize].clip_to_tile(tx, ty, res);
                        ((x1 + 1 - x0) * (y1 + 1 - y0)) as usize
                    })
                    .sum(),
            );
            for (slot, &ti) in list.iter().enumerate() {
                let tri = &tris[ti as usize];
                let (x0, x1, y0, y1) = tri.clip_to_tile(tx, ty, res);
                for y in y0..=y1 {
                    let row = ((y - ty * TILE) * width) as usize;
                    for x in x0..=x1 {
                        let q = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                        let Some((xv, k, t, diff)) = tri.eval(&q, gamma) else {
                            continue;
                        };
                        let e = (-xv.abs()).exp();
                        let inv = 1.0 / (1.0 + e);
                        // (D, 1 - D) without cancellation on either side.
                        let (d, keep, sign) = if xv >= 0.0 { (inv, e * inv, 1.0) } else { (e * inv, inv, -1.0) };
                        out[row + (x - tx * TILE) as usize] *= (keep * CUTOFF_RESCALE).min(1.0);
                        // x = +-d^2 / gamma with d d^2/dp_k = -2 (1 - t) diff and
                        // d d^2/dp_{k+1} = -2 t diff.
                        contribs.push(Contribution {
                            pixel: y * res + x,
                            slot: slot as u32,
                            k: k as u32,
                            t,
                            w: diff * (d * sign * scale),
                        });
                    }
                }
            }
            (out, contribs)
        })
        .unzip();

    let n = (res * res) as usize;
    let mut transmittance = vec![1.0; n];
    for (tile_idx, logs) in tile_logs.iter().enumerate() {
        let (tx, ty) = (tile_idx as u32 % side, tile_idx as u32 / side);
        let mut it = logs.iter();
        for y in ty * TILE..((ty + 1) * TILE).min(res) {
            for x in tx * TILE..((tx + 1) * TILE).min(res) {
                transmittance[(y * res + x) as usize] = *it.next().unwrap();
            }
        }
    }
    let values = transmittance.iter().map(|t| 1.0 - t).collect();

    SoftRender {
        coverage: CoverageImage { res, values },
        transmittance,
        gamma,
        num_vertices: mesh.vertices.len(),
        jacobians: projected.iter().map(|p| p.map(|p| p.jacobian)).collect(),
        tris,
        tiles,
        contributions,
    }
}

/// Mean squared difference between coverage and the mask scaled to `[0, 1]`.
pub fn silhouette_loss(coverage: &CoverageImage, mask: &ImageBuffer) -> Result<f64> {
    Ok(silhouette_loss_grad(coverage, mask)?.0)
}

/// Silhouette loss together with `dL/dS` per pixel.
pub fn silhouette_loss_grad(coverage: &CoverageImage, mask: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    if mask.width != coverage.res || mask.height != coverage.res || mask.channels != 1 {
        return Err(RenderError::DimensionMismatch {
            coverage: coverage.res,
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    let n = coverage.values.len() as f64;
    let mut loss = 0.0;
    let grad = coverage
        .values
        .iter()
        .zip(&mask.data)
        .map(|(&s, &m)| {
            let r = s - m as f64 / 255.0;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Reverse pass: gradient of a scalar loss with respect to every mesh vertex
/// position, given `dL/dS` per pixel.
pub fn backward_silhouette(render: &SoftRender, dl_ds: &[f64]) -> Vec<Vector3<f64>> {
    let res = render.res();
    assert_eq!(dl_ds.len(), (res * res) as usize, "dL/dS has wrong size");
    let tris = &render.tris;

    // Per tile: gradients for the tile's triangles, in list order.
    let tile_grads: Vec<Vec<[Vector2<f64>; 3]>> = render
        .tiles
        .par_iter()
        .zip(&render.contributions)
        .map(|(list, contribs)| {
            let mut grads = vec![[Vector2::zeros(); 3]; list.len()];
            for c in contribs {
                let pix = c.pixel as usize;
                // dL/dx = dL/dS (1 - S) D, with D folded into w.
                let g = dl_ds[pix] * render.transmittance[pix];
                if g == 0.0 {
                    continue;
                }
                let k = c.k as usize;
                let slot = &mut grads[c.slot as usize];
                slot[k] += c.w * (g * (1.0 - c.t));
                slot[(k + 1) % 3] += c.w * (g * c.t);
            }
            grads
        })
        .collect();

    let mut uv_grads = vec![Vector2::zeros(); render.num_vertices];
    for (list, grads) in render.tiles.iter().zip(&tile_grads) {
        for (&ti, g) in list.iter().zip(grads) {
            let verts = tris[ti as usize].verts;
            for c in 0..3 {
                uv_grads[verts[c] as usize] += g[c];
            }
        }
    }

    uv_grads
        .iter()
        .zip(&render.jacobians)
        .map(|(g, jac)| match jac {
            Some(j) => j.transpose() * g,
            None => Vector3::zeros(),
        })
        .collect()
}

/// Chains mesh-vertex gradients through the marching-tets interpolation onto
/// the field parameters.
pub fn accumulate_sdf_grads(
    vertex_grads: &[Vector3<f64>],
    provenance: &VertexProvenance,
    grid: &TetGrid,
    field: &SdfField,
) -> Result<FieldGrad> {
    let mut out = FieldGrad::zeros_like(field);
    accumulate_sdf_grads_into(vertex_grads, provenance, grid, field, &mut out)?;
    Ok(out)
}

/// Like [`accumulate_sdf_grads`] but adds into an existing gradient.
pub fn accumulate_sdf_grads_into(
    vertex_grads: &[Vector3<f64>],
    provenance: &VertexProvenance,
    grid: &TetGrid,
    field: &SdfField,
    out: &mut FieldGrad,
) -> Result<()> {
    if vertex_grads.len() != provenance.len() {
        return Err(RenderError::ProvenanceMismatch {
            provenance: provenance.len(),
            grads: vertex_grads.len(),
        });
    }
    let inv_n = 1.0 / grid.resolution() as f64;
    for (g, c) in vertex_grads.iter().zip(&provenance.crossings) {
        out.values[c.a as usize] += g.dot(&c.d_sa);
        out.values[c.b as usize] += g.dot(&c.d_sb);
        if let (Some(params), Some(grads)) = (&field.offsets, &mut out.offsets) {
            // position = p_a + t (p_b - p_a), p = grid + tanh(param) / n.
            for (k, w) in [(c.a as usize, 1.0 - c.t), (c.b as usize, c.t)] {
                let dtanh = params[k].map(|r| {
                    let th = r.tanh();
                    (1.0 - th * th) * inv_n
                });
                grads[k] += (g * w).component_mul(&dtanh);
            }
        }
    }
    Ok(())
}
