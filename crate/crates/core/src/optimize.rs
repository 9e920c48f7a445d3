//! Adam and the training loop: extract, render, compare against masks,
//! regularize, backpropagate to the field, step.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataprep::{binarize_mask, downscale, ImageBuffer, PrepError, View, MASK_THRESHOLD};
use crate::meshkit::MeshQualityReport;
use crate::regularize::{laplacian_loss, sdf_sign_loss};
use crate::softsil::{
    accumulate_sdf_grads_into, backward_silhouette, silhouette_loss_grad, soft_coverage_with_camera, view_camera,
    PinholeCamera, RasterSettings, RenderError,
};
use crate::tetgrid::{marching_tets, FieldGrad, GridError, SdfField, TetGrid, TriMesh};

/// Radius of the initial sphere.
pub const INIT_RADIUS: f64 = 0.4;
/// Amplitude of the uniform noise added to the initial field.
pub const INIT_NOISE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least 2 views, got {0}")]
    TooFewViews(usize),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    LengthMismatch { params: usize, grads: usize },

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite loss at iteration {iteration} (silhouette {sil}, laplacian {lap}, sdf {sdf})")]
    NonFiniteLoss {
        iteration: usize,
        sil: f64,
        lap: f64,
        sdf: f64,
        /// Field state at the failing iteration, for diagnostics.
        field: Box<SdfField>,
    },

    #[error(transparent)]
    Grid(#[from] GridError),

    #[error(transparent)]
    Render(#[from] RenderError),

    #[error(transparent)]
    Prep(#[from] PrepError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub grid_res: usize,
    pub train_res: u32,
    pub iters: usize,
    /// Initial learning rate; decays exponentially to `lr / 10`.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_lap: f64,
    pub lambda_sdf: f64,
    pub batch_views: usize,
    /// Rasterizer softness in squared pixels at 128 px; scaled with `train_res`.
    pub gamma: f64,
    pub offsets_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid_res: 64,
            train_res: 128,
            iters: 1000,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_lap: 0.5,
            lambda_sdf: 0.2,
            batch_views: 4,
            gamma: 1.0,
            offsets_enabled: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.grid_res == 0 || self.train_res == 0 || self.iters == 0 || self.batch_views == 0 {
            return bad("grid_res, train_res, iters and batch_views must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda_lap >= 0.0 && self.lambda_sdf >= 0.0) {
            return bad("lambdas must be non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    /// `lr0 * 10^(-t / iters)`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * 10f64.powf(-(t as f64) / self.iters as f64)
    }

    pub fn raster_settings(&self) -> RasterSettings {
        RasterSettings::with_reference_gamma(self.gamma, self.train_res)
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update in place. The state is sized on first use.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TrainError::LengthMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    if state.m.is_empty() && state.t == 0 {
        *state = AdamState::new(params.len());
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::LengthMismatch {
            params: params.len(),
            grads: state.m.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index });
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powf(state.t as f64);
    let bc2 = 1.0 - beta2.powf(state.t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Sphere of radius 0.4 plus seeded uniform noise in `[-0.01, 0.01]`.
pub fn init_sdf(grid: &TetGrid, seed: u64) -> SdfField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SdfField::new(
        grid.vertices()
            .iter()
            .map(|v| v.norm() - INIT_RADIUS + rng.random_range(-INIT_NOISE..=INIT_NOISE))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub sil: f64,
    pub lap: f64,
    pub sdf: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    /// Iterations whose extracted mesh had no faces.
    pub empty_mesh_iterations: usize,
    pub final_mesh: MeshQualityReport,
}

/// Cyclic view order from a seeded shuffle, reshuffled at every wrap.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(num_views: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..num_views).collect();
        order.shuffle(&mut rng);
        Self { rng, order, cursor: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Camera and binary `train_res` mask for one view.
struct Target {
    camera: PinholeCamera,
    mask: ImageBuffer,
}

fn prepare_target(view: &View, res: u32) -> Result<Target> {
    let mask = if view.mask.width != res || view.mask.height != res {
        downscale(&view.mask, res, res)?
    } else {
        view.mask.clone()
    };
    Ok(Target {
        camera: view_camera(view, res)?,
        mask: binarize_mask(&mask, MASK_THRESHOLD)?,
    })
}

fn flatten(field: &SdfField) -> Vec<f64> {
    let mut out = field.values.clone();
    if let Some(off) = &field.offsets {
        out.extend(off.iter().flat_map(|o| [o.x, o.y, o.z]));
    }
    out
}

fn flatten_grad(grad: &FieldGrad) -> Vec<f64> {
    let mut out = grad.values.clone();
    if let Some(off) = &grad.offsets {
        out.extend(off.iter().flat_map(|o| [o.x, o.y, o.z]));
    }
    out
}

fn unflatten(params: &[f64], field: &mut SdfField) {
    let n = field.values.len();
    field.values.copy_from_slice(&params[..n]);
    if let Some(off) = &mut field.offsets {
        for (k, o) in off.iter_mut().enumerate() {
            *o = Vector3::new(params[n + 3 * k], params[n + 3 * k + 1], params[n + 3 * k + 2]);
        }
    }
}

/// Loss terms and field gradient at one state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mesh: TriMesh,
    pub sil: f64,
    pub lap: f64,
    pub sdf: f64,
    pub total: f64,
    pub grad: FieldGrad,
}

/// Total loss over the views in `batch` and its gradient with respect to
/// every field parameter.
pub fn evaluate_loss(
    grid: &TetGrid,
    field: &SdfField,
    views: &[View],
    batch: &[usize],
    config: &TrainConfig,
) -> Result<Evaluation> {
    let targets = batch
        .iter()
        .map(|&i| prepare_target(&views[i], config.train_res))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Target> = targets.iter().collect();
    evaluate_targets(grid, field, &refs, config)
}

fn evaluate_targets(grid: &TetGrid, field: &SdfField, targets: &[&Target], config: &TrainConfig) -> Result<Evaluation> {
    let (mesh, provenance) = marching_tets(grid, field)?;
    let settings = config.raster_settings();
    let inv_batch = 1.0 / targets.len() as f64;

    let mut sil = 0.0;
    let mut vertex_grads = vec![Vector3::zeros(); mesh.vertices.len()];
    for target in targets {
        let render = soft_coverage_with_camera(&mesh, &target.camera, config.train_res, &settings);
        let (loss, mut dl_ds) = silhouette_loss_grad(&render.coverage, &target.mask)?;
        sil += loss * inv_batch;
        if mesh.faces.is_empty() {
            continue;
        }
        dl_ds.iter_mut().for_each(|g| *g *= inv_batch);
        for (acc, g) in vertex_grads.iter_mut().zip(backward_silhouette(&render, &dl_ds)) {
            *acc += g;
        }
    }

    let (lap, lap_grads) = laplacian_loss(&mesh);
    if config.lambda_lap != 0.0 {
        for (acc, g) in vertex_grads.iter_mut().zip(&lap_grads) {
            *acc += g * config.lambda_lap;
        }
    }

    let mut grad = FieldGrad::zeros_like(field);
    accumulate_sdf_grads_into(&vertex_grads, &provenance, grid, field, &mut grad)?;

    let (sdf, sdf_grads) = sdf_sign_loss(grid, field);
    if config.lambda_sdf != 0.0 {
        for (acc, g) in grad.values.iter_mut().zip(&sdf_grads) {
            *acc += g * config.lambda_sdf;
        }
    }

    Ok(Evaluation {
        total: sil + config.lambda_lap * lap + config.lambda_sdf * sdf,
        mesh,
        sil,
        lap,
        sdf,
        grad,
    })
}

/// Runs the optimization and returns the final mesh, field and report.
pub fn train(views: &[View], config: &TrainConfig) -> Result<(TriMesh, SdfField, TrainReport)> {
    train_with_observer(views, config, |_, _| {})
}

/// [`train`] with a callback invoked after every iteration with its record
/// and the mesh extracted at the start of that iteration.
pub fn train_with_observer(
    views: &[View],
    config: &TrainConfig,
    mut observer: impl FnMut(&IterationRecord, &TriMesh),
) -> Result<(TriMesh, SdfField, TrainReport)> {
    config.validate()?;
    if views.len() < 2 {
        return Err(TrainError::TooFewViews(views.len()));
    }
    let grid = TetGrid::new(config.grid_res)?;
    let targets = views
        .iter()
        .map(|v| prepare_target(v, config.train_res))
        .collect::<Result<Vec<_>>>()?;

    let mut field = init_sdf(&grid, config.seed);
    if config.offsets_enabled {
        field.offsets = Some(vec![Vector3::zeros(); grid.num_vertices()]);
    }
    let mut params = flatten(&field);
    let mut adam = AdamState::new(params.len());
    let mut sampler = BatchSampler::new(views.len(), config.seed);
    let batch_size = config.batch_views.min(views.len());

    let mut records = Vec::with_capacity(config.iters);
    let mut empty_mesh_iterations = 0;
    for iteration in 0..config.iters {
        let batch: Vec<&Target> = sampler.next_batch(batch_size).into_iter().map(|i| &targets[i]).collect();
        let eval = evaluate_targets(&grid, &field, &batch, config)?;
        if eval.mesh.faces.is_empty() {
            if empty_mesh_iterations == 0 {
                log::warn!("iteration {iteration}: extracted mesh is empty; only the sign regularizer has gradient");
            }
            empty_mesh_iterations += 1;
        }
        if !eval.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration,
                sil: eval.sil,
                lap: eval.lap,
                sdf: eval.sdf,
                field: Box::new(field),
            });
        }
        let lr = config.lr_at(iteration);
        let record = IterationRecord {
            iteration,
            total: eval.total,
            sil: eval.sil,
            lap: eval.lap,
            sdf: eval.sdf,
            lr,
        };
        observer(&record, &eval.mesh);
        records.push(record);

        let grads = flatten_grad(&eval.grad);
        adam_step(&mut params, &grads, &mut adam, lr, config.beta1, config.beta2, config.eps)?;
        unflatten(&params, &mut field);
    }
    if empty_mesh_iterations > 0 {
        log::warn!("{empty_mesh_iterations} iterations produced an empty mesh");
    }

    let (mesh, _) = marching_tets(&grid, &field)?;
    let report = TrainReport {
        records,
        empty_mesh_iterations,
        final_mesh: MeshQualityReport::analyze(&mesh),
    };
    Ok((mesh, field, report))
}
