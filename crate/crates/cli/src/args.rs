use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thinrecon::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "thinrecon", version, about = "Mesh reconstruction of thin objects from posed silhouettes")]
pub struct Cli {
    /// Maximum number of worker threads (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample, downscale and mask frames extracted from a capture video.
    Prep(PrepArgs),
    /// Convert a COLMAP sparse model into a normalized scene.json.
    Poses(PosesArgs),
    /// Optimize a mesh against the masks of a posed scene.
    Reconstruct(ReconstructArgs),
    /// Report mesh quality, and optionally chamfer distance and mask IoU.
    Evaluate(EvaluateArgs),
    /// Write a shell script that runs COLMAP on a frame directory.
    ColmapScript(ScriptArgs),
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Directory of extracted frames (png/jpg), ordered by file name.
    #[arg(long)]
    pub frames: PathBuf,
    /// Output directory; receives frames/, masks/ and manifest.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of frames to sample at equal intervals.
    #[arg(long, default_value_t = thinrecon::dataprep::DEFAULT_FRAME_COUNT)]
    pub count: usize,
    /// Side length of the square output frames.
    #[arg(long, default_value_t = thinrecon::dataprep::DEFAULT_PREP_SIZE)]
    pub size: u32,
    /// Directory of masks matched to frames by file stem.
    #[arg(long, conflicts_with = "threshold")]
    pub masks: Option<PathBuf>,
    /// Build masks by thresholding frame luma instead of reading them.
    #[arg(long)]
    pub threshold: Option<u8>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatArg {
    Auto,
    Text,
    Binary,
}

#[derive(Args, Debug)]
pub struct PosesArgs {
    /// COLMAP sparse model directory (cameras/images/points3D, .txt or .bin).
    #[arg(long)]
    pub colmap_dir: PathBuf,
    /// Output scene file.
    #[arg(long)]
    pub out: PathBuf,
    /// Radius of the 95th-percentile 3D point after normalization.
    #[arg(long, default_value_t = 0.35)]
    pub target_radius: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    pub format: FormatArg,
}

/// Training flags; each maps to the `TrainConfig` field of the same name.
#[derive(Args, Debug, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub grid_res: Option<usize>,
    #[arg(long)]
    pub train_res: Option<u32>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub lambda_lap: Option<f64>,
    #[arg(long)]
    pub lambda_sdf: Option<f64>,
    #[arg(long)]
    pub batch_views: Option<usize>,
    /// Rasterizer softness in px^2 at 128 px.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Optimize per-vertex grid offsets as well as SDF values.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub offsets: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the current mesh every K iterations.
    #[arg(long)]
    pub snapshot_every: Option<usize>,
}

impl TrainFlags {
    /// Overwrites the fields of `config` that were given.
    pub fn apply(&self, config: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(
                if let Some(v) = self.$f {
                    config.$g = v;
                }
            )*};
        }
        set!(grid_res => grid_res, train_res => train_res, iters => iters, lr => lr, beta1 => beta1,
             beta2 => beta2, eps => eps, lambda_lap => lambda_lap, lambda_sdf => lambda_sdf,
             batch_views => batch_views, gamma => gamma, offsets => offsets_enabled, seed => seed);
    }
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    /// Output mesh; report.json, the training log and snapshots go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file setting any training flag; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Save the soft coverage of the final mesh for every view.
    #[arg(long)]
    pub dump_coverage: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// Reference mesh for the chamfer distance.
    #[arg(long)]
    pub r#ref: Option<PathBuf>,
    /// Scene whose views are compared against --masks.
    #[arg(long, requires = "masks")]
    pub scene: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    pub masks: Option<PathBuf>,
    /// Resolution at which silhouettes are compared.
    #[arg(long, default_value_t = 256)]
    pub res: u32,
    /// Surface samples per mesh for the chamfer distance.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matcher {
    Exhaustive,
    Sequential,
}

#[derive(Args, Debug)]
pub struct ScriptArgs {
    /// Directory of prepared frames.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Matcher::Exhaustive)]
    pub matcher: Matcher,
    /// COLMAP workspace (database and sparse model); defaults to `colmap`
    /// next to the script.
    #[arg(long)]
    pub workspace: Option<PathBuf>,
}
