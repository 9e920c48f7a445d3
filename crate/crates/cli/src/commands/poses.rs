use log::info;
use thinrecon::colmap::{normalize_scene, parse_model, ModelFormat};
use thinrecon::scene_file::save_scene;

use crate::args::{FormatArg, PosesArgs};
use crate::{CliError, Result};

pub fn run(args: &PosesArgs) -> Result<()> {
    if !(args.target_radius > 0.0 && args.target_radius.is_finite()) {
        return Err(CliError::usage("--target-radius must be positive"));
    }
    let format = match args.format {
        FormatArg::Auto => ModelFormat::Auto,
        FormatArg::Text => ModelFormat::Text,
        FormatArg::Binary => ModelFormat::Binary,
    };
    let model = parse_model(&args.colmap_dir, format)?;
    let scene = normalize_scene(&model, args.target_radius)?;
    save_scene(&scene, &args.out)?;
    let norm = scene.norm.expect("normalized scene records its transform");
    info!(
        "{} cameras, {} images, {} points; center {:?}, scale {}",
        scene.cameras.len(),
        scene.images.len(),
        scene.points3d.len(),
        norm.center,
        norm.scale
    );
    println!("{}", args.out.display());
    Ok(())
}
