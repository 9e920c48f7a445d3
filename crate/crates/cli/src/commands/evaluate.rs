use thinrecon::dataprep::{binarize_mask, downscale, file_stem, find_mask, MASK_THRESHOLD};
use thinrecon::meshkit::{chamfer, hard_coverage, iou, read_obj, MeshQualityReport};
use thinrecon::scene_file::load_scene;
use thinrecon::{ImageBuffer, TriMesh, View};

use super::write_file;
use crate::args::EvaluateArgs;
use crate::{CliError, Result};

fn mean_iou(mesh: &TriMesh, args: &EvaluateArgs) -> Result<Option<f64>> {
    let (Some(scene_path), Some(masks)) = (&args.scene, &args.masks) else {
        return Ok(None);
    };
    if args.res == 0 {
        return Err(CliError::usage("--res must be at least 1"));
    }
    let scene = load_scene(scene_path)?;
    if scene.images.is_empty() {
        return Err(CliError::input(format!("{} has no images", scene_path.display())));
    }
    let mut total = 0.0;
    for rec in &scene.images {
        let stem = file_stem(&rec.name);
        let path = find_mask(masks, stem)
            .ok_or_else(|| CliError::input(format!("no mask for {stem} in {}", masks.display())))?;
        let mask = ImageBuffer::load_luma(&path)?;
        let mask = binarize_mask(&downscale(&mask, args.res, args.res)?, MASK_THRESHOLD)?;
        let intrinsics = scene
            .camera_for(rec)
            .ok_or_else(|| CliError::input(format!("image {} has no camera", rec.name)))?
            .rescaled(args.res as u64, args.res as u64);
        let view = View {
            name: rec.name.clone(),
            image: ImageBuffer::new(args.res, args.res, 3),
            mask,
            intrinsics,
            pose: rec.pose,
        };
        let pred = hard_coverage(mesh, &view, args.res);
        total += iou(&pred, &view.mask)?;
    }
    Ok(Some(total / scene.images.len() as f64))
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let mesh = read_obj(&args.mesh)?;
    let mut report = MeshQualityReport::analyze(&mesh);
    if let Some(path) = &args.r#ref {
        let reference = read_obj(path)?;
        report.chamfer = Some(chamfer(&mesh, &reference, args.samples.max(1), args.seed)?);
    }
    report.mean_iou = mean_iou(&mesh, args)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    print!("{json}");
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    Ok(())
}
