use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use thinrecon::dataprep::{
    binarize_mask, downscale, file_stem, find_mask, list_images, make_mask_threshold, sample_indices, MASK_THRESHOLD,
};
use thinrecon::ImageBuffer;

use super::{create_dir, write_file};
use crate::args::PrepArgs;
use crate::{CliError, Result};

struct Entry {
    index: usize,
    source: PathBuf,
    output: String,
    mask: Option<String>,
}

pub fn run(args: &PrepArgs) -> Result<()> {
    if args.count == 0 || args.size == 0 {
        return Err(CliError::usage("--count and --size must be at least 1"));
    }
    let frames = list_images(&args.frames)
        .map_err(|e| CliError::input(format!("cannot read frames directory {}: {e}", args.frames.display())))?;
    if frames.is_empty() {
        return Err(CliError::input(format!("no png/jpg frames in {}", args.frames.display())));
    }
    let count = if args.count > frames.len() {
        warn!("only {} frames available; using all of them instead of {}", frames.len(), args.count);
        frames.len()
    } else {
        args.count
    };
    let picks = sample_indices(frames.len(), count)?;
    let stem_of = |p: &Path| file_stem(p.file_name().and_then(|n| n.to_str()).unwrap_or("")).to_string();

    if let Some(dir) = &args.masks {
        let missing: Vec<String> = picks
            .iter()
            .map(|&i| stem_of(&frames[i]))
            .filter(|s| find_mask(dir, s).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(CliError::input(format!(
                "no mask in {} for: {}",
                dir.display(),
                missing.join(", ")
            )));
        }
    }

    let frames_out = args.out.join("frames");
    let masks_out = args.out.join("masks");
    create_dir(&frames_out)?;
    if args.masks.is_some() || args.threshold.is_some() {
        create_dir(&masks_out)?;
    }

    let entries = picks
        .par_iter()
        .map(|&index| {
            let source = frames[index].clone();
            let stem = stem_of(&source);
            let frame = ImageBuffer::load_rgb(&source)?;
            let small = downscale(&frame, args.size, args.size)?;
            let output = format!("{stem}.png");
            small.save_png(&frames_out.join(&output))?;
            let mask = match (&args.masks, args.threshold) {
                (Some(dir), _) => {
                    let path = find_mask(dir, &stem).expect("checked above");
                    let m = ImageBuffer::load_luma(&path)?;
                    if (m.width, m.height) != (frame.width, frame.height) {
                        return Err(CliError::input(format!(
                            "mask {} is {}x{} but frame {} is {}x{}",
                            path.display(),
                            m.width,
                            m.height,
                            source.display(),
                            frame.width,
                            frame.height
                        )));
                    }
                    Some(binarize_mask(&downscale(&m, args.size, args.size)?, MASK_THRESHOLD)?)
                }
                (None, Some(t)) => Some(make_mask_threshold(&small, t)?),
                (None, None) => None,
            };
            if let Some(m) = &mask {
                m.save_png(&masks_out.join(&output))?;
            }
            Ok(Entry {
                index,
                source,
                mask: mask.map(|_| output.clone()),
                output,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = String::from("index\tsource\tframe\tmask\n");
    for e in &entries {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.index,
            e.source.display(),
            e.output,
            e.mask.as_deref().unwrap_or("-")
        ));
    }
    write_file(&args.out.join("manifest.tsv"), &manifest)?;
    print!("{manifest}");
    info!(
        "wrote {} frames of {}x{} to {}",
        entries.len(),
        args.size,
        args.size,
        frames_out.display()
    );
    Ok(())
}
