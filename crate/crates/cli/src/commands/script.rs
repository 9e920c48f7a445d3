use std::path::Path;

use super::{out_dir, write_file};
use crate::args::{Matcher, ScriptArgs};
use crate::Result;

/// Single-quoted shell word.
fn quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', "'\\''"))
}

pub fn script(images: &Path, workspace: &Path, matcher: Matcher) -> String {
    let matcher = match matcher {
        Matcher::Exhaustive => "exhaustive_matcher",
        Matcher::Sequential => "sequential_matcher",
    };
    format!(
        r#"#!/usr/bin/env bash
# Sparse COLMAP reconstruction of the frames in IMAGES.
# Exhaustive matching is slower than sequential matching but registers more
# frames of a turntable-style capture.
set -euo pipefail

IMAGES={images}
WORKSPACE={workspace}

mkdir -p "$WORKSPACE/sparse"

colmap feature_extractor \
    --database_path "$WORKSPACE/database.db" \
    --image_path "$IMAGES" \
    --ImageReader.single_camera 1

colmap {matcher} \
    --database_path "$WORKSPACE/database.db"

colmap mapper \
    --database_path "$WORKSPACE/database.db" \
    --image_path "$IMAGES" \
    --output_path "$WORKSPACE/sparse"

# Text copy of the first model, readable by `thinrecon poses`.
mkdir -p "$WORKSPACE/sparse/0_txt"
colmap model_converter \
    --input_path "$WORKSPACE/sparse/0" \
    --output_path "$WORKSPACE/sparse/0_txt" \
    --output_type TXT
"#,
        images = quote(images),
        workspace = quote(workspace),
    )
}

pub fn run(args: &ScriptArgs) -> Result<()> {
    let workspace = args
        .workspace
        .clone()
        .unwrap_or_else(|| out_dir(&args.out).join("colmap"));
    write_file(&args.out, script(&args.images, &workspace, args.matcher))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let _ = std::fs::set_permissions(&args.out, std::fs::Permissions::from_mode(0o755));
    }
    println!("{}", args.out.display());
    Ok(())
}
