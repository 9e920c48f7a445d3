//! Frame sampling, resampling, masking and view assembly.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::colmap::{CameraIntrinsics, Pose, SceneModel};

/// Default number of frames sampled from a capture.
pub const DEFAULT_FRAME_COUNT: usize = 200;
/// Default side length of preprocessed frames.
pub const DEFAULT_PREP_SIZE: u32 = 512;
/// Threshold applied to resampled masks.
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("invalid sample request: {0}")]
    InvalidSample(String),

    #[error("invalid resize {from_w}x{from_h} -> {to_w}x{to_h}: {msg}")]
    InvalidResize {
        from_w: u32,
        from_h: u32,
        to_w: u32,
        to_h: u32,
        msg: &'static str,
    },

    #[error("expected a {expected}-channel image, got {actual} channels")]
    ChannelMismatch { expected: u8, actual: u8 },

    #[error("missing frame {0}")]
    MissingFrame(PathBuf),

    #[error("missing mask for {0}")]
    MissingMask(String),

    #[error("mask {mask} is {mask_w}x{mask_h} but frame {frame} is {frame_w}x{frame_h}")]
    DimensionMismatch {
        frame: String,
        frame_w: u32,
        frame_h: u32,
        mask: String,
        mask_w: u32,
        mask_h: u32,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("image {name} references unknown camera {camera_id}")]
    UnknownCamera { name: String, camera_id: u32 },
}

pub type Result<T> = std::result::Result<T, PrepError>;

/// Row-major 8-bit image with 1 (mask) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8) -> Self {
        Self::filled(width, height, channels, 0)
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Self {
        assert!(channels == 1 || channels == 3, "unsupported channel count {channels}");
        Self {
            width,
            height,
            channels,
            data: vec![value; width as usize * height as usize * channels as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize * channels as usize);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.data[(y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, c: u8, value: u8) {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.data[idx] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Mask replicated into an RGB image.
    pub fn to_rgb(&self) -> ImageBuffer {
        match self.channels {
            3 => self.clone(),
            _ => ImageBuffer::from_raw(
                self.width,
                self.height,
                3,
                self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            ),
        }
    }

    /// Loads an image as 3-channel RGB.
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| PrepError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Self::from_raw(w, h, 3, rgb.into_raw()))
    }

    /// Loads an image as single-channel luma (alpha-only masks are not
    /// special-cased).
    pub fn load_luma(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| PrepError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Ok(Self::from_raw(w, h, 1, luma.into_raw()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            _ => image::ExtendedColorType::Rgb8,
        };
        image::save_buffer_with_format(path, &self.data, self.width, self.height, color, image::ImageFormat::Png)
            .map_err(|source| PrepError::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// One supervision unit: image, binary mask, intrinsics and pose.
#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub image: ImageBuffer,
    pub mask: ImageBuffer,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

/// Equal-interval frame indices `floor(i * total / n)` for `i in 0..n`.
pub fn sample_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(PrepError::InvalidSample("sample count must be at least 1".into()));
    }
    if n > total {
        return Err(PrepError::InvalidSample(format!(
            "cannot sample {n} frames from {total}"
        )));
    }
    Ok((0..n).map(|i| (i as u128 * total as u128 / n as u128) as usize).collect())
}

fn quantize(v: f64) -> u8 {
    // f64::round rounds half away from zero.
    v.round().clamp(0.0, 255.0) as u8
}

/// Downscales to `w x h`. Integer ratios use box averaging, anything else
/// bilinear sampling at the target pixel centers.
pub fn downscale(img: &ImageBuffer, w: u32, h: u32) -> Result<ImageBuffer> {
    let invalid = |msg| PrepError::InvalidResize {
        from_w: img.width,
        from_h: img.height,
        to_w: w,
        to_h: h,
        msg,
    };
    if w == 0 || h == 0 {
        return Err(invalid("zero target dimension"));
    }
    if w > img.width || h > img.height {
        return Err(invalid("upscaling is not supported"));
    }
    if img.width % w == 0 && img.height % h == 0 {
        Ok(box_downscale(img, img.width / w, img.height / h))
    } else {
        Ok(bilinear_resample(img, w, h))
    }
}

fn box_downscale(img: &ImageBuffer, fx: u32, fy: u32) -> ImageBuffer {
    let (w, h) = (img.width / fx, img.height / fy);
    let ch = img.channels as usize;
    let area = (fx * fy) as f64;
    let mut out = ImageBuffer::new(w, h, img.channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut sum = 0u64;
                for sy in y * fy..(y + 1) * fy {
                    let row = sy as usize * img.width as usize;
                    for sx in x * fx..(x + 1) * fx {
                        sum += img.data[(row + sx as usize) * ch + c] as u64;
                    }
                }
                out.data[(y as usize * w as usize + x as usize) * ch + c] = quantize(sum as f64 / area);
            }
        }
    }
    out
}

fn bilinear_resample(img: &ImageBuffer, w: u32, h: u32) -> ImageBuffer {
    let ch = img.channels as usize;
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let mut out = ImageBuffer::new(w, h, img.channels);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height as usize - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width as usize - 1);
            let tx = fx - x0 as f64;
            for c in 0..ch {
                let at = |xx: usize, yy: usize| img.data[(yy * img.width as usize + xx) * ch + c] as f64;
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                out.data[(y as usize * w as usize + x as usize) * ch + c] =
                    quantize(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Maps a single-channel mask to `{0, 255}`; values `>= threshold` become 255.
pub fn binarize_mask(mask: &ImageBuffer, threshold: u8) -> Result<ImageBuffer> {
    if mask.channels != 1 {
        return Err(PrepError::ChannelMismatch {
            expected: 1,
            actual: mask.channels,
        });
    }
    Ok(ImageBuffer {
        data: mask
            .data
            .iter()
            .map(|&v| if v >= threshold { 255 } else { 0 })
            .collect(),
        ..mask.clone()
    })
}

/// Fallback mask from luma: 255 where `round(0.299R + 0.587G + 0.114B) >= threshold`.
pub fn make_mask_threshold(img: &ImageBuffer, luma_threshold: u8) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(PrepError::ChannelMismatch {
            expected: 3,
            actual: img.channels,
        });
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            if quantize(luma) >= luma_threshold {
                255
            } else {
                0
            }
        })
        .collect();
    Ok(ImageBuffer::from_raw(img.width, img.height, 1, data))
}

/// Image files (png/jpg/jpeg) in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    files.sort();
    Ok(files)
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub fn file_stem(name: &str) -> &str {
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
}

/// Finds the mask in `masks_dir` whose stem equals `stem`, preferring PNG.
pub fn find_mask(masks_dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| masks_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads one view per registered image, resampled to `train_res x train_res`.
///
/// Frames are located by the registered file name, masks by file stem. The
/// result is sorted by name.
pub fn load_views(
    frames_dir: &Path,
    masks_dir: &Path,
    scene: &SceneModel,
    train_res: u32,
) -> Result<Vec<View>> {
    // Report every missing frame up front rather than the first one found.
    for img in &scene.images {
        let frame = frames_dir.join(&img.name);
        if !frame.is_file() {
            return Err(PrepError::MissingFrame(frame));
        }
    }
    let mut views = scene
        .images
        .par_iter()
        .map(|rec| {
            let intrinsics = scene.camera_for(rec).ok_or_else(|| PrepError::UnknownCamera {
                name: rec.name.clone(),
                camera_id: rec.camera_id,
            })?;
            let frame_path = frames_dir.join(&rec.name);
            let stem = file_stem(&rec.name);
            let mask_path = find_mask(masks_dir, stem).ok_or_else(|| PrepError::MissingMask(stem.to_string()))?;
            let image = ImageBuffer::load_rgb(&frame_path)?;
            let mask = ImageBuffer::load_luma(&mask_path)?;
            if (image.width, image.height) != (mask.width, mask.height) {
                return Err(PrepError::DimensionMismatch {
                    frame: rec.name.clone(),
                    frame_w: image.width,
                    frame_h: image.height,
                    mask: mask_path.display().to_string(),
                    mask_w: mask.width,
                    mask_h: mask.height,
                });
            }
            // Intrinsics are defined on the frame the camera was calibrated
            // on; rescale relative to that size.
            let image = downscale(&image, train_res, train_res)?;
            let mask = binarize_mask(&downscale(&mask, train_res, train_res)?, MASK_THRESHOLD)?;
            Ok(View {
                name: rec.name.clone(),
                image,
                mask,
                intrinsics: intrinsics.rescaled(train_res as u64, train_res as u64),
                pose: rec.pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    views.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(views)
}
