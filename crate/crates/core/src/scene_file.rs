//! `scene.json`: a normalized scene on disk.
//!
//! ```json
//! {
//!   "format": "thinrecon-scene",
//!   "version": 1,
//!   "cameras": [{"camera_id": 1, "model": "PINHOLE", "width": 512, "height": 512, "params": [...]}],
//!   "images": [{"image_id": 1, "name": "f0001.png", "camera_id": 1, "qvec": [w, x, y, z], "tvec": [x, y, z]}],
//!   "normalization": {"center": [x, y, z], "scale": s},
//!   "points3d": [{"point_id": 1, "xyz": [x, y, z]}]
//! }
//! ```
//!
//! Keys are written in the order above, cameras sorted by id and images in
//! model order. Floats use the shortest exact representation, so loading a
//! saved file gives back an identical model.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::{CameraIntrinsics, CameraModel, ColmapError, ImageRecord, Point3, Pose, SceneModel, SimTransform};

pub const FORMAT_TAG: &str = "thinrecon-scene";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneFileError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid scene JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("not a scene file (format '{format}', version {version})")]
    Format { format: String, version: u32 },

    #[error(transparent)]
    Invalid(#[from] ColmapError),
}

pub type Result<T> = std::result::Result<T, SceneFileError>;

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    camera_id: u32,
    model: CameraModel,
    width: u64,
    height: u64,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    image_id: u32,
    name: String,
    camera_id: u32,
    qvec: [f64; 4],
    tvec: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format: String,
    version: u32,
    cameras: Vec<CameraEntry>,
    images: Vec<ImageEntry>,
    normalization: Option<SimTransform>,
    #[serde(default)]
    points3d: Vec<Point3>,
}

pub fn to_json(model: &SceneModel) -> String {
    let file = SceneFile {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        cameras: model
            .cameras
            .values()
            .map(|c| CameraEntry {
                camera_id: c.camera_id,
                model: c.model,
                width: c.width,
                height: c.height,
                params: c.params.clone(),
            })
            .collect(),
        images: model
            .images
            .iter()
            .map(|i| ImageEntry {
                image_id: i.image_id,
                name: i.name.clone(),
                camera_id: i.camera_id,
                qvec: i.pose.qvec,
                tvec: i.pose.tvec,
            })
            .collect(),
        normalization: model.norm,
        points3d: model.points3d.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("scene serializes");
    text.push('\n');
    text
}

pub fn from_json(text: &str) -> Result<SceneModel> {
    let file: SceneFile = serde_json::from_str(text)?;
    if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
        return Err(SceneFileError::Format {
            format: file.format,
            version: file.version,
        });
    }
    let mut model = SceneModel {
        norm: file.normalization,
        points3d: file.points3d,
        ..SceneModel::default()
    };
    for c in file.cameras {
        let cam = CameraIntrinsics::new(c.camera_id, c.model, c.width, c.height, c.params)?;
        model.cameras.insert(cam.camera_id, cam);
    }
    model.images = file
        .images
        .into_iter()
        .map(|i| ImageRecord {
            image_id: i.image_id,
            name: i.name,
            camera_id: i.camera_id,
            pose: Pose {
                qvec: i.qvec,
                tvec: i.tvec,
            },
        })
        .collect();
    model.validate()?;
    Ok(model)
}

pub fn save_scene(model: &SceneModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)).map_err(|source| SceneFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_scene(path: &Path) -> Result<SceneModel> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text)
}
