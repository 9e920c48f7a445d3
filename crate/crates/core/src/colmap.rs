//! COLMAP sparse-model parsing and scene normalization.
//!
//! Both the text (`cameras.txt`, `images.txt`, `points3D.txt`) and binary
//! (`cameras.bin`, `images.bin`, `points3D.bin`) layouts are supported. Poses
//! are world-to-camera: `x_cam = R * x_world + t`.
//!
//! Format reference: <https://colmap.github.io/format.html>

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default radius of the normalized object inside the `[-1, 1]^3` grid domain.
pub const DEFAULT_TARGET_RADIUS: f64 = 0.35;

/// Radial distortion magnitude above which a SIMPLE_RADIAL camera triggers a warning.
const RADIAL_WARN_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("missing model file {0}")]
    MissingFile(PathBuf),

    #[error("I/O error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed record at line {line}: {msg}")]
    MalformedText {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: malformed record at byte offset {offset}: {msg}")]
    MalformedBinary {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("unsupported camera model {0}")]
    UnknownCameraModel(String),

    #[error("image {image_id} ({name}) references unknown camera {camera_id}")]
    DanglingCamera {
        image_id: u32,
        name: String,
        camera_id: u32,
    },

    #[error("duplicate image file name {0}")]
    DuplicateImageName(String),

    #[error("invalid camera {camera_id}: {msg}")]
    InvalidCamera { camera_id: u32, msg: String },

    #[error("zero quaternion")]
    ZeroQuaternion,

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
}

pub type Result<T> = std::result::Result<T, ColmapError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
    SimpleRadial,
}

impl CameraModel {
    pub fn from_id(id: i32) -> Result<Self> {
        match id {
            0 => Ok(Self::SimplePinhole),
            1 => Ok(Self::Pinhole),
            2 => Ok(Self::SimpleRadial),
            other => Err(ColmapError::UnknownCameraModel(format!("id {other}"))),
        }
    }

    pub fn id(self) -> i32 {
        match self {
            Self::SimplePinhole => 0,
            Self::Pinhole => 1,
            Self::SimpleRadial => 2,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "SIMPLE_PINHOLE" => Ok(Self::SimplePinhole),
            "PINHOLE" => Ok(Self::Pinhole),
            "SIMPLE_RADIAL" => Ok(Self::SimpleRadial),
            other => Err(ColmapError::UnknownCameraModel(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SimplePinhole => "SIMPLE_PINHOLE",
            Self::Pinhole => "PINHOLE",
            Self::SimpleRadial => "SIMPLE_RADIAL",
        }
    }

    pub fn num_params(self) -> usize {
        match self {
            Self::SimplePinhole => 3,
            Self::Pinhole | Self::SimpleRadial => 4,
        }
    }
}

/// Camera intrinsics. Parameter order follows COLMAP:
/// SIMPLE_PINHOLE `f, cx, cy`; PINHOLE `fx, fy, cx, cy`; SIMPLE_RADIAL `f, cx, cy, k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl CameraIntrinsics {
    pub fn new(
        camera_id: u32,
        model: CameraModel,
        width: u64,
        height: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        let cam = Self {
            camera_id,
            model,
            width,
            height,
            params,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn pinhole(camera_id: u32, width: u64, height: u64, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            camera_id,
            model: CameraModel::Pinhole,
            width,
            height,
            params: vec![fx, fy, cx, cy],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| ColmapError::InvalidCamera {
            camera_id: self.camera_id,
            msg,
        };
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!("size {}x{}", self.width, self.height)));
        }
        if self.params.len() != self.model.num_params() {
            return Err(invalid(format!(
                "{} expects {} params, got {}",
                self.model.name(),
                self.model.num_params(),
                self.params.len()
            )));
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(invalid("non-finite parameter".into()));
        }
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(invalid("focal length must be positive".into()));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.params[0]
    }

    pub fn fy(&self) -> f64 {
        match self.model {
            CameraModel::Pinhole => self.params[1],
            _ => self.params[0],
        }
    }

    pub fn cx(&self) -> f64 {
        match self.model {
            CameraModel::Pinhole => self.params[2],
            _ => self.params[1],
        }
    }

    pub fn cy(&self) -> f64 {
        match self.model {
            CameraModel::Pinhole => self.params[3],
            _ => self.params[2],
        }
    }

    /// Radial distortion coefficient (SIMPLE_RADIAL only). Parsed but not
    /// applied during projection.
    pub fn radial_k(&self) -> Option<f64> {
        match self.model {
            CameraModel::SimpleRadial => Some(self.params[3]),
            _ => None,
        }
    }

    /// Intrinsics for the same camera resampled to `width x height` pixels.
    ///
    /// `fx, cx` scale by `width / self.width` and `fy, cy` by
    /// `height / self.height`. A non-uniform rescale of a single-focal model
    /// is promoted to PINHOLE (the radial coefficient is dropped).
    pub fn rescaled(&self, width: u64, height: u64) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let (fx, fy, cx, cy) = (self.fx() * sx, self.fy() * sy, self.cx() * sx, self.cy() * sy);
        let (model, params) = match self.model {
            CameraModel::Pinhole => (CameraModel::Pinhole, vec![fx, fy, cx, cy]),
            _ if sx != sy => (CameraModel::Pinhole, vec![fx, fy, cx, cy]),
            CameraModel::SimplePinhole => (CameraModel::SimplePinhole, vec![fx, cx, cy]),
            CameraModel::SimpleRadial => {
                (CameraModel::SimpleRadial, vec![fx, cx, cy, self.params[3]])
            }
        };
        Self {
            camera_id: self.camera_id,
            model,
            width,
            height,
            params,
        }
    }
}

/// World-to-camera pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// `(qw, qx, qy, qz)`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            qvec: [1.0, 0.0, 0.0, 0.0],
            tvec: [0.0; 3],
        }
    }

    pub fn from_rotation(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            qvec: rotmat_to_quat(rotation),
            tvec: translation.into(),
        }
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        quat_to_rotmat(self.qvec)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.tvec)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Result<Vector3<f64>> {
        Ok(-(self.rotation()?.transpose() * self.translation()))
    }
}

/// Converts a (possibly slightly non-unit) quaternion `(w, x, y, z)` to a
/// rotation matrix. The quaternion is renormalized first.
pub fn quat_to_rotmat(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ColmapError::ZeroQuaternion);
    }
    let [w, x, y, z] = q.map(|c| c / norm);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Inverse of [`quat_to_rotmat`] for a proper rotation. Returns the
/// quaternion with non-negative `w`.
pub fn rotmat_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = 0.5 / (trace + 1.0).sqrt();
        [
            0.25 / s,
            (r[(2, 1)] - r[(1, 2)]) * s,
            (r[(0, 2)] - r[(2, 0)]) * s,
            (r[(1, 0)] - r[(0, 1)]) * s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt();
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = 2.0 * (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt();
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|c| sign * c / norm)
}

/// Uniform similarity `x' = scale * (x - center)` applied to a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl SimTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (x - Vector3::from(self.center)) * self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u32,
    pub name: String,
    pub camera_id: u32,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub point_id: u64,
    pub xyz: [f64; 3],
}

/// Parsed COLMAP reconstruction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneModel {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: Vec<ImageRecord>,
    pub points3d: Vec<Point3>,
    pub norm: Option<SimTransform>,
}

impl SceneModel {
    /// Checks the cross-record invariants (camera references, unique names,
    /// camera validity).
    pub fn validate(&self) -> Result<()> {
        for cam in self.cameras.values() {
            cam.validate()?;
        }
        let mut names = HashSet::new();
        for img in &self.images {
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(ColmapError::DanglingCamera {
                    image_id: img.image_id,
                    name: img.name.clone(),
                    camera_id: img.camera_id,
                });
            }
            if !names.insert(img.name.as_str()) {
                return Err(ColmapError::DuplicateImageName(img.name.clone()));
            }
        }
        Ok(())
    }

    pub fn camera_for(&self, image: &ImageRecord) -> Option<&CameraIntrinsics> {
        self.cameras.get(&image.camera_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelFormat {
    #[default]
    Auto,
    Text,
    Binary,
}

/// Parses a COLMAP model directory.
///
/// With [`ModelFormat::Auto`] the binary files are used when both
/// `cameras.bin` and `images.bin` exist, otherwise the text files.
/// `points3D.*` is optional. Images are returned sorted by `image_id`.
pub fn parse_model(dir: &Path, format: ModelFormat) -> Result<SceneModel> {
    let binary = match format {
        ModelFormat::Binary => true,
        ModelFormat::Text => false,
        ModelFormat::Auto => dir.join("cameras.bin").is_file() && dir.join("images.bin").is_file(),
    };
    let ext = if binary { "bin" } else { "txt" };
    let cameras_path = dir.join(format!("cameras.{ext}"));
    let images_path = dir.join(format!("images.{ext}"));
    let points_path = dir.join(format!("points3D.{ext}"));

    let (cameras, mut images, points3d) = if binary {
        let cameras = read_cameras_bin(&cameras_path, &read_file(&cameras_path)?)?;
        let images = read_images_bin(&images_path, &read_file(&images_path)?)?;
        let points = if points_path.is_file() {
            read_points3d_bin(&points_path, &read_file(&points_path)?)?
        } else {
            Vec::new()
        };
        (cameras, images, points)
    } else {
        let cameras = read_cameras_text(&cameras_path, &read_text(&cameras_path)?)?;
        let images = read_images_text(&images_path, &read_text(&images_path)?)?;
        let points = if points_path.is_file() {
            read_points3d_text(&points_path, &read_text(&points_path)?)?
        } else {
            Vec::new()
        };
        (cameras, images, points)
    };
    images.sort_by_key(|img| img.image_id);

    for cam in cameras.values() {
        if let Some(k) = cam.radial_k() {
            if k.abs() > RADIAL_WARN_THRESHOLD {
                log::warn!(
                    "camera {} has radial distortion k = {k}; distortion is ignored in projection",
                    cam.camera_id
                );
            }
        }
    }

    let model = SceneModel {
        cameras,
        images,
        points3d,
        norm: None,
    };
    model.validate()?;
    Ok(model)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(ColmapError::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|source| ColmapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| ColmapError::MalformedText {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("invalid UTF-8: {e}"),
    })
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

struct TextFields<'a> {
    path: &'a Path,
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> TextFields<'a> {
    fn new(path: &'a Path, line: usize, text: &'a str) -> Self {
        Self {
            path,
            line,
            tokens: text.split_whitespace(),
        }
    }

    fn err(&self, msg: impl Into<String>) -> ColmapError {
        ColmapError::MalformedText {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next_str(&mut self, what: &str) -> Result<&'a str> {
        self.tokens
            .next()
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.next_str(what)?;
        tok.parse()
            .map_err(|_| self.err(format!("invalid {what} '{tok}'")))
    }

    fn rest(self) -> std::str::SplitWhitespace<'a> {
        self.tokens
    }
}

fn is_comment_or_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn read_cameras_text(path: &Path, text: &str) -> Result<BTreeMap<u32, CameraIntrinsics>> {
    let mut cameras = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if is_comment_or_blank(line) {
            continue;
        }
        let mut f = TextFields::new(path, idx + 1, line);
        let camera_id: u32 = f.next("camera id")?;
        let model = CameraModel::from_name(f.next_str("camera model")?)?;
        let width: u64 = f.next("width")?;
        let height: u64 = f.next("height")?;
        let mut params = Vec::with_capacity(model.num_params());
        for i in 0..model.num_params() {
            params.push(f.next::<f64>(&format!("param {i}"))?);
        }
        let line_no = f.line;
        if f.rest().next().is_some() {
            return Err(ColmapError::MalformedText {
                path: path.to_path_buf(),
                line: line_no,
                msg: "trailing fields after camera params".into(),
            });
        }
        let cam = CameraIntrinsics::new(camera_id, model, width, height, params)?;
        cameras.insert(camera_id, cam);
    }
    Ok(cameras)
}

/// Each image occupies two lines: the pose header and its points2D list.
/// The points2D line may be empty, so blank lines are only skipped while
/// looking for a header.
fn read_images_text(path: &Path, text: &str) -> Result<Vec<ImageRecord>> {
    let mut images = Vec::new();
    let mut lines = text.lines().enumerate();
    while let Some((idx, line)) = lines.next() {
        if is_comment_or_blank(line) {
            continue;
        }
        let mut f = TextFields::new(path, idx + 1, line);
        let image_id: u32 = f.next("image id")?;
        let mut qvec = [0.0; 4];
        for (i, q) in qvec.iter_mut().enumerate() {
            *q = f.next(&format!("q{i}"))?;
        }
        let mut tvec = [0.0; 3];
        for (i, t) in tvec.iter_mut().enumerate() {
            *t = f.next(&format!("t{i}"))?;
        }
        let camera_id: u32 = f.next("camera id")?;
        // Names may contain spaces; everything after the camera id is the name.
        let name = f.rest().collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(ColmapError::MalformedText {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "missing image name".into(),
            });
        }
        // points2D line: read and discarded.
        let _ = lines.next();
        images.push(ImageRecord {
            image_id,
            name,
            camera_id,
            pose: Pose { qvec, tvec },
        });
    }
    Ok(images)
}

fn read_points3d_text(path: &Path, text: &str) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if is_comment_or_blank(line) {
            continue;
        }
        let mut f = TextFields::new(path, idx + 1, line);
        let point_id: u64 = f.next("point id")?;
        let x: f64 = f.next("x")?;
        let y: f64 = f.next("y")?;
        let z: f64 = f.next("z")?;
        // Color, error and track are not needed downstream.
        points.push(Point3 {
            point_id,
            xyz: [x, y, z],
        });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Binary format
// ---------------------------------------------------------------------------

struct BinReader<'a> {
    path: &'a Path,
    cur: Cursor<&'a [u8]>,
}

impl<'a> BinReader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            cur: Cursor::new(bytes),
        }
    }

    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn err_at(&self, offset: u64, msg: impl Into<String>) -> ColmapError {
        ColmapError::MalformedBinary {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn remaining(&self) -> u64 {
        self.cur.get_ref().len() as u64 - self.cur.position()
    }

    fn wrap<T>(&mut self, what: &str, f: impl FnOnce(&mut Cursor<&'a [u8]>) -> std::io::Result<T>) -> Result<T> {
        let at = self.offset();
        f(&mut self.cur).map_err(|_| self.err_at(at, format!("truncated while reading {what}")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.wrap(what, |c| c.read_u8())
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        self.wrap(what, |c| c.read_u32::<LittleEndian>())
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        self.wrap(what, |c| c.read_i32::<LittleEndian>())
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        self.wrap(what, |c| c.read_u64::<LittleEndian>())
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        self.wrap(what, |c| c.read_f64::<LittleEndian>())
    }

    fn skip(&mut self, n: u64, what: &str) -> Result<()> {
        if self.remaining() < n {
            return Err(self.err_at(self.offset(), format!("truncated while skipping {what}")));
        }
        self.cur.set_position(self.offset() + n);
        Ok(())
    }

    /// Record count with a sanity bound: each record needs at least
    /// `min_record_bytes`, so larger counts indicate corruption.
    fn count(&mut self, what: &str, min_record_bytes: u64) -> Result<u64> {
        let at = self.offset();
        let n = self.u64(what)?;
        if n.saturating_mul(min_record_bytes) > self.remaining() {
            return Err(self.err_at(at, format!("{what} {n} exceeds file size")));
        }
        Ok(n)
    }

    fn cstring(&mut self, what: &str) -> Result<String> {
        let at = self.offset();
        let mut bytes = Vec::new();
        loop {
            let mut b = [0u8; 1];
            if self.cur.read_exact(&mut b).is_err() {
                return Err(self.err_at(at, format!("unterminated {what}")));
            }
            if b[0] == 0 {
                break;
            }
            bytes.push(b[0]);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err_at(self.offset(), format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn read_cameras_bin(path: &Path, bytes: &[u8]) -> Result<BTreeMap<u32, CameraIntrinsics>> {
    let mut r = BinReader::new(path, bytes);
    let n = r.count("camera count", 24)?;
    let mut cameras = BTreeMap::new();
    for _ in 0..n {
        let camera_id = r.u32("camera id")?;
        let model_at = r.offset();
        let model_id = r.i32("model id")?;
        let model = CameraModel::from_id(model_id).map_err(|e| match e {
            ColmapError::UnknownCameraModel(m) => {
                ColmapError::UnknownCameraModel(format!("{m} in {} at byte offset {model_at}", path.display()))
            }
            other => other,
        })?;
        let width = r.u64("width")?;
        let height = r.u64("height")?;
        let mut params = Vec::with_capacity(model.num_params());
        for _ in 0..model.num_params() {
            params.push(r.f64("camera param")?);
        }
        let cam = CameraIntrinsics::new(camera_id, model, width, height, params)?;
        cameras.insert(camera_id, cam);
    }
    r.expect_end()?;
    Ok(cameras)
}

fn read_images_bin(path: &Path, bytes: &[u8]) -> Result<Vec<ImageRecord>> {
    let mut r = BinReader::new(path, bytes);
    let n = r.count("image count", 72)?;
    let mut images = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let image_id = r.u32("image id")?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = r.f64("qvec")?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = r.f64("tvec")?;
        }
        let camera_id = r.u32("camera id")?;
        let name = r.cstring("image name")?;
        let num_points = r.count("points2D count", 24)?;
        // x: f64, y: f64, point3D_id: u64 per observation.
        r.skip(num_points * 24, "points2D")?;
        images.push(ImageRecord {
            image_id,
            name,
            camera_id,
            pose: Pose { qvec, tvec },
        });
    }
    r.expect_end()?;
    Ok(images)
}

fn read_points3d_bin(path: &Path, bytes: &[u8]) -> Result<Vec<Point3>> {
    let mut r = BinReader::new(path, bytes);
    let n = r.count("point count", 43)?;
    let mut points = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let point_id = r.u64("point id")?;
        let xyz = [r.f64("x")?, r.f64("y")?, r.f64("z")?];
        for _ in 0..3 {
            r.u8("color")?;
        }
        r.f64("reprojection error")?;
        let track = r.count("track length", 8)?;
        r.skip(track * 8, "track")?;
        points.push(Point3 { point_id, xyz });
    }
    r.expect_end()?;
    Ok(points)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Linear-interpolated percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn centroid<'a>(points: impl Iterator<Item = &'a Vector3<f64>>) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in points {
        sum += p;
        n += 1;
    }
    sum / n as f64
}

/// Points surviving outlier rejection: those within 3x the median distance
/// from the raw centroid. The selection is invariant under uniform
/// similarity transforms.
pub fn inlier_points(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    if points.is_empty() {
        return Vec::new();
    }
    let raw = centroid(points.iter());
    let dists: Vec<f64> = points.iter().map(|p| (p - raw).norm()).collect();
    let median = percentile(&dists, 0.5);
    points
        .iter()
        .zip(&dists)
        .filter(|(_, d)| **d <= 3.0 * median)
        .map(|(p, _)| *p)
        .collect()
}

/// Computes the normalizing similarity for a scene without applying it.
pub fn compute_normalization(model: &SceneModel, target_radius: f64) -> Result<SimTransform> {
    if !(target_radius > 0.0) || !target_radius.is_finite() {
        return Err(ColmapError::DegenerateScene(format!(
            "target radius {target_radius} must be positive"
        )));
    }
    if !model.points3d.is_empty() {
        let pts: Vec<Vector3<f64>> = model.points3d.iter().map(|p| Vector3::from(p.xyz)).collect();
        let inliers = inlier_points(&pts);
        let center = centroid(inliers.iter());
        let dists: Vec<f64> = inliers.iter().map(|p| (p - center).norm()).collect();
        let p95 = percentile(&dists, 0.95);
        if !(p95 > 0.0) {
            return Err(ColmapError::DegenerateScene("all 3D points coincide".into()));
        }
        return Ok(SimTransform {
            center: center.into(),
            scale: target_radius / p95,
        });
    }

    if model.images.len() < 2 {
        return Err(ColmapError::DegenerateScene(
            "no 3D points and fewer than two cameras".into(),
        ));
    }
    let centers = model
        .images
        .iter()
        .map(|img| img.pose.center())
        .collect::<Result<Vec<_>>>()?;
    let center = centroid(centers.iter());
    let mean_dist = centers.iter().map(|c| (c - center).norm()).sum::<f64>() / centers.len() as f64;
    if !(mean_dist > 0.0) {
        return Err(ColmapError::DegenerateScene("all camera centers coincide".into()));
    }
    Ok(SimTransform {
        center: center.into(),
        scale: target_radius / mean_dist,
    })
}

/// Applies a similarity to every point and pose: `x' = s (x - c)`,
/// `R' = R`, `t' = s (R c + t)`. Projections are unchanged.
pub fn apply_transform(model: &SceneModel, tf: SimTransform) -> Result<SceneModel> {
    let c = Vector3::from(tf.center);
    let images = model
        .images
        .iter()
        .map(|img| {
            let r = img.pose.rotation()?;
            let t = (r * c + img.pose.translation()) * tf.scale;
            Ok(ImageRecord {
                pose: Pose {
                    qvec: img.pose.qvec,
                    tvec: t.into(),
                },
                ..img.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points3d = model
        .points3d
        .iter()
        .map(|p| Point3 {
            point_id: p.point_id,
            xyz: tf.apply(&Vector3::from(p.xyz)).into(),
        })
        .collect();
    Ok(SceneModel {
        cameras: model.cameras.clone(),
        images,
        points3d,
        norm: Some(tf),
    })
}

/// Moves the scene into the unit reconstruction domain. See
/// [`compute_normalization`] for how the center and scale are chosen.
pub fn normalize_scene(model: &SceneModel, target_radius: f64) -> Result<SceneModel> {
    let tf = compute_normalization(model, target_radius)?;
    apply_transform(model, tf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn assert_mat_eq(a: &Matrix3<f64>, b: &Matrix3<f64>) {
        assert!((a - b).abs().max() < 1e-12, "{a} != {b}");
    }

    #[test]
    fn identity_quaternion() {
        assert_mat_eq(&quat_to_rotmat([1.0, 0.0, 0.0, 0.0]).unwrap(), &Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = quat_to_rotmat([FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2]).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_mat_eq(&r, &expected);
    }

    #[test]
    fn half_turn_about_z() {
        let r = quat_to_rotmat([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_mat_eq(&r, &Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(quat_to_rotmat([0.0; 4]), Err(ColmapError::ZeroQuaternion)));
    }

    #[test]
    fn slightly_denormalized_quaternion_is_renormalized() {
        let r = quat_to_rotmat([1.0005, 0.0, 0.0, 0.0]).unwrap();
        assert_mat_eq(&r, &Matrix3::identity());
    }

    #[test]
    fn rotmat_quat_round_trip() {
        for q in [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.5, 0.5, -0.5, 0.5],
        ] {
            let r = quat_to_rotmat(q).unwrap();
            let back = quat_to_rotmat(rotmat_to_quat(&r)).unwrap();
            assert_mat_eq(&r, &back);
        }
    }

    #[test]
    fn pinhole_text_line() {
        let cams = read_cameras_text(Path::new("cameras.txt"), "1 PINHOLE 512 512 450.0 450.0 256.0 256.0\n").unwrap();
        let cam = &cams[&1];
        assert_eq!(cam.model, CameraModel::Pinhole);
        assert_eq!((cam.width, cam.height), (512, 512));
        assert_eq!(cam.params, vec![450.0, 450.0, 256.0, 256.0]);
    }

    #[test]
    fn image_text_record_with_empty_points_line() {
        let text = "# header\n5 1.0 0.0 0.0 0.0 0.0 0.0 4.0 1 frame_0005.png\n\n";
        let imgs = read_images_text(Path::new("images.txt"), text).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].image_id, 5);
        assert_eq!(imgs[0].name, "frame_0005.png");
        assert_eq!(imgs[0].pose.qvec, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(imgs[0].pose.tvec, [0.0, 0.0, 4.0]);
    }

    #[test]
    fn image_text_points_line_is_not_a_header() {
        let text = "1 1 0 0 0 0 0 1 1 a.png\n10.0 20.0 -1 30.0 40.0 7\n2 1 0 0 0 0 0 2 1 b.png\n\n";
        let imgs = read_images_text(Path::new("images.txt"), text).unwrap();
        assert_eq!(imgs.iter().map(|i| i.name.as_str()).collect::<Vec<_>>(), ["a.png", "b.png"]);
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = read_cameras_text(Path::new("cameras.txt"), "# c\n1 PINHOLE 512 abc 1 1 1 1\n").unwrap_err();
        match err {
            ColmapError::MalformedText { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_text_model() {
        let err = read_cameras_text(Path::new("cameras.txt"), "1 OPENCV 512 512 1 1 1 1 0 0 0 0\n").unwrap_err();
        assert!(matches!(err, ColmapError::UnknownCameraModel(_)));
    }

    #[test]
    fn binary_camera_fixture() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&512u64.to_le_bytes());
        bytes.extend_from_slice(&512u64.to_le_bytes());
        for p in [450.0f64, 450.0, 256.0, 256.0] {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let bin = read_cameras_bin(Path::new("cameras.bin"), &bytes).unwrap();
        let txt = read_cameras_text(Path::new("cameras.txt"), "1 PINHOLE 512 512 450.0 450.0 256.0 256.0").unwrap();
        assert_eq!(bin, txt);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&512u64.to_le_bytes());
        bytes.extend_from_slice(&512u64.to_le_bytes());
        bytes.extend_from_slice(&450.0f64.to_le_bytes());
        // Pad so the count check passes but the params are short.
        let err = read_cameras_bin(Path::new("cameras.bin"), &bytes).unwrap_err();
        match err {
            ColmapError::MalformedBinary { offset, .. } => assert_eq!(offset, 8 + 4 + 4 + 8 + 8 + 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_binary_model() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&7i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 64]);
        let err = read_cameras_bin(Path::new("cameras.bin"), &bytes).unwrap_err();
        assert!(matches!(err, ColmapError::UnknownCameraModel(_)));
    }

    fn model_with_points(points: &[[f64; 3]]) -> SceneModel {
        let mut cameras = BTreeMap::new();
        cameras.insert(1, CameraIntrinsics::pinhole(1, 64, 64, 50.0, 50.0, 32.0, 32.0));
        SceneModel {
            cameras,
            images: vec![ImageRecord {
                image_id: 1,
                name: "a.png".into(),
                camera_id: 1,
                pose: Pose {
                    qvec: [1.0, 0.0, 0.0, 0.0],
                    tvec: [0.0, 0.0, 4.0],
                },
            }],
            points3d: points
                .iter()
                .enumerate()
                .map(|(i, p)| Point3 {
                    point_id: i as u64,
                    xyz: *p,
                })
                .collect(),
            norm: None,
        }
    }

    #[test]
    fn translation_update_rule() {
        let model = model_with_points(&[[1.0, 0.0, 0.0]]);
        let out = apply_transform(
            &model,
            SimTransform {
                center: [0.0; 3],
                scale: 0.25,
            },
        )
        .unwrap();
        assert_eq!(out.images[0].pose.tvec, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_transform_leaves_model() {
        let model = model_with_points(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        let out = apply_transform(
            &model,
            SimTransform {
                center: [0.0; 3],
                scale: 1.0,
            },
        )
        .unwrap();
        assert_eq!(out.images, model.images);
        assert_eq!(out.points3d, model.points3d);
    }

    #[test]
    fn symmetric_pair_normalization() {
        let model = model_with_points(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let tf = compute_normalization(&model, 0.35).unwrap();
        assert_eq!(tf.center, [0.0; 3]);
        assert!((tf.scale - 0.35).abs() < 1e-15);
    }

    #[test]
    fn outliers_do_not_move_center() {
        let mut pts: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let a = i as f64 * 0.3;
                [a.cos(), a.sin(), 0.0]
            })
            .collect();
        pts.push([100.0, 100.0, 100.0]);
        let tf = compute_normalization(&model_with_points(&pts), 0.35).unwrap();
        assert!(Vector3::from(tf.center).norm() < 0.2);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let model = model_with_points(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        assert!(matches!(
            compute_normalization(&model, 0.35),
            Err(ColmapError::DegenerateScene(_))
        ));
    }

    #[test]
    fn camera_fallback_without_points() {
        let mut model = model_with_points(&[]);
        let mut second = model.images[0].clone();
        second.image_id = 2;
        second.name = "b.png".into();
        // Camera centers at (0,0,-4) and (0,0,4).
        second.pose = Pose {
            qvec: [0.0, 1.0, 0.0, 0.0],
            tvec: [0.0, 0.0, 4.0],
        };
        model.images.push(second);
        let tf = compute_normalization(&model, 0.5).unwrap();
        assert!(Vector3::from(tf.center).norm() < 1e-12);
        assert!((tf.scale - 0.5 / 4.0).abs() < 1e-12);

        model.images.truncate(1);
        assert!(matches!(
            compute_normalization(&model, 0.5),
            Err(ColmapError::DegenerateScene(_))
        ));
    }

    #[test]
    fn dangling_camera_rejected() {
        let mut model = model_with_points(&[]);
        model.images[0].camera_id = 9;
        assert!(matches!(model.validate(), Err(ColmapError::DanglingCamera { .. })));
    }

    #[test]
    fn rescale_pinhole_intrinsics() {
        let cam = CameraIntrinsics::pinhole(1, 1024, 1024, 1000.0, 1000.0, 512.0, 512.0);
        let r = cam.rescaled(512, 512);
        assert_eq!((r.fx(), r.cx()), (500.0, 256.0));
        let simple = CameraIntrinsics::new(2, CameraModel::SimplePinhole, 200, 100, vec![100.0, 100.0, 50.0]).unwrap();
        let r = simple.rescaled(100, 100);
        assert_eq!(r.model, CameraModel::Pinhole);
        assert_eq!((r.fx(), r.fy(), r.cx(), r.cy()), (50.0, 100.0, 50.0, 50.0));
    }
}
