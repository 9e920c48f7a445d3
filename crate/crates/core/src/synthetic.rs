//! Synthetic scenes with known geometry: a thin disc seen from orbiting
//! cameras, with masks drawn by the hard rasterizer.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::colmap::{CameraIntrinsics, ImageRecord, Pose, SceneModel};
use crate::dataprep::{ImageBuffer, PrepError, View};
use crate::meshkit::hard_coverage;
use crate::scene_file::{save_scene, SceneFileError};
use crate::tetgrid::TriMesh;

pub const DISC_RADIUS: f64 = 0.5;
pub const DISC_THICKNESS: f64 = 0.02;
pub const DISC_SEGMENTS: usize = 128;
pub const CAMERA_DISTANCE: f64 = 3.0;
/// Focal length in pixels at 128 px; the disc spans about 93 px across.
pub const FOCAL_AT_128: f64 = 280.0;

/// Closed cylinder along `z`, centered at the origin, outward-facing.
pub fn thin_disc(radius: f64, thickness: f64, segments: usize) -> TriMesh {
    let h = thickness / 2.0;
    let mut vertices = vec![Vector3::new(0.0, 0.0, h), Vector3::new(0.0, 0.0, -h)];
    for k in 0..segments {
        let a = 2.0 * PI * k as f64 / segments as f64;
        let (s, c) = a.sin_cos();
        vertices.push(Vector3::new(radius * c, radius * s, h));
        vertices.push(Vector3::new(radius * c, radius * s, -h));
    }
    let top = |k: usize| (2 + 2 * (k % segments)) as u32;
    let bot = |k: usize| (3 + 2 * (k % segments)) as u32;
    let mut faces = Vec::with_capacity(4 * segments);
    for k in 0..segments {
        faces.push([0, top(k), top(k + 1)]);
        faces.push([1, bot(k + 1), bot(k)]);
        faces.push([top(k), bot(k), bot(k + 1)]);
        faces.push([top(k), bot(k + 1), top(k + 1)]);
    }
    TriMesh::new(vertices, faces)
}

/// Pose of a camera at `eye` looking at `target`, image `y` pointing along
/// `-up` as far as possible. `up` must not be parallel to the view direction.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
    let f = (target - eye).normalize();
    let r = f.cross(up).normalize();
    let d = f.cross(&r);
    let rot = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    Pose::from_rotation(&rot, -(rot * eye))
}

/// Camera on a sphere of radius `distance` around the origin, looking at it
/// with `+z` up. Angles in degrees; elevation is measured from the `xy` plane.
pub fn orbit_pose(azimuth_deg: f64, elevation_deg: f64, distance: f64) -> Pose {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * distance;
    look_at(&eye, &Vector3::zeros(), &Vector3::z())
}

pub fn square_intrinsics(res: u32, focal: f64) -> CameraIntrinsics {
    let c = res as f64 / 2.0;
    CameraIntrinsics::pinhole(1, res as u64, res as u64, focal, focal, c, c)
}

/// A view whose mask is the hard silhouette of `mesh`.
pub fn render_view(name: String, mesh: &TriMesh, intrinsics: &CameraIntrinsics, pose: Pose) -> View {
    let res = intrinsics.width as u32;
    let mut view = View {
        name,
        image: ImageBuffer::new(res, res, 3),
        mask: ImageBuffer::new(res, res, 1),
        intrinsics: intrinsics.clone(),
        pose,
    };
    view.mask = hard_coverage(mesh, &view, res);
    view.image = view.mask.to_rgb();
    view
}

/// Inclination of the training ring about the `x` axis, in degrees.
pub const RING_TILT_DEG: f64 = 40.0;
/// Elevation of the extra training poses, in degrees.
pub const ELEVATED_DEG: f64 = 50.0;

/// Training poses: 36 every 10 degrees on a great circle tilted by
/// [`RING_TILT_DEG`] about `x` (the first one sees the disc edge-on), then 8
/// at +-[`ELEVATED_DEG`] elevation.
pub fn training_poses() -> Vec<Pose> {
    let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), RING_TILT_DEG.to_radians());
    let up = tilt * Vector3::z();
    let ring = (0..36).map(move |k| {
        let (s, c) = (10.0 * k as f64).to_radians().sin_cos();
        let eye = tilt * Vector3::new(c, s, 0.0) * CAMERA_DISTANCE;
        look_at(&eye, &Vector3::zeros(), &up)
    });
    let elevated = (0..8).map(|k| {
        let el = if k % 2 == 0 { ELEVATED_DEG } else { -ELEVATED_DEG };
        orbit_pose(45.0 * k as f64, el, CAMERA_DISTANCE)
    });
    ring.chain(elevated).collect()
}

/// Held-out poses, none of which coincide with a training pose.
pub fn held_out_poses() -> Vec<(f64, f64)> {
    [(25.0, 30.0), (85.0, -30.0), (145.0, 45.0), (205.0, -45.0), (265.0, 30.0), (325.0, -30.0)].to_vec()
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub reference: TriMesh,
    pub train: Vec<View>,
    pub held_out: Vec<View>,
}

/// Thin disc in the `xy` plane observed at `res x res`.
pub fn thin_disc_scene(res: u32) -> SyntheticScene {
    let reference = thin_disc(DISC_RADIUS, DISC_THICKNESS, DISC_SEGMENTS);
    let intr = square_intrinsics(res, FOCAL_AT_128 * res as f64 / 128.0);
    let make = |prefix: &str, poses: Vec<Pose>| -> Vec<View> {
        poses
            .into_iter()
            .enumerate()
            .map(|(i, pose)| render_view(format!("{prefix}{i:03}.png"), &reference, &intr, pose))
            .collect()
    };
    let held = held_out_poses().into_iter().map(|(az, el)| orbit_pose(az, el, CAMERA_DISTANCE)).collect();
    SyntheticScene {
        train: make("train_", training_poses()),
        held_out: make("test_", held),
        reference,
    }
}

/// Scene model for `views`, one camera per distinct intrinsics.
pub fn scene_model(views: &[View]) -> SceneModel {
    let mut model = SceneModel::default();
    for (i, v) in views.iter().enumerate() {
        let camera_id = match model.cameras.values().find(|c| {
            (c.model, c.width, c.height, &c.params) == (v.intrinsics.model, v.intrinsics.width, v.intrinsics.height, &v.intrinsics.params)
        }) {
            Some(c) => c.camera_id,
            None => {
                let id = model.cameras.len() as u32 + 1;
                model.cameras.insert(
                    id,
                    CameraIntrinsics {
                        camera_id: id,
                        ..v.intrinsics.clone()
                    },
                );
                id
            }
        };
        model.images.push(ImageRecord {
            image_id: i as u32 + 1,
            name: v.name.clone(),
            camera_id,
            pose: v.pose,
        });
    }
    model
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Scene(#[from] SceneFileError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes `frames/`, `masks/` and `scene.json` under `dir`.
pub fn write_dataset(views: &[View], dir: &Path) -> Result<(), DatasetError> {
    let frames = dir.join("frames");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&frames)?;
    std::fs::create_dir_all(&masks)?;
    for v in views {
        v.image.save_png(&frames.join(&v.name))?;
        v.mask.save_png(&masks.join(&v.name))?;
    }
    save_scene(&scene_model(views), &dir.join("scene.json"))?;
    Ok(())
}
