//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use thinrecon::colmap::{CameraIntrinsics, CameraModel};
use thinrecon::TriMesh;

pub struct ToyImage {
    pub id: u32,
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub camera_id: u32,
    pub name: &'static str,
    pub points2d: Vec<(f64, f64, i64)>,
}

pub struct ToyPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    pub track: Vec<(u32, u32)>,
}

pub struct ToyModel {
    pub cameras: Vec<CameraIntrinsics>,
    pub images: Vec<ToyImage>,
    pub points: Vec<ToyPoint>,
}

/// Two cameras, three images, five points.
pub fn toy_model() -> ToyModel {
    ToyModel {
        cameras: vec![
            CameraIntrinsics::pinhole(1, 640, 480, 520.5, 519.25, 320.0, 240.0),
            CameraIntrinsics {
                camera_id: 2,
                model: CameraModel::SimpleRadial,
                width: 320,
                height: 240,
                params: vec![260.0, 160.5, 119.5, 0.0125],
            },
        ],
        images: vec![
            ToyImage {
                id: 1,
                q: [1.0, 0.0, 0.0, 0.0],
                t: [0.0, 0.0, 4.0],
                camera_id: 1,
                name: "frame_0001.png",
                points2d: vec![(10.5, 20.25, 1), (30.0, 40.0, -1)],
            },
            // Deliberately not unit length.
            ToyImage {
                id: 2,
                q: [0.9, 0.1, -0.3, 0.2],
                t: [-0.5, 0.25, 3.5],
                camera_id: 1,
                name: "frame_0002.png",
                points2d: vec![],
            },
            ToyImage {
                id: 3,
                q: [0.5, 0.5, 0.5, 0.5],
                t: [1.0, -2.0, 5.0],
                camera_id: 2,
                name: "frame_0003.png",
                points2d: vec![(1.0, 2.0, 3)],
            },
        ],
        points: vec![
            ToyPoint { id: 1, xyz: [0.1, 0.2, 0.3], rgb: [255, 0, 0], error: 0.5, track: vec![(1, 0), (3, 0)] },
            ToyPoint { id: 2, xyz: [-0.4, 0.15, 0.05], rgb: [0, 255, 0], error: 0.25, track: vec![(2, 5)] },
            ToyPoint { id: 3, xyz: [0.3, -0.35, 0.2], rgb: [0, 0, 255], error: 1.0, track: vec![] },
            ToyPoint { id: 4, xyz: [0.0, 0.45, -0.1], rgb: [9, 9, 9], error: 0.125, track: vec![(1, 1)] },
            ToyPoint { id: 5, xyz: [-0.2, -0.2, -0.3], rgb: [1, 2, 3], error: 2.0, track: vec![(3, 0), (2, 1)] },
        ],
    }
}

pub fn write_text(model: &ToyModel, dir: &Path) {
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in &model.cameras {
        let params: Vec<String> = c.params.iter().map(|p| p.to_string()).collect();
        cams += &format!("{} {} {} {} {}\n", c.camera_id, c.model.name(), c.width, c.height, params.join(" "));
    }
    std::fs::write(dir.join("cameras.txt"), cams).unwrap();

    let mut imgs = String::from("# Image list with two lines of data per image:\n");
    for i in &model.images {
        imgs += &format!(
            "{} {} {} {} {} {} {} {} {} {}\n",
            i.id, i.q[0], i.q[1], i.q[2], i.q[3], i.t[0], i.t[1], i.t[2], i.camera_id, i.name
        );
        let pts: Vec<String> = i.points2d.iter().map(|(x, y, id)| format!("{x} {y} {id}")).collect();
        imgs += &pts.join(" ");
        imgs += "\n";
    }
    std::fs::write(dir.join("images.txt"), imgs).unwrap();

    let mut pts = String::from("# 3D point list\n");
    for p in &model.points {
        pts += &format!(
            "{} {} {} {} {} {} {} {}",
            p.id, p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2], p.error
        );
        for (img, idx) in &p.track {
            pts += &format!(" {img} {idx}");
        }
        pts += "\n";
    }
    std::fs::write(dir.join("points3D.txt"), pts).unwrap();
}

pub fn cameras_bin(model: &ToyModel) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend((model.cameras.len() as u64).to_le_bytes());
    for c in &model.cameras {
        b.extend(c.camera_id.to_le_bytes());
        b.extend(c.model.id().to_le_bytes());
        b.extend(c.width.to_le_bytes());
        b.extend(c.height.to_le_bytes());
        for p in &c.params {
            b.extend(p.to_le_bytes());
        }
    }
    b
}

pub fn images_bin(model: &ToyModel) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend((model.images.len() as u64).to_le_bytes());
    for i in &model.images {
        b.extend(i.id.to_le_bytes());
        for v in i.q.iter().chain(&i.t) {
            b.extend(v.to_le_bytes());
        }
        b.extend(i.camera_id.to_le_bytes());
        b.extend(i.name.as_bytes());
        b.push(0);
        b.extend((i.points2d.len() as u64).to_le_bytes());
        for (x, y, id) in &i.points2d {
            b.extend(x.to_le_bytes());
            b.extend(y.to_le_bytes());
            b.extend(id.to_le_bytes());
        }
    }
    b
}

pub fn points_bin(model: &ToyModel) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend((model.points.len() as u64).to_le_bytes());
    for p in &model.points {
        b.extend(p.id.to_le_bytes());
        for v in p.xyz {
            b.extend(v.to_le_bytes());
        }
        b.extend(p.rgb);
        b.extend(p.error.to_le_bytes());
        b.extend((p.track.len() as u64).to_le_bytes());
        for (img, idx) in &p.track {
            b.extend(img.to_le_bytes());
            b.extend(idx.to_le_bytes());
        }
    }
    b
}

pub fn write_binary(model: &ToyModel, dir: &Path) {
    std::fs::write(dir.join("cameras.bin"), cameras_bin(model)).unwrap();
    std::fs::write(dir.join("images.bin"), images_bin(model)).unwrap();
    std::fs::write(dir.join("points3D.bin"), points_bin(model)).unwrap();
}

fn mesh(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> TriMesh {
    TriMesh::new(vertices.iter().map(|&v| Vector3::from(v)).collect(), faces.to_vec())
}

/// Unit cube `[0, 1]^3`, 12 outward-facing triangles.
pub fn cube() -> TriMesh {
    mesh(
        &[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0],
        ],
        &[
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ],
    )
}

pub fn single_triangle() -> TriMesh {
    mesh(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &[[0, 1, 2]])
}

/// Open tube of `segments` quads around `z`, no caps.
pub fn open_tube(segments: usize) -> TriMesh {
    let mut vertices = Vec::new();
    for k in 0..segments {
        let a = 2.0 * PI * k as f64 / segments as f64;
        vertices.push([a.cos(), a.sin(), 0.0]);
        vertices.push([a.cos(), a.sin(), 1.0]);
    }
    let n = segments as u32;
    let mut faces = Vec::new();
    for k in 0..n {
        let (b0, t0, b1, t1) = (2 * k, 2 * k + 1, 2 * ((k + 1) % n), 2 * ((k + 1) % n) + 1);
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
    }
    mesh(&vertices, &faces)
}

/// `n x n` grid of unit squares in the plane `z = height`, two triangles each.
pub fn square(n: usize, height: f64) -> TriMesh {
    let mut vertices = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64, height]);
        }
    }
    let w = (n + 1) as u32;
    let mut faces = Vec::new();
    for j in 0..n as u32 {
        for i in 0..n as u32 {
            let a = j * w + i;
            faces.push([a, a + 1, a + w + 1]);
            faces.push([a, a + w + 1, a + w]);
        }
    }
    mesh(&vertices, &faces)
}
