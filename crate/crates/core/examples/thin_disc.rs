//! Reconstructs the synthetic thin disc and prints quality metrics.
//!
//! Usage: `cargo run --release --example thin_disc -- [iters] [lambda_lap] [lambda_sdf]`
//!
//! Set `THIN_DISC_OUT=dir` to write the mesh and mask/prediction pairs.

use std::time::Instant;

use thinrecon::meshkit::{chamfer, hard_coverage, iou, MeshQualityReport};
use thinrecon::synthetic::thin_disc_scene;
use thinrecon::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).map(|s| s.parse().expect("number")).unwrap_or(d);
    let config = TrainConfig {
        iters: arg(1, 1000.0) as usize,
        lambda_lap: arg(2, 0.5),
        lambda_sdf: arg(3, 0.2),
        ..TrainConfig::default()
    };
    let scene = thin_disc_scene(config.train_res);
    let start = Instant::now();
    let (mesh, _, report) = train(&scene.train, &config).expect("training");
    let elapsed = start.elapsed();
    for r in report.records.iter().step_by((config.iters / 10).max(1)) {
        println!("{:5} total {:.5} sil {:.5} lap {:.6} sdf {:.5}", r.iteration, r.total, r.sil, r.lap, r.sdf);
    }
    let ious: Vec<f64> = scene
        .held_out
        .iter()
        .map(|v| iou(&hard_coverage(&mesh, v, config.train_res), &v.mask).unwrap())
        .collect();
    let q = MeshQualityReport::analyze(&mesh);
    println!("time {:.1}s", elapsed.as_secs_f64());
    println!("ious {ious:.4?} mean {:.4}", ious.iter().sum::<f64>() / ious.len() as f64);
    println!("quality {q:?}");
    println!("chamfer {:.5}", chamfer(&mesh, &scene.reference, 5000, 0).unwrap());
    if let Ok(dir) = std::env::var("THIN_DISC_OUT") {
        let dir = std::path::Path::new(&dir);
        std::fs::create_dir_all(dir).unwrap();
        thinrecon::meshkit::write_obj(&mesh, &dir.join("mesh.obj")).unwrap();
        for (i, v) in scene.held_out.iter().enumerate() {
            let pred = hard_coverage(&mesh, v, config.train_res);
            let mut both = thinrecon::ImageBuffer::new(2 * config.train_res, config.train_res, 1);
            for y in 0..config.train_res {
                for x in 0..config.train_res {
                    both.set(x, y, 0, v.mask.get(x, y, 0));
                    both.set(x + config.train_res, y, 0, pred.get(x, y, 0));
                }
            }
            both.save_png(&dir.join(format!("held_{i}.png"))).unwrap();
        }
    }
}
