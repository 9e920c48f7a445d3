use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use thinrecon::dataprep::{file_stem, load_views};
use thinrecon::meshkit::{export_obj, MeshQualityReport};
use thinrecon::optimize::{train_with_observer, IterationRecord};
use thinrecon::scene_file::load_scene;
use thinrecon::softsil::soft_coverage;
use thinrecon::{TrainConfig, TrainError};

use super::{create_dir, out_dir, write_file};
use crate::args::{ReconstructArgs, TrainFlags};
use crate::{config, CliError, Result};

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a TrainConfig,
    iterations: usize,
    initial: Option<&'a IterationRecord>,
    last: Option<&'a IterationRecord>,
    empty_mesh_iterations: usize,
    seconds: f64,
    mesh: &'a MeshQualityReport,
    records: &'a [IterationRecord],
}

#[derive(Serialize)]
struct FailureDump<'a> {
    iteration: usize,
    sil: f64,
    lap: f64,
    sdf: f64,
    grid_res: usize,
    values: &'a [f64],
    offsets: Option<Vec<[f64; 3]>>,
}

fn resolve_config(args: &ReconstructArgs) -> Result<(TrainConfig, Option<usize>)> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
            config::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => TrainFlags::default(),
    };
    let flags = config::merge(&file, &args.train);
    let mut cfg = TrainConfig::default();
    flags.apply(&mut cfg);
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if flags.snapshot_every == Some(0) {
        return Err(CliError::usage("--snapshot-every must be at least 1"));
    }
    Ok((cfg, flags.snapshot_every))
}

fn require_dir(path: &Path, flag: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{flag} {} is not a directory", path.display())))
    }
}

pub fn run(args: &ReconstructArgs) -> Result<()> {
    let (cfg, snapshot_every) = resolve_config(args)?;
    require_dir(&args.frames, "--frames")?;
    require_dir(&args.masks, "--masks")?;
    let scene = load_scene(&args.scene)?;
    let views = load_views(&args.frames, &args.masks, &scene, cfg.train_res)?;
    info!("{} views at {}x{}", views.len(), cfg.train_res, cfg.train_res);

    let dir = out_dir(&args.out);
    create_dir(dir)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path).map_err(|e| CliError::input(format!("cannot write {}: {e}", log_path.display())))?,
    );
    let snap_dir = dir.join("snapshots");
    if snapshot_every.is_some() {
        create_dir(&snap_dir)?;
    }

    let progress_every = (cfg.iters / 20).max(1);
    let mut io_error = None;
    let start = std::time::Instant::now();
    let result = train_with_observer(&views, &cfg, |rec, mesh| {
        if io_error.is_some() {
            return;
        }
        let mut step = || -> std::io::Result<()> {
            serde_json::to_writer(&mut log, rec)?;
            log.write_all(b"\n")?;
            if let Some(k) = snapshot_every {
                if rec.iteration % k == 0 || rec.iteration + 1 == cfg.iters {
                    std::fs::write(snap_dir.join(format!("iter_{:05}.obj", rec.iteration)), export_obj(mesh))?;
                }
            }
            Ok(())
        };
        if let Err(e) = step() {
            io_error = Some(e);
        }
        if rec.iteration % progress_every == 0 || rec.iteration + 1 == cfg.iters {
            info!(
                "iter {:5}  total {:.6}  sil {:.6}  lap {:.6}  sdf {:.6}  lr {:.5}",
                rec.iteration, rec.total, rec.sil, rec.lap, rec.sdf, rec.lr
            );
        }
    });
    let seconds = start.elapsed().as_secs_f64();
    log.flush().map_err(|e| CliError::input(format!("cannot write {}: {e}", log_path.display())))?;
    if let Some(e) = io_error {
        return Err(CliError::input(format!("cannot write training output in {}: {e}", dir.display())));
    }

    let (mesh, _, report) = match result {
        Ok(r) => r,
        Err(TrainError::NonFiniteLoss {
            iteration,
            sil,
            lap,
            sdf,
            field,
        }) => {
            let dump_path = dir.join("nonfinite_dump.json");
            let dump = FailureDump {
                iteration,
                sil,
                lap,
                sdf,
                grid_res: cfg.grid_res,
                values: &field.values,
                offsets: field.offsets.as_ref().map(|o| o.iter().map(|v| [v.x, v.y, v.z]).collect()),
            };
            write_file(&dump_path, serde_json::to_vec(&dump).expect("dump serializes"))?;
            return Err(CliError::numeric(format!(
                "non-finite loss at iteration {iteration} (sil {sil}, lap {lap}, sdf {sdf}); field written to {}",
                dump_path.display()
            )));
        }
        Err(TrainError::InvalidConfig(msg)) => return Err(CliError::usage(msg)),
        Err(e @ TrainError::NonFiniteGradient { .. }) => return Err(CliError::numeric(e.to_string())),
        Err(e) => return Err(CliError::input(e.to_string())),
    };
    if report.empty_mesh_iterations > 0 {
        warn!("{} iterations produced an empty mesh", report.empty_mesh_iterations);
    }

    write_file(&args.out, export_obj(&mesh))?;
    let file = ReportFile {
        config: &cfg,
        iterations: report.records.len(),
        initial: report.records.first(),
        last: report.records.last(),
        empty_mesh_iterations: report.empty_mesh_iterations,
        seconds,
        mesh: &report.final_mesh,
        records: &report.records,
    };
    let mut json = serde_json::to_string_pretty(&file).expect("report serializes");
    json.push('\n');
    write_file(&dir.join("report.json"), json)?;

    if args.dump_coverage {
        let cov_dir = dir.join("coverage");
        create_dir(&cov_dir)?;
        let settings = cfg.raster_settings();
        for v in &views {
            let render = soft_coverage(&mesh, v, cfg.train_res, &settings).map_err(|e| CliError::input(e.to_string()))?;
            render
                .coverage
                .to_image()
                .save_png(&cov_dir.join(format!("{}.png", file_stem(&v.name))))?;
        }
    }

    let q = &report.final_mesh;
    println!(
        "{}: {} vertices, {} faces, {} boundary loops, {} components, roughness {:.5}",
        args.out.display(),
        q.vertex_count,
        q.face_count,
        q.boundary_loop_count,
        q.connected_components,
        q.roughness
    );
    Ok(())
}
