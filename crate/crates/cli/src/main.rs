//! `degat-kit`: property checks, neighbour dumps, training, evaluation,
//! back-projection, image metrics and K sweeps from the command line.
//!
//! Exit codes: 0 success, 1 validation failure (bad arguments or file
//! contents, failed checks), 2 I/O error, 3 numeric abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use degat_core::geometry::{depth_to_pointcloud, write_ply, DepthMap};
use degat_core::graph::{dump_neighbors, knn_graph, Metric, TokenGrid, DEFAULT_K};
use degat_core::harness::checks::run_checks;
use degat_core::harness::io::{read_depth, read_image, read_pose};
use degat_core::harness::{
    ablate_k, ablation_csv, evaluate, generate_scene, load_checkpoint, save_checkpoint, train, RunConfig,
};
use degat_core::metrics::{mse, psnr_from_mse, ssim, ImageGrid, SsimConfig};
use degat_core::numerics::Matrix;
use degat_core::objective::LossWeights;
use degat_core::Error;

#[derive(Parser)]
#[command(name = "degat-kit", version, about = "Graph-attention depth and pose toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suite; exits 1 if any check fails.
    Check {
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the K nearest neighbours of one patch token as JSON.
    Graph {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        #[arg(long)]
        query: usize,
        /// Patch size in pixels; must divide both image sides.
        #[arg(long, default_value_t = 8)]
        patch: usize,
    },
    /// Train on a synthetic scene; writes report.json and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a synthetic scene; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[arg(long, default_value_t = 4)]
        frames: usize,
    },
    /// Back-project a depth map through a pose into a PLY point cloud.
    Backproject {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional image whose colours are attached to the points.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// MSE, PSNR and SSIM between two images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Train once per neighbour count; prints a CSV table.
    AblateK {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,5,9,14,18")]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::NonFinite(_) | Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn patch_tokens(img: &ImageGrid, patch: usize) -> Result<TokenGrid, Error> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} does not divide the {}x{} image",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let ch = img.channels;
    let features = Matrix::from_fn(gh * gw, patch * patch * ch, |t, f| {
        let (dy, dx, c) = (f / (patch * ch), (f / ch) % patch, f % ch);
        img.get((t / gw) * patch + dy, (t % gw) * patch + dx, c) / img.max_val
    });
    TokenGrid::new(features, gh, gw)
}

fn run(command: Command) -> Result<bool, Error> {
    match command {
        Command::Check { json, seed } => {
            let results = run_checks(seed)?;
            let ok = results.iter().all(|r| r.passed);
            if json {
                println!("{}", pretty(&json!({ "passed": ok, "checks": results })));
            } else {
                for r in &results {
                    let tag = if r.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {:<26} worst {:.3e} (tolerance {:.0e})", r.name, r.worst, r.tolerance);
                }
            }
            Ok(ok)
        }
        Command::Graph {
            input,
            k,
            metric,
            query,
            patch,
        } => {
            let tokens = patch_tokens(&read_image(&input)?, patch)?;
            let g = knn_graph(&tokens.features, k, metric)?;
            println!("{}", pretty(&dump_neighbors(&g, &tokens, query)?));
            Ok(true)
        }
        Command::Train { config, out } => {
            let run = load_config(config.as_deref())?;
            let scene = generate_scene(run.trainer.scene_seed, run.trainer.frames, run.model.height, run.model.width)?;
            let (params, report) = train(&run, &scene)?;
            fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            write_file(&out.join("report.json"), &pretty(&report))?;
            save_checkpoint(&out.join("checkpoint"), &run.model, &params)?;
            let first = report.history.first().map_or(report.initial.loss.total, |h| h.total);
            println!(
                "trained {} steps in {:.2}s: loss {:.6} -> {:.6}",
                report.history.len(),
                report.wall_time_secs,
                first,
                report.final_metrics.loss.total
            );
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            scene_seed,
            frames,
        } => {
            let (cfg, params) = load_checkpoint(&checkpoint)?;
            let scene = generate_scene(scene_seed, frames, cfg.height, cfg.width)?;
            let metrics = evaluate(&params, &cfg, &scene, &LossWeights::default())?;
            println!("{}", pretty(&metrics));
            Ok(true)
        }
        Command::Backproject { depth, pose, out, image } => {
            let depth = DepthMap::from_depth(read_depth(&depth)?);
            let cam = read_pose(&pose)?;
            let image = image.map(|p| read_image(&p)).transpose()?;
            let (cloud, skipped) = depth_to_pointcloud(&depth, &cam, image.as_ref())?;
            write_ply(&cloud, &out)?;
            println!("wrote {} points ({skipped} pixels without valid depth)", cloud.points.len());
            Ok(true)
        }
        Command::Metrics { a, b } => {
            let (a, b) = (read_image(&a)?, read_image(&b)?);
            if a.max_val != b.max_val {
                return Err(Error::InvalidArgument(format!(
                    "images have different value ranges ({} and {})",
                    a.max_val, b.max_val
                )));
            }
            let m = mse(&a, &b)?;
            let p = psnr_from_mse(m, a.max_val);
            let s = ssim(&a, &b, &SsimConfig::with_range(a.max_val))?;
            let psnr = if p.is_infinite() { json!("inf") } else { json!(p) };
            println!("{}", pretty(&json!({ "mse": m, "psnr": psnr, "ssim": s })));
            Ok(true)
        }
        Command::AblateK { config, ks, out } => {
            let run = load_config(config.as_deref())?;
            let scene = generate_scene(run.trainer.scene_seed, run.trainer.frames, run.model.height, run.model.width)?;
            let csv = ablation_csv(&ablate_k(&run, &scene, &ks)?);
            match out {
                Some(path) => write_file(&path, &csv)?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
