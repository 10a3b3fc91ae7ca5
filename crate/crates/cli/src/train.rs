use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{info, warn};
use weathercity_core::io::{check_supervision, load_scene, load_supervision, save_scene};
use weathercity_core::train::{view_psnr, Trainer, TrainingConfig};

use crate::outputs::Outputs;
use crate::render::init_threads;
use crate::{input, runtime, Outcome};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Supervision manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Initial scene archive.
    #[arg(long)]
    scene_init: PathBuf,
    /// Training configuration (TOML); defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output scene archive.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `iterations` from the config.
    #[arg(long)]
    iterations: Option<usize>,
    /// Metrics log; defaults to `<out>.metrics.log`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

pub fn run(args: Args) -> Outcome {
    init_threads(args.threads)?;
    let mut config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
            TrainingConfig::from_toml(&text).map_err(input)?
        }
        None => TrainingConfig::default(),
    };
    if let Some(n) = args.iterations {
        config.iterations = n;
    }
    config.validate().map_err(input)?;
    let frames = load_supervision(&args.manifest).map_err(input)?;
    let graph = load_scene(&args.scene_init).map_err(input)?;
    check_supervision(&graph, &frames).map_err(input)?;
    let mut trainer = Trainer::new(graph, &frames, config.clone()).map_err(input)?;

    let metrics_path = args.metrics.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".metrics.log");
        p.into()
    });
    let mut out = Outputs::new();
    if let Some(parent) = args.out.parent() {
        out.dir(parent)?;
    }
    let file = File::create(out.file(&metrics_path)).map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    let mut log = BufWriter::new(file);
    let mut io_err = None;
    let every = (config.iterations / 20).max(1);
    trainer
        .run(config.iterations, |r| {
            if io_err.is_none() {
                io_err = writeln!(log, "{r}").err();
            }
            if r.step % every == 0 || r.step + 1 == config.iterations {
                info!("{r}");
            }
        })
        .map_err(runtime)?;
    if let Some(e) = io_err {
        return Err(runtime(format!("{}: {e}", metrics_path.display())));
    }
    for d in &trainer.densify_log {
        writeln!(log, "densify {d:?}").map_err(runtime)?;
    }
    let graph = trainer.into_graph();
    for f in frames.iter().filter(|f| f.held_out) {
        let psnr = view_psnr(&graph, f, config.parallel).map_err(runtime)?;
        let line = format!("held_out view={} frame={} weather={} psnr={psnr:.3}", f.view, f.frame, f.weather);
        println!("{line}");
        writeln!(log, "{line}").map_err(runtime)?;
    }
    log.flush().map_err(runtime)?;
    save_scene(&graph, out.file(&args.out)).map_err(runtime)?;
    if graph.gaussian_count() == 0 {
        warn!("the trained scene is empty");
    }
    out.commit();
    println!(
        "trained {} iterations; {} Gaussians written to {}",
        config.iterations,
        graph.gaussian_count(),
        args.out.display()
    );
    Ok(())
}
