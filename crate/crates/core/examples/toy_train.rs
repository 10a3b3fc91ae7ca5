//! Trains the default synthetic dataset from its perturbed init and prints
//! held-out PSNR per weather.

use std::time::Instant;

use weathercity_core::io::{make_synthetic, SyntheticSpec};
use weathercity_core::train::{view_psnr, Trainer, TrainingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5000);
    let data = make_synthetic(&SyntheticSpec::default())?;
    let config = TrainingConfig {
        iterations,
        densify_until: std::env::var("DENSIFY_UNTIL").ok().map(|v| v.parse().unwrap()).unwrap_or(0.8),
        ..TrainingConfig::default()
    };
    let report = |label: &str, g: &weathercity_core::scene::SceneGraph| -> Result<(), Box<dyn std::error::Error>> {
        for f in data.held_out_frames() {
            println!("{label} {}: {:.2} dB", f.weather, view_psnr(g, f, false)?);
        }
        Ok(())
    };
    report("truth", &data.truth)?;
    report("init", &data.init)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(data.init.clone(), &data.frames, config)?;
    let mut acc: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    trainer.run(iterations, |r| {
        let e = acc.entry(r.weather.to_string()).or_default();
        e.0 += r.psnr;
        e.1 += 1;
        if r.step % 250 == 0 {
            let means: Vec<String> = acc.iter().map(|(k, (s, n))| format!("{k}={:.2}", s / *n as f64)).collect();
            println!("step {} train psnr {}", r.step, means.join(" "));
            acc.clear();
        }
    })?;
    println!("densify: {:?} gaussians={}", trainer.densify_log, trainer.graph.gaussian_count());
    println!("trained {iterations} steps in {:.1}s", start.elapsed().as_secs_f64());
    report("final", &trainer.graph)?;
    for f in data.frames.iter().filter(|f| f.weather.is_raw()) {
        println!("view {} frame {}: truth {:.2} init {:.2} final {:.2}", f.view, f.frame, view_psnr(&data.truth, f, false)?, view_psnr(&data.init, f, false)?, view_psnr(&trainer.graph, f, false)?);
    }
    Ok(())
}
