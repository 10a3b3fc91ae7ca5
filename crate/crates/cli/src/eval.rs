use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use weathercity_core::buffer::psnr;
use weathercity_core::io::load_image;
use weathercity_core::train::ssim;

use crate::outputs::Outputs;
use crate::{input, runtime, Outcome};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Directory of rendered frames (PNG or PPM), compared in name order.
    #[arg(long)]
    renders: PathBuf,
    /// Directory of target frames, same count.
    #[arg(long)]
    targets: PathBuf,
    /// Report file; defaults to `eval_report.txt` beside the renders.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Printed in place of an infinite PSNR (identical images).
pub const PSNR_INF: &str = "inf";

fn images_in(dir: &Path) -> Outcome<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| ["png", "ppm"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        PSNR_INF.to_string()
    } else {
        format!("{v:.3}")
    }
}

pub fn run(args: Args) -> Outcome {
    let renders = images_in(&args.renders)?;
    let targets = images_in(&args.targets)?;
    if renders.len() != targets.len() {
        return Err(input(format!(
            "frame count mismatch: {} renders vs {} targets",
            renders.len(),
            targets.len()
        )));
    }
    if renders.is_empty() {
        return Err(input(format!("no images in {}", args.renders.display())));
    }
    let mut table = String::from("frame\trender\ttarget\tpsnr\tssim\n");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, (r, t)) in renders.iter().zip(&targets).enumerate() {
        let a = load_image(r).map_err(input)?;
        let b = load_image(t).map_err(input)?;
        let p = psnr(&a, &b).map_err(|e| input(format!("frame {i}: {e}")))?;
        let s = ssim(&a, &b).map_err(|e| input(format!("frame {i}: {e}")))?;
        psnr_sum += p;
        ssim_sum += s;
        let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(table, "{i}\t{}\t{}\t{}\t{s:.6}", name(r), name(t), fmt_psnr(p));
    }
    let n = renders.len() as f64;
    let _ = writeln!(table, "mean\t\t\t{}\t{:.6}", fmt_psnr(psnr_sum / n), ssim_sum / n);
    print!("{table}");
    let report = args.report.unwrap_or_else(|| args.renders.join("eval_report.txt"));
    let out = Outputs::new();
    std::fs::write(&report, &table).map_err(|e| runtime(format!("{}: {e}", report.display())))?;
    out.commit();
    Ok(())
}
