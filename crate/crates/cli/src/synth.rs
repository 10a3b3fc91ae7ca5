use std::path::PathBuf;

use weathercity_core::io::{make_synthetic, write_synthetic, SyntheticSpec};
use weathercity_core::scene::WeatherLabel;

use crate::{input, runtime, Outcome};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    gaussians: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Comma-separated weather labels; must include `raw`.
    #[arg(long, value_delimiter = ',', default_value = "raw,rainy,snowy")]
    weathers: Vec<WeatherLabel>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
}

pub fn run(args: Args) -> Outcome {
    let spec = SyntheticSpec {
        gaussians: args.gaussians,
        frames: args.frames,
        weathers: args.weathers,
        seed: args.seed,
        width: args.width,
        height: args.height,
    };
    let data = make_synthetic(&spec).map_err(input)?;
    let dir = &args.out_dir;
    let existed = dir.exists();
    if existed && dir.read_dir().map_err(input)?.next().is_some() {
        return Err(input(format!("{} is not empty", dir.display())));
    }
    if let Err(e) = write_synthetic(&data, dir) {
        // The directory was empty or absent, so everything in it is ours.
        if existed {
            for entry in dir.read_dir().into_iter().flatten().flatten() {
                let p = entry.path();
                let _ = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
            }
        } else {
            let _ = std::fs::remove_dir_all(dir);
        }
        return Err(runtime(e));
    }
    println!(
        "wrote {} views x {} weathers to {}",
        data.views.len(),
        spec.weathers.len(),
        dir.display()
    );
    Ok(())
}
