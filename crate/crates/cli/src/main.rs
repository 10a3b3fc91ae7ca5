//! `weathercity`: batch rendering, training, evaluation and synthetic data.
//!
//! Exit codes: 0 success, 1 input error (bad flags, unreadable or invalid
//! inputs), 2 runtime error (failures while computing or writing outputs).

mod eval;
mod outputs;
mod render;
mod synth;
mod train;

use std::fmt::Display;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "weathercity", version, about = "Multi-weather Gaussian splatting scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a camera path under a weather timeline.
    Render(render::Args),
    /// Fit a scene to a supervision manifest.
    Train(train::Args),
    /// Compare rendered frames against targets (PSNR, SSIM).
    Eval(eval::Args),
    /// Generate a synthetic multi-weather dataset.
    MakeSynthetic(synth::Args),
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Runtime(String),
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn input(e: impl Display) -> Failure {
    Failure::Input(e.to_string())
}

pub fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Render(a) => render::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::MakeSynthetic(a) => synth::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
