use std::path::PathBuf;

use log::info;
use weathercity_core::io::{load_scene, save_depth, save_image, BitDepth};
use weathercity_core::pipeline::{resize_camera, CameraPath, Simulator, WeatherTimeline};
use weathercity_core::raster::Camera;
use weathercity_core::scene::WeatherLabel;

use crate::outputs::Outputs;
use crate::{input, runtime, Outcome};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Scene archive (.wcty).
    #[arg(long)]
    scene: PathBuf,
    /// Camera path file (TOML, `[[cameras]]`).
    #[arg(long)]
    cameras: PathBuf,
    /// Constant weather label; shorthand for a timeline with only `weather`.
    #[arg(long, conflicts_with = "timeline")]
    weather: Option<WeatherLabel>,
    /// Weather timeline file (TOML).
    #[arg(long)]
    timeline: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Output width; rescales the camera intrinsics.
    #[arg(long, requires = "height")]
    width: Option<usize>,
    #[arg(long, requires = "width")]
    height: Option<usize>,
    /// Particle seed; overrides the timeline's.
    #[arg(long)]
    seed: Option<u64>,
    /// Rasterizer worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Rasterize on the calling thread only.
    #[arg(long)]
    deterministic: bool,
    /// Also write f32 depth rasters under `<out-dir>/depth/`.
    #[arg(long)]
    depth: bool,
}

pub fn init_threads(threads: Option<usize>) -> Outcome<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(input("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    Ok(())
}

pub fn run(args: Args) -> Outcome {
    init_threads(args.threads)?;
    let graph = load_scene(&args.scene).map_err(input)?;
    let path = CameraPath::load(&args.cameras).map_err(input)?;
    let mut timeline = match (&args.timeline, &args.weather) {
        (Some(p), _) => WeatherTimeline::load(p).map_err(input)?,
        (None, Some(l)) => WeatherTimeline::constant(l.clone()),
        (None, None) => WeatherTimeline::default(),
    };
    if let Some(s) = args.seed {
        timeline.seed = s;
    }
    let mut cameras = Vec::with_capacity(path.cameras.len());
    for (i, entry) in path.cameras.iter().enumerate() {
        let cam = Camera::try_from(entry.camera.clone()).map_err(|e| input(format!("camera {i}: {e}")))?;
        let cam = match (args.width, args.height) {
            (Some(w), Some(h)) if w > 0 && h > 0 => resize_camera(&cam, w, h),
            (Some(_), Some(_)) => return Err(input("--width and --height must be positive")),
            _ => cam,
        };
        cameras.push((entry.frame, cam));
    }
    let len = timeline.frames.unwrap_or(cameras.len());
    timeline.validate(len, &graph).map_err(input)?;
    let mut sim = Simulator::from_timeline(graph, &timeline).map_err(input)?;
    sim.options.parallel = !args.deterministic;

    let mut out = Outputs::new();
    out.dir(&args.out_dir)?;
    let depth_dir = args.out_dir.join("depth");
    if args.depth {
        out.dir(&depth_dir)?;
    }
    for t in 0..len {
        let (pinned, camera) = &cameras[t.min(cameras.len() - 1)];
        let scene_frame = pinned.unwrap_or(t);
        let state = timeline.state_at(t);
        if &state != sim.state() {
            sim.set_state(state).map_err(runtime)?;
        }
        for edit in timeline.edits_at(t) {
            sim.apply_edit(edit, scene_frame.min(sim.graph.frame_count - 1)).map_err(runtime)?;
        }
        if t > 0 {
            sim.step().map_err(runtime)?;
        }
        let frame = sim.render(scene_frame, camera).map_err(runtime)?;
        let img = out.file(args.out_dir.join(format!("frame_{t:05}.png")));
        save_image(&frame.rgb, &img, BitDepth::Eight).map_err(runtime)?;
        if args.depth {
            let d = out.file(depth_dir.join(format!("frame_{t:05}.wdep")));
            save_depth(&frame.depth, &d).map_err(runtime)?;
        }
        info!("frame {t}: weather {} ({} particle nodes)", sim.state().label, sim.graph.weather_nodes.len());
    }
    out.commit();
    println!("rendered {len} frames to {}", args.out_dir.display());
    Ok(())
}

