use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info, warn};
use weathercity_core::io::load_scene;
use weathercity_core::pipeline::{CameraPath, WeatherTimeline};
use weathercity_core::raster::Camera;
use weathercity_service::session::{default_camera, sized_camera};
use weathercity_service::updates::PlaybackMode;
use weathercity_service::{router, AppState, Session, SessionConfig};

/// Serves live renders of a scene whose weather, camera and nodes can be
/// steered over HTTP, streaming frames over a WebSocket.
#[derive(Parser, Debug)]
#[command(name = "weathercity-service", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Scene archive (.wcty). Without one every endpoint answers 503.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Weather timeline (TOML) giving the initial state and scripted keys.
    #[arg(long, requires = "scene")]
    timeline: Option<PathBuf>,
    /// Camera path file; its first camera is the initial view.
    #[arg(long, requires = "scene")]
    cameras: Option<PathBuf>,
    #[arg(long, requires = "height")]
    width: Option<usize>,
    #[arg(long, requires = "width")]
    height: Option<usize>,
    /// Playback rate while playing.
    #[arg(long, default_value_t = 10.0)]
    fps: f64,
    #[arg(long, value_enum, default_value = "playing")]
    playback: Mode,
    /// Archive written by POST /save without a path.
    #[arg(long, default_value = "session.wcty")]
    save_path: PathBuf,
    /// Rasterize on the render thread only.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Mode {
    Paused,
    Playing,
}

fn start_session(args: &Args, scene: &PathBuf) -> Result<Session, String> {
    let graph = load_scene(scene).map_err(|e| e.to_string())?;
    let timeline = match &args.timeline {
        Some(p) => WeatherTimeline::load(p).map_err(|e| e.to_string())?,
        None => WeatherTimeline::default(),
    };
    let size = args.width.zip(args.height);
    let camera = match &args.cameras {
        Some(p) => {
            let path = CameraPath::load(p).map_err(|e| e.to_string())?;
            let spec = path.cameras[0].camera.clone();
            sized_camera(Camera::try_from(spec).map_err(|e| format!("camera 0: {e}"))?, size)
        }
        None => {
            let (w, h) = size.unwrap_or((320, 240));
            default_camera(&graph, w, h)
        }
    };
    if !(args.fps >= 0.1 && args.fps <= 60.0) {
        return Err(format!("--fps {} is outside [0.1, 60]", args.fps));
    }
    Session::start(SessionConfig {
        graph,
        timeline,
        camera,
        save_path: args.save_path.clone(),
        fps: args.fps,
        playing: matches!(args.playback, Mode::Playing),
        deterministic: args.deterministic,
    })
    .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let session = match &args.scene {
        Some(scene) => match start_session(&args, scene) {
            Ok(s) => Some(s),
            Err(e) => {
                error!("{e}");
                return ExitCode::from(1);
            }
        },
        None => {
            warn!("no --scene given; all endpoints will answer 503");
            None
        }
    };
    let app = router(AppState::new(session.as_ref().map(|s| s.handle.clone())));
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };
    let served = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        info!("listening on http://{}", listener.local_addr()?);
        let mode = match args.playback {
            Mode::Paused => PlaybackMode::Paused,
            Mode::Playing => PlaybackMode::Playing,
        };
        info!("playback {mode:?} at {} fps", args.fps);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    match served {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
