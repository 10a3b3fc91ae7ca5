//! The render thread and the handle network code uses to talk to it.
//!
//! One thread owns the [`Simulator`]. Handlers enqueue [`Command`]s; the
//! thread drains the queue between frames, applies each command whole,
//! renders, publishes the new state document and frame, and only then
//! acknowledges. Readers only ever see published snapshots.

use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use log::{error, info};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot, watch};
use weathercity_core::buffer::ScalarMap;
use weathercity_core::io::{encode_png, save_scene};
use weathercity_core::math::{Quat, Vec3};
use weathercity_core::pipeline::{resize_camera, Simulator, WeatherTimeline};
use weathercity_core::raster::Camera;
use weathercity_core::scene::{Pose, SceneGraph};
use weathercity_core::weather::{ParticleKind, ParticleParams};
use weathercity_core::Error as CoreError;

use crate::protocol::{Encoding, FrameHeader, FRAME_HEADER_LEN};
use crate::updates::{
    check_rotation, check_vector, ranges_json, ApiError, CameraUpdate, NodeUpdate, PlaybackMode, PlaybackUpdate,
    WeatherPatch, MAX_IMAGE_SIDE,
};

/// Frames buffered per subscriber before the oldest are dropped.
pub const EVENT_CAPACITY: usize = 8;

pub type Reply<T> = oneshot::Sender<Result<T, ApiError>>;

/// Where an accepted update takes effect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Ack {
    /// Index of the first published frame showing the update.
    pub applied_at: u64,
    pub scene_frame: usize,
    pub time_step: u64,
}

pub enum Command {
    Weather(WeatherPatch, Reply<Ack>),
    Camera(CameraUpdate, Reply<Ack>),
    Node(NodeUpdate, Reply<Ack>),
    Playback(PlaybackUpdate, Reply<Ack>),
    Save(Option<PathBuf>, Reply<PathBuf>),
}

/// One rendered frame, pre-encoded for every consumer.
#[derive(Debug)]
pub struct FramePacket {
    pub index: u64,
    pub timestamp_ms: u64,
    pub width: u32,
    pub height: u32,
    pub scene_frame: usize,
    /// Complete stream messages (header plus payload).
    pub png: Bytes,
    pub rgb: Bytes,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
}

impl FramePacket {
    pub fn message(&self, encoding: Encoding) -> Bytes {
        match encoding {
            Encoding::Png => self.png.clone(),
            Encoding::Rgb => self.rgb.clone(),
        }
    }

    pub fn payload(&self, encoding: Encoding) -> Bytes {
        self.message(encoding).slice(FRAME_HEADER_LEN..)
    }
}

#[derive(Clone, Debug)]
pub enum Event {
    Frame(Arc<FramePacket>),
    /// JSON text echoing an applied update.
    Notice(Arc<str>),
}

pub struct SessionConfig {
    pub graph: SceneGraph,
    pub timeline: WeatherTimeline,
    pub camera: Camera,
    pub save_path: PathBuf,
    pub fps: f64,
    pub playing: bool,
    /// Rasterize on the render thread alone.
    pub deterministic: bool,
}

/// Cloneable access to a running session.
#[derive(Clone)]
pub struct SessionHandle {
    commands: mpsc::Sender<Command>,
    state: watch::Receiver<Arc<Value>>,
    frame: watch::Receiver<Arc<FramePacket>>,
    events: broadcast::Sender<Event>,
}

impl SessionHandle {
    /// Enqueues a command and waits for the render thread's answer.
    pub async fn request<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(make(tx))
            .map_err(|_| ApiError::unavailable("render thread has stopped"))?;
        rx.await.map_err(|_| ApiError::internal("render thread dropped the request"))?
    }

    pub fn state(&self) -> Arc<Value> {
        self.state.borrow().clone()
    }

    pub fn latest_frame(&self) -> Arc<FramePacket> {
        self.frame.borrow().clone()
    }

    /// Live frames and notices. Subscribe before reading
    /// [`Self::latest_frame`] so nothing falls in between.
    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }
}

/// A running session; dropping every handle and this value stops the
/// render thread.
pub struct Session {
    pub handle: SessionHandle,
    thread: Option<JoinHandle<()>>,
}

impl Session {
    /// Sets up the simulator from the timeline's first frame, renders that
    /// frame, and starts the render thread.
    pub fn start(config: SessionConfig) -> Result<Self, CoreError> {
        let len = config.timeline.frames.unwrap_or(config.graph.frame_count).max(1);
        config.timeline.validate(len, &config.graph)?;
        config.camera.validate()?;
        let mut sim = Simulator::from_timeline(config.graph, &config.timeline)?;
        sim.options.parallel = !config.deterministic;
        // Both systems always exist so counts can go up from zero.
        let mut state = sim.state().clone();
        for kind in [ParticleKind::Rain, ParticleKind::Snow] {
            let slot = match kind {
                ParticleKind::Rain => &mut state.rain,
                ParticleKind::Snow => &mut state.snow,
            };
            slot.get_or_insert_with(|| ParticleParams {
                count: 0,
                ..ParticleParams::for_kind(kind)
            });
        }
        sim.set_state(state)?;
        for edit in config.timeline.edits_at(0) {
            sim.apply_edit(edit, 0)?;
        }

        let mut core = Core {
            sim,
            timeline: config.timeline,
            camera: config.camera,
            save_path: config.save_path,
            fps: config.fps,
            playing: config.playing,
            t: 0,
            next_index: 0,
            started: Instant::now(),
        };
        let first = core.render()?;
        let (state_tx, state_rx) = watch::channel(Arc::new(core.state_doc(first.index)));
        let (frame_tx, frame_rx) = watch::channel(first);
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        let (commands, queue) = mpsc::channel();
        let publisher = Publisher {
            state: state_tx,
            frame: frame_tx,
            events: events.clone(),
        };
        let thread = std::thread::Builder::new()
            .name("render".into())
            .spawn(move || core.run(queue, publisher))
            .expect("spawn render thread");
        Ok(Self {
            handle: SessionHandle {
                commands,
                state: state_rx,
                frame: frame_rx,
                events,
            },
            thread: Some(thread),
        })
    }

    /// Stops the render thread once every other handle is gone.
    pub fn shutdown(mut self) {
        let thread = self.thread.take();
        drop(self);
        if let Some(t) = thread {
            let _ = t.join();
        }
    }
}

struct Publisher {
    state: watch::Sender<Arc<Value>>,
    frame: watch::Sender<Arc<FramePacket>>,
    events: broadcast::Sender<Event>,
}

/// Session state owned by the render thread.
struct Core {
    sim: Simulator,
    timeline: WeatherTimeline,
    camera: Camera,
    save_path: PathBuf,
    fps: f64,
    playing: bool,
    /// Playback steps taken since the session started.
    t: u64,
    next_index: u64,
    started: Instant,
}

enum Pending {
    Ack(Reply<Ack>),
    Save(Reply<PathBuf>, PathBuf),
}

impl Core {
    fn scene_frame(&self) -> usize {
        (self.t % self.sim.graph.frame_count as u64) as usize
    }

    fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.fps)
    }

    fn run(mut self, queue: mpsc::Receiver<Command>, out: Publisher) {
        let mut deadline = Instant::now() + self.period();
        loop {
            let first = if self.playing {
                match queue.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            } else {
                match queue.recv() {
                    Ok(c) => Some(c),
                    Err(_) => break,
                }
            };
            let was_playing = self.playing;
            let mut pending = Vec::new();
            let mut notices = Vec::new();
            for cmd in first.into_iter().chain(queue.try_iter()) {
                self.handle(cmd, &mut pending, &mut notices);
            }
            if self.playing && !was_playing {
                deadline = Instant::now() + self.period();
            }
            let now = Instant::now();
            let tick = was_playing && self.playing && now >= deadline;
            if tick {
                self.advance();
                deadline += self.period();
                if deadline < now {
                    deadline = now + self.period();
                }
            }
            let changed = !notices.is_empty() || pending.iter().any(|p| matches!(p, Pending::Ack(_)));
            if tick || changed {
                match self.render() {
                    Ok(packet) => {
                        let index = packet.index;
                        out.state.send_replace(Arc::new(self.state_doc(index)));
                        out.frame.send_replace(packet.clone());
                        for n in notices {
                            let _ = out.events.send(Event::Notice(n.into()));
                        }
                        let _ = out.events.send(Event::Frame(packet));
                    }
                    Err(e) => error!("render failed: {e}"),
                }
            }
            let ack = Ack {
                applied_at: self.next_index.saturating_sub(1),
                scene_frame: self.scene_frame(),
                time_step: self.t,
            };
            for p in pending {
                match p {
                    Pending::Ack(r) => {
                        let _ = r.send(Ok(ack));
                    }
                    Pending::Save(r, path) => {
                        let res = save_scene(&self.sim.graph, &path).map(|_| path).map_err(|e| match e {
                            CoreError::Io { .. } => ApiError::bad("path", e.to_string()),
                            other => ApiError::internal(other.to_string()),
                        });
                        let _ = r.send(res);
                    }
                }
            }
        }
        info!("render thread stopped after {} frames", self.next_index);
    }

    /// One playback step: particles move, then scripted keys and edits for
    /// the new step apply.
    fn advance(&mut self) {
        self.t += 1;
        if let Err(e) = self.sim.step() {
            error!("particle step failed: {e}");
        }
        let Ok(t) = usize::try_from(self.t) else { return };
        let mut state = self.sim.state().clone();
        let mut keyed = false;
        for k in self.timeline.keys.iter().filter(|k| k.frame == t) {
            k.apply_to(&mut state);
            keyed = true;
        }
        if keyed {
            if let Err(e) = self.sim.set_state(state) {
                error!("timeline keyframe at step {t} rejected: {e}");
            }
        }
        let frame = self.scene_frame();
        for edit in self.timeline.edits_at(t) {
            if let Err(e) = self.sim.apply_edit(edit, frame) {
                error!("timeline edit at step {t} rejected: {e}");
            }
        }
    }

    fn handle(&mut self, cmd: Command, pending: &mut Vec<Pending>, notices: &mut Vec<String>) {
        let (reply, result, kind, body) = match cmd {
            Command::Save(path, reply) => {
                pending.push(Pending::Save(reply, path.unwrap_or_else(|| self.save_path.clone())));
                return;
            }
            Command::Weather(p, reply) => {
                let body = serde_json::to_value(&p).unwrap_or(Value::Null);
                (reply, self.apply_weather(&p), "weather", body)
            }
            Command::Camera(c, reply) => {
                let body = serde_json::to_value(&c).unwrap_or(Value::Null);
                (reply, self.apply_camera(&c), "camera", body)
            }
            Command::Node(n, reply) => {
                let body = serde_json::to_value(&n).unwrap_or(Value::Null);
                (reply, self.apply_node(&n), "nodes", body)
            }
            Command::Playback(p, reply) => {
                let body = serde_json::to_value(&p).unwrap_or(Value::Null);
                (reply, self.apply_playback(&p), "playback", body)
            }
        };
        match result {
            Ok(()) => {
                notices.push(
                    json!({ "type": "applied", "frame": self.next_index, "kind": kind, "update": body }).to_string(),
                );
                pending.push(Pending::Ack(reply));
            }
            Err(e) => {
                let _ = reply.send(Err(e));
            }
        }
    }

    fn apply_weather(&mut self, p: &WeatherPatch) -> Result<(), ApiError> {
        p.check()?;
        if let Some(l) = &p.label {
            self.sim
                .graph
                .decoder(l)
                .map_err(|_| ApiError::not_found("label", format!("weather `{l}` is not registered")))?;
        }
        let next = p.apply(self.sim.state());
        self.sim.set_state(next).map_err(|e| ApiError::from_core("weather", e))
    }

    fn apply_camera(&mut self, c: &CameraUpdate) -> Result<(), ApiError> {
        let mut cam = self.camera.clone();
        if let Some(i) = &c.intrinsics {
            let sides_ok = (1..=MAX_IMAGE_SIDE).contains(&i.width) && (1..=MAX_IMAGE_SIDE).contains(&i.height);
            if !sides_ok {
                return Err(ApiError::bad("intrinsics", format!("image sides must lie in [1, {MAX_IMAGE_SIDE}]")));
            }
            cam.fx = i.fx;
            cam.fy = i.fy;
            cam.cx = i.cx;
            cam.cy = i.cy;
            cam.width = i.width;
            cam.height = i.height;
            if !(cam.cx.is_finite() && cam.cy.is_finite()) || cam.validate().is_err() {
                return Err(ApiError::bad("intrinsics", "need finite, positive focal lengths and a finite center"));
            }
        }
        match (&c.pose, &c.look_at) {
            (Some(_), Some(_)) => return Err(ApiError::bad("pose", "give either pose or look_at, not both")),
            (Some(p), None) => {
                check_rotation("pose.rotation", &p.rotation)?;
                check_vector("pose.translation", &p.translation)?;
                let [w, x, y, z] = p.rotation;
                cam = cam.with_pose(Quat::new(w, x, y, z), Vec3::from(p.translation));
            }
            (None, Some(l)) => {
                check_vector("look_at.eye", &l.eye)?;
                check_vector("look_at.target", &l.target)?;
                check_vector("look_at.up", &l.up)?;
                let (eye, target, up) = (Vec3::from(l.eye), Vec3::from(l.target), Vec3::from(l.up));
                let forward = target - eye;
                if forward.norm() < 1e-12 || forward.cross(&up).norm() < 1e-12 * forward.norm() * up.norm().max(1e-300) {
                    return Err(ApiError::bad("look_at", "eye, target and up must span a view direction"));
                }
                cam = cam.look_at(eye, target, up);
            }
            (None, None) => {}
        }
        cam.validate().map_err(|e| ApiError::bad("pose", e.to_string()))?;
        self.camera = cam;
        Ok(())
    }

    fn apply_node(&mut self, n: &NodeUpdate) -> Result<(), ApiError> {
        let graph = &self.sim.graph;
        let known = n.id == weathercity_core::scene::SKY_ID
            || graph.find_node(&n.id).is_some()
            || graph.weather_nodes.iter().any(|w| w.id == n.id);
        if !known {
            return Err(ApiError::not_found("id", format!("unknown node `{}`", n.id)));
        }
        let pose = match &n.pose {
            Some(p) => {
                check_rotation("pose.rotation", &p.rotation)?;
                check_vector("pose.translation", &p.translation)?;
                let frame = p.frame.unwrap_or_else(|| self.scene_frame());
                if frame >= graph.frame_count {
                    return Err(ApiError::bad(
                        "pose.frame",
                        format!("frame {frame} is past the last scene frame {}", graph.frame_count - 1),
                    ));
                }
                let [w, x, y, z] = p.rotation;
                Some((frame, Pose::new(Quat::new(w, x, y, z), Vec3::from(p.translation))))
            }
            None => None,
        };
        // Apply the pose first: it is the only part that can still fail.
        if let Some((frame, pose)) = pose {
            self.sim
                .graph
                .set_node_pose(&n.id, frame, pose)
                .map_err(|e| ApiError::from_core("pose", e))?;
        }
        if let Some(v) = n.visible {
            self.sim
                .graph
                .set_node_visibility(&n.id, v)
                .map_err(|e| ApiError::from_core("id", e))?;
        }
        Ok(())
    }

    fn apply_playback(&mut self, p: &PlaybackUpdate) -> Result<(), ApiError> {
        p.check()?;
        if let Some(f) = p.fps {
            self.fps = f;
        }
        self.playing = p.mode == PlaybackMode::Playing;
        Ok(())
    }

    fn render(&mut self) -> Result<Arc<FramePacket>, CoreError> {
        let scene_frame = self.scene_frame();
        let frame = self.sim.render(scene_frame, &self.camera)?;
        let index = self.next_index;
        self.next_index += 1;
        let timestamp_ms = self.started.elapsed().as_millis() as u64;
        let (width, height) = (frame.rgb.width as u32, frame.rgb.height as u32);
        let message = |encoding, payload: Vec<u8>| {
            let header = FrameHeader {
                index,
                timestamp_ms,
                width,
                height,
                encoding,
                payload_len: payload.len() as u32,
            };
            Bytes::from(header.encode(&payload))
        };
        Ok(Arc::new(FramePacket {
            index,
            timestamp_ms,
            width,
            height,
            scene_frame,
            png: message(Encoding::Png, encode_png(&frame.rgb)),
            rgb: message(Encoding::Rgb, frame.rgb.to_rgb8()),
            depth: frame.depth,
            alpha: frame.alpha,
        }))
    }

    fn state_doc(&self, frame_index: u64) -> Value {
        let s = self.sim.state();
        let count = |p: &Option<ParticleParams>| p.as_ref().map_or(0, |p| p.count);
        let nodes: Vec<Value> = self
            .sim
            .graph
            .node_list()
            .into_iter()
            .map(|n| json!({ "id": n.id, "kind": n.kind, "visible": n.visible, "gaussians": n.gaussians }))
            .collect();
        json!({
            "frame_index": frame_index,
            "time_step": self.t,
            "scene_frame": self.scene_frame(),
            "frame_count": self.sim.graph.frame_count,
            "playback": {
                "mode": if self.playing { PlaybackMode::Playing } else { PlaybackMode::Paused },
                "fps": self.fps,
            },
            "weather": s,
            "rain_count": count(&s.rain),
            "snow_count": count(&s.snow),
            "weathers": self.sim.graph.weathers().map(|l| l.to_string()).collect::<Vec<_>>(),
            "camera": self.camera.to_spec(),
            "nodes": nodes,
            "ranges": ranges_json(),
        })
    }
}

/// A camera framing the background from outside its bounds, looking at
/// its centroid with +z up.
pub fn default_camera(graph: &SceneGraph, width: usize, height: usize) -> Camera {
    let pts: Vec<Vec3> = graph.background.gaussians.iter().map(|g| g.position).collect();
    let centroid = if pts.is_empty() {
        Vec3::zeros()
    } else {
        pts.iter().sum::<Vec3>() / pts.len() as f64
    };
    let radius = pts.iter().map(|p| (p - centroid).norm()).fold(1.0, f64::max);
    let base = Camera::new(1.0, 1.0, 0.0, 0.0, 1, 1);
    let f = 0.8 * width as f64;
    let cam = Camera {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        ..base
    };
    cam.look_at(centroid + Vec3::new(-2.0 * radius, 0.0, 0.5 * radius), centroid, Vec3::z())
}

/// `camera` resized to `width`×`height` when both are given.
pub fn sized_camera(camera: Camera, size: Option<(usize, usize)>) -> Camera {
    match size {
        Some((w, h)) => resize_camera(&camera, w, h),
        None => camera,
    }
}
