//! End-to-end tests against a live server on an ephemeral port.

use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use weathercity_core::io::{decode_depth, load_scene, make_synthetic, SyntheticSpec};
use weathercity_core::math::{Quat, Vec3};
use weathercity_core::pipeline::WeatherTimeline;
use weathercity_core::raster::Camera;
use weathercity_core::scene::{GaussianNode, GaussianPrimitive, SceneGraph, SkyNode, WeatherDecoder, WeatherLabel};
use weathercity_service::protocol::{Encoding, FrameHeader};
use weathercity_service::{router, AppState, Session, SessionConfig};

struct Server {
    base: String,
    ws: String,
    client: Client,
    _session: Option<Session>,
}

impl Server {
    async fn start(config: Option<SessionConfig>) -> Self {
        let session = config.map(|c| Session::start(c).expect("session starts"));
        let app = router(AppState::new(session.as_ref().map(|s| s.handle.clone())));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        Self {
            base: format!("http://{addr}"),
            ws: format!("ws://{addr}"),
            client: Client::new(),
            _session: session,
        }
    }

    async fn state(&self) -> Value {
        let r = self.client.get(format!("{}/state", self.base)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        r.json().await.unwrap()
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn ok(&self, path: &str, body: Value) -> u64 {
        let (status, ack) = self.post(path, body.clone()).await;
        assert_eq!(status, StatusCode::OK, "{path} {body}: {ack}");
        ack["applied_at"].as_u64().unwrap()
    }

    /// `(frame index, body)` of `GET /frame` with a query string.
    async fn frame(&self, query: &str) -> (u64, Vec<u8>) {
        let r = self.client.get(format!("{}/frame{query}", self.base)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let index = r.headers()["x-frame-index"].to_str().unwrap().parse().unwrap();
        (index, r.bytes().await.unwrap().to_vec())
    }
}

fn synthetic_config(timeline: WeatherTimeline, playing: bool, fps: f64) -> SessionConfig {
    let data = make_synthetic(&SyntheticSpec {
        gaussians: 300,
        frames: 4,
        width: 48,
        height: 36,
        ..SyntheticSpec::default()
    })
    .unwrap();
    SessionConfig {
        graph: data.truth,
        timeline,
        camera: data.views[0].camera.clone(),
        save_path: std::env::temp_dir().join("weathercity-service-test.wcty"),
        fps,
        playing,
        deterministic: true,
    }
}

fn paused() -> SessionConfig {
    synthetic_config(WeatherTimeline::constant(WeatherLabel::Rainy), false, 10.0)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn without_a_scene_every_route_is_unavailable() {
    let s = Server::start(None).await;
    for path in ["/state", "/frame"] {
        let r = s.client.get(format!("{}{path}", s.base)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE, "{path}");
    }
    for path in ["/weather", "/camera", "/nodes", "/playback", "/save"] {
        assert_eq!(s.post(path, json!({})).await.0, StatusCode::SERVICE_UNAVAILABLE, "{path}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fresh_state_reflects_the_timeline() {
    let timeline = WeatherTimeline::parse(
        r#"
        weather = "snowy"
        fog = { density = 0.05, color = [0.8, 0.8, 0.85] }
        wind = { magnitude = 2.0, tilt = 0.1 }
        snow = { count = 100 }
        "#,
    )
    .unwrap();
    let s = Server::start(Some(synthetic_config(timeline, false, 12.0))).await;
    let st = s.state().await;
    assert_eq!(st["weather"]["label"], "snowy");
    assert_eq!(st["weather"]["fog"]["density"], 0.05);
    assert_eq!(st["weather"]["wind"]["magnitude"], 2.0);
    assert_eq!(st["snow_count"], 100);
    assert_eq!(st["rain_count"], 0);
    assert_eq!(st["playback"], json!({ "mode": "paused", "fps": 12.0 }));
    assert_eq!(st["frame_index"], 0);
    assert_eq!(st["weathers"], json!(["raw", "rainy", "snowy"]));
    let car = st["nodes"].as_array().unwrap().iter().find(|n| n["id"] == "car").unwrap();
    assert_eq!(car["visible"], true);
    assert_eq!(st["ranges"]["fog.density"], json!([0.0, 2.0]));
    assert_eq!(st["camera"]["width"], 48);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn weather_updates_read_back_and_zero_values_are_identities() {
    let s = Server::start(Some(paused())).await;
    let (i0, clear) = s.frame("").await;
    assert_eq!(i0, 0);

    let at = s.ok("/weather", json!({ "fog": { "d_f": 0.3 } })).await;
    assert_eq!(at, 1);
    assert_eq!(s.state().await["weather"]["fog"]["density"], 0.3);
    let (i, foggy) = s.frame("").await;
    assert_eq!(i, at, "paused: the ack frame is the latest");
    assert_ne!(foggy, clear);

    s.ok("/weather", json!({ "fog": { "d_f": 0.0 } })).await;
    assert_eq!(s.frame("").await.1, clear, "d_f = 0 renders fog-free");

    s.ok("/weather", json!({ "rain_count": 3000, "fall_speed": { "rain": 4.0 } })).await;
    let st = s.state().await;
    assert_eq!(st["rain_count"], 3000);
    assert_eq!(st["weather"]["rain"]["fall_speed"], 4.0);
    assert_ne!(s.frame("").await.1, clear, "rain is visible");
    s.ok("/weather", json!({ "rain_count": 0 })).await;
    assert_eq!(s.state().await["rain_count"], 0);
    assert_eq!(s.frame("").await.1, clear, "an empty rain node emits nothing");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn label_switch_keeps_geometry_bit_identical() {
    let s = Server::start(Some(paused())).await;
    let (_, rgb_rainy) = s.frame("?encoding=rgb").await;
    let (_, depth_rainy) = s.frame("?buffer=depth").await;
    let (_, alpha_rainy) = s.frame("?buffer=alpha").await;
    s.ok("/weather", json!({ "label": "snowy" })).await;
    let (_, rgb_snowy) = s.frame("?encoding=rgb").await;
    let (_, depth_snowy) = s.frame("?buffer=depth").await;
    let (_, alpha_snowy) = s.frame("?buffer=alpha").await;
    assert_ne!(rgb_rainy, rgb_snowy, "colors switch decoders");
    assert_eq!(depth_rainy, depth_snowy);
    assert_eq!(alpha_rainy, alpha_snowy);
    let depth = decode_depth(&depth_snowy).unwrap();
    assert_eq!((depth.width, depth.height), (48, 36));
    assert!(decode_depth(&alpha_snowy).unwrap().data.iter().any(|a| *a > 0.5));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_updates_name_the_field_and_change_nothing() {
    let s = Server::start(Some(paused())).await;
    let before = s.state().await;
    let cases = [
        ("/weather", json!({ "fog": { "d_f": -0.1 } }), 400, "fog.density"),
        ("/weather", json!({ "fog": { "density": "thick" } }), 400, "fog.density"),
        ("/weather", json!({ "wind": { "magnitude": -1.0 } }), 400, "wind.magnitude"),
        ("/weather", json!({ "turbulence": { "rho": 2.0 } }), 400, "turbulence.rho"),
        ("/weather", json!({ "snow_count": -5 }), 400, "snow_count"),
        ("/weather", json!({ "label": "foggy" }), 404, "label"),
        ("/nodes", json!({ "id": "lamppost", "visible": false }), 404, "id"),
        ("/nodes", json!({ "id": "car", "pose": { "rotation": [0, 0, 0, 0], "translation": [0, 0, 0] } }), 400, "pose.rotation"),
        ("/nodes", json!({ "id": "car", "pose": { "frame": 9, "rotation": [1, 0, 0, 0], "translation": [0, 0, 0] } }), 400, "pose.frame"),
        ("/nodes", json!({ "id": "sky", "pose": { "rotation": [1, 0, 0, 0], "translation": [0, 0, 0] } }), 400, "pose"),
        ("/camera", json!({ "pose": { "rotation": [1, 0, 0] , "translation": [0, 0, 0] } }), 400, "pose.rotation"),
        ("/camera", json!({ "intrinsics": { "fx": -1, "fy": 1, "cx": 0, "cy": 0, "width": 8, "height": 8 } }), 400, "intrinsics"),
        ("/camera", json!({ "look_at": { "eye": [0, 0, 0], "target": [0, 0, 0] } }), 400, "look_at"),
        ("/playback", json!({ "mode": "playing", "fps": 100 }), 400, "fps"),
        ("/playback", json!({ "mode": "rewinding" }), 400, "mode"),
    ];
    for (path, body, status, field) in cases {
        let (got, err) = s.post(path, body.clone()).await;
        assert_eq!(got.as_u16(), status, "{path} {body}: {err}");
        assert_eq!(err["field"], field, "{path} {body}: {err}");
    }
    let r = s.client.post(format!("{}/weather", s.base)).body("{").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(s.state().await, before);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn hiding_then_showing_a_node_restores_the_frame() {
    let s = Server::start(Some(paused())).await;
    let (_, shown) = s.frame("").await;
    s.ok("/nodes", json!({ "id": "car", "visible": false })).await;
    let st = s.state().await;
    let car = st["nodes"].as_array().unwrap().iter().find(|n| n["id"] == "car").unwrap().clone();
    assert_eq!(car["visible"], false);
    let (_, hidden) = s.frame("").await;
    assert_ne!(hidden, shown, "the car is in view");
    s.ok("/nodes", json!({ "id": "car", "visible": true })).await;
    assert_eq!(s.frame("").await.1, shown);

    // Moving the car far away has the same effect as hiding it.
    s.ok("/nodes", json!({ "id": "car", "pose": { "rotation": [1, 0, 0, 0], "translation": [0, 0, -1e4] } })).await;
    assert_eq!(s.frame("").await.1, hidden);
}

/// One small white Gaussian at `landmark` on a black sky.
fn landmark_config(landmark: Vec3, camera: Camera) -> SessionConfig {
    let mut graph = SceneGraph::new(1);
    let mut feature = [0.0; weathercity_core::scene::FEATURE_DIM];
    feature[..3].copy_from_slice(&[8.0, 8.0, 8.0]);
    let g = GaussianPrimitive::new(landmark, Vec3::repeat(0.02f64.ln()), Quat::new(1.0, 0.0, 0.0, 0.0), 4.0)
        .with_feature(feature);
    graph.background = GaussianNode::background(vec![g]);
    graph
        .register_weather(WeatherDecoder::passthrough(WeatherLabel::Raw), SkyNode::constant(4, 2, [0.0; 3]))
        .unwrap();
    SessionConfig {
        graph,
        timeline: WeatherTimeline::default(),
        camera,
        save_path: std::env::temp_dir().join("unused.wcty"),
        fps: 10.0,
        playing: false,
        deterministic: true,
    }
}

fn brightest(rgb: &[u8], width: usize) -> (usize, usize) {
    let i = (0..rgb.len() / 3).max_by_key(|i| rgb[3 * i] as u32 + rgb[3 * i + 1] as u32 + rgb[3 * i + 2] as u32).unwrap();
    (i % width, i / width)
}

/// Pinhole projection written out from the look-at construction:
/// camera axes right = f × up, down = f × right, forward = f.
fn project_look_at(eye: Vec3, target: Vec3, up: Vec3, (fx, cx, cy): (f64, f64, f64), p: Vec3) -> [f64; 2] {
    let f = (target - eye).normalize();
    let right = f.cross(&up).normalize();
    let down = f.cross(&right);
    let d = p - eye;
    let (x, y, z) = (d.dot(&right), d.dot(&down), d.dot(&f));
    [fx * x / z + cx, fx * y / z + cy]
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn camera_updates_move_a_known_landmark() {
    let landmark = Vec3::new(1.0, 2.0, 3.0);
    let start = Camera::new(60.0, 60.0, 40.0, 30.0, 80, 60).look_at(Vec3::new(-8.0, 2.0, 3.0), landmark, Vec3::z());
    let s = Server::start(Some(landmark_config(landmark, start))).await;
    let (_, rgb) = s.frame("?encoding=rgb").await;
    assert_eq!(brightest(&rgb, 80), (40, 30), "landmark starts centered");

    let (eye, target, up) = (Vec3::new(-6.0, -1.0, 5.0), Vec3::new(0.5, 2.5, 2.0), Vec3::z());
    s.ok("/camera", json!({ "look_at": { "eye": eye.as_slice(), "target": target.as_slice() } })).await;
    let want = project_look_at(eye, target, up, (60.0, 40.0, 30.0), landmark);
    let (x, y) = brightest(&s.frame("?encoding=rgb").await.1, 80);
    assert!((x as f64 - want[0]).abs() <= 1.0 && (y as f64 - want[1]).abs() <= 1.0, "{x},{y} vs {want:?}");
    assert!((want[0] - 40.0).abs() > 3.0, "the view actually moved");

    // Identity rotation looking down +z from 10 m behind, new intrinsics.
    s.ok(
        "/camera",
        json!({
            "pose": { "rotation": [1, 0, 0, 0], "translation": [0.0, 0.0, 10.0] },
            "intrinsics": { "fx": 50, "fy": 50, "cx": 32, "cy": 24, "width": 64, "height": 48 }
        }),
    )
    .await;
    let want = [50.0 * 1.0 / 13.0 + 32.0, 50.0 * 2.0 / 13.0 + 24.0];
    let r = s.client.get(format!("{}/frame?encoding=rgb", s.base)).send().await.unwrap();
    assert_eq!(r.headers()["x-frame-width"], "64");
    let (x, y) = brightest(&r.bytes().await.unwrap(), 64);
    assert!((x as f64 - want[0]).abs() <= 1.0 && (y as f64 - want[1]).abs() <= 1.0, "{x},{y} vs {want:?}");
    let cam = &s.state().await["camera"];
    assert_eq!(cam["fx"], 50.0);
    assert_eq!(cam["translation"], json!([0.0, 0.0, 10.0]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn paused_sessions_serve_one_frame() {
    let s = Server::start(Some(paused())).await;
    let (a, png) = s.frame("").await;
    for _ in 0..3 {
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert_eq!(s.frame("").await, (a, png.clone()));
    }
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(s.state().await["frame_index"], a);
}

async fn next_binary<S>(ws: &mut S) -> (FrameHeader, Vec<u8>)
where
    S: futures::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        match ws.next().await.expect("stream open").unwrap() {
            Message::Binary(b) => {
                let (h, p) = FrameHeader::decode(&b).unwrap();
                return (h, p.to_vec());
            }
            Message::Text(_) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn subscribers_share_indices_and_payloads() {
    let s = Server::start(Some(synthetic_config(WeatherTimeline::default(), true, 30.0))).await;
    let (mut a, _) = tokio_tungstenite::connect_async(format!("{}/stream", s.ws)).await.unwrap();
    let (mut b, _) = tokio_tungstenite::connect_async(format!("{}/stream", s.ws)).await.unwrap();
    match a.next().await.unwrap().unwrap() {
        Message::Text(t) => assert_eq!(serde_json::from_str::<Value>(&t).unwrap()["type"], "state"),
        other => panic!("expected the state first, got {other:?}"),
    }
    let mut got_a = Vec::new();
    let mut got_b = Vec::new();
    for _ in 0..12 {
        got_a.push(next_binary(&mut a).await);
        got_b.push(next_binary(&mut b).await);
    }
    for got in [&got_a, &got_b] {
        assert!(got.windows(2).all(|w| w[0].0.index < w[1].0.index));
        assert!(got.iter().all(|(h, p)| h.encoding == Encoding::Png && h.width == 48 && p.len() == h.payload_len as usize));
    }
    let common: Vec<_> = got_a.iter().filter(|(h, _)| got_b.iter().any(|(k, _)| k.index == h.index)).collect();
    assert!(common.len() >= 8, "only {} shared frames", common.len());
    for (h, p) in common {
        let (k, q) = got_b.iter().find(|(k, _)| k.index == h.index).unwrap();
        assert_eq!((h, p), (k, q));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn slow_subscribers_skip_frames_in_order() {
    let mut config = synthetic_config(WeatherTimeline::default(), true, 60.0);
    config.camera = weathercity_core::pipeline::resize_camera(&config.camera, 320, 240);
    let s = Server::start(Some(config)).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{}/stream?encoding=rgb", s.ws)).await.unwrap();
    let mut indices = vec![next_binary(&mut ws).await.0.index];
    // Stall long enough for the socket buffers to fill, then read as fast
    // as possible: once the buffered frames are drained the subscriber's
    // queue must have dropped some.
    tokio::time::sleep(Duration::from_secs(3)).await;
    let until = Instant::now() + Duration::from_secs(30);
    while Instant::now() < until && !indices.windows(2).any(|w| w[1] > w[0] + 1) {
        let (h, p) = next_binary(&mut ws).await;
        assert_eq!(p.len(), 320 * 240 * 3);
        indices.push(h.index);
    }
    assert!(indices.windows(2).all(|w| w[0] < w[1]), "{indices:?}");
    assert!(indices.windows(2).any(|w| w[1] > w[0] + 1), "no frames were dropped: {indices:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stream_accepts_updates_and_echoes_notices() {
    let s = Server::start(Some(paused())).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{}/stream", s.ws)).await.unwrap();
    let (first, _) = next_binary(&mut ws).await;
    let cmd = json!({ "type": "weather", "id": 7, "body": { "fog": { "d_f": 0.25 } } });
    ws.send(Message::Text(cmd.to_string().into())).await.unwrap();
    let (mut ack, mut notice, mut frame) = (None, None, None);
    while ack.is_none() || notice.is_none() || frame.is_none() {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => {
                let v: Value = serde_json::from_str(&t).unwrap();
                match v["type"].as_str().unwrap() {
                    "ack" => ack = Some(v),
                    "applied" => notice = Some(v),
                    other => panic!("unexpected {other}"),
                }
            }
            Message::Binary(b) => frame = Some(FrameHeader::decode(&b).unwrap().0),
            other => panic!("unexpected {other:?}"),
        }
    }
    let (ack, notice, frame) = (ack.unwrap(), notice.unwrap(), frame.unwrap());
    assert_eq!(ack["id"], 7);
    let at = ack["ack"]["applied_at"].as_u64().unwrap();
    assert_eq!(at, first.index + 1);
    assert_eq!(frame.index, at);
    assert_eq!(notice["frame"], at);
    assert_eq!(notice["update"]["fog"]["density"], 0.25);

    let bad = json!({ "type": "nodes", "id": "x", "body": { "id": "nope", "visible": true } });
    ws.send(Message::Text(bad.to_string().into())).await.unwrap();
    loop {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            let v: Value = serde_json::from_str(&t).unwrap();
            assert_eq!(v["type"], "error");
            assert_eq!(v["status"], 404);
            break;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn playing_sessions_advance_and_replay_keyframes() {
    let timeline = WeatherTimeline::parse(
        r#"
        weather = "raw"
        [[keys]]
        frame = 3
        weather = "snowy"
        "#,
    )
    .unwrap();
    let s = Server::start(Some(synthetic_config(timeline, true, 30.0))).await;
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let st = s.state().await;
        if st["time_step"].as_u64().unwrap() >= 3 {
            assert_eq!(st["weather"]["label"], "snowy");
            assert_eq!(st["scene_frame"].as_u64().unwrap(), st["time_step"].as_u64().unwrap() % 4);
            break;
        }
        assert_eq!(st["weather"]["label"], "raw");
        assert!(Instant::now() < deadline, "playback stalled");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let at = s.ok("/playback", json!({ "mode": "paused" })).await;
    let (a, _) = s.frame("").await;
    assert!(a >= at);
    tokio::time::sleep(Duration::from_millis(150)).await;
    assert_eq!(s.frame("").await.0, a, "paused sessions stop producing frames");
    assert_eq!(s.state().await["playback"]["mode"], "paused");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn save_writes_the_live_scene() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(Some(paused())).await;
    s.ok("/nodes", json!({ "id": "car", "visible": false })).await;
    let path = dir.path().join("live.wcty");
    let (status, body) = s.post("/save", json!({ "path": path })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["path"], path.to_str().unwrap());
    let saved = load_scene(&path).unwrap();
    let car = saved.find_node("car").unwrap();
    assert!(!saved.node(car).visible);

    let missing = dir.path().join("no/such/dir/x.wcty");
    let (status, body) = s.post("/save", json!({ "path": missing })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    assert_eq!(body["field"], "path");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fog_pulls_frames_toward_the_fog_color() {
    let s = Server::start(Some(paused())).await;
    let distance = |rgb: &[u8], c: [f64; 3]| {
        rgb.chunks(3)
            .map(|p| (0..3).map(|k| (p[k] as f64 / 255.0 - c[k]).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / (rgb.len() / 3) as f64
    };
    let color = [0.8, 0.8, 0.85];
    let (_, clear) = s.frame("?encoding=rgb").await;
    let at = s.ok("/weather", json!({ "fog": { "d_f": 0.3, "color": color } })).await;
    let (i, foggy) = s.frame("?encoding=rgb").await;
    assert!(i >= at);
    assert!(distance(&foggy, color) < distance(&clear, color));
}
