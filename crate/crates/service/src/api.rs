//! HTTP and WebSocket routes.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::ws::{CloseFrame, Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use log::debug;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc};
use weathercity_core::io::encode_depth;

use crate::protocol::Encoding;
use crate::session::{Command, Event, FramePacket, SessionHandle};
use crate::updates::{ApiError, CameraUpdate, NodeUpdate, PlaybackUpdate, SaveRequest, WeatherPatch};

/// Close code sent to a subscriber that fell too far behind.
pub const CLOSE_OVERLOADED: u16 = 1013;
/// Dropped frames in one lag after which a subscriber is disconnected.
pub const DEFAULT_MAX_LAG: u64 = 1000;

#[derive(Clone)]
pub struct AppState {
    /// `None` when started without a scene; every route answers 503.
    pub session: Option<SessionHandle>,
    pub max_lag: u64,
}

impl AppState {
    pub fn new(session: Option<SessionHandle>) -> Self {
        Self {
            session,
            max_lag: DEFAULT_MAX_LAG,
        }
    }

    fn session(&self) -> Result<&SessionHandle, ApiError> {
        self.session.as_ref().ok_or_else(|| ApiError::unavailable("no scene loaded"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/frame", get(get_frame))
        .route("/stream", get(stream))
        .route("/weather", post(post_weather))
        .route("/camera", post(post_camera))
        .route("/nodes", post(post_nodes))
        .route("/playback", post(post_playback))
        .route("/save", post(post_save))
        .with_state(state)
}

/// Parses a JSON body, naming the offending field on failure.
pub fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_owned() } else { path };
        ApiError::bad(field, e.into_inner().to_string())
    })
}

async fn get_state(State(app): State<AppState>) -> Result<Json<Value>, ApiError> {
    Ok(Json(app.session()?.state().as_ref().clone()))
}

/// Turns a parsed update into a command and waits for its ack.
pub async fn dispatch(session: &SessionHandle, kind: &str, body: &[u8]) -> Result<Value, ApiError> {
    let ack = match kind {
        "weather" => {
            let p: WeatherPatch = parse_body(body)?;
            p.check()?;
            session.request(|r| Command::Weather(p, r)).await?
        }
        "camera" => {
            let c: CameraUpdate = parse_body(body)?;
            session.request(|r| Command::Camera(c, r)).await?
        }
        "nodes" => {
            let n: NodeUpdate = parse_body(body)?;
            session.request(|r| Command::Node(n, r)).await?
        }
        "playback" => {
            let p: PlaybackUpdate = parse_body(body)?;
            p.check()?;
            session.request(|r| Command::Playback(p, r)).await?
        }
        "save" => {
            let req: SaveRequest = if body.iter().all(u8::is_ascii_whitespace) {
                SaveRequest::default()
            } else {
                parse_body(body)?
            };
            let path = session.request(|r| Command::Save(req.path.map(Into::into), r)).await?;
            return Ok(json!({ "path": path }));
        }
        other => return Err(ApiError::bad("type", format!("unknown update type `{other}`"))),
    };
    Ok(serde_json::to_value(ack).expect("ack serializes"))
}

async fn post_update(app: &AppState, kind: &str, body: &[u8]) -> Result<Json<Value>, ApiError> {
    Ok(Json(dispatch(app.session()?, kind, body).await?))
}

async fn post_weather(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    post_update(&app, "weather", &body).await
}

async fn post_camera(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    post_update(&app, "camera", &body).await
}

async fn post_nodes(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    post_update(&app, "nodes", &body).await
}

async fn post_playback(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    post_update(&app, "playback", &body).await
}

async fn post_save(State(app): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    post_update(&app, "save", &body).await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameQuery {
    #[serde(default)]
    pub encoding: Encoding,
    /// `depth` or `alpha` returns that buffer as a depth raster instead.
    pub buffer: Option<String>,
}

fn frame_headers(f: &FramePacket, content_type: &'static str) -> [(header::HeaderName, HeaderValue); 6] {
    let num = |v: u64| HeaderValue::from(v);
    [
        (header::CONTENT_TYPE, HeaderValue::from_static(content_type)),
        (header::HeaderName::from_static("x-frame-index"), num(f.index)),
        (header::HeaderName::from_static("x-frame-timestamp"), num(f.timestamp_ms)),
        (header::HeaderName::from_static("x-frame-width"), num(f.width as u64)),
        (header::HeaderName::from_static("x-frame-height"), num(f.height as u64)),
        (header::HeaderName::from_static("x-scene-frame"), num(f.scene_frame as u64)),
    ]
}

async fn get_frame(State(app): State<AppState>, query: Result<Query<FrameQuery>, axum::extract::rejection::QueryRejection>) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad("query", e.body_text()))?;
    let f = app.session()?.latest_frame();
    let (content_type, body) = match q.buffer.as_deref() {
        None => match q.encoding {
            Encoding::Png => ("image/png", f.payload(Encoding::Png)),
            Encoding::Rgb => ("application/octet-stream", f.payload(Encoding::Rgb)),
        },
        Some("depth") => ("application/octet-stream", Bytes::from(encode_depth(&f.depth))),
        Some("alpha") => ("application/octet-stream", Bytes::from(encode_depth(&f.alpha))),
        Some(other) => return Err(ApiError::bad("buffer", format!("unknown buffer `{other}` (use depth or alpha)"))),
    };
    Ok((frame_headers(&f, content_type), Body::from(body)).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamQuery {
    #[serde(default)]
    pub encoding: Encoding,
}

async fn stream(
    State(app): State<AppState>,
    query: Result<Query<StreamQuery>, axum::extract::rejection::QueryRejection>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad("query", e.body_text()))?;
    let session = app.session()?.clone();
    let max_lag = app.max_lag;
    Ok(ws.on_upgrade(move |socket| serve_stream(socket, session, q.encoding, max_lag)))
}

/// What a subscriber should do next.
#[derive(Debug, PartialEq)]
pub enum Forward {
    Frame(Arc<FramePacket>),
    Notice(Arc<str>),
    Close(u16, String),
    /// The session ended.
    Done,
}

/// Next item for a subscriber that has already seen frame `last`.
/// Frames the subscriber could not keep up with are skipped (the queue
/// drops its oldest entries); a lag beyond `max_lag` closes the stream.
pub async fn next_forward(rx: &mut broadcast::Receiver<Event>, last: &mut Option<u64>, max_lag: u64) -> Forward {
    loop {
        match rx.recv().await {
            Ok(Event::Frame(f)) => {
                if last.is_some_and(|l| f.index <= l) {
                    continue;
                }
                *last = Some(f.index);
                return Forward::Frame(f);
            }
            Ok(Event::Notice(n)) => return Forward::Notice(n),
            Err(broadcast::error::RecvError::Lagged(n)) => {
                debug!("subscriber skipped {n} messages");
                if n > max_lag {
                    return Forward::Close(CLOSE_OVERLOADED, format!("overloaded: fell {n} messages behind"));
                }
            }
            Err(broadcast::error::RecvError::Closed) => return Forward::Done,
        }
    }
}

impl PartialEq for FramePacket {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index && self.png == other.png
    }
}

/// Client text messages: `{"type": "weather"|"camera"|"nodes"|"playback"|"save", "id"?: any, "body": {...}}`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientMessage {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    id: Value,
    #[serde(default)]
    body: Value,
}

async fn client_reply(session: &SessionHandle, text: &str) -> String {
    let msg: ClientMessage = match parse_body(text.as_bytes()) {
        Ok(m) => m,
        Err(e) => return json!({ "type": "error", "id": null, "status": e.status, "field": e.field, "error": e.message }).to_string(),
    };
    let body = serde_json::to_vec(&msg.body).expect("value serializes");
    match dispatch(session, &msg.kind, if msg.body.is_null() { b"" } else { &body }).await {
        Ok(v) => json!({ "type": "ack", "id": msg.id, "ack": v }).to_string(),
        Err(e) => json!({ "type": "error", "id": msg.id, "status": e.status, "field": e.field, "error": e.message }).to_string(),
    }
}

async fn serve_stream(socket: WebSocket, session: SessionHandle, encoding: Encoding, max_lag: u64) {
    let (mut sink, mut source) = socket.split();
    let mut events = session.subscribe();
    let latest = session.latest_frame();
    let mut last = Some(latest.index);
    let hello = json!({ "type": "state", "state": session.state().as_ref() }).to_string();
    if sink.send(Message::Text(hello.into())).await.is_err()
        || sink.send(Message::Binary(latest.message(encoding))).await.is_err()
    {
        return;
    }

    // Replies to client messages go through the writer below.
    let (reply_tx, mut replies) = mpsc::channel::<String>(16);
    let reader_session = session.clone();
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = source.next().await {
            match msg {
                Message::Text(t) => {
                    let reply = client_reply(&reader_session, t.as_str()).await;
                    if reply_tx.send(reply).await.is_err() {
                        break;
                    }
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
    });

    loop {
        let out = tokio::select! {
            f = next_forward(&mut events, &mut last, max_lag) => match f {
                Forward::Frame(f) => Message::Binary(f.message(encoding)),
                Forward::Notice(n) => Message::Text(n.as_ref().into()),
                Forward::Close(code, reason) => {
                    let _ = sink.send(Message::Close(Some(CloseFrame { code, reason: Utf8Bytes::from(reason) }))).await;
                    break;
                }
                Forward::Done => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            },
            r = replies.recv() => match r {
                Some(text) => Message::Text(text.into()),
                // The client closed its side.
                None => break,
            },
        };
        if sink.send(out).await.is_err() {
            break;
        }
    }
    reader.abort();
}
