//! Live render service: one session rendering a scene under steerable
//! weather, with HTTP endpoints for updates and a WebSocket frame stream.

pub mod api;
pub mod protocol;
pub mod session;
pub mod updates;

pub use api::{router, AppState};
pub use session::{Session, SessionConfig, SessionHandle};
