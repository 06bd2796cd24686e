//! WebSocket server: `/ws` carries one session per connection, `/health`
//! reports the loaded checkpoints.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use hint_model::pipeline::Models;
use serde_json::json;
use tokio::net::TcpListener;

use crate::handler::{HandlerConfig, SessionHandler};
use crate::protocol::{ErrorCode, ServerMessage};

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub max_sessions: usize,
    pub idle_timeout: Duration,
    pub handler: HandlerConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8765)),
            max_sessions: 16,
            idle_timeout: Duration::from_secs(300),
            handler: HandlerConfig::default(),
        }
    }
}

struct AppState {
    models: Arc<Models>,
    config: ServeConfig,
    active: AtomicUsize,
    next_id: AtomicU64,
}

pub fn router(models: Arc<Models>, config: ServeConfig) -> Router {
    let state = Arc::new(AppState {
        models,
        config,
        active: AtomicUsize::new(0),
        next_id: AtomicU64::new(1),
    });
    Router::new()
        .route("/health", get(health))
        .route("/ws", get(upgrade))
        .with_state(state)
}

/// Binds and serves until the task is cancelled; returns the bound address through `ready`.
pub async fn serve(
    models: Arc<Models>,
    config: ServeConfig,
    ready: Option<tokio::sync::oneshot::Sender<SocketAddr>>,
) -> std::io::Result<()> {
    let listener = TcpListener::bind(config.addr).await?;
    let addr = listener.local_addr()?;
    tracing::info!(%addr, "serving");
    if let Some(tx) = ready {
        let _ = tx.send(addr);
    }
    axum::serve(listener, router(models, config)).await
}

async fn health(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let m = &state.models;
    Json(json!({
        "status": "ok",
        "layout": m.layout.name,
        "h": m.history(),
        "k": m.future(),
        "vae_checksum": m.vae_checksum,
        "diffusion_checksum": m.diffusion_checksum,
        "active_sessions": state.active.load(Ordering::SeqCst),
        "max_sessions": state.config.max_sessions,
    }))
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_session(socket, state))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("server messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

struct Slot(Arc<AppState>);

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn run_session(mut socket: WebSocket, state: Arc<AppState>) {
    let taken = state.active.fetch_add(1, Ordering::SeqCst);
    let _slot = Slot(state.clone());
    if taken >= state.config.max_sessions {
        let msg = ServerMessage::error(
            ErrorCode::TooManySessions,
            format!("server is at its limit of {} sessions", state.config.max_sessions),
        );
        let _ = send(&mut socket, &msg).await;
        let _ = socket.send(Message::Close(None)).await;
        return;
    }
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let mut handler = Some(SessionHandler::new(state.models.clone(), state.config.handler.clone(), id.clone()));
    loop {
        let incoming = match tokio::time::timeout(state.config.idle_timeout, socket.recv()).await {
            Err(_) => {
                let msg = ServerMessage::error(ErrorCode::IdleTimeout, "no message within the idle timeout");
                let _ = send(&mut socket, &msg).await;
                let _ = socket.send(Message::Close(None)).await;
                break;
            }
            Ok(None) | Ok(Some(Err(_))) => break,
            Ok(Some(Ok(m))) => m,
        };
        let text = match incoming {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => match String::from_utf8(b.to_vec()) {
                Ok(t) => t,
                Err(_) => {
                    let msg = ServerMessage::error(ErrorCode::BadMessage, "binary frames must hold UTF-8 JSON");
                    if !send(&mut socket, &msg).await {
                        break;
                    }
                    continue;
                }
            },
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        // generation is CPU bound; keep it off the async workers
        let mut h = handler.take().expect("handler present between messages");
        let joined = tokio::task::spawn_blocking(move || {
            let out = h.handle_text(&text);
            (h, out)
        })
        .await;
        let replies = match joined {
            Ok((h, out)) => {
                handler = Some(h);
                out
            }
            Err(e) => {
                tracing::error!(session = %id, error = %e, "session handler panicked");
                let msg = ServerMessage::error(ErrorCode::Internal, "internal failure; session ended");
                let _ = send(&mut socket, &msg).await;
                break;
            }
        };
        for r in &replies {
            if !send(&mut socket, r).await {
                return;
            }
        }
    }
}
