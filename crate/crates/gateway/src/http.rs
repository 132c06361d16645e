//! axum front end for [`Gateway`].
//!
//! `POST /v1/query` takes `{"user_id", "queries"}` and answers a puzzle
//! offer; `POST /v1/solution` takes `{"puzzle_id", "solution"}` and answers
//! the predictions. Errors are `{"error", "status"}` with the matching HTTP
//! status.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use powgate_core::server::{Gateway, GatewayError};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

/// Request bodies above this are refused before parsing.
pub const BODY_LIMIT_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub user_id: String,
    pub queries: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionRequest {
    pub puzzle_id: String,
    pub solution: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub status: u16,
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/solution", post(solution))
        .route("/v1/health", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(BODY_LIMIT_BYTES))
        .with_state(gateway)
}

fn error_response(e: GatewayError) -> Response {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    if status.is_server_error() {
        tracing::error!(error = %e, "request failed");
    }
    let body = ErrorBody {
        error: e.to_string(),
        status: status.as_u16(),
    };
    (status, Json(body)).into_response()
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, GatewayError> {
    serde_json::from_slice(body).map_err(|e| GatewayError::BadRequest(format!("malformed body: {e}")))
}

/// Runs CPU-bound gateway work off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, GatewayError> + Send + 'static,
) -> Result<T, GatewayError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| GatewayError::Internal(format!("worker failed: {e}")))?
}

async fn query(State(gateway): State<Arc<Gateway>>, body: Bytes) -> Response {
    let req: QueryRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return error_response(e),
    };
    let n = req.queries.len();
    let user = req.user_id.clone();
    match blocking(move || gateway.handle_query(&req.user_id, req.queries)).await {
        Ok(offer) => {
            tracing::info!(user = %user, queries = n, bits = offer.bits, puzzle = %offer.puzzle_id, "issued");
            Json(offer).into_response()
        }
        Err(e) => error_response(e),
    }
}

async fn solution(State(gateway): State<Arc<Gateway>>, body: Bytes) -> Response {
    let req: SolutionRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return error_response(e),
    };
    let id = req.puzzle_id.clone();
    match blocking(move || gateway.handle_solution(&req.puzzle_id, &req.solution)).await {
        Ok(predictions) => {
            tracing::info!(puzzle = %id, answers = predictions.labels.len(), "released");
            Json(predictions).into_response()
        }
        Err(e) => {
            tracing::info!(puzzle = %id, status = e.status(), "solution refused");
            error_response(e)
        }
    }
}

/// Periodic ledger snapshots; one more is written at shutdown.
#[derive(Debug, Clone)]
pub struct SnapshotPolicy {
    pub path: PathBuf,
    pub interval: Option<Duration>,
}

fn snapshot_now(gateway: &Gateway, path: &std::path::Path) {
    match gateway.ledgers().snapshot(path) {
        Ok(()) => tracing::debug!(path = %path.display(), users = gateway.ledgers().len(), "ledger snapshot"),
        Err(e) => tracing::error!(error = %e, "ledger snapshot failed"),
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    gateway: Arc<Gateway>,
    listener: TcpListener,
    snapshot: Option<SnapshotPolicy>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = snapshot.as_ref().and_then(|s| s.interval.map(|i| (s.path.clone(), i))).map(|(path, every)| {
        let gateway = gateway.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(every);
            interval.tick().await;
            loop {
                interval.tick().await;
                let (g, p) = (gateway.clone(), path.clone());
                let _ = tokio::task::spawn_blocking(move || snapshot_now(&g, &p)).await;
            }
        })
    });
    let result = axum::serve(listener, router(gateway.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    if let Some(t) = ticker {
        t.abort();
    }
    if let Some(s) = snapshot {
        let g = gateway.clone();
        let _ = tokio::task::spawn_blocking(move || snapshot_now(&g, &s.path)).await;
    }
    result
}

/// A server on its own thread and runtime, for blocking callers (tests,
/// the acceptance suite, the simulation CLI). Shuts down on drop.
pub struct BackgroundServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    /// Binds an ephemeral loopback port.
    pub fn start(gateway: Arc<Gateway>) -> std::io::Result<Self> {
        Self::start_on("127.0.0.1:0".parse().expect("loopback address"), gateway, None)
    }

    pub fn start_on(
        addr: SocketAddr,
        gateway: Arc<Gateway>,
        snapshot: Option<SnapshotPolicy>,
    ) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("powgate-http".into()).spawn(move || {
            runtime.block_on(serve(gateway, listener, snapshot, async {
                let _ = stopped.await;
            }))
        })?;
        Ok(BackgroundServer {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
