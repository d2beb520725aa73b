//! HTTP surface: `POST /write?db=`, `POST /job`, `GET /health`, `GET /ping`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;

use super::{serve_tcp, JobSignal, RouteConfig, Router, RouterError, SignalError, WriteError};
use crate::now_ns;

/// Header listing rejected line indices on a partially accepted write.
pub const REJECTED_LINES_HEADER: &str = "x-rejected-lines";

const MAX_BODY: usize = 512 * 1024 * 1024;

pub fn app(router: Arc<Router>) -> axum::Router {
    axum::Router::new()
        .route("/write", post(write))
        .route("/job", post(job))
        .route("/health", get(health))
        .route(
            "/ping",
            get(|| async { StatusCode::NO_CONTENT }).head(|| async { StatusCode::NO_CONTENT }),
        )
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(router)
}

async fn write(
    State(router): State<Arc<Router>>,
    Query(params): Query<HashMap<String, String>>,
    body: Bytes,
) -> Response {
    let receipt = now_ns();
    // u, p, precision, rp and consistency are accepted and ignored.
    let Some(db) = params.get("db").cloned() else {
        return (StatusCode::BAD_REQUEST, "missing db parameter\n").into_response();
    };
    let body = match String::from_utf8(body.to_vec()) {
        Ok(b) => b,
        Err(_) => return (StatusCode::BAD_REQUEST, "body is not valid UTF-8\n").into_response(),
    };
    let result =
        tokio::task::spawn_blocking(move || router.handle_write(&db, &body, receipt)).await;
    match result {
        Ok(Ok(outcome)) => {
            let mut resp = StatusCode::NO_CONTENT.into_response();
            if !outcome.rejected.is_empty() {
                let list = outcome
                    .rejected
                    .iter()
                    .map(|(i, _)| i.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                if let Ok(v) = HeaderValue::from_str(&list) {
                    resp.headers_mut().insert(REJECTED_LINES_HEADER, v);
                }
            }
            resp
        }
        Ok(Err(WriteError::AllLinesRejected(errors))) => {
            let mut text = String::new();
            for (idx, e) in &errors {
                let _ = writeln!(text, "line {idx}: {e}");
            }
            (StatusCode::BAD_REQUEST, text).into_response()
        }
        Ok(Err(e @ WriteError::InvalidDatabase(_))) => {
            (StatusCode::BAD_REQUEST, format!("{e}\n")).into_response()
        }
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("write task failed: {e}\n"),
        )
            .into_response(),
    }
}

async fn job(State(router): State<Arc<Router>>, body: Bytes) -> Response {
    let receipt = now_ns();
    let signal: JobSignal = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                format!("invalid signal document: {e}\n"),
            )
                .into_response()
        }
    };
    match router.handle_job_signal(signal, receipt) {
        Ok(record) => (StatusCode::OK, Json(record)).into_response(),
        Err(e @ (SignalError::Invalid(_) | SignalError::Job(_))) => {
            (StatusCode::BAD_REQUEST, format!("{e}\n")).into_response()
        }
    }
}

async fn health(State(router): State<Arc<Router>>) -> Response {
    Json(router.health()).into_response()
}

/// A router running on a Tokio runtime.
pub struct RunningRouter {
    pub router: Arc<Router>,
    pub addr: SocketAddr,
    pub bus_addr: Option<SocketAddr>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl RunningRouter {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Binds the HTTP listener (and the TCP bus when configured), then spawns the
/// server and the retry flusher. `listen` overrides the configured address.
pub async fn start(
    router: Arc<Router>,
    listen: Option<SocketAddr>,
) -> Result<RunningRouter, RouterError> {
    let config: &RouteConfig = router.config();
    let listener = tokio::net::TcpListener::bind(listen.unwrap_or(config.listen)).await?;
    let addr = listener.local_addr()?;
    let mut tasks = Vec::new();
    let mut bus_addr = None;
    if let (Some(bus), Some(bus_listen)) = (router.bus(), config.bus_listen) {
        let bus_listener = tokio::net::TcpListener::bind(bus_listen).await?;
        bus_addr = Some(bus_listener.local_addr()?);
        let bus = Arc::clone(bus);
        let capacity = config.bus_queue_capacity;
        tasks.push(tokio::spawn(async move {
            if let Err(e) = serve_tcp(bus, bus_listener, capacity).await {
                tracing::error!(error = %e, "bus listener failed");
            }
        }));
    }
    tasks.push(router.spawn_flusher());
    let app = app(Arc::clone(&router));
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "http server failed");
        }
    }));
    Ok(RunningRouter {
        router,
        addr,
        bus_addr,
        tasks,
    })
}
