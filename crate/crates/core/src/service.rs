//! HTTP query service: `(entity, site)` lookups over social storage and
//! on-demand extraction.
//!
//! - `GET /price?entity=lemon+cake&site=Zingerman` answers the newest
//!   matching record, or 404 with `{}`. Add `all=1` for every match.
//! - `POST /extract` with `{"url": ..., "entity": ...}` runs the tiers.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::fetcher::PageUrl;
use crate::matcher;
use crate::orchestrator::{Backend, Extractor};
use crate::storage::SocialRecord;
use crate::types::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceAnswer {
    pub entity: String,
    pub url: String,
    pub amount: String,
    pub amount_minor: u64,
    pub currency: String,
    pub observed_at: Timestamp,
}

impl From<SocialRecord> for PriceAnswer {
    fn from(r: SocialRecord) -> Self {
        PriceAnswer {
            amount: r.price.amount_string(),
            amount_minor: r.price.amount_minor,
            currency: r.price.currency.as_str().to_string(),
            entity: r.entity,
            url: r.url.as_str().to_string(),
            observed_at: r.observed_at,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PriceQuery {
    entity: Option<String>,
    site: Option<String>,
    all: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ExtractRequest {
    url: String,
    #[serde(default)]
    entity: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_found() -> Response {
    (StatusCode::NOT_FOUND, Json(json!({}))).into_response()
}

async fn price<B: Backend + 'static>(State(x): State<Arc<Extractor<B>>>, Query(q): Query<PriceQuery>) -> Response {
    let (Some(entity), Some(site)) = (q.entity, q.site) else {
        return error(StatusCode::BAD_REQUEST, "entity and site are required");
    };
    let all = matches!(q.all.as_deref(), Some("1" | "true" | "yes"));
    let social = &x.stores().social;
    if all {
        let matches: Vec<PriceAnswer> = matcher::match_all(social, &entity, &site)
            .into_iter()
            .map(PriceAnswer::from)
            .collect();
        if matches.is_empty() {
            return not_found();
        }
        return Json(json!({ "matches": matches })).into_response();
    }
    match matcher::lookup(social, &entity, &site) {
        Some(r) => Json(PriceAnswer::from(r)).into_response(),
        None => not_found(),
    }
}

async fn extract<B: Backend + 'static>(State(x): State<Arc<Extractor<B>>>, Json(req): Json<ExtractRequest>) -> Response {
    let url = match PageUrl::parse(&req.url) {
        Ok(u) => u,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let joined = tokio::task::spawn_blocking(move || x.extract(&url, &req.entity)).await;
    match joined {
        Ok(Ok(outcome)) => Json(outcome).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router<B: Backend + 'static>(extractor: Arc<Extractor<B>>) -> Router {
    Router::new()
        .route("/price", get(price::<B>))
        .route("/extract", post(extract::<B>))
        .with_state(extractor)
}

/// Serves until the process ends. Port 0 picks a free port; `on_bind`
/// receives the bound address.
pub fn serve_blocking<B: Backend + 'static>(
    addr: SocketAddr,
    extractor: Arc<Extractor<B>>,
    on_bind: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        tracing::info!(%local, "listening");
        on_bind(local);
        axum::serve(listener, router(extractor)).await
    })
}

/// A service running on a background thread, stopped on drop.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("service thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_and_join();
    }
}

pub fn spawn<B: Backend + 'static>(addr: SocketAddr, extractor: Arc<Extractor<B>>) -> std::io::Result<ServiceHandle> {
    let (tx, rx) = tokio::sync::oneshot::channel();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = addr_tx.send(Err(std::io::Error::new(e.kind(), e.to_string())));
                    return Err(e);
                }
            };
            let _ = addr_tx.send(listener.local_addr());
            axum::serve(listener, router(extractor))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    let addr = addr_rx
        .recv()
        .map_err(|_| std::io::Error::other("service thread exited before binding"))??;
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
