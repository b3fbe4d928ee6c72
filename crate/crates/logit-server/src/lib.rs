//! Serves a Markov target over the remote logit protocol so the decoder can
//! be exercised against an out-of-process model.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use tokio::net::TcpListener;

use stand_core::model::wire::{sparsify, NextDistRequest, NextDistResponse, NEXT_DIST_PATH};
use stand_core::model::{apply_temperature, DenseDistribution, MarkovModelSpec};

pub fn router(spec: Arc<MarkovModelSpec>) -> Router {
    Router::new().route(NEXT_DIST_PATH, post(next_dist)).with_state(spec)
}

async fn next_dist(
    State(spec): State<Arc<MarkovModelSpec>>,
    Json(req): Json<NextDistRequest>,
) -> Result<Json<NextDistResponse>, (StatusCode, String)> {
    let bad = |msg: String| (StatusCode::BAD_REQUEST, msg);
    if !(req.temperature > 0.0 && req.temperature.is_finite()) {
        return Err(bad(format!("temperature must be positive, got {}", req.temperature)));
    }
    if let Some(t) = req.context.iter().find(|&&t| t as usize >= spec.vocab_size()) {
        return Err(bad(format!("token {t} outside vocab {}", spec.vocab_size())));
    }
    let probs = apply_temperature(&spec.base_distribution(&req.context), req.temperature);
    let dist = DenseDistribution::new(probs).map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(sparsify(&dist)))
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, spec: Arc<MarkovModelSpec>) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, vocab = spec.vocab_size(), "serving next-token distributions");
    axum::serve(listener, router(spec))
        .with_graceful_shutdown(async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await
}

/// Starts a server on an ephemeral local port in a background thread and
/// returns its base URL. Used by tests and examples.
pub fn spawn_local(spec: Arc<MarkovModelSpec>) -> std::io::Result<String> {
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
        runtime.block_on(async move {
            let listener = TcpListener::from_std(std_listener).expect("listener");
            axum::serve(listener, router(spec)).await.expect("server");
        });
    });
    Ok(format!("http://{addr}"))
}
