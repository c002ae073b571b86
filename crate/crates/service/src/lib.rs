//! HTTP service over staged scene sessions.

pub mod api;
pub mod clients;
pub mod error;
pub mod jobs;
pub mod state;

use std::net::SocketAddr;

pub use api::router;
pub use state::{AppState, ServiceConfig};

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> scenestage::Result<()> {
    let state = AppState::open(config).await?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
