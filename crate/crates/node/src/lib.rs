//! A runnable Dims node: journaled store, TCP federation, HTTP client API.

pub mod api;
pub mod error;
pub mod runtime;
pub mod transport;

use std::net::SocketAddr;

use dims_core::config::NodeConfig;
use dims_core::{Store, Timestamp};
use dims_federation::Node;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use api::{router, AppState};
pub use error::{status_for, ApiError, STATUS_TABLE};
pub use runtime::NodeHandle;

pub struct Running {
    pub handle: NodeHandle,
    pub client_addr: SocketAddr,
    pub federation_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl Running {
    pub fn stop(self) {
        self.handle.shutdown();
        for t in self.tasks {
            t.abort();
        }
    }
}

/// Binds the listeners named in `config` and starts serving.
pub async fn start(config: &NodeConfig) -> dims_core::Result<Running> {
    let client = TcpListener::bind(&config.client_listen).await?;
    let federation = TcpListener::bind(&config.federation_listen).await?;
    start_with(config, client, federation).await
}

/// Like [`start`] with listeners the caller already bound.
pub async fn start_with(config: &NodeConfig, client: TcpListener, federation: TcpListener) -> dims_core::Result<Running> {
    let (store, report) = Store::open(config.node_id.clone(), &config.data_dir)?;
    if report.discarded_tail {
        tracing::warn!(records = report.records, "discarded a torn journal tail");
    }
    tracing::info!(node = %config.node_id, records = report.records, "recovered");
    let node = Node::new(store, &config.peers, config.timeouts, Timestamp::now().millis() as u64);
    let handle = runtime::spawn(node);
    let client_addr = client.local_addr()?;
    let federation_addr = federation.local_addr()?;

    let fed_handle = handle.clone();
    let fed = tokio::spawn(async move {
        if let Err(e) = transport::serve(federation, fed_handle).await {
            tracing::error!(error = %e, "federation listener failed");
        }
    });
    let app = router(AppState::new(handle.clone(), &config.actors));
    let http = tokio::spawn(async move {
        if let Err(e) = axum::serve(client, app).await {
            tracing::error!(error = %e, "client listener failed");
        }
    });
    tracing::info!(%client_addr, %federation_addr, "serving");
    Ok(Running {
        handle,
        client_addr,
        federation_addr,
        tasks: vec![fed, http],
    })
}

/// Serves until interrupted.
pub async fn run(config: &NodeConfig) -> dims_core::Result<()> {
    let running = start(config).await?;
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
    running.stop();
    Ok(())
}
