//! Session service for the deltapad display: device loop, session store,
//! HTTP/WebSocket API and the pieces the `deltapad` binary is built from.

pub mod api;
pub mod config;
pub mod device;
pub mod serial;
pub mod service;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

use deltapad_core::config::DeviceModel;
use tokio::sync::{broadcast, oneshot};

use config::AppConfig;
use device::{open_link, DeviceHandle, Pacing};
use service::{system_clock, Clock, Service};
use store::SessionStore;

/// Wire up link, device loop, store and service for `cfg`.
pub fn build_service(cfg: &AppConfig, model: DeviceModel, clock: Clock) -> anyhow::Result<Arc<Service>> {
    let (events, _) = broadcast::channel(1024);
    let link = open_link(&cfg.device, &model)?;
    let pacing = if cfg.realtime { Pacing::RealTime } else { Pacing::AsFastAsPossible };
    let device = DeviceHandle::spawn(link, model.clone(), pacing, events.clone());
    let store = SessionStore::open(&cfg.data_dir)?;
    match Service::new(model, store, device.clone(), events, clock) {
        Ok(s) => Ok(Arc::new(s)),
        Err(e) => {
            device.shutdown();
            Err(e.into())
        }
    }
}

/// A running API server.
pub struct Server {
    pub addr: SocketAddr,
    pub service: Arc<Service>,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub async fn start(cfg: &AppConfig) -> anyhow::Result<Server> {
        cfg.validate()?;
        let model = cfg.model()?;
        let service = build_service(cfg, model, system_clock())?;
        let listener = match tokio::net::TcpListener::bind((cfg.bind, cfg.port)).await {
            Ok(l) => l,
            Err(e) => {
                service.shutdown();
                return Err(anyhow::anyhow!("binding {}:{}: {e}", cfg.bind, cfg.port));
            }
        };
        let addr = listener.local_addr()?;
        let app = api::router(api::AppState::new(service.clone()));
        let (stop, stopped) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = stopped.await;
                })
                .await
        });
        tracing::info!(%addr, backend = service.device().backend_id(), "listening");
        Ok(Server { addr, service, stop: Some(stop), task })
    }

    /// Stop accepting requests, then stop the device loop.
    pub async fn stop(mut self) -> anyhow::Result<()> {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        let served = (&mut self.task).await;
        let svc = self.service.clone();
        tokio::task::spawn_blocking(move || svc.shutdown()).await?;
        served??;
        Ok(())
    }

    /// Serve until Ctrl-C.
    pub async fn run_until_ctrl_c(self) -> anyhow::Result<()> {
        tokio::signal::ctrl_c().await?;
        tracing::info!("shutting down");
        self.stop().await
    }
}
