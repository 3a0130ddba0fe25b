//! Wires configured components together and runs them until shutdown.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::alerting::AlertEngine;
use crate::analytics::Analytics;
use crate::api::{self, ApiState, Credentials, Services};
use crate::collector::{self, Collector, ReplayProvider, SnapshotProvider, SystemProvider};
use crate::gateway::{scrape, Gateway};
use crate::metastore::Metastore;
use crate::metrics::Registry;
use crate::retry::RetryPolicy;
use crate::stack::{Component, ResolvedConfig};
use crate::tsdb::Tsdb;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("{component}: {message}")]
    Start { component: Component, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn start_err(component: Component) -> impl Fn(String) -> RuntimeError {
    move |message| RuntimeError::Start { component, message }
}

/// Looks a variable up in the env file first, then the process environment.
pub fn env_value(env: &BTreeMap<String, String>, key: &str) -> Option<String> {
    env.get(key).cloned().or_else(|| std::env::var(key).ok())
}

fn truthy(v: Option<String>) -> bool {
    matches!(v.as_deref().map(str::trim), Some("1" | "true" | "yes"))
}

/// Builds the in-process components of the server.
pub fn build_services(enabled: &BTreeSet<Component>, cfg: &ResolvedConfig, metrics: &Registry) -> Result<Services, RuntimeError> {
    let on = |c| enabled.contains(&c);
    let tsdb = if on(Component::Tsdb) {
        Some(Arc::new(Tsdb::from_settings(&cfg.tsdb).map_err(|e| start_err(Component::Tsdb)(e.to_string()))?))
    } else {
        None
    };
    let metastore = if on(Component::Metastore) {
        Some(Arc::new(
            Metastore::from_settings(&cfg.metastore).map_err(|e| start_err(Component::Metastore)(e.to_string()))?,
        ))
    } else {
        None
    };
    let gateway = on(Component::Gateway)
        .then(|| Arc::new(Gateway::new(&cfg.gateway, tsdb.clone(), metastore.clone(), metrics.clone())));
    let analytics = match (&tsdb, on(Component::Analytics)) {
        (Some(t), true) => Some(Arc::new(
            Analytics::new(t.clone(), metastore.clone(), cfg.analytics.clone())
                .map_err(|e| start_err(Component::Analytics)(e.to_string()))?,
        )),
        _ => None,
    };
    let alerting = match (&tsdb, on(Component::Alerting)) {
        (Some(t), true) => Some(Arc::new(AlertEngine::new(
            t.clone(),
            metastore.clone(),
            cfg.analytics.anomaly,
            cfg.alerting.clone(),
            metrics.clone(),
        ))),
        _ => None,
    };
    Ok(Services {
        tsdb,
        metastore,
        gateway,
        analytics,
        alerting,
    })
}

/// Runs every enabled server-side component until `shutdown` resolves.
pub async fn run_server(
    enabled: &BTreeSet<Component>,
    cfg: &ResolvedConfig,
    env: &BTreeMap<String, String>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), RuntimeError> {
    let metrics = Registry::new();
    let services = build_services(enabled, cfg, &metrics)?;
    let mut tasks = Vec::new();
    if let Some(g) = &services.gateway {
        tasks.extend(scrape::spawn_scrapers(g.clone(), cfg.gateway.scrape_targets.clone()));
    }
    if let Some(a) = &services.analytics {
        tasks.push(tokio::spawn(a.clone().run()));
    }
    if let Some(a) = &services.alerting {
        tasks.push(tokio::spawn(a.clone().run()));
    }
    let tsdb = services.tsdb.clone();
    let metastore = services.metastore.clone();

    let result = if enabled.contains(&Component::Api) {
        let credentials = Credentials::parse(
            env_value(env, "API_ADMIN_TOKEN").as_deref(),
            env_value(env, "API_USER_TOKENS").as_deref(),
        )
        .map_err(|e| start_err(Component::Api)(e.to_string()))?;
        if credentials.is_empty() {
            tracing::warn!("no API tokens configured; every request will be rejected");
        }
        let addr = env_value(env, "API_LISTEN_ADDR").unwrap_or_else(|| cfg.api.listen_addr.clone());
        let test_mode = cfg.api.test_mode || truthy(env_value(env, "API_TEST_MODE"));
        let ui_dir: Option<PathBuf> = if enabled.contains(&Component::Dashboard) {
            cfg.dashboard.assets_dir.clone().map(PathBuf::from).or_else(|| cfg.api.ui_dir.clone())
        } else {
            cfg.api.ui_dir.clone()
        };
        let state = Arc::new(ApiState {
            services,
            credentials,
            test_mode,
            metrics,
        });
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| start_err(Component::Api)(format!("bind {addr}: {e}")))?;
        tracing::info!(%addr, test_mode, "api listening");
        api::serve(listener, state, ui_dir, shutdown).await.map_err(RuntimeError::from)
    } else {
        shutdown.await;
        Ok(())
    };
    for t in tasks {
        t.abort();
    }
    if let Some(t) = tsdb {
        if let Err(e) = t.flush() {
            tracing::error!(error = %e, "tsdb flush on shutdown failed");
        }
    }
    if let Some(m) = metastore {
        if let Err(e) = m.sync() {
            tracing::error!(error = %e, "metastore sync on shutdown failed");
        }
    }
    result
}

/// Runs the collector (pull endpoint plus optional push loop) until
/// `shutdown` resolves.
pub async fn run_collector(
    cfg: &ResolvedConfig,
    env: &BTreeMap<String, String>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), RuntimeError> {
    let settings = cfg.collector.clone();
    let err = start_err(Component::Collector);
    let provider: Box<dyn SnapshotProvider> = match &settings.replay_file {
        Some(path) => Box::new(ReplayProvider::from_file(std::path::Path::new(path)).map_err(|e| err(e.to_string()))?),
        None => Box::new(SystemProvider::new(settings.pid).map_err(|e| err(e.to_string()))?),
    };
    let collector = Collector::new(provider, settings.clone()).map_err(|e| err(e.to_string()))?;
    let pull = collector::pull_router(collector.latest(), collector.dropped_counter());
    let listener = tokio::net::TcpListener::bind(&settings.listen_addr)
        .await
        .map_err(|e| err(format!("bind {}: {e}", settings.listen_addr)))?;
    tracing::info!(addr = %settings.listen_addr, "collector pull endpoint listening");
    let token = env_value(env, "COLLECTOR_PUSH_TOKEN");
    let sampler = tokio::spawn(collector::run(collector, token, RetryPolicy::default()));
    let served = axum::serve(listener, pull).with_graceful_shutdown(shutdown).await;
    sampler.abort();
    served.map_err(RuntimeError::from)
}
