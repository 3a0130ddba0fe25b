//! HTTP API over every store and engine. Admin tokens see everything,
//! user tokens are confined to their label scope on every endpoint.

mod auth;
mod dashboards;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::services::ServeDir;

pub use auth::{scope_selector, Credentials, Principal, Role};
pub use dashboards::{builtin_dashboards, DashboardTemplate, Panel, VizKind};

use crate::alerting::{AlertEngine, AlertError, AlertRule};
use crate::analytics::{Analytics, AnalyticsError};
use crate::clock::now_ms;
use crate::gateway::{Gateway, IngestContext, IngestReport};
use crate::metastore::{EntityRecord, Metastore, MetastoreError, Window};
use crate::metrics::Registry;
use crate::model::{format_exposition, SeriesKey};
use crate::selector::{MatchOp, Selector};
use crate::tsdb::{Aggregation, Tsdb, TsdbError};

/// Header carrying the caller's notion of "now", honored in test mode only.
pub const VIRTUAL_NOW_HEADER: &str = "x-virtual-now-ms";
pub const REQUESTS_TOTAL: &str = "api_requests_total";
pub const SCOPE_CONFLICTS_TOTAL: &str = "api_scope_conflicts_total";
const DASHBOARDS_TABLE: &str = "dashboards";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("missing or unknown bearer token")]
    Unauthenticated,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("selector contradicts the caller's scope on label `{key}`")]
    ScopeConflict { key: String },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{0} is not enabled on this server")]
    Unavailable(&'static str),
    #[error("configuration: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthenticated => StatusCode::UNAUTHORIZED,
            ApiError::Forbidden(_) | ApiError::ScopeConflict { .. } => StatusCode::FORBIDDEN,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Config(_) | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthenticated => "Unauthenticated",
            ApiError::Forbidden(_) => "Forbidden",
            ApiError::ScopeConflict { .. } => "ScopeConflict",
            ApiError::BadRequest(_) => "BadRequest",
            ApiError::NotFound(_) => "NotFound",
            ApiError::Conflict(_) => "Conflict",
            ApiError::Unavailable(_) => "Unavailable",
            ApiError::Config(_) => "Config",
            ApiError::Internal(_) => "Internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status(), Json(json!({"error": self.code(), "message": self.to_string()}))).into_response();
        if self == ApiError::Unauthenticated {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

impl From<TsdbError> for ApiError {
    fn from(e: TsdbError) -> Self {
        match e {
            TsdbError::Io(_) => ApiError::Internal(e.to_string()),
            _ => ApiError::BadRequest(e.to_string()),
        }
    }
}

impl From<MetastoreError> for ApiError {
    fn from(e: MetastoreError) -> Self {
        match e {
            MetastoreError::InvalidRange { .. } | MetastoreError::EmptyId => ApiError::BadRequest(e.to_string()),
            MetastoreError::NotFound(_) => ApiError::NotFound(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<AlertError> for ApiError {
    fn from(e: AlertError) -> Self {
        match e {
            AlertError::InvalidRule(_) => ApiError::BadRequest(e.to_string()),
            AlertError::UnknownRule(_) => ApiError::NotFound(e.to_string()),
            AlertError::QueryFailed(_) | AlertError::Storage(_) => ApiError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiSettings {
    pub listen_addr: String,
    /// Honor the virtual clock header.
    pub test_mode: bool,
    /// Built dashboard assets served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ApiSettings {
    fn default() -> Self {
        ApiSettings {
            listen_addr: "127.0.0.1:8080".into(),
            test_mode: false,
            ui_dir: None,
        }
    }
}

/// Components the server fronts; any of them may be absent.
#[derive(Debug, Clone, Default)]
pub struct Services {
    pub tsdb: Option<Arc<Tsdb>>,
    pub metastore: Option<Arc<Metastore>>,
    pub gateway: Option<Arc<Gateway>>,
    pub analytics: Option<Arc<Analytics>>,
    pub alerting: Option<Arc<AlertEngine>>,
}

#[derive(Debug)]
pub struct ApiState {
    pub services: Services,
    pub credentials: Credentials,
    pub test_mode: bool,
    pub metrics: Registry,
}

type Shared = Arc<ApiState>;

impl FromRequestParts<Shared> for Principal {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or(ApiError::Unauthenticated)?;
        state.credentials.authorize(token)
    }
}

/// Request time: wall clock, or the virtual clock header in test mode.
struct Now(i64);

impl FromRequestParts<Shared> for Now {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, Self::Rejection> {
        Ok(Now(request_now(&parts.headers, state.test_mode)?))
    }
}

fn request_now(headers: &HeaderMap, test_mode: bool) -> Result<i64, ApiError> {
    match headers.get(VIRTUAL_NOW_HEADER) {
        Some(v) if test_mode => v
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse::<i64>().ok())
            .ok_or_else(|| ApiError::BadRequest(format!("{VIRTUAL_NOW_HEADER} must be integer milliseconds"))),
        _ => Ok(now_ms()),
    }
}

fn need<T: Clone>(service: &Option<T>, name: &'static str) -> Result<T, ApiError> {
    service.clone().ok_or(ApiError::Unavailable(name))
}

fn parse_selector(text: Option<&str>) -> Result<Selector, ApiError> {
    match text.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => s.parse().map_err(|e| ApiError::BadRequest(format!("selector: {e}"))),
        None => Ok(Selector::default()),
    }
}

fn scoped(state: &ApiState, principal: &Principal, text: Option<&str>) -> Result<Selector, ApiError> {
    let requested = parse_selector(text)?;
    scope_selector(principal, &requested).inspect_err(|_| state.metrics.inc(SCOPE_CONFLICTS_TOTAL, 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesJson {
    pub metric: String,
    pub labels: BTreeMap<String, String>,
    pub points: Vec<(i64, f64)>,
}

impl SeriesJson {
    fn new(key: &SeriesKey, points: Vec<(i64, f64)>) -> Self {
        SeriesJson {
            metric: key.name().to_string(),
            labels: key.label_map(),
            points,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RangeParams {
    selector: Option<String>,
    start: i64,
    end: i64,
    step: i64,
    agg: Option<String>,
}

async fn query_range(
    State(state): State<Shared>,
    principal: Principal,
    Query(p): Query<RangeParams>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let tsdb = need(&state.services.tsdb, "tsdb")?;
    let selector = scoped(&state, &principal, p.selector.as_deref())?;
    let agg: Aggregation = match p.agg.as_deref() {
        Some(a) => a.parse()?,
        None => Aggregation::Mean,
    };
    let series: Vec<SeriesJson> = tsdb
        .query_range(&selector, p.start, p.end, p.step, agg)?
        .into_iter()
        .map(|r| SeriesJson::new(&r.key, r.points))
        .collect();
    Ok(Json(json!({"selector": selector.to_string(), "series": series})))
}

#[derive(Debug, Deserialize)]
struct WindowParams {
    selector: Option<String>,
    start: Option<i64>,
    end: Option<i64>,
}

impl WindowParams {
    fn bounds(&self) -> (i64, i64) {
        (self.start.unwrap_or(0), self.end.unwrap_or(i64::MAX))
    }
}

async fn events(
    State(state): State<Shared>,
    principal: Principal,
    Query(p): Query<WindowParams>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let meta = need(&state.services.metastore, "metastore")?;
    let selector = scoped(&state, &principal, p.selector.as_deref())?;
    let (start, end) = p.bounds();
    let events = meta.query_events(&selector, start, end)?;
    Ok(Json(json!({"events": events})))
}

async fn summaries(
    State(state): State<Shared>,
    principal: Principal,
    Query(p): Query<WindowParams>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let meta = need(&state.services.metastore, "metastore")?;
    let selector = scoped(&state, &principal, p.selector.as_deref())?;
    let (start, end) = p.bounds();
    let window = Window::new(start, end)?;
    let rows: Vec<_> = meta
        .query_summaries(None, window)
        .into_iter()
        .filter(|s| {
            // the stored selector is an exact series key
            let Ok(stored) = s.selector.parse::<Selector>() else { return false };
            let name = stored.name.as_deref().unwrap_or("");
            selector.matches_parts(name, |k| {
                stored
                    .matchers
                    .iter()
                    .find(|m| m.key == k && m.op == MatchOp::Eq)
                    .map(|m| m.value.as_str())
            })
        })
        .collect();
    Ok(Json(json!({"summaries": rows})))
}

#[derive(Debug, Serialize)]
struct SpanJson {
    metric: String,
    labels: BTreeMap<String, String>,
    start: i64,
    end: i64,
    onset: i64,
    peak_score: f64,
}

async fn anomalies(
    State(state): State<Shared>,
    principal: Principal,
    Query(p): Query<WindowParams>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let analytics = need(&state.services.analytics, "analytics")?;
    let selector = scoped(&state, &principal, p.selector.as_deref())?;
    let (start, end) = p.bounds();
    let params = analytics.settings().anomaly;
    let mut spans = Vec::new();
    let mut skipped = Vec::new();
    for key in analytics.tsdb().series_keys(Some(&selector)) {
        match analytics.detect_anomalies(&key, start, end, &params) {
            Ok(found) => spans.extend(found.into_iter().map(|s| SpanJson {
                metric: s.key.name().to_string(),
                labels: s.key.label_map(),
                start: s.start,
                end: s.end,
                onset: s.onset,
                peak_score: s.peak_score,
            })),
            Err(AnalyticsError::InsufficientData { .. }) => skipped.push(key.to_string()),
            Err(e) => return Err(ApiError::BadRequest(e.to_string())),
        }
    }
    Ok(Json(json!({"spans": spans, "insufficient_data": skipped})))
}

#[derive(Debug, Deserialize)]
struct RootCauseParams {
    target: String,
    candidates: Option<String>,
    start: i64,
    end: i64,
    step: i64,
}

async fn root_causes(
    State(state): State<Shared>,
    principal: Principal,
    Query(p): Query<RootCauseParams>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let analytics = need(&state.services.analytics, "analytics")?;
    let target_sel = scoped(&state, &principal, Some(&p.target))?;
    let cand_sel = scoped(&state, &principal, p.candidates.as_deref())?;
    let tsdb = analytics.tsdb();
    let mut targets = tsdb.series_keys(Some(&target_sel));
    if targets.len() != 1 {
        return Err(ApiError::BadRequest(format!("target must match exactly one series, matched {}", targets.len())));
    }
    let target = targets.remove(0);
    let spans = analytics
        .detect_anomalies(&target, p.start, p.end, &analytics.settings().anomaly)
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let Some(span) = spans.first() else {
        return Ok(Json(json!({"target": target.to_string(), "causes": []})));
    };
    let candidates = tsdb.series_keys(Some(&cand_sel));
    let causes: Vec<_> = analytics
        .rank_root_causes(span, &candidates, p.start, p.end, p.step)
        .into_iter()
        .map(|(k, score)| json!({"series": k.to_string(), "score": score}))
        .collect();
    Ok(Json(json!({"target": target.to_string(), "causes": causes})))
}

async fn ingest(
    State(state): State<Shared>,
    principal: Principal,
    Now(now): Now,
    body: String,
) -> Result<Json<IngestReport>, ApiError> {
    let gateway = need(&state.services.gateway, "gateway")?;
    let ctx = IngestContext {
        source_labels: BTreeMap::new(),
        scope: principal.scope_pairs(),
        now,
    };
    Ok(Json(gateway.ingest(&body, &ctx)))
}

async fn list_rules(State(state): State<Shared>, principal: Principal) -> Result<Json<Vec<AlertRule>>, ApiError> {
    principal.require_admin()?;
    Ok(Json(need(&state.services.alerting, "alerting")?.rules()))
}

async fn create_rule(
    State(state): State<Shared>,
    principal: Principal,
    Json(rule): Json<AlertRule>,
) -> Result<(StatusCode, Json<AlertRule>), ApiError> {
    principal.require_admin()?;
    let engine = need(&state.services.alerting, "alerting")?;
    if engine.rule(&rule.rule_id).is_some() {
        return Err(ApiError::Conflict(format!("rule `{}` exists", rule.rule_id)));
    }
    engine.upsert_rule(rule.clone())?;
    Ok((StatusCode::CREATED, Json(rule)))
}

async fn get_rule(State(state): State<Shared>, principal: Principal, Path(id): Path<String>) -> Result<Json<AlertRule>, ApiError> {
    principal.require_admin()?;
    need(&state.services.alerting, "alerting")?
        .rule(&id)
        .map(Json)
        .ok_or(ApiError::NotFound(format!("rule `{id}`")))
}

async fn put_rule(
    State(state): State<Shared>,
    principal: Principal,
    Path(id): Path<String>,
    Json(mut rule): Json<AlertRule>,
) -> Result<Json<AlertRule>, ApiError> {
    principal.require_admin()?;
    rule.rule_id = id;
    need(&state.services.alerting, "alerting")?.upsert_rule(rule.clone())?;
    Ok(Json(rule))
}

async fn delete_rule(State(state): State<Shared>, principal: Principal, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    principal.require_admin()?;
    if need(&state.services.alerting, "alerting")?.delete_rule(&id)? {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::NotFound(format!("rule `{id}`")))
    }
}

async fn alerts(State(state): State<Shared>, principal: Principal) -> Result<Json<serde_json::Value>, ApiError> {
    let engine = need(&state.services.alerting, "alerting")?;
    let visible: Vec<_> = engine
        .instances()
        .into_iter()
        .filter(|i| principal.can_see(|k| i.labels.get(k).map(String::as_str)))
        .collect();
    Ok(Json(json!({"alerts": visible})))
}

fn all_dashboards(state: &ApiState) -> Vec<DashboardTemplate> {
    let mut all = builtin_dashboards();
    if let Some(meta) = &state.services.metastore {
        all.extend(meta.list::<DashboardTemplate>(DASHBOARDS_TABLE).into_iter().map(|(_, d)| d));
    }
    all.sort_by(|a, b| a.template_id.cmp(&b.template_id));
    all
}

async fn list_dashboards(State(state): State<Shared>, _p: Principal) -> Json<Vec<DashboardTemplate>> {
    Json(all_dashboards(&state))
}

async fn get_dashboard(State(state): State<Shared>, _p: Principal, Path(id): Path<String>) -> Result<Json<DashboardTemplate>, ApiError> {
    all_dashboards(&state)
        .into_iter()
        .find(|d| d.template_id == id)
        .map(Json)
        .ok_or(ApiError::NotFound(format!("dashboard `{id}`")))
}

fn save_dashboard(state: &ApiState, mut d: DashboardTemplate, create: bool) -> Result<DashboardTemplate, ApiError> {
    d.validate()?;
    d.builtin = false;
    let meta = need(&state.services.metastore, "metastore")?;
    if builtin_dashboards().iter().any(|b| b.template_id == d.template_id) {
        return Err(ApiError::Conflict(format!("`{}` is a built-in dashboard", d.template_id)));
    }
    if create && meta.get::<DashboardTemplate>(DASHBOARDS_TABLE, &d.template_id)?.is_some() {
        return Err(ApiError::Conflict(format!("dashboard `{}` exists", d.template_id)));
    }
    meta.put(DASHBOARDS_TABLE, &d.template_id, &d)?;
    Ok(d)
}

async fn create_dashboard(
    State(state): State<Shared>,
    principal: Principal,
    Json(d): Json<DashboardTemplate>,
) -> Result<(StatusCode, Json<DashboardTemplate>), ApiError> {
    principal.require_admin()?;
    Ok((StatusCode::CREATED, Json(save_dashboard(&state, d, true)?)))
}

async fn put_dashboard(
    State(state): State<Shared>,
    principal: Principal,
    Path(id): Path<String>,
    Json(mut d): Json<DashboardTemplate>,
) -> Result<Json<DashboardTemplate>, ApiError> {
    principal.require_admin()?;
    d.template_id = id;
    Ok(Json(save_dashboard(&state, d, false)?))
}

async fn delete_dashboard(State(state): State<Shared>, principal: Principal, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    principal.require_admin()?;
    if builtin_dashboards().iter().any(|b| b.template_id == id) {
        return Err(ApiError::Conflict(format!("`{id}` is a built-in dashboard")));
    }
    if need(&state.services.metastore, "metastore")?.delete(DASHBOARDS_TABLE, &id)? {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::NotFound(format!("dashboard `{id}`")))
    }
}

#[derive(Debug, Deserialize)]
struct EntityParams {
    kind: Option<String>,
}

async fn list_entities(
    State(state): State<Shared>,
    principal: Principal,
    Query(p): Query<EntityParams>,
) -> Result<Json<Vec<EntityRecord>>, ApiError> {
    let meta = need(&state.services.metastore, "metastore")?;
    Ok(Json(
        meta.list_entities(p.kind.as_deref())
            .into_iter()
            .filter(|e| principal.can_see(|k| e.attributes.get(k).map(String::as_str)))
            .collect(),
    ))
}

async fn get_entity(
    State(state): State<Shared>,
    principal: Principal,
    Path((kind, id)): Path<(String, String)>,
) -> Result<Json<EntityRecord>, ApiError> {
    let meta = need(&state.services.metastore, "metastore")?;
    meta.get_entity(&kind, &id)?
        .filter(|e| principal.can_see(|k| e.attributes.get(k).map(String::as_str)))
        .map(Json)
        .ok_or(ApiError::NotFound(format!("entity {kind}/{id}")))
}

async fn put_entity(
    State(state): State<Shared>,
    principal: Principal,
    Now(now): Now,
    Json(e): Json<EntityRecord>,
) -> Result<Json<EntityRecord>, ApiError> {
    principal.require_admin()?;
    Ok(Json(need(&state.services.metastore, "metastore")?.upsert_entity(e, now)?))
}

async fn delete_entity(
    State(state): State<Shared>,
    principal: Principal,
    Path((kind, id)): Path<(String, String)>,
) -> Result<StatusCode, ApiError> {
    principal.require_admin()?;
    if need(&state.services.metastore, "metastore")?.delete_entity(&kind, &id)? {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::NotFound(format!("entity {kind}/{id}")))
    }
}

async fn healthz(State(state): State<Shared>) -> Json<serde_json::Value> {
    let s = &state.services;
    Json(json!({
        "status": "ok",
        "components": {
            "tsdb": s.tsdb.is_some(),
            "metastore": s.metastore.is_some(),
            "gateway": s.gateway.is_some(),
            "analytics": s.analytics.is_some(),
            "alerting": s.alerting.is_some(),
        }
    }))
}

async fn self_metrics(State(state): State<Shared>) -> impl IntoResponse {
    let samples = state.metrics.samples(&[("component", "api")], now_ms());
    (
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        format_exposition(samples.iter()),
    )
}

async fn count_requests(State(state): State<Shared>, req: Request, next: Next) -> Response {
    state.metrics.inc(REQUESTS_TOTAL, 1);
    next.run(req).await
}

/// Builds the full router. `ui_dir`, when set, is served under `/ui/`.
pub fn router(state: Arc<ApiState>, ui_dir: Option<PathBuf>) -> Router {
    let v1 = Router::new()
        .route("/ingest", axum::routing::post(ingest))
        .route("/query_range", get(query_range))
        .route("/events", get(events))
        .route("/summaries", get(summaries))
        .route("/anomalies", get(anomalies))
        .route("/root_causes", get(root_causes))
        .route("/rules", get(list_rules).post(create_rule))
        .route("/rules/{id}", get(get_rule).put(put_rule).delete(delete_rule))
        .route("/alerts", get(alerts))
        .route("/dashboards", get(list_dashboards).post(create_dashboard))
        .route("/dashboards/{id}", get(get_dashboard).put(put_dashboard).delete(delete_dashboard))
        .route("/entities", get(list_entities).post(put_entity))
        .route("/entities/{kind}/{id}", get(get_entity).delete(delete_entity))
        .route("/healthz", get(healthz));
    let mut app = Router::new()
        .nest("/api/v1", v1)
        .route("/metrics", get(self_metrics));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.layer(middleware::from_fn_with_state(state.clone(), count_requests))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<ApiState>,
    ui_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await
}
