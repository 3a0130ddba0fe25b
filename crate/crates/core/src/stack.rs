//! Stack configuration: which components to run, validation of that
//! choice, and the merged deployment plan.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alerting::AlertingSettings;
use crate::analytics::AnalyticsSettings;
use crate::api::ApiSettings;
use crate::collector::{CollectorSettings, MAX_INTERVAL_SECONDS, MIN_INTERVAL_SECONDS};
use crate::gateway::GatewaySettings;
use crate::metastore::MetastoreSettings;
use crate::tsdb::TsdbSettings;

#[derive(Debug, Error)]
pub enum StackError {
    #[error("config file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("configuration has {0} validation error(s)")]
    ValidationFailed(usize),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Alerting,
    Analytics,
    Api,
    Collector,
    Dashboard,
    Gateway,
    Metastore,
    Tsdb,
}

impl Component {
    /// Alphabetical, which is also the tie-break order of the plan.
    pub const ALL: [Component; 8] = [
        Component::Alerting,
        Component::Analytics,
        Component::Api,
        Component::Collector,
        Component::Dashboard,
        Component::Gateway,
        Component::Metastore,
        Component::Tsdb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Alerting => "alerting",
            Component::Analytics => "analytics",
            Component::Api => "api",
            Component::Collector => "collector",
            Component::Dashboard => "dashboard",
            Component::Gateway => "gateway",
            Component::Metastore => "metastore",
            Component::Tsdb => "tsdb",
        }
    }

    pub fn layer(self) -> &'static str {
        match self {
            Component::Collector => "collection",
            Component::Gateway | Component::Tsdb | Component::Metastore => "aggregation & storage",
            Component::Analytics | Component::Alerting => "processing",
            Component::Api | Component::Dashboard => "visualization",
        }
    }

    /// Components this one must start after, when they are enabled.
    pub fn startup_after(self) -> &'static [Component] {
        use Component::*;
        match self {
            Tsdb | Metastore => &[],
            Gateway => &[Tsdb, Metastore],
            Collector => &[Gateway],
            Analytics => &[Tsdb, Metastore, Collector],
            Alerting => &[Tsdb, Analytics],
            Api => &[Gateway, Tsdb, Metastore, Analytics, Alerting],
            Dashboard => &[Api],
        }
    }

    /// OS process hosting the component. Storage is embedded, so everything
    /// except the collector lives in the server process.
    pub fn process(self) -> &'static str {
        match self {
            Component::Collector => "collector",
            _ => "server",
        }
    }

    /// Environment variables the component reads.
    pub fn env_vars(self) -> &'static [&'static str] {
        match self {
            Component::Collector => &["COLLECTOR_PUSH_TOKEN"],
            Component::Api => &["API_ADMIN_TOKEN", "API_USER_TOKENS", "API_LISTEN_ADDR", "API_TEST_MODE"],
            _ => &[],
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Component::Collector => "samples CPU, memory and estimated power; pull and push",
            Component::Gateway => "normalizes, sanitizes and routes pushed or scraped samples",
            Component::Tsdb => "raw series plus 1 m and 1 h rollups with a retention ladder",
            Component::Metastore => "entities, summaries, events and alert history",
            Component::Analytics => "anomaly detection, correlation and the distill/clear cycle",
            Component::Alerting => "rule evaluation and webhook notifications",
            Component::Api => "scoped HTTP API over all stores",
            Component::Dashboard => "web UI assets served by the api under /ui/",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown component `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DashboardSettings {
    /// Built web assets; served under `/ui/`.
    pub assets_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    /// Config path the issue refers to, e.g. `collector.interval_seconds`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> Issue {
    Issue {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Parsed but unvalidated stack file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StackConfig {
    pub components: Vec<String>,
    #[serde(default)]
    pub env_file: Option<String>,
    /// Per-component sections, kept untyped until validation.
    #[serde(flatten)]
    pub sections: BTreeMap<String, toml::Value>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Typed settings for every component, defaults filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub collector: CollectorSettings,
    pub gateway: GatewaySettings,
    pub tsdb: TsdbSettings,
    pub metastore: MetastoreSettings,
    pub analytics: AnalyticsSettings,
    pub alerting: AlertingSettings,
    pub api: ApiSettings,
    pub dashboard: DashboardSettings,
}

impl StackConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, StackError> {
        toml::from_str(text).map_err(|e| StackError::Parse {
            path: origin.to_string(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, StackError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StackError::FileNotFound(path.to_path_buf()),
            _ => StackError::Io(e.to_string()),
        })?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Enabled components that parse; unknown names are reported by
    /// `validate`.
    pub fn enabled(&self) -> BTreeSet<Component> {
        self.components.iter().filter_map(|c| c.parse().ok()).collect()
    }

    pub fn env_path(&self) -> Option<PathBuf> {
        self.env_file.as_ref().map(|p| self.base_dir.join(p))
    }

    fn section<T: DeserializeOwned + Default>(&self, name: &str, errors: &mut Vec<Issue>) -> T {
        match self.sections.get(name) {
            None => T::default(),
            Some(v) => match v.clone().try_into() {
                Ok(t) => t,
                Err(e) => {
                    errors.push(issue(name, format!("invalid section: {}", e.message())));
                    T::default()
                }
            },
        }
    }

    /// Typed sections plus any type errors found reading them.
    pub fn resolve(&self) -> (ResolvedConfig, Vec<Issue>) {
        let mut errors = Vec::new();
        let resolved = ResolvedConfig {
            collector: self.section("collector", &mut errors),
            gateway: self.section("gateway", &mut errors),
            tsdb: self.section("tsdb", &mut errors),
            metastore: self.section("metastore", &mut errors),
            analytics: self.section("analytics", &mut errors),
            alerting: self.section("alerting", &mut errors),
            api: self.section("api", &mut errors),
            dashboard: self.section("dashboard", &mut errors),
        };
        (resolved, errors)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let errors = &mut report.errors;
        let warnings = &mut report.warnings;
        let mut seen = BTreeSet::new();
        for (i, name) in self.components.iter().enumerate() {
            match name.parse::<Component>() {
                Ok(c) if !seen.insert(c) => warnings.push(issue(format!("components[{i}]"), format!("`{c}` listed twice"))),
                Ok(_) => {}
                Err(e) => errors.push(issue(format!("components[{i}]"), e)),
            }
        }
        let on = |c: Component| seen.contains(&c);
        use Component::*;
        if !on(Collector) {
            errors.push(issue("components", "missing mandatory collection layer: enable `collector`"));
        }
        if !on(Dashboard) {
            errors.push(issue("components", "missing mandatory visualization layer: enable `dashboard`"));
        }
        if on(Gateway) && !on(Tsdb) && !on(Metastore) {
            errors.push(issue("components", "`gateway` needs `tsdb` or `metastore`"));
        }
        for c in [Analytics, Alerting] {
            if on(c) && !on(Tsdb) {
                errors.push(issue("components", format!("`{c}` needs `tsdb`: missing tsdb")));
            }
        }
        if on(Dashboard) && !on(Api) {
            errors.push(issue("components", "`dashboard` needs `api`: missing api"));
        }
        for name in self.sections.keys() {
            match name.parse::<Component>() {
                Ok(c) if !on(c) => warnings.push(issue(name.as_str(), format!("section for disabled component `{c}` is ignored"))),
                Ok(_) => {}
                Err(_) => errors.push(issue(name.as_str(), "unknown top-level key")),
            }
        }

        let (cfg, type_errors) = self.resolve();
        errors.extend(type_errors);
        if on(Collector) {
            let c = &cfg.collector;
            if !(MIN_INTERVAL_SECONDS..=MAX_INTERVAL_SECONDS).contains(&c.interval_seconds) {
                errors.push(issue(
                    "collector.interval_seconds",
                    format!("must be in {MIN_INTERVAL_SECONDS}..={MAX_INTERVAL_SECONDS}, got {}", c.interval_seconds),
                ));
            }
            if let Err(e) = c.power_model.validate() {
                errors.push(issue("collector.power_model", e.to_string()));
            }
            if c.push_url.is_none() && on(Gateway) {
                warnings.push(issue("collector.push_url", "not set; the gateway must scrape the collector instead"));
            }
        }
        if on(Gateway) {
            let targets = &cfg.gateway.scrape_targets;
            for (i, t) in targets.iter().enumerate() {
                if let Err(e) = t.validate() {
                    errors.push(issue(format!("gateway.scrape_targets[{i}]"), e.to_string()));
                }
            }
            if targets.is_empty() {
                warnings.push(issue("gateway.scrape_targets", "no scrape targets configured; only pushed samples arrive"));
            }
        }
        if on(Tsdb) {
            if let Err(e) = cfg.tsdb.retention().validate() {
                errors.push(issue("tsdb", e.to_string()));
            }
            if cfg.tsdb.data_dir.is_none() {
                warnings.push(issue("tsdb.data_dir", "not set; series are kept in memory only"));
            }
        }
        if on(Analytics) {
            if let Err(e) = cfg.analytics.anomaly.validate() {
                errors.push(issue("analytics.anomaly", e.to_string()));
            }
            if cfg.analytics.cycle_interval_seconds == 0 {
                errors.push(issue("analytics.cycle_interval_seconds", "must be positive"));
            }
        }
        if on(Alerting) {
            if cfg.alerting.default_eval_interval_seconds == 0 {
                errors.push(issue("alerting.default_eval_interval_seconds", "must be positive"));
            }
            if cfg.alerting.webhook_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                warnings.push(issue("alerting.webhook_url", "no webhook URL; rules without their own URL notify nobody"));
            }
        }
        if on(Api) && self.env_file.is_none() {
            warnings.push(issue("env_file", "not set; api tokens must come from the process environment"));
        }
        report
    }
}

/// Reads a `.env` file.
pub fn load_env_file(path: &Path) -> Result<BTreeMap<String, String>, StackError> {
    let iter = dotenvy::from_path_iter(path).map_err(|e| match e {
        dotenvy::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => StackError::FileNotFound(path.to_path_buf()),
        other => StackError::Parse {
            path: path.display().to_string(),
            message: other.to_string(),
        },
    })?;
    let mut out = BTreeMap::new();
    for item in iter {
        let (k, v) = item.map_err(|e| StackError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        out.insert(k, v);
    }
    Ok(out)
}

/// Startup order: Kahn's algorithm, ties broken alphabetically.
pub fn startup_order(enabled: &BTreeSet<Component>) -> Vec<Component> {
    let deps = |c: Component| c.startup_after().iter().copied().filter(|d| enabled.contains(d));
    let mut indegree: BTreeMap<Component, usize> = enabled.iter().map(|&c| (c, deps(c).count())).collect();
    let mut ready: BinaryHeap<Reverse<Component>> = indegree
        .iter()
        .filter(|(_, &n)| n == 0)
        .map(|(&c, _)| Reverse(c))
        .collect();
    let mut order = Vec::with_capacity(enabled.len());
    while let Some(Reverse(c)) = ready.pop() {
        order.push(c);
        for &next in enabled {
            if deps(next).any(|d| d == c) {
                let n = indegree.get_mut(&next).expect("enabled component");
                *n -= 1;
                if *n == 0 {
                    ready.push(Reverse(next));
                }
            }
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: Component,
    pub order: usize,
    pub layer: String,
    pub process: String,
    pub depends_on: Vec<Component>,
    /// Variable name to `${NAME}` reference.
    pub env: BTreeMap<String, String>,
    pub config: toml::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub env_file: Option<String>,
    pub component: Vec<PlanEntry>,
}

/// Replaces every occurrence of an env value in string leaves with a
/// `${KEY}` reference. Longer values go first so a secret containing
/// another is not split.
pub fn redact_secrets(value: &mut toml::Value, env: &BTreeMap<String, String>) {
    let mut secrets: Vec<(&String, &String)> = env.iter().filter(|(_, v)| !v.is_empty()).collect();
    secrets.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    walk_strings(value, &mut |s| {
        for (k, v) in &secrets {
            if s.contains(v.as_str()) {
                *s = s.replace(v.as_str(), &format!("${{{k}}}"));
            }
        }
    });
}

/// Substitutes `${KEY}` references from `env`, falling back to the process
/// environment. Unknown references are left in place.
pub fn expand_env_refs(value: &mut toml::Value, env: &BTreeMap<String, String>) {
    walk_strings(value, &mut |s| {
        let mut out = String::with_capacity(s.len());
        let mut rest = s.as_str();
        while let Some(start) = rest.find("${") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find('}') {
                Some(end) => {
                    let key = &after[..end];
                    match env.get(key).cloned().or_else(|| std::env::var(key).ok()) {
                        Some(v) => out.push_str(&v),
                        None => out.push_str(&rest[start..start + 3 + end]),
                    }
                    rest = &after[end + 1..];
                }
                None => {
                    out.push_str(&rest[start..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        *s = out;
    });
}

fn walk_strings(value: &mut toml::Value, f: &mut dyn FnMut(&mut String)) {
    match value {
        toml::Value::String(s) => f(s),
        toml::Value::Array(items) => items.iter_mut().for_each(|v| walk_strings(v, f)),
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, v)| walk_strings(v, f)),
        _ => {}
    }
}

fn component_config(cfg: &ResolvedConfig, c: Component) -> toml::Value {
    let value = match c {
        Component::Collector => toml::Value::try_from(&cfg.collector),
        Component::Gateway => toml::Value::try_from(&cfg.gateway),
        Component::Tsdb => toml::Value::try_from(&cfg.tsdb),
        Component::Metastore => toml::Value::try_from(&cfg.metastore),
        Component::Analytics => toml::Value::try_from(&cfg.analytics),
        Component::Alerting => toml::Value::try_from(&cfg.alerting),
        Component::Api => toml::Value::try_from(&cfg.api),
        Component::Dashboard => toml::Value::try_from(&cfg.dashboard),
    };
    value.unwrap_or_else(|_| toml::Value::Table(toml::Table::new()))
}

/// Builds the plan for a valid config. `env` holds the env-file values,
/// none of which appear in the output.
pub fn merge_components(config: &StackConfig, env: &BTreeMap<String, String>) -> Result<DeploymentPlan, StackError> {
    let report = config.validate();
    if !report.is_valid() {
        return Err(StackError::ValidationFailed(report.errors.len()));
    }
    let (resolved, _) = config.resolve();
    let enabled = config.enabled();
    let component = startup_order(&enabled)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut cfg = component_config(&resolved, c);
            redact_secrets(&mut cfg, env);
            PlanEntry {
                name: c,
                order: i + 1,
                layer: c.layer().to_string(),
                process: c.process().to_string(),
                depends_on: c.startup_after().iter().copied().filter(|d| enabled.contains(d)).collect(),
                env: c.env_vars().iter().map(|v| (v.to_string(), format!("${{{v}}}"))).collect(),
                config: cfg,
            }
        })
        .collect();
    let mut env_file = config.env_file.clone().map(toml::Value::String);
    if let Some(v) = env_file.as_mut() {
        redact_secrets(v, env);
    }
    Ok(DeploymentPlan {
        env_file: env_file.and_then(|v| v.as_str().map(str::to_string)),
        component,
    })
}

/// The plan as TOML text.
pub fn render_plan(plan: &DeploymentPlan) -> Result<String, StackError> {
    let body = toml::to_string(plan).map_err(|e| StackError::Io(e.to_string()))?;
    Ok(format!("# Deployment plan. Secrets are referenced as ${{NAME}}, never inlined.\n{body}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FULL: &str = r#"
components = ["api", "dashboard", "alerting", "analytics", "collector", "gateway", "metastore", "tsdb"]
env_file = ".env"

[collector]
interval_seconds = 5
push_url = "http://127.0.0.1:8080/api/v1/ingest"

[gateway]
scrape_targets = [{ url = "http://127.0.0.1:9101/metrics" }]

[tsdb]
data_dir = "data/tsdb"

[alerting]
webhook_url = "http://127.0.0.1:9000/hook"
"#;

    fn names(order: &[Component]) -> Vec<&'static str> {
        order.iter().map(|c| c.as_str()).collect()
    }

    /// Independent topological sort: repeatedly take the alphabetically
    /// smallest component whose enabled dependencies are all placed.
    fn oracle_order(enabled: &BTreeSet<Component>) -> Vec<Component> {
        let mut placed: Vec<Component> = Vec::new();
        while placed.len() < enabled.len() {
            let next = enabled
                .iter()
                .filter(|c| !placed.contains(c))
                .find(|c| c.startup_after().iter().all(|d| !enabled.contains(d) || placed.contains(d)))
                .copied()
                .expect("acyclic");
            placed.push(next);
        }
        placed
    }

    #[test]
    fn full_stack_order() {
        let cfg = StackConfig::parse(FULL, "full").unwrap();
        let report = cfg.validate();
        assert!(report.is_valid(), "{:?}", report.errors);
        let order = startup_order(&cfg.enabled());
        assert_eq!(
            names(&order),
            ["metastore", "tsdb", "gateway", "collector", "analytics", "alerting", "api", "dashboard"]
        );
        assert_eq!(order, oracle_order(&cfg.enabled()));
    }

    #[test]
    fn analytics_alone_is_invalid() {
        let cfg = StackConfig::parse(r#"components = ["analytics"]"#, "x").unwrap();
        let report = cfg.validate();
        let text: Vec<String> = report.errors.iter().map(|e| e.to_string()).collect();
        assert_eq!(report.errors.len(), 3, "{text:?}");
        assert!(text.iter().any(|e| e.contains("collection layer")));
        assert!(text.iter().any(|e| e.contains("visualization layer")));
        assert!(text.iter().any(|e| e.contains("missing tsdb")));
    }

    #[test]
    fn minimal_stack() {
        let cfg = StackConfig::parse(r#"components = ["collector", "api", "dashboard", "tsdb", "gateway"]"#, "x").unwrap();
        assert!(cfg.validate().is_valid());
        let plan = merge_components(&cfg, &BTreeMap::new()).unwrap();
        assert_eq!(plan.component.len(), 5);
    }

    #[test]
    fn alerting_without_webhook_warns() {
        let cfg = StackConfig::parse(r#"components = ["collector", "api", "dashboard", "tsdb", "alerting"]"#, "x").unwrap();
        let report = cfg.validate();
        assert!(report.is_valid());
        assert!(report.warnings.iter().any(|w| w.path == "alerting.webhook_url"));
    }

    #[test]
    fn bad_values_name_their_path() {
        let text = r#"
components = ["collector", "api", "dashboard", "bogus"]
[collector]
interval_seconds = 0
[collector.power_model]
p_idle_watts = 200.0
p_max_watts = 100.0
"#;
        let report = StackConfig::parse(text, "x").unwrap().validate();
        let paths: Vec<&str> = report.errors.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["components[3]", "collector.interval_seconds", "collector.power_model"]);
        let typed = r#"
components = ["collector", "api", "dashboard"]
[collector]
interval_seconds = "fast"
"#;
        let report = StackConfig::parse(typed, "x").unwrap().validate();
        assert_eq!(report.errors[0].path, "collector");
    }

    #[test]
    fn plan_is_deterministic_and_ordered() {
        let cfg = StackConfig::parse(FULL, "full").unwrap();
        let a = render_plan(&merge_components(&cfg, &BTreeMap::new()).unwrap()).unwrap();
        let b = render_plan(&merge_components(&cfg, &BTreeMap::new()).unwrap()).unwrap();
        assert_eq!(a, b);
        let back: DeploymentPlan = toml::from_str(&a).unwrap();
        assert_eq!(back.component[0].name, Component::Metastore);
        assert_eq!(back.component[6].env["API_ADMIN_TOKEN"], "${API_ADMIN_TOKEN}");
    }

    #[test]
    fn invalid_config_has_no_plan() {
        let cfg = StackConfig::parse(r#"components = ["analytics"]"#, "x").unwrap();
        assert!(matches!(merge_components(&cfg, &BTreeMap::new()), Err(StackError::ValidationFailed(3))));
    }

    #[test]
    fn env_refs_expand() {
        let env = BTreeMap::from([("TOKEN".to_string(), "s3cr3t".to_string())]);
        let mut v = toml::Value::String("http://x/?t=${TOKEN}&u=${NOPE_NOT_SET_ANYWHERE}".into());
        expand_env_refs(&mut v, &env);
        assert_eq!(v.as_str().unwrap(), "http://x/?t=s3cr3t&u=${NOPE_NOT_SET_ANYWHERE}");
        redact_secrets(&mut v, &env);
        assert_eq!(v.as_str().unwrap(), "http://x/?t=${TOKEN}&u=${NOPE_NOT_SET_ANYWHERE}");
    }

    #[test]
    fn missing_file_and_parse_errors() {
        assert!(matches!(StackConfig::load(Path::new("/nonexistent/stack.toml")), Err(StackError::FileNotFound(_))));
        assert!(matches!(StackConfig::parse("components = [", "x"), Err(StackError::Parse { .. })));
        assert!(matches!(StackConfig::parse("env_file = 'x'", "x"), Err(StackError::Parse { .. })));
    }

    fn component_set() -> impl Strategy<Value = BTreeSet<Component>> {
        prop::collection::btree_set(prop::sample::select(Component::ALL.to_vec()), 0..=8)
    }

    proptest! {
        #[test]
        fn plan_respects_dependencies(extra in component_set()) {
            let mut enabled = extra;
            enabled.extend([Component::Collector, Component::Dashboard, Component::Api, Component::Tsdb]);
            let order = startup_order(&enabled);
            prop_assert_eq!(&order, &oracle_order(&enabled));
            for (i, c) in order.iter().enumerate() {
                for d in c.startup_after().iter().filter(|d| enabled.contains(d)) {
                    let j = order.iter().position(|x| x == d).unwrap();
                    prop_assert!(j < i, "{} before {}", d, c);
                }
            }
        }

        #[test]
        fn plan_never_inlines_secrets(
            admin in "[A-Za-z0-9]{16,32}",
            user in "[A-Za-z0-9]{16,32}",
            push in "[A-Za-z0-9]{16,32}",
        ) {
            let env = BTreeMap::from([
                ("API_ADMIN_TOKEN".to_string(), admin.clone()),
                ("API_USER_TOKENS".to_string(), format!("{user}:user_id=u7")),
                ("COLLECTOR_PUSH_TOKEN".to_string(), push.clone()),
            ]);
            // secrets pasted into config values by mistake
            let text = format!(
                "{FULL}\n[api]\nlisten_addr = \"127.0.0.1:8080\"\nui_dir = \"/srv/{admin}\"\n[metastore]\npath = \"data/{push}/meta.log\"\n"
            );
            let cfg = StackConfig::parse(&text, "x").unwrap();
            let out = render_plan(&merge_components(&cfg, &env).unwrap()).unwrap();
            for secret in env.values() {
                prop_assert!(!out.contains(secret.as_str()));
            }
            prop_assert!(!out.contains(&admin) && !out.contains(&user) && !out.contains(&push));
        }
    }
}
