//! Scripted end-to-end scenarios: push a sample script through the API,
//! then check expectations against what the API returns.

use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::api::VIRTUAL_NOW_HEADER;
use crate::clock::{align_down, now_ms, MINUTE_MS};
use crate::gateway::IngestReport;

/// Lines per ingest request.
const BATCH_LINES: usize = 500;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("stack unreachable: {0}")]
    StackUnreachable(String),
    #[error("io: {0}")]
    Io(String),
}

/// One scripted sample: exposition text without its timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSample {
    pub offset_ms: i64,
    /// `name{labels} kind unit value`
    pub line: String,
}

/// `count` copies of one sample, `every_ms` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub offset_ms: i64,
    pub every_ms: i64,
    pub count: usize,
    pub line: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectKind {
    /// First bucket of the first matching series.
    Query,
    /// Number of series the selector matches in the window.
    SeriesCount,
    /// Number of anomaly spans over matching series.
    AnomalySpans,
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Cmp {
    pub fn check(self, actual: f64, expected: f64, tolerance: f64) -> bool {
        match self {
            Cmp::Eq => (actual - expected).abs() <= tolerance,
            Cmp::Lt => actual < expected,
            Cmp::Le => actual <= expected + tolerance,
            Cmp::Gt => actual > expected,
            Cmp::Ge => actual >= expected - tolerance,
        }
    }
}

impl fmt::Display for Cmp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cmp::Eq => "==",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
        })
    }
}

fn default_cmp() -> Cmp {
    Cmp::Eq
}

fn default_agg() -> String {
    "mean".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub name: String,
    pub kind: ExpectKind,
    #[serde(default)]
    pub selector: String,
    #[serde(default = "default_agg")]
    pub agg: String,
    #[serde(default)]
    pub start_offset_ms: i64,
    #[serde(default)]
    pub end_offset_ms: i64,
    /// Defaults to the whole window.
    #[serde(default)]
    pub step_ms: Option<i64>,
    #[serde(default = "default_cmp")]
    pub comparator: Cmp,
    #[serde(default)]
    pub value: f64,
    #[serde(default)]
    pub tolerance: f64,
    /// Anomaly checks only: some span must cover `[from, to]` offsets.
    #[serde(default)]
    pub covers: Option<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Virtual time of offset 0; the current minute when unset.
    #[serde(default)]
    pub start_ms: Option<i64>,
    #[serde(default, rename = "sample")]
    pub samples: Vec<ScriptedSample>,
    #[serde(default, rename = "generator")]
    pub generators: Vec<Generator>,
    #[serde(default, rename = "expect")]
    pub expectations: Vec<Expectation>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.message().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.expectations.is_empty() {
            return Err(ScenarioError::Invalid("at least one expectation is required".into()));
        }
        if self.samples.windows(2).any(|w| w[1].offset_ms < w[0].offset_ms) {
            return Err(ScenarioError::Invalid("sample offsets must be non-decreasing".into()));
        }
        if self.samples.iter().any(|s| s.offset_ms < 0) || self.generators.iter().any(|g| g.offset_ms < 0) {
            return Err(ScenarioError::Invalid("offsets must be non-negative".into()));
        }
        if self.generators.iter().any(|g| g.every_ms <= 0 && g.count > 1) {
            return Err(ScenarioError::Invalid("generator every_ms must be positive".into()));
        }
        for e in &self.expectations {
            if e.kind != ExpectKind::Always && e.end_offset_ms <= e.start_offset_ms {
                return Err(ScenarioError::Invalid(format!("expectation `{}`: empty window", e.name)));
            }
        }
        Ok(())
    }

    /// Every scripted sample with generators expanded, sorted by offset
    /// (stable, so equal offsets keep script order).
    pub fn script(&self) -> Vec<ScriptedSample> {
        let mut out = self.samples.clone();
        for g in &self.generators {
            out.extend((0..g.count).map(|i| ScriptedSample {
                offset_ms: g.offset_ms + i as i64 * g.every_ms,
                line: g.line.clone(),
            }));
        }
        out.sort_by_key(|s| s.offset_ms);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectationResult {
    pub name: String,
    pub passed: bool,
    pub actual: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub passed: usize,
    pub failed: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub details: Vec<ExpectationResult>,
}

impl ScenarioReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "scenario {}: {} passed, {} failed ({} samples accepted, {} rejected)",
            self.scenario, self.passed, self.failed, self.accepted, self.rejected
        )?;
        for d in &self.details {
            writeln!(f, "  [{}] {}: {}", if d.passed { "PASS" } else { "FAIL" }, d.name, d.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StackEndpoints {
    /// Base URL of the api, e.g. `http://127.0.0.1:8080`.
    pub api: String,
    pub token: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Push at wall-clock pace instead of using the virtual clock.
    pub realtime: bool,
}

struct Client {
    http: reqwest::Client,
    endpoints: StackEndpoints,
}

impl Client {
    async fn get(&self, path: &str, query: &[(&str, String)]) -> Result<(u16, Value), ScenarioError> {
        let resp = self
            .http
            .get(format!("{}{}", self.endpoints.api.trim_end_matches('/'), path))
            .bearer_auth(&self.endpoints.token)
            .query(query)
            .send()
            .await
            .map_err(|e| ScenarioError::StackUnreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.json().await.unwrap_or(Value::Null);
        Ok((status, body))
    }

    async fn ingest(&self, body: String, virtual_now: Option<i64>) -> Result<IngestReport, ScenarioError> {
        let mut req = self
            .http
            .post(format!("{}/api/v1/ingest", self.endpoints.api.trim_end_matches('/')))
            .bearer_auth(&self.endpoints.token)
            .body(body);
        if let Some(now) = virtual_now {
            req = req.header(VIRTUAL_NOW_HEADER, now.to_string());
        }
        let resp = req.send().await.map_err(|e| ScenarioError::StackUnreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(ScenarioError::StackUnreachable(format!("ingest returned {status}: {text}")));
        }
        resp.json()
            .await
            .map_err(|e| ScenarioError::StackUnreachable(format!("bad ingest response: {e}")))
    }
}

fn api_error(status: u16, body: &Value) -> String {
    format!("api returned {status}: {}", body["message"].as_str().unwrap_or("no message"))
}

/// Pushes the script, then evaluates every expectation.
pub async fn run_scenario(scenario: &Scenario, endpoints: &StackEndpoints, opts: RunOptions) -> Result<ScenarioReport, ScenarioError> {
    scenario.validate()?;
    let client = Client {
        http: reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ScenarioError::StackUnreachable(e.to_string()))?,
        endpoints: endpoints.clone(),
    };
    let (status, _) = client.get("/api/v1/healthz", &[]).await?;
    if status != 200 {
        return Err(ScenarioError::StackUnreachable(format!("healthz returned {status}")));
    }

    let base = match (opts.realtime, scenario.start_ms) {
        (true, _) => now_ms(),
        (false, Some(t)) => t,
        (false, None) => align_down(now_ms(), MINUTE_MS),
    };
    let script = scenario.script();
    let (mut accepted, mut rejected) = (0, 0);
    let mut first_reject = None;
    for chunk in chunks(&script, opts.realtime) {
        let last = chunk.last().map(|s| s.offset_ms).unwrap_or(0);
        if opts.realtime {
            let wait = base + last - now_ms();
            if wait > 0 {
                tokio::time::sleep(Duration::from_millis(wait as u64)).await;
            }
        }
        let body: String = chunk.iter().map(|s| format!("{} {}\n", s.line.trim(), base + s.offset_ms)).collect();
        let report = client.ingest(body, (!opts.realtime).then_some(base + last)).await?;
        accepted += report.accepted;
        rejected += report.rejected.len();
        if first_reject.is_none() {
            first_reject = report.rejected.first().map(|r| format!("{} ({})", r.line, r.code));
        }
    }

    let mut details = Vec::new();
    if rejected > 0 {
        details.push(ExpectationResult {
            name: "ingest".into(),
            passed: false,
            actual: Some(rejected as f64),
            detail: format!("{rejected} sample(s) rejected, first: {}", first_reject.unwrap_or_default()),
        });
    }
    for e in &scenario.expectations {
        details.push(evaluate(&client, e, base).await?);
    }
    let passed = details.iter().filter(|d| d.passed).count();
    Ok(ScenarioReport {
        scenario: scenario.name.clone(),
        passed,
        failed: details.len() - passed,
        accepted,
        rejected,
        details,
    })
}

/// Batches for pushing; in real-time mode one batch per distinct offset.
fn chunks(script: &[ScriptedSample], realtime: bool) -> Vec<&[ScriptedSample]> {
    if !realtime {
        return script.chunks(BATCH_LINES).collect();
    }
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=script.len() {
        if i == script.len() || script[i].offset_ms != script[start].offset_ms {
            out.push(&script[start..i]);
            start = i;
        }
    }
    out
}

async fn evaluate(client: &Client, e: &Expectation, base: i64) -> Result<ExpectationResult, ScenarioError> {
    let result = |passed: bool, actual: Option<f64>, detail: String| ExpectationResult {
        name: e.name.clone(),
        passed,
        actual,
        detail,
    };
    let compare = |actual: f64| {
        let ok = e.comparator.check(actual, e.value, e.tolerance);
        let tol = if e.tolerance > 0.0 { format!(" ± {}", e.tolerance) } else { String::new() };
        result(ok, Some(actual), format!("actual {actual}, expected {} {}{tol}", e.comparator, e.value))
    };
    let (start, end) = (base + e.start_offset_ms, base + e.end_offset_ms);
    let window = vec![
        ("selector", e.selector.clone()),
        ("start", start.to_string()),
        ("end", end.to_string()),
    ];
    match e.kind {
        ExpectKind::Always => Ok(result(true, None, "always passes".into())),
        ExpectKind::Query | ExpectKind::SeriesCount => {
            let mut q = window;
            q.push(("step", e.step_ms.unwrap_or(end - start).to_string()));
            q.push(("agg", if e.kind == ExpectKind::Query { e.agg.clone() } else { "count".into() }));
            let (status, body) = client.get("/api/v1/query_range", &q).await?;
            if status != 200 {
                return Ok(result(false, None, api_error(status, &body)));
            }
            let series = body["series"].as_array().cloned().unwrap_or_default();
            if e.kind == ExpectKind::SeriesCount {
                return Ok(compare(series.len() as f64));
            }
            let first = series
                .first()
                .and_then(|s| s["points"].as_array()?.first()?.get(1)?.as_f64());
            Ok(match first {
                Some(v) => compare(v),
                None => result(false, None, "no data".into()),
            })
        }
        ExpectKind::AnomalySpans => {
            let (status, body) = client.get("/api/v1/anomalies", &window).await?;
            if status != 200 {
                return Ok(result(false, None, api_error(status, &body)));
            }
            let spans = body["spans"].as_array().cloned().unwrap_or_default();
            let mut r = compare(spans.len() as f64);
            if let Some((from, to)) = e.covers {
                let covered = spans.iter().any(|s| {
                    s["start"].as_i64().is_some_and(|v| v <= base + from) && s["end"].as_i64().is_some_and(|v| v >= base + to)
                });
                if !covered {
                    r.passed = false;
                    r.detail.push_str(&format!("; no span covers offsets {from}..={to}"));
                }
            }
            Ok(r)
        }
    }
}

/// The latency masking example: 1000 requests in one minute, 950 at
/// 100 ms and a contiguous run of 50 at 3000 ms.
pub fn masking_scenario(start_ms: i64) -> Scenario {
    let line = |v: u32| format!(r#"request_latency{{service="checkout"}} gauge ms {v}"#);
    let every = 60;
    let window = MINUTE_MS;
    let expect = |name: &str, kind, agg: &str, value: f64, tolerance: f64| Expectation {
        name: name.into(),
        kind,
        selector: r#"request_latency{service="checkout"}"#.into(),
        agg: agg.into(),
        start_offset_ms: 0,
        end_offset_ms: window,
        step_ms: None,
        comparator: Cmp::Eq,
        value,
        tolerance,
        covers: None,
    };
    let mut spans = expect("one anomaly span over the spike", ExpectKind::AnomalySpans, "mean", 1.0, 0.0);
    spans.covers = Some((600 * every, 649 * every));
    Scenario {
        name: "latency-masking".into(),
        start_ms: Some(start_ms),
        samples: Vec::new(),
        generators: vec![
            Generator { offset_ms: 0, every_ms: every, count: 600, line: line(100) },
            Generator { offset_ms: 600 * every, every_ms: every, count: 50, line: line(3000) },
            Generator { offset_ms: 650 * every, every_ms: every, count: 350, line: line(100) },
        ],
        expectations: vec![
            expect("mean latency over the minute", ExpectKind::Query, "mean", 0.245, 0.0005),
            expect("p99 latency over the minute", ExpectKind::Query, "quantile(0.99)", 3.0, 0.0),
            spans,
        ],
    }
}
