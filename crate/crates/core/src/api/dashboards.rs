use serde::{Deserialize, Serialize};

use super::ApiError;
use crate::selector::Selector;
use crate::tsdb::Aggregation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VizKind {
    Line,
    Stat,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub title: String,
    pub selector: String,
    pub agg: Aggregation,
    pub step: i64,
    pub viz_kind: VizKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardTemplate {
    pub template_id: String,
    pub title: String,
    pub panels: Vec<Panel>,
    /// Shipped with the server; cannot be changed through the API.
    #[serde(default)]
    pub builtin: bool,
}

impl DashboardTemplate {
    pub fn validate(&self) -> Result<(), ApiError> {
        let bad = |m: String| Err(ApiError::BadRequest(m));
        if self.template_id.trim().is_empty() {
            return bad("template_id must not be empty".into());
        }
        if self.panels.is_empty() {
            return bad(format!("dashboard `{}` needs at least one panel", self.template_id));
        }
        for p in &self.panels {
            if let Err(e) = p.selector.parse::<Selector>() {
                return bad(format!("panel `{}`: {e}", p.title));
            }
            if p.step <= 0 {
                return bad(format!("panel `{}`: step must be positive", p.title));
            }
        }
        Ok(())
    }
}

fn panel(title: &str, selector: &str, agg: Aggregation, step: i64, viz_kind: VizKind) -> Panel {
    Panel {
        title: title.into(),
        selector: selector.into(),
        agg,
        step,
        viz_kind,
    }
}

/// Templates every server starts with.
pub fn builtin_dashboards() -> Vec<DashboardTemplate> {
    use Aggregation::*;
    use VizKind::*;
    let minute = 60_000;
    vec![
        DashboardTemplate {
            template_id: "my-data".into(),
            title: "My data".into(),
            panels: vec![
                panel("My CPU utilization", "cpu_utilization", Mean, minute, Line),
                panel("My memory", "memory_used_bytes", Max, minute, Line),
                panel("My energy", "estimated_energy_joules", Max, 3_600_000, Stat),
            ],
            builtin: true,
        },
        DashboardTemplate {
            template_id: "sustainability".into(),
            title: "Sustainability".into(),
            panels: vec![
                panel("Estimated power", "estimated_power_watts", Mean, minute, Line),
                panel("Estimated energy", "estimated_energy_joules", Max, 3_600_000, Line),
                panel("Peak power", "estimated_power_watts", Max, 3_600_000, Stat),
            ],
            builtin: true,
        },
        DashboardTemplate {
            template_id: "system-overview".into(),
            title: "System overview".into(),
            panels: vec![
                panel("CPU utilization", "cpu_utilization", Mean, minute, Line),
                panel("Memory used", "memory_used_bytes", Mean, minute, Line),
                panel("Collector overhead", "collector_cpu_seconds", Max, minute, Line),
                panel("Samples collected", "collector_samples_total", Max, minute, Table),
            ],
            builtin: true,
        },
    ]
}
