//! Observability stack: collection, aggregation and storage, processing,
//! alerting and the HTTP api that serves dashboards.
//!
//! Samples travel collector -> gateway -> tsdb. Analytics distills raw data
//! into rollups and summaries, alerting evaluates rules and posts webhooks,
//! and [`api`] exposes all of it behind scoped bearer tokens.

pub mod alerting;
pub mod analytics;
pub mod api;
pub mod clock;
pub mod collector;
pub mod gateway;
pub mod hash;
pub mod metastore;
pub mod metrics;
pub mod model;
pub mod retry;
pub mod runtime;
pub mod scenario;
pub mod selector;
pub mod stack;
pub mod tsdb;

pub use alerting::{AlertEngine, AlertRule, AlertState, Notification};
pub use analytics::{AnomalyParams, AnomalySpan};
pub use metrics::Registry;
pub use model::{format_exposition, parse_exposition_line, CanonicalUnit, MetricSample, ParsedLine, SampleKind, SeriesKey, Unit};
pub use selector::{Matcher, Selector};
pub use tsdb::{Aggregation, RetentionPolicy, Tsdb};
