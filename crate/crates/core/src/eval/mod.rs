//! Evaluation metrics and report emission.

mod distribution;
mod policy;
mod score;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use distribution::{mmd2, mode_coverage, Bandwidth, Mmd, Mode, FALLBACK_BANDWIDTH};
pub use policy::{
    action_error, bench_latency, generator_policy, success_rate, teacher_policy, SeedSuccess, SuccessReport,
    MIN_EPISODES, MIN_REPS, MIN_SEEDS, MIN_WARMUP,
};
pub use score::{score_cosine_report, score_cosines, ScoreCosineReport};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Metric names accepted by [`MetricsReport`]; `mode_coverage_<k>` takes any index.
pub const METRIC_NAMES: &[&str] = &["success_rate", "mmd2", "hz", "action_error", "score_cosine"];

pub fn is_registered_metric(name: &str) -> bool {
    METRIC_NAMES.contains(&name)
        || name
            .strip_prefix("mode_coverage_")
            .is_some_and(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub seed: Option<u64>,
    /// `key=value` tags joined by `;`.
    pub context: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricEntry>,
    /// Seconds since the Unix epoch; emitted only in the JSON mirror.
    pub timestamp: u64,
    /// Free-form warnings, e.g. a bandwidth fallback.
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn new() -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            entries: Vec::new(),
            timestamp,
            flags: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, value: f64, seed: Option<u64>, context: &str) -> Result<()> {
        if !is_registered_metric(metric) {
            return Err(Error::Config(format!("unregistered metric name {metric:?}")));
        }
        if context.contains([',', '\n', '"']) {
            return Err(Error::Config(format!("metric context may not contain ',', '\"' or newlines: {context:?}")));
        }
        self.entries.push(MetricEntry {
            metric: metric.into(),
            value,
            seed,
            context: context.into(),
        });
        Ok(())
    }

    pub fn flag(&mut self, msg: impl Into<String>) {
        self.flags.push(msg.into());
    }

    /// First entry matching `metric` whose context contains `context_part`.
    pub fn find(&self, metric: &str, context_part: &str) -> Option<&MetricEntry> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.context.contains(context_part))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,seed,context\n");
        for e in &self.entries {
            let seed = e.seed.map(|s| s.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", e.metric, e.value, seed, e.context).expect("write to string");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes the CSV to `path` and the JSON mirror next to it (`.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())?;
        write_atomic(&path.with_extension("json"), self.to_json().as_bytes())
    }
}
