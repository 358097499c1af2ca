//! Tabular evaluation results.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub variant: String,
    pub sigma: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<MetricRecord>,
    /// Non-fatal notes, e.g. a denoiser evaluated at a noise level it was not trained for.
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, variant: &str, sigma: f64, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            variant: variant.to_string(),
            sigma,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.records.extend(other.records);
        self.warnings.extend(other.warnings);
    }

    pub fn get(&self, variant: &str, sigma: f64, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.variant == variant && r.sigma == sigma && r.metric == metric)
            .map(|r| r.value)
    }

    /// `variant<TAB>sigma<TAB>metric<TAB>value` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tsigma\tmetric\tvalue\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", r.variant, r.sigma, r.metric, r.value);
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Aligned table: one row per (metric, sigma), one column per variant.
    pub fn table(&self) -> String {
        let mut variants: Vec<&str> = Vec::new();
        let mut rows: Vec<(&str, f64)> = Vec::new();
        for r in &self.records {
            if !variants.contains(&r.variant.as_str()) {
                variants.push(&r.variant);
            }
            if !rows.iter().any(|&(m, s)| m == r.metric && s == r.sigma) {
                rows.push((&r.metric, r.sigma));
            }
        }
        let mut out = format!("{:<10} {:>6}", "metric", "sigma");
        for v in &variants {
            let _ = write!(out, " {v:>10}");
        }
        out.push('\n');
        for (metric, sigma) in rows {
            let _ = write!(out, "{metric:<10} {sigma:>6}");
            for v in &variants {
                match self.get(v, sigma, metric) {
                    Some(x) => {
                        let _ = write!(out, " {x:>10.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}
