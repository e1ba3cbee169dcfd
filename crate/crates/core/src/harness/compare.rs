//! Paired per-domain comparison of training modes over several seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_experiment, ExperimentConfig};
use crate::metrics::{mean_std, MetricReport, METRIC_NAMES};
use crate::{Error, Result};

/// One configuration's reports, one per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeRuns {
    pub label: String,
    pub reports: Vec<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub domain: u32,
    pub metric: String,
    /// (mean, std) over seeds, one per label.
    pub values: Vec<(f64, f64)>,
    /// Mean minus the first label's mean.
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn get(&self, domain: u32, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.domain == domain && r.metric == metric)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}{:<8}", "domain", "metric");
        for l in &self.labels {
            let _ = write!(s, "{:>24}", l);
        }
        for l in self.labels.iter().skip(1) {
            let _ = write!(s, "{:>24}", format!("delta {l}"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<8}{:<8}", r.domain, r.metric);
            for (m, sd) in &r.values {
                let _ = write!(s, "{:>24}", format!("{m:.4} ± {sd:.4}"));
            }
            for d in r.deltas.iter().skip(1) {
                let _ = write!(s, "{:>24}", format!("{d:+.4}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let codec = |e: csv::Error| Error::Codec(e.to_string());
        let mut header = vec!["domain".to_string(), "metric".to_string()];
        for l in &self.labels {
            header.push(format!("{l}_mean"));
            header.push(format!("{l}_std"));
            header.push(format!("{l}_delta"));
        }
        w.write_record(&header).map_err(codec)?;
        for r in &self.rows {
            let mut rec = vec![r.domain.to_string(), r.metric.clone()];
            for ((m, sd), d) in r.values.iter().zip(&r.deltas) {
                rec.extend([m.to_string(), sd.to_string(), d.to_string()]);
            }
            w.write_record(&rec).map_err(codec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Codec(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Codec(e.to_string()))
    }
}

/// Builds the table from finished reports. Every run must cover the same
/// domains; a metric that is missing for some seed is averaged over the
/// seeds that have it.
pub fn compare_reports(runs: &[ModeRuns]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Config("comparison needs at least two modes".into()));
    }
    if runs.iter().any(|r| r.reports.is_empty()) {
        return Err(Error::NoScenes);
    }
    let domains = runs[0].reports[0].domains();
    for r in runs {
        for rep in &r.reports {
            if rep.domains() != domains {
                return Err(Error::Config(format!("run {:?} covers different domains", r.label)));
            }
        }
    }
    let mut rows = Vec::new();
    for &d in &domains {
        for metric in METRIC_NAMES {
            let values: Vec<(f64, f64)> = runs
                .iter()
                .map(|r| {
                    let per_seed: Vec<f64> = r.reports.iter().filter_map(|rep| rep.mean(d, metric)).collect();
                    mean_std(&per_seed)
                })
                .collect();
            let base = values[0].0;
            let deltas = values.iter().map(|(m, _)| m - base).collect();
            rows.push(ComparisonRow {
                domain: d,
                metric: metric.to_string(),
                values,
                deltas,
            });
        }
    }
    Ok(Comparison {
        labels: runs.iter().map(|r| r.label.clone()).collect(),
        rows,
    })
}

/// Runs every configuration once per seed and compares them. All
/// configurations must share the data seed and data settings.
pub fn compare_modes(configs: &[ExperimentConfig], seeds: &[u64]) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::Config("comparison needs at least two modes".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let first = &configs[0];
    if configs
        .iter()
        .any(|c| c.data_seed != first.data_seed || c.data != first.data)
    {
        return Err(Error::Config("compared configurations must share data seed and data settings".into()));
    }
    let mut runs = Vec::with_capacity(configs.len());
    for c in configs {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = c.clone();
            c.seed = seed;
            reports.push(run_experiment(&c)?.report);
        }
        runs.push(ModeRuns {
            label: format!("{}/{}", c.mode, c.adapter),
            reports,
        });
    }
    compare_reports(&runs)
}
