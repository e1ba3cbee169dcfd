use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const METRIC_NAMES: [&str; 4] = ["mbo", "fg_ari", "corloc", "mbhd"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: u64,
    pub domain_id: u32,
    pub mbo: Option<f64>,
    pub fg_ari: f64,
    pub corloc: Option<f64>,
    pub mbhd: Option<f64>,
}

impl SceneMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "mbo" => self.mbo,
            "fg_ari" => Some(self.fg_ari),
            "corloc" => self.corloc,
            "mbhd" => self.mbhd,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub domain: u32,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub scenes: Vec<SceneMetrics>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    /// Per-domain aggregation; skipped (undefined) values are left out of `n`.
    pub fn from_scenes(scenes: Vec<SceneMetrics>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::NoScenes);
        }
        let mut by_domain: BTreeMap<u32, Vec<&SceneMetrics>> = BTreeMap::new();
        for s in &scenes {
            by_domain.entry(s.domain_id).or_default().push(s);
        }
        let mut rows = Vec::new();
        for (domain, list) in by_domain {
            for name in METRIC_NAMES {
                let xs: Vec<f64> = list.iter().filter_map(|s| s.get(name)).collect();
                if xs.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&xs);
                rows.push(MetricRow {
                    domain,
                    metric: name.to_string(),
                    mean,
                    std,
                    n: xs.len(),
                });
            }
        }
        Ok(MetricReport { rows, scenes })
    }

    pub fn mean(&self, domain: u32, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.domain == domain && r.metric == metric)
            .map(|r| r.mean)
    }

    pub fn domains(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.rows.iter().map(|r| r.domain).collect();
        d.dedup();
        d
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Codec(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Codec(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Codec(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8}{:<10}{:>10}{:>10}{:>6}\n", "domain", "metric", "mean", "std", "n");
        for r in &self.rows {
            let _ = writeln!(s, "{:<8}{:<10}{:>10.4}{:>10.4}{:>6}", r.domain, r.metric, r.mean, r.std, r.n);
        }
        s
    }
}
