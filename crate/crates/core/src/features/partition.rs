use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    OneDomainPerClient,
    /// Each domain is split across `clients / domains` clients, each taking
    /// this fraction of the domain's scenes.
    SplitWithinDomain(f64),
}

/// Assigns scene ids to clients. `scenes` lists `(scene_id, domain_id)`;
/// clients are numbered domain-major.
pub fn partition(scenes: &[(u64, u32)], clients: usize, mode: PartitionMode) -> Result<Vec<Vec<u64>>> {
    if clients == 0 {
        return Err(Error::Config("at least one client required".into()));
    }
    let mut domains: Vec<u32> = scenes.iter().map(|s| s.1).collect();
    domains.sort_unstable();
    domains.dedup();
    let per_domain = |d: u32| -> Vec<u64> {
        let mut ids: Vec<u64> = scenes.iter().filter(|s| s.1 == d).map(|s| s.0).collect();
        ids.sort_unstable();
        ids
    };
    match mode {
        PartitionMode::OneDomainPerClient => {
            if clients != domains.len() {
                return Err(Error::Config(format!(
                    "one-domain-per-client needs {} clients, got {clients}",
                    domains.len()
                )));
            }
            Ok(domains.iter().map(|&d| per_domain(d)).collect())
        }
        PartitionMode::SplitWithinDomain(fraction) => {
            if domains.is_empty() || clients % domains.len() != 0 {
                return Err(Error::Config(format!(
                    "{clients} clients cannot be split evenly over {} domains",
                    domains.len()
                )));
            }
            let cpd = clients / domains.len();
            if !(fraction > 0.0) || fraction * cpd as f64 > 1.0 + 1e-9 {
                return Err(Error::Config(format!(
                    "fraction {fraction} invalid for {cpd} clients per domain"
                )));
            }
            let covers = (fraction * cpd as f64 - 1.0).abs() < 1e-9;
            let mut out = Vec::with_capacity(clients);
            for &d in &domains {
                let ids = per_domain(d);
                let n = ids.len();
                if ((fraction * n as f64).floor() as usize) < 1 {
                    return Err(Error::Config(format!(
                        "fraction {fraction} of {n} scenes leaves a client empty"
                    )));
                }
                for j in 0..cpd {
                    let start = ((j as f64) * fraction * n as f64).floor() as usize;
                    let mut end = (((j + 1) as f64) * fraction * n as f64).floor() as usize;
                    if covers && j + 1 == cpd {
                        end = n;
                    }
                    out.push(ids[start.min(n)..end.min(n)].to_vec());
                }
            }
            Ok(out)
        }
    }
}
