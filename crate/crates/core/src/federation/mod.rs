//! Synchronous round orchestration and server-side aggregation.

mod ledger;
mod message;
mod transport;

pub use ledger::{comm_report, CommEntry, CommLedger, CommReport, FullScaleSizes};
pub use message::{ParamMessage, HEADER_LEN, MSG_MAGIC, MSG_OVERHEAD, MSG_VERSION};
pub use transport::{recv_frame, recv_message, send_frame, send_message, InProcess, LocalTrainer, TcpTransport, Transport};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_batch(messages: &[ParamMessage]) -> Result<Vec<usize>> {
    let first = messages.first().ok_or_else(|| Error::Invalid("no messages to aggregate".into()))?;
    for m in messages {
        if m.fingerprint != first.fingerprint {
            return Err(Error::Fingerprint);
        }
        if m.round != first.round {
            return Err(Error::Round {
                expected: first.round,
                got: m.round,
            });
        }
        if m.payload.len() != first.payload.len() {
            return Err(Error::Length {
                what: "message payload",
                expected: first.payload.len(),
                got: m.payload.len(),
            });
        }
    }
    let mut order: Vec<usize> = (0..messages.len()).collect();
    order.sort_by_key(|&i| messages[i].client_id);
    if order.windows(2).any(|w| messages[w[0]].client_id == messages[w[1]].client_id) {
        return Err(Error::Invalid("duplicate client id in round".into()));
    }
    Ok(order)
}

/// Sample-count weighted mean, accumulated in f64 in ascending client-id order.
pub fn aggregate_fedavg(messages: &[ParamMessage]) -> Result<Vec<f32>> {
    let order = check_batch(messages)?;
    let total: f64 = messages.iter().map(|m| m.n_c as f64).sum();
    if total == 0.0 {
        return Err(Error::ZeroWeight);
    }
    let mut acc = vec![0.0f64; messages[0].payload.len()];
    for i in order {
        let w = messages[i].n_c as f64;
        for (a, &v) in acc.iter_mut().zip(&messages[i].payload) {
            *a += w * v as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / total) as f32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for FedAdamConfig {
    fn default() -> Self {
        FedAdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedAdamState {
    pub config: FedAdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl FedAdamState {
    pub fn new(config: FedAdamConfig, len: usize) -> Self {
        FedAdamState {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Server Adam step on the pseudo-gradient `Δ = prev − FedAvg(messages)`.
pub fn aggregate_fedadam(messages: &[ParamMessage], prev: &[f32], state: &mut FedAdamState) -> Result<Vec<f32>> {
    let avg = aggregate_fedavg(messages)?;
    if avg.len() != prev.len() || state.m.len() != prev.len() {
        return Err(Error::Length {
            what: "fedadam parameters",
            expected: prev.len(),
            got: avg.len(),
        });
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    Ok(prev
        .iter()
        .zip(&avg)
        .enumerate()
        .map(|(i, (&p, &a))| {
            let delta = p as f64 - a as f64;
            state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * delta;
            state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * delta * delta;
            let step = c.lr * (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + c.eps);
            (p as f64 - step) as f32
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    FedAvg,
    /// Proximal term applied client-side; the server averages.
    FedProx { mu: f32 },
    FedAdam(FedAdamConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Completed rounds.
    pub round: u64,
    pub global: Vec<f32>,
    pub fingerprint: [u8; 8],
    pub aggregator: Aggregator,
    pub adam: Option<FedAdamState>,
    /// Θ after each completed round, when tracking is enabled.
    pub history: Vec<Vec<f32>>,
    pub track_history: bool,
}

impl ServerState {
    pub fn new(global: Vec<f32>, fingerprint: [u8; 8], aggregator: Aggregator) -> Self {
        let adam = match aggregator {
            Aggregator::FedAdam(c) => Some(FedAdamState::new(c, global.len())),
            _ => None,
        };
        ServerState {
            round: 0,
            global,
            fingerprint,
            aggregator,
            adam,
            history: Vec::new(),
            track_history: false,
        }
    }

    /// Message carrying the current global for round `round + 1`.
    pub fn broadcast(&self) -> ParamMessage {
        ParamMessage {
            client_id: u64::MAX,
            round: self.round + 1,
            n_c: 0,
            fingerprint: self.fingerprint,
            payload: self.global.clone(),
        }
    }

    pub fn aggregate(&mut self, replies: &[ParamMessage]) -> Result<()> {
        let expected = self.round + 1;
        for m in replies {
            if m.fingerprint != self.fingerprint {
                return Err(Error::Fingerprint);
            }
            if m.round != expected {
                return Err(Error::Round { expected, got: m.round });
            }
        }
        let next = match self.aggregator {
            Aggregator::FedAvg | Aggregator::FedProx { .. } => aggregate_fedavg(replies)?,
            Aggregator::FedAdam(_) => {
                let st = self.adam.as_mut().expect("fedadam state");
                aggregate_fedadam(replies, &self.global, st)?
            }
        };
        if next.len() != self.global.len() {
            return Err(Error::Length {
                what: "global parameters",
                expected: self.global.len(),
                got: next.len(),
            });
        }
        self.global = next;
        self.round = expected;
        if self.track_history {
            self.history.push(self.global.clone());
        }
        Ok(())
    }
}

/// Result of one synchronous round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub clients: Vec<u64>,
}

/// Broadcast, `iters` local steps per client, collection, aggregation and
/// accounting. Any client failure aborts the round before aggregation.
pub fn run_round(server: &mut ServerState, transport: &mut dyn Transport, ledger: &mut CommLedger, iters: u64) -> Result<RoundReport> {
    let global = server.broadcast();
    let replies = transport.exchange(&global, iters)?;
    server.aggregate(&replies)?;
    let down = global.encoded_len() as u64;
    let mut clients = Vec::with_capacity(replies.len());
    let mut sorted: Vec<&ParamMessage> = replies.iter().collect();
    sorted.sort_by_key(|m| m.client_id);
    for m in sorted {
        ledger.record(server.round, m.client_id, m.encoded_len() as u64, down);
        clients.push(m.client_id);
    }
    Ok(RoundReport {
        round: server.round,
        clients,
    })
}
