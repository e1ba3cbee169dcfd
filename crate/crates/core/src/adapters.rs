//! Adapters mapping stacked features (C_tot channels) to a compact
//! d-dimensional representation, applied independently at every grid cell.
//!
//! Parameter ordering (flat export is this list, each tensor row-major):
//! - MLP: `l1.weight [C×h]`, `l1.bias [h]`, `l2.weight [h×d]`, `l2.bias [d]`
//! - MoE: per expert `e` in order `expert{e}.weight [C×d]`, `expert{e}.bias [d]`,
//!   then `gate.weight [C×E]`, `gate.bias [E]`
//! - AFM: `mask [C]`, `proj.weight [C×d]`, `proj.bias [d]`, and for the
//!   input-conditioned variant `se.weight [C×C]`, `se.bias [C]`
//! - None: no parameters; output is the stacked input.

use serde::{Deserialize, Serialize};

use crate::nn::{self, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Mlp,
    Moe,
    Afm,
    /// Plain concatenation; d equals C_tot.
    None,
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(AdapterKind::Mlp),
            "moe" => Ok(AdapterKind::Moe),
            "afm" => Ok(AdapterKind::Afm),
            "none" | "concat" => Ok(AdapterKind::None),
            other => Err(Error::Config(format!("unknown adapter {other:?}"))),
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Mlp => "mlp",
            AdapterKind::Moe => "moe",
            AdapterKind::Afm => "afm",
            AdapterKind::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub in_channels: usize,
    pub out_dim: usize,
    pub hidden: usize,
    pub experts: usize,
    pub afm_input_conditioned: bool,
    pub afm_mask_init: f32,
}

impl AdapterConfig {
    pub fn new(kind: AdapterKind, in_channels: usize, out_dim: usize) -> Self {
        AdapterConfig {
            kind,
            in_channels,
            out_dim,
            hidden: 64,
            experts: 3,
            afm_input_conditioned: false,
            afm_mask_init: 2.0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            AdapterKind::None => self.in_channels,
            _ => self.out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.output_dim() == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        if self.kind != AdapterKind::None && self.out_dim >= self.in_channels {
            return Err(Error::Config(format!(
                "adapter output {} must be smaller than input {}",
                self.out_dim, self.in_channels
            )));
        }
        if self.kind == AdapterKind::Moe && self.experts == 0 {
            return Err(Error::Config("MoE adapter needs at least one expert".into()));
        }
        if self.kind == AdapterKind::Mlp && self.hidden == 0 {
            return Err(Error::Config("MLP adapter hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, d) = (self.in_channels, self.out_dim);
        match self.kind {
            AdapterKind::Mlp => c * self.hidden + self.hidden + self.hidden * d + d,
            AdapterKind::Moe => self.experts * (c * d + d) + c * self.experts + self.experts,
            AdapterKind::Afm => c + c * d + d + if self.afm_input_conditioned { c * c + c } else { 0 },
            AdapterKind::None => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub params: ParamSet,
}

/// Adapted H·W×d features plus the gate values, when the adapter has any
/// (MoE: N×E per-cell expert weights; AFM: per-channel gates).
#[derive(Clone, Copy, Debug)]
pub struct AdapterOutput {
    pub features: Var,
    pub gates: Option<Var>,
}

impl Adapter {
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.in_channels, config.out_dim);
        let mut params = ParamSet::new();
        let s = |i: u64| rng::derive(seed, &[rng::stream::INIT, i]);
        match config.kind {
            AdapterKind::Mlp => {
                params.push_linear("l1", c, config.hidden, s(0));
                params.push_linear("l2", config.hidden, d, s(1));
            }
            AdapterKind::Moe => {
                for e in 0..config.experts {
                    params.push_linear(&format!("expert{e}"), c, d, s(e as u64));
                }
                params.push_linear("gate", c, config.experts, s(1000));
            }
            AdapterKind::Afm => {
                params.push("mask", Tensor::param(vec![c], vec![config.afm_mask_init; c]));
                params.push_linear("proj", c, d, s(0));
                if config.afm_input_conditioned {
                    params.push_linear("se", c, c, s(1));
                }
            }
            AdapterKind::None => {}
        }
        Ok(Adapter { config, params })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Maps N×C_tot features `f` through the adapter. `p` holds the bound
    /// parameters in export order.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], f: Var) -> Result<AdapterOutput> {
        let shape = tape.shape(f).to_vec();
        if shape.len() != 2 || shape[1] != self.config.in_channels {
            return Err(Error::shape("adapt", &shape, &[shape.first().copied().unwrap_or(0), self.config.in_channels]));
        }
        match self.config.kind {
            AdapterKind::Mlp => {
                let h = nn::linear(tape, f, p[0], p[1])?;
                let h = tape.relu(h);
                let y = nn::linear(tape, h, p[2], p[3])?;
                Ok(AdapterOutput {
                    features: y,
                    gates: None,
                })
            }
            AdapterKind::Moe => {
                let e_count = self.config.experts;
                let logits = nn::linear(tape, f, p[2 * e_count], p[2 * e_count + 1])?;
                let gates = tape.softmax(logits, 1)?;
                let mut acc: Option<Var> = None;
                for e in 0..e_count {
                    let y = nn::linear(tape, f, p[2 * e], p[2 * e + 1])?;
                    let g = tape.slice(gates, e, e + 1)?;
                    let term = tape.mul(y, g)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term)?,
                        None => term,
                    });
                }
                Ok(AdapterOutput {
                    features: acc.expect("at least one expert"),
                    gates: Some(gates),
                })
            }
            AdapterKind::Afm => {
                let gates = if self.config.afm_input_conditioned {
                    let c = self.config.in_channels;
                    let n = shape[0] as f64;
                    let pooled = tape.sum_axis(f, 0)?;
                    let pooled = tape.scale(pooled, 1.0 / n);
                    let pooled = tape.reshape(pooled, vec![1, c])?;
                    let z = nn::linear(tape, pooled, p[3], p[4])?;
                    let z = tape.add(z, p[0])?;
                    let g = tape.sigmoid(z);
                    tape.reshape(g, vec![c])?
                } else {
                    tape.sigmoid(p[0])
                };
                let masked = tape.mul(f, gates)?;
                let y = nn::linear(tape, masked, p[1], p[2])?;
                Ok(AdapterOutput {
                    features: y,
                    gates: Some(gates),
                })
            }
            AdapterKind::None => Ok(AdapterOutput {
                features: f,
                gates: None,
            }),
        }
    }

    pub fn export_params(&self) -> Vec<f32> {
        self.params.export_flat()
    }

    pub fn import_params(&mut self, flat: &[f32]) -> Result<()> {
        self.params.import_flat(flat)
    }
}
