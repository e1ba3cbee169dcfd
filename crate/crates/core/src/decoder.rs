//! Spatial-broadcast MLP decoder and the two reconstruction losses.
//!
//! Every slot is added to a learned per-cell positional embedding and passed
//! through a shared MLP `D → h → h → C + 1`. The last output channel is the
//! alpha logit, softmaxed across slots per cell; the reconstruction is the
//! alpha-weighted sum of per-slot components.

use serde::{Deserialize, Serialize};

use crate::branch::Stage;
use crate::metrics::{MaskSet, Provenance};
use crate::nn::{self, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub slot_dim: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub target_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroadcastDecoder {
    pub config: DecoderConfig,
    pub params: ParamSet,
}

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    /// N×C
    pub recon: Var,
    /// K×N, columns sum to one
    pub alpha: Var,
    /// (K·N)×C, row `k·N + i`
    pub components: Var,
}

impl BroadcastDecoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.slot_dim == 0 || c.tokens == 0 || c.hidden == 0 || c.target_channels == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        let s = |i: u64| rng::derive(seed, &[rng::stream::INIT, 200 + i]);
        let mut params = ParamSet::new();
        let pos: Vec<f32> = rng::normals(s(0), c.tokens * c.slot_dim)
            .into_iter()
            .map(|v| v / (c.slot_dim as f32).sqrt())
            .collect();
        params.push("pos", Tensor::param(vec![c.tokens, c.slot_dim], pos));
        params.push_linear("l1", c.slot_dim, c.hidden, s(1));
        params.push_linear("l2", c.hidden, c.hidden, s(2));
        params.push_linear("l3", c.hidden, c.target_channels + 1, s(3));
        Ok(BroadcastDecoder { config, params })
    }

    pub fn output_channels(&self) -> usize {
        self.config.target_channels + 1
    }

    pub fn decode<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], slots: Var) -> Result<Reconstruction> {
        let cfg = &self.config;
        let shape = tape.shape(slots).to_vec();
        if shape.len() != 2 || shape[1] != cfg.slot_dim {
            return Err(Error::shape("decode", &shape, &[0, cfg.slot_dim]));
        }
        let (k, n, c) = (shape[0], cfg.tokens, cfg.target_channels);
        let x = tape.outer_add(slots, p[0])?;
        let h = nn::linear(tape, x, p[1], p[2])?;
        let h = tape.relu(h);
        let h = nn::linear(tape, h, p[3], p[4])?;
        let h = tape.relu(h);
        let out = nn::linear(tape, h, p[5], p[6])?;
        let components = tape.slice(out, 0, c)?;
        let logits = tape.slice(out, c, c + 1)?;
        let logits = tape.reshape(logits, vec![k, n])?;
        let alpha = tape.softmax(logits, 0)?;
        let recon = tape.mix(alpha, components)?;
        Ok(Reconstruction {
            recon,
            alpha,
            components,
        })
    }
}

/// Mean squared error against the stacked input features.
pub fn student_loss<S: Scalar>(tape: &mut Tape<S>, recon: Var, target: Var) -> Result<Var> {
    tape.mse(recon, target)
}

/// Mean squared error against the adapted features. In the EMA stage the
/// target must not carry gradient.
pub fn teacher_loss<S: Scalar>(tape: &mut Tape<S>, recon: Var, target: Var, stage: Stage) -> Result<Var> {
    if stage == Stage::Ema && tape.requires_grad(target) {
        return Err(Error::Invalid("teacher target must be detached in the EMA stage".into()));
    }
    tape.mse(recon, target)
}

/// Per-cell argmax of K×N alpha values; ties go to the lowest slot.
pub fn masks_from_alpha(alpha: &[f32], slots: usize, height: usize, width: usize) -> Result<MaskSet> {
    let n = height * width;
    if alpha.len() != slots * n {
        return Err(Error::Length {
            what: "alpha",
            expected: slots * n,
            got: alpha.len(),
        });
    }
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..slots {
                if alpha[k * n + i] > alpha[best * n + i] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    MaskSet::new(height, width, labels, Provenance::Predicted)
}
