//! Slot attention encoder: N input vectors → K slot vectors.
//!
//! Each iteration computes a softmax over slots of
//! `(x_i W^Q)(s_k W^K)ᵀ / √D`, aggregates value projections of the inputs
//! per slot, feeds the aggregate through a GRU cell and finishes with a
//! residual MLP on the layer-normalized slots.
//!
//! The GRU uses `s' = (1 − z)·s + z·n`, so a closed update gate (`z = 0`)
//! keeps the previous slot.
//!
//! With [`SlotConfig::position`] set, the value of cell `i` also receives
//! `φ(i)·W_pos`, where `φ` is a fixed per-axis coordinate basis. Aggregated
//! values then carry moments of each slot's spatial support, which is what
//! lets a broadcast decoder place the slot. Queries are left untouched.

use serde::{Deserialize, Serialize};

use crate::nn::{self, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

const AGG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Attention renormalized over inputs before aggregation.
    WeightedMean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub input_dim: usize,
    pub slot_dim: usize,
    pub slots: usize,
    pub iters: usize,
    pub mlp_hidden: usize,
    pub layernorm_affine: bool,
    pub aggregation: Aggregation,
    /// Grid (H, W) whose coordinates are mixed into the values.
    #[serde(default)]
    pub position: Option<(usize, usize)>,
}

/// Coordinate features per axis.
pub const POS_FEATURES_PER_AXIS: usize = 8;

/// Fixed N×16 basis: for `t = (index + ½)/len` on each axis,
/// `t, t², sin πt, cos πt, sin 2πt, cos 2πt, sin 3πt, cos 3πt`.
pub fn position_basis(height: usize, width: usize) -> Vec<f64> {
    let feats = |idx: usize, len: usize| {
        let t = (idx as f64 + 0.5) / len as f64;
        let pi = std::f64::consts::PI;
        [
            t,
            t * t,
            (pi * t).sin(),
            (pi * t).cos(),
            (2.0 * pi * t).sin(),
            (2.0 * pi * t).cos(),
            (3.0 * pi * t).sin(),
            (3.0 * pi * t).cos(),
        ]
    };
    let mut out = Vec::with_capacity(height * width * 2 * POS_FEATURES_PER_AXIS);
    for r in 0..height {
        for c in 0..width {
            out.extend(feats(r, height));
            out.extend(feats(c, width));
        }
    }
    out
}

impl SlotConfig {
    pub fn new(input_dim: usize, slot_dim: usize, slots: usize) -> Self {
        SlotConfig {
            input_dim,
            slot_dim,
            slots,
            iters: 3,
            mlp_hidden: 64,
            layernorm_affine: true,
            aggregation: Aggregation::WeightedMean,
            position: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots < 2 {
            return Err(Error::Config(format!("need at least 2 slots, got {}", self.slots)));
        }
        if self.iters < 1 {
            return Err(Error::Config("slot attention needs at least one iteration".into()));
        }
        if self.input_dim == 0 || self.slot_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("slot attention dimensions must be positive".into()));
        }
        if matches!(self.position, Some((h, w)) if h == 0 || w == 0) {
            return Err(Error::Config("position grid must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    ln_in: Option<usize>,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    gru_i: usize,
    gru_h: usize,
    ln_slot: Option<usize>,
    ln_mlp: Option<usize>,
    mlp1: usize,
    mlp2: usize,
    mu: usize,
    log_sigma: usize,
    #[serde(default)]
    pos: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAttention {
    pub config: SlotConfig,
    pub params: ParamSet,
    layout: Layout,
}

/// Final slots (K×D) and the last iteration's attention (N×K, rows sum to 1).
#[derive(Clone, Copy, Debug)]
pub struct SlotState {
    pub slots: Var,
    pub attn: Var,
}

fn push_norm(params: &mut ParamSet, name: &str, dim: usize) -> usize {
    let g = params.push(format!("{name}.gamma"), Tensor::param(vec![dim], vec![1.0; dim]));
    params.push(format!("{name}.beta"), Tensor::param(vec![dim], vec![0.0; dim]));
    g
}

fn push_matrix(params: &mut ParamSet, name: &str, rows: usize, cols: usize, seed: u64) -> usize {
    use rand::Rng;
    let bound = 1.0 / (rows as f32).sqrt();
    let mut r = rng::rng(seed);
    let data = (0..rows * cols).map(|_| r.gen_range(-bound..=bound)).collect();
    params.push(name, Tensor::param(vec![rows, cols], data))
}

impl SlotAttention {
    pub fn new(config: SlotConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d_in, d) = (config.input_dim, config.slot_dim);
        let s = |i: u64| rng::derive(seed, &[rng::stream::INIT, 100 + i]);
        let mut p = ParamSet::new();
        let affine = config.layernorm_affine;
        let ln_in = affine.then(|| push_norm(&mut p, "ln_in", d_in));
        let w_q = push_matrix(&mut p, "w_q", d_in, d, s(0));
        let w_k = push_matrix(&mut p, "w_k", d, d, s(1));
        let w_v = push_matrix(&mut p, "w_v", d_in, d, s(2));
        let gru_i = p.push_linear("gru.input", d, 3 * d, s(3));
        let gru_h = p.push_linear("gru.hidden", d, 3 * d, s(4));
        let ln_slot = affine.then(|| push_norm(&mut p, "ln_slot", d));
        let ln_mlp = affine.then(|| push_norm(&mut p, "ln_mlp", d));
        let mlp1 = p.push_linear("mlp1", d, config.mlp_hidden, s(5));
        let mlp2 = p.push_linear("mlp2", config.mlp_hidden, d, s(6));
        let mu = push_matrix(&mut p, "slot_mu", 1, d, s(7));
        p.tensors[mu].shape = vec![d];
        let log_sigma = p.push("slot_log_sigma", Tensor::param(vec![d], vec![0.0; d]));
        let pos = config
            .position
            .map(|_| push_matrix(&mut p, "w_pos", 2 * POS_FEATURES_PER_AXIS, d, s(8)));
        Ok(SlotAttention {
            config,
            params: p,
            layout: Layout {
                ln_in,
                w_q,
                w_k,
                w_v,
                gru_i,
                gru_h,
                ln_slot,
                ln_mlp,
                mlp1,
                mlp2,
                mu,
                log_sigma,
                pos,
            },
        })
    }

    /// Index of the GRU input bias (`[r | z | n]`, each of width D).
    pub fn gru_input_bias_index(&self) -> usize {
        self.layout.gru_i + 1
    }

    pub fn slot_mu_index(&self) -> usize {
        self.layout.mu
    }

    pub fn slot_log_sigma_index(&self) -> usize {
        self.layout.log_sigma
    }

    /// Standard-normal draws used for slot initialization (K×D).
    pub fn init_noise(&self, seed: u64) -> Vec<f32> {
        rng::normals(seed, self.config.slots * self.config.slot_dim)
    }

    /// `μ + exp(log σ)·ε` per slot.
    pub fn init_slots<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], seed: u64) -> Result<Var> {
        let (k, d) = (self.config.slots, self.config.slot_dim);
        let eps = self.init_noise(seed).into_iter().map(S::from_f32).collect();
        let eps = tape.constant(vec![k, d], eps)?;
        let sigma = tape.exp(p[self.layout.log_sigma]);
        let scaled = tape.mul(eps, sigma)?;
        tape.add(scaled, p[self.layout.mu])
    }

    fn norm<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], idx: Option<usize>, x: Var) -> Result<Var> {
        nn::layer_norm(tape, x, idx.map(|i| (p[i], p[i + 1])))
    }

    fn check_inputs<S: Scalar>(&self, tape: &Tape<S>, inputs: Var) -> Result<()> {
        let s = tape.shape(inputs);
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(Error::shape("slot_attention", s, &[0, self.config.input_dim]));
        }
        Ok(())
    }

    fn check_slots<S: Scalar>(&self, tape: &Tape<S>, slots: Var) -> Result<()> {
        let s = tape.shape(slots);
        if s.len() != 2 || s[1] != self.config.slot_dim {
            return Err(Error::shape("slot_attention", s, &[self.config.slots, self.config.slot_dim]));
        }
        Ok(())
    }

    /// Layer-normalized inputs projected to queries and values.
    fn project_inputs<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], inputs: Var) -> Result<(Var, Var)> {
        self.check_inputs(tape, inputs)?;
        let x = self.norm(tape, p, self.layout.ln_in, inputs)?;
        let q = tape.matmul(x, p[self.layout.w_q])?;
        let mut v = tape.matmul(x, p[self.layout.w_v])?;
        if let (Some(i), Some((h, w))) = (self.layout.pos, self.config.position) {
            let n = tape.shape(inputs)[0];
            if n != h * w {
                return Err(Error::shape("slot_attention position", &[n], &[h * w]));
            }
            let basis = position_basis(h, w).into_iter().map(S::from_f64).collect();
            let phi = tape.constant(vec![n, 2 * POS_FEATURES_PER_AXIS], basis)?;
            let pv = tape.matmul(phi, p[i])?;
            v = tape.add(v, pv)?;
        }
        Ok((q, v))
    }

    fn attend<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], q: Var, slots: Var) -> Result<Var> {
        let sn = self.norm(tape, p, self.layout.ln_slot, slots)?;
        let keys = tape.matmul(sn, p[self.layout.w_k])?;
        let kt = tape.transpose(keys)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / (self.config.slot_dim as f64).sqrt());
        tape.softmax(logits, 1)
    }

    fn update<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], slots: Var, v: Var, attn: Var) -> Result<Var> {
        let d = self.config.slot_dim;
        let weights = match self.config.aggregation {
            Aggregation::WeightedMean => {
                let col = tape.sum_axis(attn, 0)?;
                let col = tape.affine(col, 1.0, AGG_EPS);
                tape.div(attn, col)?
            }
            Aggregation::Sum => attn,
        };
        let wt = tape.transpose(weights)?;
        let u = tape.matmul(wt, v)?;
        // GRU
        let gi = nn::linear(tape, u, p[self.layout.gru_i], p[self.layout.gru_i + 1])?;
        let gh = nn::linear(tape, slots, p[self.layout.gru_h], p[self.layout.gru_h + 1])?;
        let (ir, iz, inn) = (tape.slice(gi, 0, d)?, tape.slice(gi, d, 2 * d)?, tape.slice(gi, 2 * d, 3 * d)?);
        let (hr, hz, hn) = (tape.slice(gh, 0, d)?, tape.slice(gh, d, 2 * d)?, tape.slice(gh, 2 * d, 3 * d)?);
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, hn)?;
        let n = tape.add(inn, rh)?;
        let n = tape.tanh(n);
        let keep = tape.affine(z, -1.0, 1.0);
        let kept = tape.mul(keep, slots)?;
        let written = tape.mul(z, n)?;
        let s = tape.add(kept, written)?;
        // residual refinement
        let h = self.norm(tape, p, self.layout.ln_mlp, s)?;
        let h = nn::linear(tape, h, p[self.layout.mlp1], p[self.layout.mlp1 + 1])?;
        let h = tape.relu(h);
        let h = nn::linear(tape, h, p[self.layout.mlp2], p[self.layout.mlp2 + 1])?;
        tape.add(s, h)
    }

    /// N×K attention of `inputs` (N×d, normalized internally) over `slots`.
    pub fn attention_weights<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], inputs: Var, slots: Var) -> Result<Var> {
        self.check_slots(tape, slots)?;
        let (q, _) = self.project_inputs(tape, p, inputs)?;
        self.attend(tape, p, q, slots)
    }

    /// One recurrent update of `slots` given attention `attn` from
    /// [`attention_weights`](Self::attention_weights).
    pub fn slot_update<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], slots: Var, inputs: Var, attn: Var) -> Result<Var> {
        self.check_slots(tape, slots)?;
        let (_, v) = self.project_inputs(tape, p, inputs)?;
        let (n, k) = (tape.shape(inputs)[0], tape.shape(slots)[0]);
        if tape.shape(attn) != [n, k] {
            return Err(Error::shape("slot_update", tape.shape(attn), &[n, k]));
        }
        self.update(tape, p, slots, v, attn)
    }

    /// T refinement iterations from the given initial slots.
    pub fn run_from<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], inputs: Var, init: Var) -> Result<SlotState> {
        self.check_slots(tape, init)?;
        let (q, v) = self.project_inputs(tape, p, inputs)?;
        let mut slots = init;
        let mut attn = None;
        for _ in 0..self.config.iters {
            let a = self.attend(tape, p, q, slots)?;
            slots = self.update(tape, p, slots, v, a)?;
            attn = Some(a);
        }
        Ok(SlotState {
            slots,
            attn: attn.expect("iters >= 1"),
        })
    }

    pub fn run<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], inputs: Var, seed: u64) -> Result<SlotState> {
        let init = self.init_slots(tape, p, seed)?;
        self.run_from(tape, p, inputs, init)
    }
}
