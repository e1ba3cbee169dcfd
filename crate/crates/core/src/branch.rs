//! One client's local training state: a student branch reconstructing the
//! stacked features and, optionally, a teacher branch reconstructing its own
//! adapted features.
//!
//! Stage [`Stage::Ema`]: the teacher adapter receives no gradient and follows
//! the student adapter by EMA after every step. Stage [`Stage::LocalFedAvg`]:
//! the teacher adapter trains on the teacher loss and, every
//! `local_fedavg_period` iterations, the shared modules (adapter and slot
//! attention) of both branches are blended.
//!
//! Event log: one tab-separated line per step
//! `iter  loss1  loss2  stage  blend_flag`, plus `#`-prefixed lines for stage
//! switches and federated rounds.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Adapter, AdapterConfig};
use crate::decoder::{student_loss, teacher_loss, BroadcastDecoder, DecoderConfig, Reconstruction};
use crate::features::StackedFeatures;
use crate::federation::ParamMessage;
use crate::nn::ParamSet;
use crate::rng;
use crate::slot::{SlotAttention, SlotConfig, SlotState};
use crate::tensor::{adam_step, ema_blend, AdamConfig, AdamState, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

pub const COLLAPSE_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ema,
    LocalFedAvg,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ema => "ema",
            Stage::LocalFedAvg => "local-fedavg",
        })
    }
}

/// Which shared module stays fixed during personalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Freeze {
    Adapter,
    SlotAttention,
}

impl std::str::FromStr for Freeze {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(Freeze::Adapter),
            "slot-attention" | "slot_attention" | "slot" => Ok(Freeze::SlotAttention),
            other => Err(Error::Config(format!("unknown freeze target {other:?}"))),
        }
    }
}

/// Who receives the local blend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    Both,
    StudentOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub adapter: AdapterConfig,
    pub slot: SlotConfig,
    pub decoder_hidden: usize,
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("grid and decoder sizes must be positive".into()));
        }
        self.adapter.validate()?;
        self.slot.validate()?;
        if self.slot.input_dim != self.adapter.output_dim() {
            return Err(Error::Config(format!(
                "slot attention input {} does not match adapter output {}",
                self.slot.input_dim,
                self.adapter.output_dim()
            )));
        }
        Ok(())
    }

    fn decoder(&self, target_channels: usize) -> DecoderConfig {
        DecoderConfig {
            slot_dim: self.slot.slot_dim,
            tokens: self.tokens(),
            hidden: self.decoder_hidden,
            target_channels,
        }
    }

    /// First 8 bytes of SHA-256 over a description of the shared modules.
    pub fn fingerprint(&self) -> [u8; 8] {
        let a = &self.adapter;
        let s = &self.slot;
        let desc = format!(
            "adapter:{:?}/{}/{}/{}/{}/{}|slot:{}/{}/{}/{}/{}/{}/{:?}/{:?}",
            a.kind,
            a.in_channels,
            a.out_dim,
            a.hidden,
            a.experts,
            a.afm_input_conditioned,
            s.input_dim,
            s.slot_dim,
            s.slots,
            s.iters,
            s.mlp_hidden,
            s.layernorm_affine,
            s.aggregation,
            s.position
        );
        let digest = Sha256::digest(desc.as_bytes());
        digest[..8].try_into().unwrap()
    }
}

/// Adapter, slot attention and decoder of one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub adapter: Adapter,
    pub slot: SlotAttention,
    pub decoder: BroadcastDecoder,
}

/// Tape handles of a branch's parameters.
pub struct Bound {
    pub adapter: Vec<Var>,
    pub slot: Vec<Var>,
    pub decoder: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub f_adapt: Var,
    pub slots: SlotState,
    pub rec: Reconstruction,
}

/// Plain values from an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// K×N
    pub alpha: Vec<f32>,
    /// N×K
    pub attn: Vec<f32>,
    /// N×d
    pub f_adapt: Vec<f32>,
    /// N×C_target
    pub recon: Vec<f32>,
}

impl Branch {
    pub fn new(model: &ModelConfig, target_channels: usize, seed: u64) -> Result<Self> {
        Ok(Branch {
            adapter: Adapter::new(model.adapter.clone(), rng::derive(seed, &[1]))?,
            slot: SlotAttention::new(model.slot.clone(), rng::derive(seed, &[2]))?,
            decoder: BroadcastDecoder::new(model.decoder(target_channels), rng::derive(seed, &[3]))?,
        })
    }

    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, adapter: bool, slot: bool, decoder: bool) -> Bound {
        Bound {
            adapter: self.adapter.params.bind(tape, adapter),
            slot: self.slot.params.bind(tape, slot),
            decoder: self.decoder.params.bind(tape, decoder),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, b: &Bound, features: Var, slot_seed: u64) -> Result<Forward> {
        let f_adapt = self.adapter.forward(tape, &b.adapter, features)?.features;
        let slots = self.slot.run(tape, &b.slot, f_adapt, slot_seed)?;
        let rec = self.decoder.decode(tape, &b.decoder, slots.slots)?;
        Ok(Forward { f_adapt, slots, rec })
    }

    pub fn infer(&self, features: &StackedFeatures, slot_seed: u64) -> Result<Inference> {
        let mut tape = Tape::<f32>::new();
        let b = self.bind(&mut tape, false, false, false);
        let f = tape.constant(vec![features.tokens(), features.channels], features.data.clone())?;
        let out = self.forward(&mut tape, &b, f, slot_seed)?;
        Ok(Inference {
            alpha: tape.to_f32(out.rec.alpha),
            attn: tape.to_f32(out.slots.attn),
            f_adapt: tape.to_f32(out.f_adapt),
            recon: tape.to_f32(out.rec.recon),
        })
    }

    pub fn shared_flat(&self) -> Vec<f32> {
        let mut v = self.adapter.export_params();
        v.extend(self.slot.params.export_flat());
        v
    }

    pub fn set_shared(&mut self, flat: &[f32]) -> Result<()> {
        let n = self.adapter.params.count();
        let total = n + self.slot.params.count();
        if flat.len() != total {
            return Err(Error::Length {
                what: "shared parameters",
                expected: total,
                got: flat.len(),
            });
        }
        self.adapter.import_params(&flat[..n])?;
        self.slot.params.import_flat(&flat[n..])
    }

    pub fn shared_count(&self) -> usize {
        self.adapter.params.count() + self.slot.params.count()
    }

    pub fn total_count(&self) -> usize {
        self.shared_count() + self.decoder.params.count()
    }
}

/// Adam moments for the three modules of a branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchOptim {
    pub adapter: AdamState,
    pub slot: AdamState,
    pub decoder: AdamState,
}

impl BranchOptim {
    fn new(config: AdamConfig, b: &Branch) -> Self {
        BranchOptim {
            adapter: AdamState::new(config, &b.adapter.params.tensors),
            slot: AdamState::new(config, &b.slot.params.tensors),
            decoder: AdamState::new(config, &b.decoder.params.tensors),
        }
    }

    fn step(&mut self, b: &mut Branch) -> Result<()> {
        adam_step(&mut b.adapter.params.tensors, &mut self.adapter)?;
        adam_step(&mut b.slot.params.tensors, &mut self.slot)?;
        adam_step(&mut b.decoder.params.tensors, &mut self.decoder)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub adam: AdamConfig,
    pub two_branch: bool,
    pub ema_momentum: f32,
    pub local_alpha: f32,
    pub stage_switch_iter: u64,
    pub local_fedavg_period: u64,
    pub blend_mode: BlendMode,
    pub fedprox_mu: f32,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            adam: AdamConfig::default(),
            two_branch: true,
            ema_momentum: 0.996,
            local_alpha: 0.5,
            stage_switch_iter: 2_000,
            local_fedavg_period: 1_000,
            blend_mode: BlendMode::Both,
            fedprox_mu: 0.0,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("ema_momentum must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.local_alpha) {
            return Err(Error::Config("local_alpha must lie in [0, 1]".into()));
        }
        if self.local_fedavg_period == 0 {
            return Err(Error::Config("local_fedavg_period must be positive".into()));
        }
        if self.fedprox_mu < 0.0 {
            return Err(Error::Config("fedprox_mu must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub iter: u64,
    pub loss1: f64,
    pub loss2: f64,
    pub adapt_variance: f64,
    pub stage: Stage,
    pub blended: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: u64,
    pub n_c: u32,
    pub model: ModelConfig,
    pub config: BranchConfig,
    pub student: Branch,
    pub teacher: Option<Branch>,
    pub student_opt: BranchOptim,
    pub teacher_opt: Option<BranchOptim>,
    pub stage: Stage,
    pub iter: u64,
    pub w_global: Option<Vec<f32>>,
    pub events: Vec<String>,
    pub collapse_warnings: u64,
    pub min_adapt_variance: f64,
}

enum Mode {
    Train,
    Personalize(Freeze),
}

fn per_channel_variance(sum: &[f64], sq: &[f64], rows: usize) -> f64 {
    let n = rows as f64;
    let c = sum.len() as f64;
    sum.iter()
        .zip(sq)
        .map(|(s, q)| (q / n - (s / n).powi(2)).max(0.0))
        .sum::<f64>()
        / c
}

impl ClientState {
    pub fn new(client_id: u64, n_c: u32, model: ModelConfig, config: BranchConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let c_tot = model.adapter.in_channels;
        let init = |b: u64| rng::derive(seed, &[rng::stream::INIT, client_id, b]);
        let student = Branch::new(&model, c_tot, init(0))?;
        let teacher = if config.two_branch {
            let d = model.adapter.output_dim();
            let mut t = Branch::new(&model, d, init(1))?;
            t.adapter = student.adapter.clone();
            t.slot = student.slot.clone();
            Some(t)
        } else {
            None
        };
        let student_opt = BranchOptim::new(config.adam, &student);
        let teacher_opt = teacher.as_ref().map(|t| BranchOptim::new(config.adam, t));
        Ok(ClientState {
            client_id,
            n_c,
            model,
            config,
            student,
            teacher,
            student_opt,
            teacher_opt,
            stage: Stage::Ema,
            iter: 0,
            w_global: None,
            events: Vec::new(),
            collapse_warnings: 0,
            min_adapt_variance: f64::INFINITY,
        })
    }

    pub fn fingerprint(&self) -> [u8; 8] {
        self.model.fingerprint()
    }

    pub fn log(&mut self, line: String) {
        self.events.push(line);
    }

    pub fn event_log(&self) -> String {
        let mut s = self.events.join("\n");
        s.push('\n');
        s
    }

    pub fn local_train_step(&mut self, batch: &[StackedFeatures], seed: u64) -> Result<TrainStepReport> {
        self.step(batch, seed, Mode::Train)
    }

    fn step(&mut self, batch: &[StackedFeatures], seed: u64, mode: Mode) -> Result<TrainStepReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let c_tot = self.model.adapter.in_channels;
        let n = self.model.tokens();
        for s in batch {
            if s.channels != c_tot || s.tokens() != n {
                return Err(Error::shape("local_train_step", &[s.tokens(), s.channels], &[n, c_tot]));
            }
        }
        let freeze = match mode {
            Mode::Personalize(f) => Some(f),
            Mode::Train => None,
        };
        let train_adapter = freeze != Some(Freeze::Adapter);
        let train_slot = freeze != Some(Freeze::SlotAttention);
        let use_teacher = freeze.is_none() && self.teacher.is_some();
        let stage = self.stage;
        let inv_b = 1.0 / batch.len() as f64;
        let d = self.model.adapter.output_dim();
        let (mut sum, mut sq) = (vec![0.0f64; d], vec![0.0f64; d]);
        let (mut l1_total, mut l2_total) = (0.0f64, 0.0f64);

        for (j, scene) in batch.iter().enumerate() {
            let slot_seed = rng::derive(seed, &[rng::stream::STEP, j as u64]);
            let mut tape = Tape::<f32>::new();
            let sb = self.student.bind(&mut tape, train_adapter, train_slot, true);
            let f = tape.constant(vec![n, c_tot], scene.data.clone())?;
            let fs = self.student.forward(&mut tape, &sb, f, slot_seed)?;
            let l1 = student_loss(&mut tape, fs.rec.recon, f)?;
            let mut total = tape.scale(l1, inv_b);
            let mut teacher_vars = None;
            let mut l2_val = 0.0;
            if use_teacher {
                let teacher = self.teacher.as_ref().expect("teacher present");
                let tb = teacher.bind(&mut tape, stage == Stage::LocalFedAvg, true, true);
                let ft = teacher.forward(&mut tape, &tb, f, slot_seed)?;
                let target = match stage {
                    Stage::Ema => tape.detach(ft.f_adapt),
                    Stage::LocalFedAvg => ft.f_adapt,
                };
                let l2 = teacher_loss(&mut tape, ft.rec.recon, target, stage)?;
                l2_val = tape.scalar(l2).as_f64();
                let l2s = tape.scale(l2, inv_b);
                total = tape.add(total, l2s)?;
                teacher_vars = Some(tb);
            }
            let l1_val = tape.scalar(l1).as_f64();
            if !l1_val.is_finite() || !l2_val.is_finite() {
                self.clear_grads();
                return Err(Error::Numerical {
                    iter: self.iter + 1,
                    seed,
                    detail: format!(
                        "client {} scene {} (batch slot {j}): loss1={l1_val} loss2={l2_val}",
                        self.client_id, scene.scene_id
                    ),
                });
            }
            l1_total += l1_val;
            l2_total += l2_val;
            for row in tape.value(fs.f_adapt).chunks(d) {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            let grads = tape.backward(total)?;
            if train_adapter {
                self.student.adapter.params.accumulate_grads(&tape, &grads, &sb.adapter);
            }
            if train_slot {
                self.student.slot.params.accumulate_grads(&tape, &grads, &sb.slot);
            }
            self.student.decoder.params.accumulate_grads(&tape, &grads, &sb.decoder);
            if let Some(tb) = teacher_vars {
                let teacher = self.teacher.as_mut().expect("teacher present");
                teacher.adapter.params.accumulate_grads(&tape, &grads, &tb.adapter);
                teacher.slot.params.accumulate_grads(&tape, &grads, &tb.slot);
                teacher.decoder.params.accumulate_grads(&tape, &grads, &tb.decoder);
            }
        }

        if self.config.fedprox_mu > 0.0 {
            if let Some(wg) = self.w_global.clone() {
                self.add_proximal_grad(&wg, train_adapter, train_slot);
            }
        }
        self.student_opt.step(&mut self.student)?;
        if use_teacher {
            let (t, o) = (self.teacher.as_mut().unwrap(), self.teacher_opt.as_mut().unwrap());
            o.step(t)?;
        }

        let variance = per_channel_variance(&sum, &sq, batch.len() * n);
        self.min_adapt_variance = self.min_adapt_variance.min(variance);
        if variance < COLLAPSE_THRESHOLD {
            self.collapse_warnings += 1;
            log::warn!(
                "client {}: adapted-feature variance {variance:.3e} below {COLLAPSE_THRESHOLD:e}",
                self.client_id
            );
        }
        let report_loss1 = l1_total * inv_b;
        let report_loss2 = l2_total * inv_b;

        if let Some(f) = freeze {
            self.log(format!("#personalize\t{f:?}\t{report_loss1}"));
            return Ok(TrainStepReport {
                iter: self.iter,
                loss1: report_loss1,
                loss2: report_loss2,
                adapt_variance: variance,
                stage,
                blended: false,
            });
        }

        self.iter += 1;
        let mut blended = false;
        if use_teacher {
            match self.stage {
                Stage::Ema => {
                    let t = self.teacher.as_mut().unwrap();
                    ema_blend(
                        &mut t.adapter.params.tensors,
                        &self.student.adapter.params.tensors,
                        self.config.ema_momentum,
                    )?;
                }
                Stage::LocalFedAvg => {
                    if self.iter % self.config.local_fedavg_period == 0 {
                        self.local_blend()?;
                        blended = true;
                    }
                }
            }
        }
        self.log(format!(
            "{}\t{}\t{}\t{}\t{}",
            self.iter, report_loss1, report_loss2, stage, blended as u8
        ));
        if use_teacher && self.stage == Stage::Ema && self.iter >= self.config.stage_switch_iter {
            self.stage_switch();
        }
        Ok(TrainStepReport {
            iter: self.iter,
            loss1: report_loss1,
            loss2: report_loss2,
            adapt_variance: variance,
            stage,
            blended,
        })
    }

    fn clear_grads(&mut self) {
        for b in std::iter::once(&mut self.student).chain(self.teacher.as_mut()) {
            b.adapter.params.zero_grad();
            b.slot.params.zero_grad();
            b.decoder.params.zero_grad();
        }
    }

    fn add_proximal_grad(&mut self, wg: &[f32], adapter: bool, slot: bool) {
        let mu = self.config.fedprox_mu;
        let n_adapter = self.student.adapter.params.count();
        let apply = |ps: &mut ParamSet, offset: usize| {
            let mut off = offset;
            for t in &mut ps.tensors {
                let g: Vec<f32> = t.data.iter().zip(&wg[off..off + t.len()]).map(|(w, g)| mu * (w - g)).collect();
                off += t.len();
                t.accumulate_grad(&g);
            }
        };
        if adapter {
            apply(&mut self.student.adapter.params, 0);
        }
        if slot {
            apply(&mut self.student.slot.params, n_adapter);
        }
    }

    fn local_blend(&mut self) -> Result<()> {
        let alpha = self.config.local_alpha;
        let t = self.teacher.as_mut().ok_or_else(|| Error::Invalid("no teacher branch".into()))?;
        let blend = |s: &mut Vec<Tensor>, t: &[Tensor]| ema_blend(s, t, alpha);
        blend(&mut self.student.adapter.params.tensors, &t.adapter.params.tensors)?;
        blend(&mut self.student.slot.params.tensors, &t.slot.params.tensors)?;
        if self.config.blend_mode == BlendMode::Both {
            t.adapter.params.import_flat(&self.student.adapter.params.export_flat())?;
            t.slot.params.import_flat(&self.student.slot.params.export_flat())?;
        }
        Ok(())
    }

    /// Moves to [`Stage::LocalFedAvg`] once `iter` reaches the threshold.
    /// Returns whether a switch happened.
    pub fn stage_switch(&mut self) -> bool {
        if self.stage == Stage::LocalFedAvg {
            log::warn!("client {}: stage already switched", self.client_id);
            return false;
        }
        if self.iter < self.config.stage_switch_iter {
            return false;
        }
        self.stage = Stage::LocalFedAvg;
        self.log(format!("#switch\t{}", self.iter));
        true
    }

    pub fn snapshot_shared(&self, round: u64) -> ParamMessage {
        ParamMessage {
            client_id: self.client_id,
            round,
            n_c: self.n_c,
            fingerprint: self.fingerprint(),
            payload: self.student.shared_flat(),
        }
    }

    pub fn apply_global(&mut self, msg: &ParamMessage) -> Result<()> {
        if msg.fingerprint != self.fingerprint() {
            return Err(Error::Fingerprint);
        }
        self.student.set_shared(&msg.payload)?;
        self.w_global = Some(msg.payload.clone());
        Ok(())
    }

    /// Fine-tunes the student with one shared module frozen, cycling through
    /// `scenes` in order `batch` at a time.
    pub fn personalize(&mut self, freeze: Freeze, steps: u64, scenes: &[StackedFeatures], batch: usize, seed: u64) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        if self.w_global.is_none() {
            return Err(Error::Invalid("personalize requires an applied global model".into()));
        }
        if scenes.is_empty() || batch == 0 {
            return Err(Error::NoScenes);
        }
        let mut cursor = 0;
        for s in 0..steps {
            let b: Vec<StackedFeatures> = (0..batch.min(scenes.len()))
                .map(|i| scenes[(cursor + i) % scenes.len()].clone())
                .collect();
            cursor = (cursor + b.len()) % scenes.len();
            let step_seed = rng::derive(seed, &[rng::stream::STEP, self.client_id, u64::MAX - s]);
            self.step(&b, step_seed, Mode::Personalize(freeze))?;
        }
        Ok(())
    }
}
