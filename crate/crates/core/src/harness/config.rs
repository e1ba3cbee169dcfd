//! Experiment configuration: a TOML document plus command-line overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, AdapterKind};
use crate::branch::{BlendMode, BranchConfig, Freeze, ModelConfig};
use crate::features::{PartitionMode, WorldSpec};
use crate::federation::{Aggregator, FedAdamConfig};
use crate::slot::{Aggregation, SlotConfig};
use crate::tensor::AdamConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Individual,
    Centralized,
    SlotFedavg,
    Forla,
    ForlaPersonalize,
}

impl Mode {
    pub fn is_federated(self) -> bool {
        matches!(self, Mode::SlotFedavg | Mode::Forla | Mode::ForlaPersonalize)
    }

    pub fn two_branch(self) -> bool {
        matches!(self, Mode::Forla | Mode::ForlaPersonalize)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(Mode::Individual),
            "centralized" => Ok(Mode::Centralized),
            "slot-fedavg" => Ok(Mode::SlotFedavg),
            "forla" => Ok(Mode::Forla),
            "forla-personalize" => Ok(Mode::ForlaPersonalize),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Individual => "individual",
            Mode::Centralized => "centralized",
            Mode::SlotFedavg => "slot-fedavg",
            Mode::Forla => "forla",
            Mode::ForlaPersonalize => "forla-personalize",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    DecoderAlpha,
    EncoderAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub domains: usize,
    pub prototypes_per_domain: usize,
    pub overlap: f64,
    pub groups: Vec<usize>,
    pub objects_min: usize,
    pub objects_max: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub noise: f32,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            domains: 1,
            prototypes_per_domain: 6,
            overlap: 0.5,
            groups: Vec::new(),
            objects_min: 2,
            objects_max: 4,
            height: 16,
            width: 16,
            channels: vec![16, 8, 16],
            noise: 0.05,
            train_scenes: 200,
            test_scenes: 50,
        }
    }
}

impl DataConfig {
    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            domains: self.domains,
            prototypes_per_domain: self.prototypes_per_domain,
            overlap: self.overlap,
            groups: self.groups.clone(),
            objects_per_scene: (self.objects_min, self.objects_max),
            height: self.height,
            width: self.width,
            channels: self.channels.clone(),
            noise: self.noise,
        }
    }

    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d: usize,
    pub slots: usize,
    pub slot_dim: usize,
    pub iters: usize,
    pub adapter_hidden: usize,
    pub experts: usize,
    pub afm_input_conditioned: bool,
    pub slot_mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub layernorm_affine: bool,
    pub aggregation: Aggregation,
    /// Mix grid coordinates into the slot-attention values.
    pub slot_position: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 16,
            slots: 5,
            slot_dim: 16,
            iters: 3,
            adapter_hidden: 64,
            experts: 3,
            afm_input_conditioned: false,
            slot_mlp_hidden: 64,
            decoder_hidden: 64,
            layernorm_affine: true,
            aggregation: Aggregation::WeightedMean,
            slot_position: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch: usize,
    pub max_iters: u64,
    pub max_epochs: u64,
    pub min_epochs: u64,
    pub early_stop_patience: u64,
    pub global_round_period: u64,
    pub local_fedavg_period: u64,
    pub stage_switch_iter: u64,
    pub ema_momentum: f32,
    pub local_alpha: f32,
    pub blend_mode: BlendMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            weight_decay: 4e-4,
            batch: 16,
            max_iters: 5_000,
            max_epochs: 1_000,
            min_epochs: 100,
            early_stop_patience: 30,
            global_round_period: 100,
            local_fedavg_period: 1_000,
            stage_switch_iter: 2_000,
            ema_momentum: 0.996,
            local_alpha: 0.5,
            blend_mode: BlendMode::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub freeze: Freeze,
    pub steps: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig {
            freeze: Freeze::Adapter,
            steps: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AggregatorConfig {
    Fedavg,
    Fedprox {
        #[serde(default = "default_mu")]
        mu: f32,
    },
    Fedadam {
        #[serde(default = "default_server_lr")]
        lr: f64,
    },
}

fn default_mu() -> f32 {
    1e-3
}

fn default_server_lr() -> f64 {
    1e-2
}

impl AggregatorConfig {
    pub fn build(self) -> Aggregator {
        match self {
            AggregatorConfig::Fedavg => Aggregator::FedAvg,
            AggregatorConfig::Fedprox { mu } => Aggregator::FedProx { mu },
            AggregatorConfig::Fedadam { lr } => Aggregator::FedAdam(FedAdamConfig {
                lr,
                ..Default::default()
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    InProcess,
    Tcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub adapter: AdapterKind,
    pub aggregator: Option<AggregatorConfig>,
    pub seed: u64,
    pub data_seed: u64,
    pub clients_per_domain: usize,
    pub client_fraction: Option<f64>,
    pub transport: TransportKind,
    pub mask_source: MaskSource,
    pub exclude_pred_background: bool,
    pub data: DataConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub personalize: PersonalizeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Individual,
            adapter: AdapterKind::Mlp,
            aggregator: None,
            seed: 0,
            data_seed: 0,
            clients_per_domain: 1,
            client_fraction: None,
            transport: TransportKind::InProcess,
            mask_source: MaskSource::DecoderAlpha,
            exclude_pred_background: true,
            data: DataConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            personalize: PersonalizeConfig::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub adapter: Option<AdapterKind>,
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub max_iters: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Codec(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(a) = o.adapter {
            self.adapter = a;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.data_seed {
            self.data_seed = s;
        }
        if let Some(n) = o.max_iters {
            self.train.max_iters = n;
        }
    }

    pub fn clients(&self) -> usize {
        match self.mode {
            Mode::Centralized => 1,
            Mode::Individual => self.data.domains,
            _ => self.data.domains * self.clients_per_domain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.aggregator.is_some() && !self.mode.is_federated() {
            return bad("an aggregator requires a federated mode");
        }
        if self.mode != Mode::Individual && self.mode != Mode::Centralized && self.clients_per_domain == 0 {
            return bad("clients_per_domain must be positive");
        }
        if self.mode == Mode::Individual && self.clients_per_domain != 1 {
            return bad("individual mode trains exactly one model per domain");
        }
        let t = &self.train;
        if t.batch == 0 || t.max_iters == 0 || t.global_round_period == 0 || t.local_fedavg_period == 0 {
            return bad("batch, max_iters and cadences must be positive");
        }
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be nonnegative");
        }
        let d = &self.data;
        if d.domains == 0 || d.channels.is_empty() || d.channels.contains(&0) || d.train_scenes == 0 || d.test_scenes == 0 {
            return bad("data dimensions must be positive");
        }
        if d.objects_min > d.objects_max || d.objects_max >= 255 {
            return bad("objects_min must not exceed objects_max, which must stay below 255");
        }
        if let Some(f) = self.client_fraction {
            if !(f > 0.0 && f * self.clients_per_domain as f64 <= 1.0 + 1e-9) {
                return bad("client_fraction times clients_per_domain must lie in (0, 1]");
            }
        }
        self.model_config().validate()?;
        self.branch_config().validate()
    }

    pub fn partition_mode(&self) -> PartitionMode {
        if self.clients_per_domain == 1 && self.client_fraction.is_none() {
            PartitionMode::OneDomainPerClient
        } else {
            PartitionMode::SplitWithinDomain(
                self.client_fraction
                    .unwrap_or(1.0 / self.clients_per_domain as f64),
            )
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let c_tot = self.data.total_channels();
        let adapter = AdapterConfig {
            kind: self.adapter,
            in_channels: c_tot,
            out_dim: m.d,
            hidden: m.adapter_hidden,
            experts: m.experts,
            afm_input_conditioned: m.afm_input_conditioned,
            afm_mask_init: 2.0,
        };
        let slot = SlotConfig {
            input_dim: adapter.output_dim(),
            slot_dim: m.slot_dim,
            slots: m.slots,
            iters: m.iters,
            mlp_hidden: m.slot_mlp_hidden,
            layernorm_affine: m.layernorm_affine,
            aggregation: m.aggregation,
            position: m.slot_position.then_some((self.data.height, self.data.width)),
        };
        ModelConfig {
            height: self.data.height,
            width: self.data.width,
            adapter,
            slot,
            decoder_hidden: m.decoder_hidden,
        }
    }

    pub fn branch_config(&self) -> BranchConfig {
        let t = &self.train;
        BranchConfig {
            adam: AdamConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                ..AdamConfig::default()
            },
            two_branch: self.mode.two_branch(),
            ema_momentum: t.ema_momentum,
            local_alpha: t.local_alpha,
            stage_switch_iter: t.stage_switch_iter,
            local_fedavg_period: t.local_fedavg_period,
            blend_mode: t.blend_mode,
            fedprox_mu: match self.aggregator {
                Some(AggregatorConfig::Fedprox { mu }) => mu,
                _ => 0.0,
            },
        }
    }

    /// First 8 bytes of SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> Result<[u8; 8]> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest[..8].try_into().unwrap())
    }
}
