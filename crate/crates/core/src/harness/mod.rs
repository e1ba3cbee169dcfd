//! Experiment driver: data, client workers, the five training regimes,
//! evaluation, checkpointing, mode comparison and feature export.

mod checkpoint;
mod compare;
mod config;
mod stopper;

pub use checkpoint::{Checkpoint, RunState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use compare::{compare_modes, compare_reports, Comparison, ComparisonRow, ModeRuns};
pub use config::{
    AggregatorConfig, DataConfig, ExperimentConfig, MaskSource, Mode, ModelDims, Overrides, PersonalizeConfig,
    TrainConfig, TransportKind,
};
pub use stopper::EarlyStopper;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::branch::{Branch, ClientState};
use crate::decoder::masks_from_alpha;
use crate::features::{
    partition, stack_features, write_cache, FeatureGrid, Scene, StackedFeatures, SyntheticWorld, FEATURE_MAGIC,
};
use crate::federation::{
    comm_report, run_round, CommLedger, CommReport, FullScaleSizes, InProcess, LocalTrainer, ParamMessage,
    ServerState, TcpTransport, Transport,
};
use crate::metrics::{score, MaskSet, MatchOptions, MetricReport, SceneMetrics};
use crate::rng;
use crate::{Error, Result};

/// Held-out scene ids start here so they never collide with training ids.
pub const TEST_ID_OFFSET: u64 = 1 << 32;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "FORLA_OUT_DIR";

/// Raw train and held-out scenes, domain-major.
pub fn generate_scenes(cfg: &ExperimentConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let world = SyntheticWorld::build(&cfg.data.world_spec(), cfg.data_seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for d in 0..cfg.data.domains {
        train.extend(world.scenes(d, 0, cfg.data.train_scenes, cfg.data_seed)?);
        test.extend(world.scenes(d, TEST_ID_OFFSET, cfg.data.test_scenes, cfg.data_seed)?);
    }
    Ok((train, test))
}

/// Stacked scenes grouped by domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Vec<StackedFeatures>>,
    pub test: Vec<Vec<StackedFeatures>>,
}

impl Dataset {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = generate_scenes(cfg)?;
        let group = |scenes: Vec<Scene>| -> Result<Vec<Vec<StackedFeatures>>> {
            let mut out = vec![Vec::new(); cfg.data.domains];
            for s in &scenes {
                out[s.domain_id as usize].push(stack_features(s)?);
            }
            Ok(out)
        };
        Ok(Dataset {
            train: group(train)?,
            test: group(test)?,
        })
    }

    /// (domain, training scenes) for each client, in client-id order.
    pub fn client_shards(&self, cfg: &ExperimentConfig) -> Result<Vec<(u32, Vec<StackedFeatures>)>> {
        match cfg.mode {
            Mode::Individual => Ok(self
                .train
                .iter()
                .enumerate()
                .map(|(d, s)| (d as u32, s.clone()))
                .collect()),
            Mode::Centralized => Ok(vec![(0, self.train.concat())]),
            _ => {
                let pooled = self.train.concat();
                let keys: Vec<(u64, u32)> = pooled
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (i as u64, s.domain_id))
                    .collect();
                let parts = partition(&keys, cfg.clients(), cfg.partition_mode())?;
                parts
                    .into_iter()
                    .map(|ids| {
                        let scenes: Vec<StackedFeatures> = ids.iter().map(|&i| pooled[i as usize].clone()).collect();
                        let domain = scenes.first().map(|s| s.domain_id).ok_or(Error::NoScenes)?;
                        Ok((domain, scenes))
                    })
                    .collect()
            }
        }
    }
}

/// A client's training state plus its position in its scene stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientWorker {
    pub state: ClientState,
    pub domain: u32,
    pub seed: u64,
    pub batch: usize,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
    pub max_epochs: u64,
    epoch_loss: f64,
    epoch_scenes: u64,
    pub stopper: EarlyStopper,
    /// Student loss of every step.
    pub losses: Vec<f64>,
    #[serde(skip)]
    pub data: Arc<Vec<StackedFeatures>>,
}

impl ClientWorker {
    pub fn new(cfg: &ExperimentConfig, client_id: u64, domain: u32, data: Vec<StackedFeatures>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::NoScenes);
        }
        let state = ClientState::new(
            client_id,
            data.len() as u32,
            cfg.model_config(),
            cfg.branch_config(),
            cfg.seed,
        )?;
        let mut w = ClientWorker {
            state,
            domain,
            seed: cfg.seed,
            batch: cfg.train.batch,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            max_epochs: cfg.train.max_epochs,
            epoch_loss: 0.0,
            epoch_scenes: 0,
            stopper: EarlyStopper::new(cfg.train.early_stop_patience, cfg.train.min_epochs),
            losses: Vec::new(),
            data: Arc::new(data),
        };
        w.shuffle();
        Ok(w)
    }

    fn shuffle(&mut self) {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let s = rng::derive(self.seed, &[rng::stream::SHUFFLE, self.state.client_id, self.epoch]);
        order.shuffle(&mut rng::rng(s));
        self.order = order;
        self.cursor = 0;
    }

    /// Stopping rule met or epoch budget spent.
    pub fn is_finished(&self) -> bool {
        self.stopper.fired || self.epoch >= self.max_epochs
    }

    /// Runs `n` local steps. A batch never crosses an epoch boundary.
    pub fn train_iters(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            let end = (self.cursor + self.batch).min(self.order.len());
            let batch: Vec<StackedFeatures> = self.order[self.cursor..end]
                .iter()
                .map(|&i| self.data[i].clone())
                .collect();
            let step_seed = rng::derive(self.seed, &[rng::stream::STEP, self.state.client_id, self.state.iter]);
            let report = self.state.local_train_step(&batch, step_seed)?;
            self.losses.push(report.loss1);
            self.epoch_loss += report.loss1 * batch.len() as f64;
            self.epoch_scenes += batch.len() as u64;
            self.cursor = end;
            if self.cursor == self.order.len() {
                self.stopper.observe(self.epoch_loss / self.epoch_scenes as f64);
                self.epoch += 1;
                self.epoch_loss = 0.0;
                self.epoch_scenes = 0;
                self.shuffle();
            }
        }
        Ok(())
    }

    /// Installs a global model. The first one also resets the teacher's
    /// shared modules so both branches start from the same point.
    pub fn apply_global(&mut self, msg: &ParamMessage) -> Result<()> {
        let first = self.state.w_global.is_none();
        self.state.apply_global(msg)?;
        if first {
            if let Some(t) = self.state.teacher.as_mut() {
                t.set_shared(&msg.payload)?;
            }
        }
        Ok(())
    }
}

impl LocalTrainer for ClientWorker {
    fn client_id(&self) -> u64 {
        self.state.client_id
    }

    fn train_round(&mut self, global: &ParamMessage, iters: u64) -> Result<ParamMessage> {
        self.apply_global(global)?;
        self.train_iters(iters)?;
        self.state.log(format!("#round\t{}\t{}", global.round, self.state.iter));
        Ok(self.state.snapshot_shared(global.round))
    }

    fn finished(&self) -> bool {
        self.is_finished()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Write a checkpoint here every `checkpoint_every` rounds and at the end.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
    /// Stop after this many completed rounds, as if interrupted.
    pub max_rounds: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub report: MetricReport,
    pub state: RunState,
    /// Shared parameters a client sends per round.
    pub shared_params: usize,
    /// Trainable parameters a client holds across both branches.
    pub full_params: usize,
}

impl RunOutput {
    pub fn ledger(&self) -> &CommLedger {
        &self.state.ledger
    }

    pub fn event_logs(&self) -> Vec<(u64, String)> {
        self.state
            .workers
            .iter()
            .map(|w| (w.state.client_id, w.state.event_log()))
            .collect()
    }

    /// Θ after each completed round (federated modes only).
    pub fn history(&self) -> &[Vec<f32>] {
        self.state.server.as_ref().map_or(&[], |s| s.history.as_slice())
    }

    pub fn comm_report(&self) -> CommReport {
        comm_report(
            &self.state.ledger,
            self.config.adapter,
            self.shared_params,
            self.full_params,
            &FullScaleSizes::default(),
        )
    }

    /// Smallest per-batch adapted-feature variance seen by any client.
    pub fn min_adapt_variance(&self) -> f64 {
        self.state
            .workers
            .iter()
            .map(|w| w.state.min_adapt_variance)
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes metrics, communication and event logs under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        std::fs::write(dir.join("metrics.csv"), self.report.to_csv()?)?;
        std::fs::write(dir.join("metrics.txt"), self.report.to_table())?;
        std::fs::write(dir.join("comm.csv"), self.state.ledger.to_csv()?)?;
        std::fs::write(dir.join("comm.txt"), self.comm_report().to_text())?;
        for (id, log) in self.event_logs() {
            std::fs::write(dir.join(format!("events_client{id}.tsv")), log)?;
        }
        Ok(())
    }
}

/// `FORLA_OUT_DIR` when set, otherwise `fallback`.
pub fn output_dir(fallback: &Path) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| fallback.to_path_buf(), PathBuf::from)
}

fn fresh_state(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunState> {
    let workers = ds
        .client_shards(cfg)?
        .into_iter()
        .enumerate()
        .map(|(id, (domain, data))| ClientWorker::new(cfg, id as u64, domain, data))
        .collect::<Result<Vec<_>>>()?;
    let server = if cfg.mode.is_federated() {
        let first = &workers[0].state;
        let aggregator = cfg
            .aggregator
            .unwrap_or(AggregatorConfig::Fedavg)
            .build();
        let mut s = ServerState::new(first.student.shared_flat(), first.fingerprint(), aggregator);
        s.track_history = true;
        Some(s)
    } else {
        None
    };
    Ok(RunState {
        round: 0,
        server,
        workers,
        ledger: CommLedger::default(),
    })
}

fn attach_data(state: &mut RunState, cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    let shards = ds.client_shards(cfg)?;
    if shards.len() != state.workers.len() {
        return Err(Error::Config("checkpoint client count does not match the configuration".into()));
    }
    for (w, (_, data)) in state.workers.iter_mut().zip(shards) {
        w.data = Arc::new(data);
    }
    Ok(())
}

fn round_iters(cfg: &ExperimentConfig, round: u64) -> u64 {
    let p = cfg.train.global_round_period;
    cfg.train.max_iters.saturating_sub(round * p).min(p)
}

fn save(opts: &RunOptions, hash: [u8; 8], state: &RunState) -> Result<()> {
    if let Some(path) = &opts.checkpoint {
        Checkpoint {
            config_hash: hash,
            state: state.clone(),
        }
        .save(path)?;
    }
    Ok(())
}

/// One federated round through `transport`; the workers must already be
/// inside it.
fn federated_round(
    state: &mut RunState,
    transport: &mut dyn Transport,
    iters: u64,
) -> Result<bool> {
    let server = state.server.as_mut().expect("federated run has a server");
    run_round(server, transport, &mut state.ledger, iters)?;
    state.round = server.round;
    Ok(transport.all_finished())
}

fn train(cfg: &ExperimentConfig, state: &mut RunState, opts: &RunOptions, hash: [u8; 8]) -> Result<()> {
    let every = opts.checkpoint_every.max(1);
    let stop_at = opts.max_rounds.unwrap_or(u64::MAX);
    let pending = |st: &RunState| round_iters(cfg, st.round) > 0 && st.round < stop_at;

    if !cfg.mode.is_federated() {
        while pending(state) && !state.workers.iter().all(ClientWorker::is_finished) {
            let iters = round_iters(cfg, state.round);
            for w in state.workers.iter_mut().filter(|w| !w.is_finished()) {
                w.train_iters(iters)?;
            }
            state.round += 1;
            if state.round % every == 0 {
                save(opts, hash, state)?;
            }
        }
        return save(opts, hash, state);
    }

    let mut done = state.workers.iter().all(ClientWorker::is_finished) && state.round > 0;
    match cfg.transport {
        TransportKind::InProcess => {
            let mut t = InProcess::new(std::mem::take(&mut state.workers));
            while pending(state) && !done {
                let iters = round_iters(cfg, state.round);
                let r = federated_round(state, &mut t, iters);
                if let Err(e) = r {
                    state.workers = t.into_workers();
                    return Err(e);
                }
                done = t.all_finished();
                if state.round % every == 0 && opts.checkpoint.is_some() {
                    state.workers = t.workers.clone();
                    save(opts, hash, state)?;
                    state.workers.clear();
                }
            }
            state.workers = t.into_workers();
        }
        TransportKind::Tcp => {
            if opts.checkpoint.is_some() {
                return Err(Error::Config("checkpointing needs the in-process transport".into()));
            }
            let mut t = TcpTransport::spawn(std::mem::take(&mut state.workers))?;
            let mut result = Ok(());
            while pending(state) && !done {
                let iters = round_iters(cfg, state.round);
                match federated_round(state, &mut t, iters) {
                    Ok(d) => done = d,
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                }
            }
            state.workers = t.finish()?;
            result?;
        }
    }
    save(opts, hash, state)
}

/// Installs the final global model (federated modes) and runs
/// personalization when the mode asks for it.
fn finalize(cfg: &ExperimentConfig, state: &mut RunState) -> Result<()> {
    if let Some(server) = &state.server {
        if server.round > 0 {
            let mut msg = server.broadcast();
            msg.round = server.round;
            for w in &mut state.workers {
                w.apply_global(&msg)?;
            }
        }
    }
    if cfg.mode == Mode::ForlaPersonalize && state.server.as_ref().is_some_and(|s| s.round > 0) {
        for w in &mut state.workers {
            let seed = rng::derive(cfg.seed, &[rng::stream::STEP, w.state.client_id]);
            let data = Arc::clone(&w.data);
            w.state
                .personalize(cfg.personalize.freeze, cfg.personalize.steps, &data, cfg.train.batch, seed)?;
        }
    }
    Ok(())
}

/// Trains and evaluates one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_with(cfg, &RunOptions::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let ds = Dataset::build(cfg)?;
    let mut state = match &opts.resume {
        Some(path) => {
            let mut st = Checkpoint::load(path, Some(hash))?.state;
            attach_data(&mut st, cfg, &ds)?;
            st
        }
        None => fresh_state(cfg, &ds)?,
    };
    train(cfg, &mut state, opts, hash)?;
    complete(cfg, &ds, state)
}

/// Final global, personalization and evaluation on a copy of `state`.
fn complete(cfg: &ExperimentConfig, ds: &Dataset, state: RunState) -> Result<RunOutput> {
    let mut final_state = state;
    finalize(cfg, &mut final_state)?;
    let report = evaluate_workers(cfg, &final_state.workers, ds)?;
    let (shared_params, full_params) = param_counts(cfg)?;
    Ok(RunOutput {
        config: cfg.clone(),
        report,
        state: final_state,
        shared_params,
        full_params,
    })
}

/// Shared parameters per message and trainable parameters per client.
pub fn param_counts(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    let model = cfg.model_config();
    let student = Branch::new(&model, cfg.data.total_channels(), 0)?;
    let teacher = if cfg.mode.two_branch() {
        Branch::new(&model, model.adapter.output_dim(), 0)?.total_count()
    } else {
        0
    };
    Ok((student.shared_count(), student.total_count() + teacher))
}

/// Rebuilds a finished or interrupted run from its checkpoint, applying the
/// same finalization and evaluation as [`run_experiment`].
pub fn load_run(cfg: &ExperimentConfig, path: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let ds = Dataset::build(cfg)?;
    let mut st = Checkpoint::load(path, Some(cfg.hash()?))?.state;
    attach_data(&mut st, cfg, &ds)?;
    complete(cfg, &ds, st)
}

pub fn evaluate_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<MetricReport> {
    load_run(cfg, path).map(|o| o.report)
}

pub fn eval_seed(seed: u64, domain: u32, scene_id: u64) -> u64 {
    rng::derive(seed, &[rng::stream::EVAL, domain as u64, scene_id])
}

/// Scores one branch on held-out scenes.
pub fn evaluate_branch(
    branch: &Branch,
    scenes: &[StackedFeatures],
    seed: u64,
    source: MaskSource,
    opts: MatchOptions,
) -> Result<Vec<SceneMetrics>> {
    let k = branch.slot.config.slots;
    scenes
        .iter()
        .map(|s| {
            let inf = branch.infer(s, eval_seed(seed, s.domain_id, s.scene_id))?;
            let pred = match source {
                MaskSource::DecoderAlpha => masks_from_alpha(&inf.alpha, k, s.height, s.width)?,
                MaskSource::EncoderAttention => {
                    let n = s.tokens();
                    let mut t = vec![0.0f32; k * n];
                    for (i, row) in inf.attn.chunks(k).enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            t[j * n + i] = v;
                        }
                    }
                    masks_from_alpha(&t, k, s.height, s.width)?
                }
            };
            let gt = MaskSet::gt(s.height, s.width, &s.gt_mask)?;
            let mut m = score(&pred, &gt, opts)?;
            m.scene_id = s.scene_id;
            m.domain_id = s.domain_id;
            Ok(m)
        })
        .collect()
}

/// Each client scores its own domain's held-out scenes with its student;
/// the centralized model scores every domain.
pub fn evaluate_workers(cfg: &ExperimentConfig, workers: &[ClientWorker], ds: &Dataset) -> Result<MetricReport> {
    let opts = MatchOptions {
        exclude_pred_background: cfg.exclude_pred_background,
        ..MatchOptions::default()
    };
    let mut all = Vec::new();
    for w in workers {
        let domains: Vec<usize> = match cfg.mode {
            Mode::Centralized => (0..ds.test.len()).collect(),
            _ => vec![w.domain as usize],
        };
        for d in domains {
            all.extend(evaluate_branch(&w.state.student, &ds.test[d], cfg.seed, cfg.mask_source, opts)?);
        }
    }
    MetricReport::from_scenes(all)
}

/// Writes each scene's adapted features (H×W×d) in the cache layout under
/// the feature magic, returning what was written.
pub fn export_features(branch: &Branch, scenes: &[StackedFeatures], path: &Path, seed: u64) -> Result<Vec<Scene>> {
    let d = branch.adapter.config.output_dim();
    let out = scenes
        .iter()
        .map(|s| {
            let inf = branch.infer(s, eval_seed(seed, s.domain_id, s.scene_id))?;
            Ok(Scene {
                scene_id: s.scene_id,
                domain_id: s.domain_id,
                features: vec![FeatureGrid {
                    height: s.height,
                    width: s.width,
                    channels: d,
                    data: inf.f_adapt,
                }],
                gt_mask: s.gt_mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_cache(path, FEATURE_MAGIC, &out)?;
    Ok(out)
}
