//! Experiment configurations shared by the integration tests.

use forla_core::harness::{DataConfig, ExperimentConfig, Mode, ModelDims};

/// A model and data set small enough to train thousands of steps quickly.
pub fn tiny(mode: Mode) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        mode,
        seed: 3,
        data_seed: 5,
        ..Default::default()
    };
    c.data = DataConfig {
        domains: 1,
        prototypes_per_domain: 3,
        overlap: 0.0,
        objects_min: 1,
        objects_max: 2,
        height: 8,
        width: 8,
        channels: vec![4, 4],
        train_scenes: 6,
        test_scenes: 3,
        ..Default::default()
    };
    c.model = ModelDims {
        d: 4,
        slots: 3,
        slot_dim: 4,
        adapter_hidden: 6,
        slot_mlp_hidden: 6,
        decoder_hidden: 6,
        ..Default::default()
    };
    c.train.batch = 2;
    c.train.max_iters = 20;
    c.train.global_round_period = 5;
    c.train.local_fedavg_period = 6;
    c.train.stage_switch_iter = 8;
    c.train.min_epochs = 1_000_000;
    c.train.max_epochs = 1_000_000;
    c
}

/// Desk benchmark settings: 16×16 grid, three pseudo models with 40
/// channels in total, d = 16, five slots, noise 0.05.
fn desk(mode: Mode, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        mode,
        seed,
        data_seed: 7,
        ..Default::default()
    };
    c.model.decoder_hidden = 32;
    c.train.lr = 2e-3;
    c.train.batch = 8;
    c
}

/// Single domain, individual mode, 5000 steps.
pub fn convergence(seed: u64) -> ExperimentConfig {
    let mut c = desk(Mode::Individual, seed);
    c.train.max_iters = 5_000;
    c
}

/// Two domains sharing half their prototypes, 2000 steps.
pub fn federation_trend(mode: Mode, seed: u64) -> ExperimentConfig {
    let mut c = desk(mode, seed);
    c.data.domains = 2;
    c.data.overlap = 0.5;
    c.train.max_iters = 2_000;
    c.train.global_round_period = 100;
    c.train.stage_switch_iter = 1_000;
    c.train.local_fedavg_period = 600;
    c
}
