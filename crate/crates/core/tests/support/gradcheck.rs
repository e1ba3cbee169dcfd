//! Analytic gradients against central finite differences in f64. Every case
//! returns the worst norm-wise relative error over its seeds.

use forla_core::adapters::{Adapter, AdapterConfig, AdapterKind};
use forla_core::branch::{Bound, Branch, ModelConfig, Stage};
use forla_core::decoder::{student_loss, teacher_loss, BroadcastDecoder, DecoderConfig};
use forla_core::nn::ParamSet;
use forla_core::rng;
use forla_core::slot::{Aggregation, SlotAttention, SlotConfig};
use forla_core::tensor::{Tape, Var};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 5;
/// Coordinates probed per tensor.
const PROBES: usize = 12;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Vec<Var>]) -> Var + 'a;

fn bind(tape: &mut Tape<f64>, sets: &[&ParamSet], values: &[Vec<Vec<f64>>]) -> Vec<Vec<Var>> {
    sets.iter()
        .zip(values)
        .map(|(s, v)| s.bind_values(tape, v, true).unwrap())
        .collect()
}

fn loss_at(sets: &[&ParamSet], values: &[Vec<Vec<f64>>], build: &Build) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars = bind(&mut tape, sets, values);
    let l = build(&mut tape, &vars);
    tape.scalar(l)
}

/// Largest relative error over the probed tensors. `only` restricts the
/// check to one parameter set.
fn check(sets: &[&ParamSet], seed: u64, only: Option<usize>, build: &Build) -> f64 {
    let values: Vec<Vec<Vec<f64>>> = sets.iter().map(|s| s.values::<f64>()).collect();
    let mut tape = Tape::<f64>::new();
    let vars = bind(&mut tape, sets, &values);
    let l = build(&mut tape, &vars);
    let grads = tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    let mut pick = rng::rng(seed);
    for (si, set_vars) in vars.iter().enumerate() {
        if only.is_some_and(|o| o != si) {
            continue;
        }
        for (ti, &v) in set_vars.iter().enumerate() {
            let analytic = grads.get_or_zero(&tape, v);
            let n = analytic.len();
            let idx: Vec<usize> = if n <= PROBES {
                (0..n).collect()
            } else {
                rand::seq::index::sample(&mut pick, n, PROBES).into_vec()
            };
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for &i in &idx {
                let mut plus = values.clone();
                plus[si][ti][i] += H;
                let mut minus = values.clone();
                minus[si][ti][i] -= H;
                let numeric = (loss_at(sets, &plus, build) - loss_at(sets, &minus, build)) / (2.0 * H);
                diff += (analytic[i] - numeric).powi(2);
                scale += analytic[i].powi(2) + numeric.powi(2);
            }
            if scale.sqrt() > 1e-10 {
                worst = worst.max(diff.sqrt() / scale.sqrt());
            }
        }
    }
    worst
}

fn data(seed: u64, n: usize) -> Vec<f64> {
    rng::normals(seed, n).into_iter().map(f64::from).collect()
}

fn input(tape: &mut Tape<f64>, seed: u64, rows: usize, cols: usize) -> Var {
    tape.constant(vec![rows, cols], data(seed, rows * cols)).unwrap()
}

const N: usize = 6;
const C: usize = 7;
const D: usize = 4;

pub fn adapter(kind: AdapterKind, conditioned: bool) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let mut cfg = AdapterConfig::new(kind, C, D);
            cfg.hidden = 5;
            cfg.experts = 3;
            cfg.afm_input_conditioned = conditioned;
            let a = Adapter::new(cfg, seed).unwrap();
            let build = |t: &mut Tape<f64>, v: &[Vec<Var>]| {
                let f = input(t, 100 + seed, N, C);
                let out = a.forward(t, &v[0], f).unwrap();
                let target = input(t, 200 + seed, N, D);
                t.mse(out.features, target).unwrap()
            };
            check(&[&a.params], seed, None, &build)
        })
        .fold(0.0, f64::max)
}

/// Three iterations, penalizing both slots and attention.
pub fn slot_attention(aggregation: Aggregation, position: Option<(usize, usize)>) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let cfg = SlotConfig {
                mlp_hidden: 5,
                aggregation,
                position,
                ..SlotConfig::new(D, 3, 3)
            };
            assert_eq!(cfg.iters, 3);
            let sa = SlotAttention::new(cfg, seed).unwrap();
            let build = |t: &mut Tape<f64>, v: &[Vec<Var>]| {
                let x = input(t, 300 + seed, N, D);
                let st = sa.run(t, &v[0], x, 400 + seed).unwrap();
                let target = input(t, 500 + seed, 3, 3);
                let l1 = t.mse(st.slots, target).unwrap();
                let at = input(t, 600 + seed, N, 3);
                let l2 = t.mse(st.attn, at).unwrap();
                t.add(l1, l2).unwrap()
            };
            check(&[&sa.params], seed, None, &build)
        })
        .fold(0.0, f64::max)
}

/// `target_channels` is C for the student decoder and d for the teacher's.
pub fn decoder(target_channels: usize) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let dec = BroadcastDecoder::new(
                DecoderConfig {
                    slot_dim: 3,
                    tokens: N,
                    hidden: 5,
                    target_channels,
                },
                seed,
            )
            .unwrap();
            let build = |t: &mut Tape<f64>, v: &[Vec<Var>]| {
                let slots = input(t, 700 + seed, 3, 3);
                let rec = dec.decode(t, &v[0], slots).unwrap();
                let target = input(t, 800 + seed, N, target_channels);
                t.mse(rec.recon, target).unwrap()
            };
            check(&[&dec.params], seed, None, &build)
        })
        .fold(0.0, f64::max)
}

pub const STUDENT_CHANNELS: usize = C;
pub const TEACHER_CHANNELS: usize = D;

fn model(kind: AdapterKind) -> ModelConfig {
    ModelConfig {
        height: 2,
        width: 3,
        adapter: AdapterConfig {
            hidden: 5,
            ..AdapterConfig::new(kind, C, D)
        },
        slot: SlotConfig {
            mlp_hidden: 5,
            position: Some((2, 3)),
            ..SlotConfig::new(D, 3, 3)
        },
        decoder_hidden: 5,
    }
}

fn bound(v: &[Vec<Var>]) -> Bound {
    Bound {
        adapter: v[0].clone(),
        slot: v[1].clone(),
        decoder: v[2].clone(),
    }
}

pub fn end_to_end_student() -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let b = Branch::new(&model(AdapterKind::Mlp), C, seed).unwrap();
            let build = |t: &mut Tape<f64>, v: &[Vec<Var>]| {
                let f = input(t, 900 + seed, N, C);
                let out = b.forward(t, &bound(v), f, 1000 + seed).unwrap();
                student_loss(t, out.rec.recon, f).unwrap()
            };
            check(&[&b.adapter.params, &b.slot.params, &b.decoder.params], seed, None, &build)
        })
        .fold(0.0, f64::max)
}

/// Teacher loss in the local-averaging stage, where the adapter is reached
/// through both the reconstruction and the live target. `adapter_only`
/// restricts the comparison to adapter gradients.
pub fn end_to_end_teacher(adapter_only: bool) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let b = Branch::new(&model(AdapterKind::Moe), D, seed).unwrap();
            let build = |t: &mut Tape<f64>, v: &[Vec<Var>]| {
                let f = input(t, 1100 + seed, N, C);
                let out = b.forward(t, &bound(v), f, 1200 + seed).unwrap();
                teacher_loss(t, out.rec.recon, out.f_adapt, Stage::LocalFedAvg).unwrap()
            };
            let only = adapter_only.then_some(0);
            check(&[&b.adapter.params, &b.slot.params, &b.decoder.params], seed, only, &build)
        })
        .fold(0.0, f64::max)
}

/// Every gradcheck case, labelled.
pub fn all_cases() -> Vec<(&'static str, f64)> {
    vec![
        ("mlp adapter", adapter(AdapterKind::Mlp, false)),
        ("moe adapter", adapter(AdapterKind::Moe, false)),
        ("afm adapter", adapter(AdapterKind::Afm, false)),
        ("afm adapter, input-conditioned", adapter(AdapterKind::Afm, true)),
        ("slot attention, weighted mean", slot_attention(Aggregation::WeightedMean, None)),
        ("slot attention, sum", slot_attention(Aggregation::Sum, None)),
        ("slot attention, position basis", slot_attention(Aggregation::WeightedMean, Some((2, 3)))),
        ("student decoder", decoder(STUDENT_CHANNELS)),
        ("teacher decoder", decoder(TEACHER_CHANNELS)),
        ("end-to-end student loss", end_to_end_student()),
        ("end-to-end teacher loss", end_to_end_teacher(false)),
    ]
}
