mod support;

use forla_core::adapters::AdapterKind;
use forla_core::slot::Aggregation;
use support::gradcheck::{self as gc, TOL};

fn ok(label: &str, err: f64) {
    assert!(err < TOL, "{label}: relative error {err:e}");
}

#[test]
fn mlp_adapter() {
    ok("mlp", gc::adapter(AdapterKind::Mlp, false));
}

#[test]
fn moe_adapter() {
    ok("moe", gc::adapter(AdapterKind::Moe, false));
}

#[test]
fn afm_adapter() {
    ok("afm", gc::adapter(AdapterKind::Afm, false));
    ok("afm conditioned", gc::adapter(AdapterKind::Afm, true));
}

#[test]
fn slot_attention_three_iterations() {
    ok("weighted mean", gc::slot_attention(Aggregation::WeightedMean, None));
    ok("sum", gc::slot_attention(Aggregation::Sum, None));
    ok("position", gc::slot_attention(Aggregation::WeightedMean, Some((2, 3))));
}

#[test]
fn decoders() {
    ok("student decoder", gc::decoder(gc::STUDENT_CHANNELS));
    ok("teacher decoder", gc::decoder(gc::TEACHER_CHANNELS));
}

#[test]
fn end_to_end_student_loss() {
    ok("student loss", gc::end_to_end_student());
}

#[test]
fn end_to_end_teacher_loss() {
    ok("teacher loss", gc::end_to_end_teacher(false));
}
