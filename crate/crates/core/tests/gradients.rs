mod common;

use adm_core::reparam::BnMode;
use adm_core::MergeMode;
use common::grad::{gradient_error, Contrastive, Gated, Kd, Probe, ProbReg, Replay, SelfTrain, Triplet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 20;

fn check_all<P: Probe>(label: &str, make: impl Fn(&mut ChaCha8Rng) -> P) {
    for seed in 0..CASES {
        let p = make(&mut ChaCha8Rng::seed_from_u64(seed));
        let e32 = gradient_error::<f32, _>(&p);
        let e64 = gradient_error::<f64, _>(&p);
        assert!(e32 <= 1e-3, "{label} case {seed}: f32 relative error {e32:.3e}");
        assert!(e64 <= 1e-6, "{label} case {seed}: f64 relative error {e64:.3e}");
    }
}

#[test]
fn contrastive() {
    check_all("contrastive", Contrastive::random);
}

#[test]
fn feature_distillation() {
    check_all("kd", Kd::random);
}

#[test]
fn self_training() {
    check_all("self-train", SelfTrain::random);
}

#[test]
fn triplet() {
    check_all("triplet", Triplet::random);
}

#[test]
fn probability_regularization() {
    check_all("prob-reg", ProbReg::random);
}

#[test]
fn replay() {
    check_all("replay", Replay::random);
}

#[test]
fn amm_forward() {
    check_all("amm", |r| Gated::random(MergeMode::Amm, r));
}

#[test]
fn aff_forward() {
    check_all("aff", |r| Gated::random(MergeMode::Aff, r));
}

#[test]
fn imm_forward() {
    check_all("imm", |r| Gated::random(MergeMode::Imm, r));
}

#[test]
fn train_and_infer_batch_norm_both_covered() {
    let modes: Vec<BnMode> = (0..CASES)
        .map(|s| Gated::random(MergeMode::Amm, &mut ChaCha8Rng::seed_from_u64(s)).bn_mode)
        .collect();
    assert!(modes.contains(&BnMode::Train) && modes.contains(&BnMode::Infer));
}
