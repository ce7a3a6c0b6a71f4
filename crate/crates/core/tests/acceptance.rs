//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every verdict is printed even when it
//! passes. Criteria listed in `KNOWN_RED` are still evaluated and reported as
//! FAIL, but do not fail the process; the README explains each one.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use adm_core::eval::{hungarian_assign, magnitude_report, max_cluster_share};
use adm_core::pipeline::{
    expand_novel_branch, make_synthetic_stream, merge_task, pretrain_base, run_experiment_on, train_task, Layer,
    StreamSpec,
};
use adm_core::reparam::{amm_forward, amm_merge, fold_conv_bn, imm_forward, imm_merge};
use adm_core::{ConvBnUnit, DualBranchLayer, ExperimentConfig, MergeMode, Tensor};
use common::grad::{gradient_error, Contrastive, Gated, Kd, Probe, ProbReg, Replay, SelfTrain, Triplet};
use common::{brute_force_assignment, cluster_accuracy, kmeans, random_bn, rows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_RED: &[&str] = &["8a"];

/// k-means (k = 5, 10 restarts, seed 7) on the frozen base features of the
/// novel test split, default configuration, seed 0.
const KMEANS_ORACLE_SEED0: f64 = 0.746;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_unit(rng: &mut ChaCha8Rng) -> ConvBnUnit<f32> {
    let spec = common::random_spec(rng);
    let fan_in = spec.in_channels * spec.kernel_height * spec.kernel_width;
    let kernel = Tensor::randn(&spec.kernel_shape(), (2.0 / fan_in as f64).sqrt(), rng);
    ConvBnUnit::new(spec, kernel, random_bn(spec.out_channels, rng)).unwrap()
}

fn inputs_for(channels: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
    Tensor::randn(&[100, channels, h, w], 1.0, rng)
}

fn fold_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f32;
    for _ in 0..200 {
        let unit = random_unit(&mut rng);
        let x = inputs_for(unit.spec.in_channels, &mut rng);
        let folded = fold_conv_bn(&unit).unwrap().forward(&x).unwrap();
        worst = worst.max(folded.max_abs_diff(&unit.forward(&x).unwrap()).unwrap());
    }
    verdict(worst <= 1e-5, format!("max |folded - unfolded| = {worst:.2e} over 200 units x 100 inputs"))
}

fn random_dual(mode: MergeMode, rng: &mut ChaCha8Rng) -> DualBranchLayer<f32> {
    let base = fold_conv_bn(&random_unit(rng)).unwrap();
    let spec = base.spec;
    let fan_in = spec.in_channels * spec.kernel_height * spec.kernel_width;
    let kernel = Tensor::randn(&spec.kernel_shape(), (2.0 / fan_in as f64).sqrt(), rng);
    let novel = ConvBnUnit::new(spec, kernel, random_bn(spec.out_channels, rng)).unwrap();
    let gate = (0..spec.out_channels).map(|_| rng.random_range(-3.0..3.0)).collect();
    DualBranchLayer::new(base, novel, gate, mode).unwrap()
}

fn imm_losslessness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f32;
    for _ in 0..200 {
        let layer = random_dual(MergeMode::Imm, &mut rng);
        let merged = imm_merge(&layer.base, &fold_conv_bn(&layer.novel).unwrap()).unwrap();
        let x = inputs_for(layer.spec().in_channels, &mut rng);
        worst = worst.max(imm_forward(&x, &layer).unwrap().max_abs_diff(&merged.forward(&x).unwrap()).unwrap());
    }
    verdict(worst <= 1e-5, format!("max |dual - merged| = {worst:.2e} over 200 layers x 100 inputs"))
}

fn amm_losslessness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst_random = 0.0f32;
    for _ in 0..200 {
        let layer = random_dual(MergeMode::Amm, &mut rng);
        let merged = amm_merge(&layer.base, &fold_conv_bn(&layer.novel).unwrap(), &layer.gate_gamma).unwrap();
        let x = inputs_for(layer.spec().in_channels, &mut rng);
        worst_random = worst_random.max(amm_forward(&x, &layer).unwrap().max_abs_diff(&merged.forward(&x).unwrap()).unwrap());
    }

    // three expand -> train -> merge cycles on the toy network
    let mut cfg = ExperimentConfig::default();
    cfg.merge_mode = MergeMode::Amm;
    cfg.novel_classes = vec![3, 3, 3];
    cfg.novel_epochs = 20;
    let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg)).unwrap();
    let mut model = pretrain_base(&cfg, &stream.base_train).unwrap().model;
    let base_count = model.backbone_param_count();
    let mut worst_cycle = 0.0f32;
    let mut worst_logits = 0.0f32;
    for task in &stream.novel {
        expand_novel_branch(&mut model, task.train.num_classes, MergeMode::Amm, &cfg).unwrap();
        train_task(&mut model, &task.train, &cfg).unwrap();
        for layer in &model.layers {
            let Layer::Dual(d) = layer else { continue };
            let merged = amm_merge(&d.base, &fold_conv_bn(&d.novel).unwrap(), &d.gate_gamma).unwrap();
            let x = inputs_for(d.spec().in_channels, &mut rng);
            worst_cycle = worst_cycle.max(amm_forward(&x, d).unwrap().max_abs_diff(&merged.forward(&x).unwrap()).unwrap());
        }
        let before = model.logits(&task.test.x).unwrap();
        merge_task(&mut model).unwrap();
        worst_logits = worst_logits.max(before.max_abs_diff(&model.logits(&task.test.x).unwrap()).unwrap());
    }
    let final_count = model.backbone_param_count();
    verdict(
        worst_random <= 1e-5 && worst_cycle <= 1e-5 && worst_logits <= 1e-5 && final_count == base_count,
        format!(
            "random layers {worst_random:.2e}, trained layers over 3 cycles {worst_cycle:.2e}, \
             model logits {worst_logits:.2e}; backbone params {base_count} -> {final_count}"
        ),
    )
}

fn suite<P: Probe>(name: &str, cases: u64, make: impl Fn(&mut ChaCha8Rng) -> P, out: &mut Vec<(String, f64, f64)>) {
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for seed in 0..cases {
        let p = make(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
        e32 = e32.max(gradient_error::<f32, _>(&p));
        e64 = e64.max(gradient_error::<f64, _>(&p));
    }
    out.push((name.to_string(), e32, e64));
}

fn gradient_suite() -> Verdict {
    const CASES: u64 = 25;
    let mut results = Vec::new();
    suite("contrastive", CASES, Contrastive::random, &mut results);
    suite("kd", CASES, Kd::random, &mut results);
    suite("self-train", CASES, SelfTrain::random, &mut results);
    suite("triplet", CASES, Triplet::random, &mut results);
    suite("prob-reg", CASES, ProbReg::random, &mut results);
    suite("replay", CASES, Replay::random, &mut results);
    suite("aff", CASES, |r| Gated::random(MergeMode::Aff, r), &mut results);
    suite("amm", CASES, |r| Gated::random(MergeMode::Amm, r), &mut results);
    let pass = results.iter().all(|&(_, a, b)| a <= 1e-3 && b <= 1e-6);
    let worst32 = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let worst64 = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| r.1 > 1e-3 || r.2 > 1e-6)
        .map(|r| r.0.as_str())
        .collect();
    verdict(
        pass,
        format!(
            "{} suites x {CASES} cases, worst relative error f32 {worst32:.2e}, f64 {worst64:.2e}{}",
            results.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

fn hungarian_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| if case % 2 == 0 { rng.random_range(-3..4) as f64 } else { rng.random_range(-10.0..10.0) })
                    .collect()
            })
            .collect();
        let got = hungarian_assign(&cost).unwrap();
        let (mapping, total) = brute_force_assignment(&cost);
        if got.mapping != mapping || got.total_cost != total {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} of 1000 matrices differ from exhaustive search"))
}

fn toy_run() -> Verdict {
    let cfg = ExperimentConfig::default();
    let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg)).unwrap();
    let task = &stream.novel[0];
    let frozen = pretrain_base(&cfg, &stream.base_train).unwrap().model;
    let features = frozen.base_features(&task.test.x).unwrap();
    let clusters = kmeans(&rows(&features), task.train.num_classes, 10, 7);
    let oracle = cluster_accuracy(&clusters, &task.test.y, task.train.num_classes, task.classes.start);

    let report = run_experiment_on(&cfg, &stream, None).unwrap();
    let t = &report.tasks[0];
    let post = t.post_merge.as_ref().unwrap();
    let drift = (post.old_acc - t.pre_merge.old_acc).abs() * 100.0;
    let fixture_ok = (oracle - KMEANS_ORACLE_SEED0).abs() < 1e-9;
    verdict(
        fixture_ok && drift <= 0.1 && post.new_acc > oracle && post.new_acc >= 0.6,
        format!(
            "old {:.4} -> {:.4} across merge ({drift:.3} pp), new {:.4} vs k-means oracle {oracle:.4} \
             (fixture {KMEANS_ORACLE_SEED0}) and floor 0.6",
            t.pre_merge.old_acc, post.old_acc, post.new_acc
        ),
    )
}

fn magnitude_suppression() -> Verdict {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg)).unwrap();
        let base = pretrain_base(&cfg, &stream.base_train).unwrap().model;
        let mut means = [0.0; 2];
        for (slot, mode) in [MergeMode::Imm, MergeMode::Amm].into_iter().enumerate() {
            let mut model = base.clone();
            expand_novel_branch(&mut model, stream.novel[0].train.num_classes, mode, &cfg).unwrap();
            train_task(&mut model, &stream.novel[0].train, &cfg).unwrap();
            means[slot] = magnitude_report(&model, &stream.base_test.x, 20).unwrap().novel.mean;
        }
        wins += (means[1] < means[0]) as usize;
        pairs.push(format!("{:.2}/{:.2}", means[1], means[0]));
    }
    verdict(wins >= 9, format!("AMM below IMM in {wins}/10 seeds (amm/imm: {})", pairs.join(" ")))
}

struct AblationRun {
    new_acc: f64,
    share: f64,
}

fn ablation_runs(tweak: &str) -> Vec<AblationRun> {
    (0..10)
        .map(|seed| {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            if !tweak.is_empty() {
                cfg.set(tweak, "0").unwrap();
            }
            let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg)).unwrap();
            let report = run_experiment_on(&cfg, &stream, None).unwrap();
            let preds = report.model.predict(&stream.novel[0].test.x).unwrap();
            AblationRun {
                new_acc: report.tasks[0].final_report().new_acc,
                share: max_cluster_share(&preds),
            }
        })
        .collect()
}

fn collapses(runs: &[AblationRun]) -> usize {
    runs.iter().filter(|r| r.share > 0.8).count()
}

fn mean_new(runs: &[AblationRun]) -> f64 {
    runs.iter().map(|r| r.new_acc).sum::<f64>() / runs.len() as f64
}

fn max_share(runs: &[AblationRun]) -> f64 {
    runs.iter().map(|r| r.share).fold(0.0, f64::max)
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let selected = |id: &str| filter.as_deref().is_none_or(|f| id.starts_with(f));
    let mut failures = Vec::new();
    let mut report = |id: &str, name: &str, limit: Duration, elapsed: Duration, v: Verdict| {
        let in_time = elapsed <= limit;
        let pass = v.pass && in_time;
        let known = KNOWN_RED.contains(&id);
        println!(
            "criterion {id:<3} {name:<28} {} ({}; {:.1}s, limit {}s)",
            match (pass, known) {
                (true, _) => "PASS",
                (false, true) => "FAIL [known]",
                (false, false) => "FAIL",
            },
            v.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
        if !pass && !known {
            failures.push(id.to_string());
        }
    };
    let mut timed = |id: &str, name: &str, limit_s: u64, f: &dyn Fn() -> Verdict| {
        if !selected(id) {
            return;
        }
        let t0 = Instant::now();
        let v = f();
        report(id, name, Duration::from_secs(limit_s), t0.elapsed(), v);
    };

    timed("1", "fold equivalence", 10, &fold_equivalence);
    timed("2", "IMM merge losslessness", 10, &imm_losslessness);
    timed("3", "AMM merge losslessness", 120, &amm_losslessness);
    timed("4", "gradient suite", 60, &gradient_suite);
    timed("5", "Hungarian vs brute force", 10, &hungarian_oracle);
    timed("6", "toy one-step run", 120, &toy_run);
    timed("7", "magnitude suppression", 300, &magnitude_suppression);

    if selected("8") {
        let t0 = Instant::now();
        let full = ablation_runs("");
        let no_reg = ablation_runs("weight_prob_reg");
        let no_triplet = ablation_runs("weight_triplet");
        let elapsed = t0.elapsed();
        let limit = Duration::from_secs(600);
        report(
            "8a",
            "ablation: prob_reg",
            limit,
            elapsed,
            verdict(
                collapses(&no_reg) > collapses(&full),
                format!(
                    "collapsed seeds (share > 0.8) {} without vs {} with; largest share {:.3} vs {:.3}; \
                     mean new {:.4} vs {:.4}",
                    collapses(&no_reg),
                    collapses(&full),
                    max_share(&no_reg),
                    max_share(&full),
                    mean_new(&no_reg),
                    mean_new(&full)
                ),
            ),
        );
        report(
            "8b",
            "ablation: triplet",
            limit,
            elapsed,
            verdict(
                mean_new(&no_triplet) < mean_new(&full),
                format!("mean new {:.4} without vs {:.4} with", mean_new(&no_triplet), mean_new(&full)),
            ),
        );
    }

    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {}", failures.join(", "));
        ExitCode::FAILURE
    }
}
