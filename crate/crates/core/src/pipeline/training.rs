use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::data::{make_synthetic_stream, LabeledSet, StreamSpec, TaskStream, UnlabeledSet};
use super::model::{to_input, BaseNetwork, Layer, Model};
use crate::autograd::{Tape, Var};
use crate::discovery::{
    compute_prototypes, contrastive_loss_on, feature_replay_loss_on, kd_loss_on, mine_triplet_indices,
    prob_regularization_on, pseudo_label, self_train_loss_on, total_loss_on, triplet_loss_on, LossParts,
    PrototypeStore,
};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, ClassMap, MetricsReport, ReportFormat};
use crate::optim::Sgd;
use crate::reparam::{BnMode, MergeMode};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_MERGE_CHECK: u64 = 3;

fn task_stream(task: usize, which: u64) -> u64 {
    16 + 4 * task as u64 + which
}

/// A ChaCha stream derived from the experiment seed; distinct stages use
/// distinct streams so changing one stage does not reshuffle another.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shuffled mini-batches covering `0..n`; a tail shorter than 3 joins the previous batch.
fn batches<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 3) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn take_grads(grads: &mut crate::autograd::Gradients<f32>, vars: &[Option<Var>]) -> Vec<Option<Tensor<f32>>> {
    vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub model: Model,
    pub epoch_losses: Vec<f32>,
    pub train_accuracy: f64,
}

fn check_base_labels(data: &LabeledSet, num_base: usize) -> Result<()> {
    if data.x.rank() != 2 || data.x.shape()[0] != data.y.len() {
        return Err(Error::shape("pretrain_base", "samples", data.y.len(), data.x.shape()[0]));
    }
    let mut counts = vec![0usize; num_base];
    for &y in &data.y {
        if y >= num_base {
            return Err(Error::invalid("pretrain_base", format!("label {y} outside 0..{num_base}")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::invalid(
            "pretrain_base",
            format!("class {c} has {} sample(s); at least 2 are required", counts[c]),
        ));
    }
    Ok(())
}

/// The untrained base network an experiment starts from.
pub fn initial_network(cfg: &ExperimentConfig) -> Result<BaseNetwork> {
    BaseNetwork::init(&cfg.arch, cfg.base_classes, &mut stage_rng(cfg.seed, STREAM_INIT))
}

/// Supervised cross-entropy training on the labeled task, then folding and
/// prototype estimation.
pub fn pretrain_base(cfg: &ExperimentConfig, data: &LabeledSet) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_base_labels(data, cfg.base_classes)?;
    let mut net = initial_network(cfg)?;
    let mut rng = stage_rng(cfg.seed, STREAM_PRETRAIN);
    let mut opt = Sgd::new(cfg.pretrain_lr as f32, cfg.momentum as f32);
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        let mut total = 0.0;
        let plan = batches(data.len(), cfg.batch_size, &mut rng);
        for idx in &plan {
            total += supervised_step(&mut net, data, idx, cfg, &mut opt)?;
        }
        epoch_losses.push(total / plan.len() as f32);
    }
    let mut model = net.fold()?;
    let features = model.features(&data.x)?;
    model.prototypes = compute_prototypes(&features, &data.y)?;
    let pred = model.predict(&data.x)?;
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(PretrainOutcome {
        model,
        epoch_losses,
        train_accuracy: hits as f64 / data.len() as f64,
    })
}

fn supervised_step(net: &mut BaseNetwork, data: &LabeledSet, idx: &[usize], cfg: &ExperimentConfig, opt: &mut Sgd<f32>) -> Result<f32> {
    let mut tape = Tape::new();
    let x = tape.constant(to_input(&net.arch, &data.x.select_rows(idx))?);
    let unit_vars: Vec<_> = net.units.iter().map(|u| u.register(&mut tape, true)).collect();
    let head_vars = net.head.register(&mut tape, true, false);
    let (features, stats) = net.features_on_tape(&mut tape, x, &unit_vars, BnMode::Train)?;
    let logits = net.head.forward_on_tape(&mut tape, features, head_vars)?;
    let log_p = tape.log_softmax_rows(logits)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
    let picked = tape.pick_cols(log_p, &labels)?;
    let mean = tape.mean(picked)?;
    let loss = tape.scale(mean, -1.0);
    let mut grads = tape.backward(loss)?;

    let mut order: Vec<Option<Var>> = Vec::new();
    for v in &unit_vars {
        order.extend([Some(v.kernel), Some(v.gamma), Some(v.beta)]);
    }
    order.extend([Some(head_vars.base_weight), Some(head_vars.base_bias)]);
    let g = take_grads(&mut grads, &order);

    let mut params: Vec<&mut [f32]> = Vec::new();
    for u in net.units.iter_mut() {
        params.push(u.kernel.data_mut());
        params.push(&mut u.bn.gamma);
        params.push(&mut u.bn.beta);
    }
    params.push(net.head.base_weight.data_mut());
    params.push(net.head.base_bias.data_mut());
    opt.step_slices(&mut params, &g)?;

    for (u, s) in net.units.iter_mut().zip(stats) {
        if let Some(s) = s {
            u.update_running_stats(&s, cfg.bn_momentum as f32);
        }
    }
    tape.value(loss).item()
}

/// Adds the novel branches and head columns for the next unlabeled task.
pub fn expand_novel_branch(model: &mut Model, num_novel: usize, mode: MergeMode, cfg: &ExperimentConfig) -> Result<()> {
    let mut rng = stage_rng(cfg.seed, task_stream(model.task_cursor, 0));
    model.expand(num_novel, mode, cfg.head_init_std, &mut rng)
}

/// Two-layer perceptron feeding the contrastive loss; lives for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

impl Projection {
    pub fn init<R: Rng + ?Sized>(dim: usize, out: usize, rng: &mut R) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        Self {
            w1: Tensor::randn(&[dim, dim], std, rng),
            b1: Tensor::zeros(&[dim]),
            w2: Tensor::randn(&[out, dim], std, rng),
            b2: Tensor::zeros(&[out]),
        }
    }

    fn register(&self, tape: &mut Tape<f32>) -> [Var; 4] {
        [
            tape.param(self.w1.clone()),
            tape.param(self.b1.clone()),
            tape.param(self.w2.clone()),
            tape.param(self.b2.clone()),
        ]
    }

    fn forward(tape: &mut Tape<f32>, x: Var, v: [Var; 4]) -> Result<Var> {
        let h = tape.linear(x, v[0], Some(v[1]))?;
        let h = tape.relu(h);
        tape.linear(h, v[2], Some(v[3]))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f32>,
    pub steps: usize,
}

/// Trains the novel branches and the whole joint head on one unlabeled task;
/// replayed prototypes anchor the known-class columns. Base convolutions and
/// gates are constants throughout.
pub fn train_task(model: &mut Model, data: &UnlabeledSet, cfg: &ExperimentConfig) -> Result<TrainLog> {
    if !model.is_expanded() {
        return Err(Error::State("train_task needs an expanded model".into()));
    }
    if data.is_empty() {
        return Err(Error::invalid("train_task", "the unlabeled set is empty"));
    }
    if data.len() < 3 {
        return Err(Error::invalid("train_task", "need at least 3 samples to mine triplets"));
    }
    if data.num_classes != model.head.num_novel() {
        return Err(Error::shape("train_task", "novel classes", model.head.num_novel(), data.num_classes));
    }
    for v in [&data.view1, &data.view2] {
        data.x.expect_same_shape(v, "train_task")?;
    }
    let weights = &cfg.losses;
    let mut rng = stage_rng(cfg.seed, task_stream(model.task_cursor, 1));
    let base_features = model.base_features(&data.x)?;
    let mut projection = Projection::init(model.arch.feature_dim(), cfg.projection_dim, &mut rng);
    let mut opt = Sgd::new(cfg.novel_lr as f32, cfg.momentum as f32);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.novel_epochs {
        let plan = batches(data.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for idx in &plan {
            let replay = if weights.replay != 0.0 && !model.prototypes.is_empty() && cfg.replay_per_class > 0 {
                Some(model.prototypes.sample(cfg.replay_per_class, &mut rng)?)
            } else {
                None
            };
            total += novel_step(model, &mut projection, data, &base_features, idx, replay, epoch, cfg, &mut opt)?;
            log.steps += 1;
        }
        log.epoch_losses.push(total / plan.len() as f32);
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn novel_step(
    model: &mut Model,
    projection: &mut Projection,
    data: &UnlabeledSet,
    base_features: &Tensor<f32>,
    idx: &[usize],
    replay: Option<(Tensor<f32>, Vec<usize>)>,
    epoch: usize,
    cfg: &ExperimentConfig,
    opt: &mut Sgd<f32>,
) -> Result<f32> {
    let w = &cfg.losses;
    let b = idx.len();
    let known = model.head.num_base();
    let classes = model.head.num_classes();
    let stacked = Tensor::concat_rows(&[
        &data.x.select_rows(idx),
        &data.view1.select_rows(idx),
        &data.view2.select_rows(idx),
    ])?;

    let mut tape = Tape::new();
    let input = tape.constant(to_input(&model.arch, &stacked)?);
    let unit_vars = model.register_novel(&mut tape)?;
    let (features, stats) = model.features_on_tape(&mut tape, input, &unit_vars, BnMode::Train)?;
    let rows = |r: std::ops::Range<usize>| r.collect::<Vec<_>>();
    let fx = tape.gather_rows(features, &rows(0..b))?;

    let head_vars = model.head.register(&mut tape, true, true);
    let logits = model.head.forward_on_tape(&mut tape, features, head_vars)?;
    let lx = tape.gather_rows(logits, &rows(0..b))?;

    let mut parts = LossParts::default();
    if w.kd != 0.0 {
        let fb = tape.constant(base_features.select_rows(idx));
        parts.kd = Some(kd_loss_on(&mut tape, fb, fx)?);
    }
    let mut proj_vars = None;
    if w.contrastive != 0.0 {
        let pv = projection.register(&mut tape);
        let f1 = tape.gather_rows(features, &rows(b..2 * b))?;
        let f2 = tape.gather_rows(features, &rows(2 * b..3 * b))?;
        let z1 = Projection::forward(&mut tape, f1, pv)?;
        let z2 = Projection::forward(&mut tape, f2, pv)?;
        parts.contrastive = Some(contrastive_loss_on(&mut tape, z1, z2, w.temperature)?);
        proj_vars = Some(pv);
    }
    if w.self_train != 0.0 {
        let lx_val = tape.value(lx).clone();
        let labels = (0..b)
            .map(|i| pseudo_label(&lx_val.row(i)[known..], known))
            .collect::<Result<Vec<_>>>()?;
        let both: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let lv = tape.gather_rows(logits, &rows(b..3 * b))?;
        parts.self_train = Some(self_train_loss_on(&mut tape, lv, &both)?);
    }
    if w.triplet != 0.0 {
        // Compared on the novel columns only, keeping the 1/|C^A| scale of the
        // joint head.
        let (pos, neg) = mine_triplet_indices(tape.value(fx))?;
        let lp = tape.gather_rows(lx, &pos)?;
        let ln = tape.gather_rows(lx, &neg)?;
        let a = tape.slice_cols(lx, known, classes)?;
        let p = tape.slice_cols(lp, known, classes)?;
        let n = tape.slice_cols(ln, known, classes)?;
        let hinge = w.hinge.then_some(w.margin);
        let t = triplet_loss_on(&mut tape, a, p, n, hinge)?;
        parts.triplet = Some(tape.scale(t, (classes - known) as f32 / classes as f32));
    }
    if w.prob_reg != 0.0 {
        let novel = tape.slice_cols(lx, known, classes)?;
        let probs = tape.softmax_rows(novel)?;
        parts.prob_reg = Some(prob_regularization_on(&mut tape, probs)?);
    }
    if let Some((z, y)) = replay {
        let zv = tape.constant(z);
        parts.replay = Some(feature_replay_loss_on(&mut tape, &model.head, head_vars, zv, &y)?);
    }
    let loss = total_loss_on(&mut tape, &parts, w, epoch)?;
    let mut grads = tape.backward(loss)?;

    let mut order: Vec<Option<Var>> = Vec::new();
    for v in &unit_vars {
        order.extend([Some(v.kernel), Some(v.gamma), Some(v.beta)]);
    }
    order.extend([Some(head_vars.novel_weight), Some(head_vars.novel_bias)]);
    order.extend([Some(head_vars.base_weight), Some(head_vars.base_bias)]);
    match proj_vars {
        Some(pv) => order.extend(pv.map(Some)),
        None => order.extend([None; 4]),
    }
    let g = take_grads(&mut grads, &order);

    let mut params: Vec<&mut [f32]> = Vec::new();
    for layer in model.layers.iter_mut() {
        if let Layer::Dual(d) = layer {
            params.push(d.novel.kernel.data_mut());
            params.push(&mut d.novel.bn.gamma);
            params.push(&mut d.novel.bn.beta);
        }
    }
    params.push(model.head.novel_weight.data_mut());
    params.push(model.head.novel_bias.data_mut());
    params.push(model.head.base_weight.data_mut());
    params.push(model.head.base_bias.data_mut());
    params.push(projection.w1.data_mut());
    params.push(projection.b1.data_mut());
    params.push(projection.w2.data_mut());
    params.push(projection.b2.data_mut());
    opt.step_slices(&mut params, &g)?;

    for (layer, s) in model.layers.iter_mut().zip(stats) {
        if let (Layer::Dual(d), Some(s)) = (layer, s) {
            d.novel.update_running_stats(&s, cfg.bn_momentum as f32);
        }
    }
    tape.value(loss).item()
}

/// Folds and merges every novel branch (IMM or AMM) and updates the gates.
pub fn merge_task(model: &mut Model) -> Result<()> {
    if model.mode() == Some(MergeMode::Aff) {
        return Err(Error::State(
            "AFF fuses features with a per-sample gate computed from the base output; \
             that product is not linear in the weights, so the branches cannot be merged"
                .into(),
        ));
    }
    model.merge()
}

/// Adds replay prototypes for the classes of the task just merged, using the
/// model's own predictions within the task's columns as labels.
pub fn extend_prototypes(model: &mut Model, data: &UnlabeledSet, task: usize) -> Result<()> {
    let cols = model.task_columns(task);
    let logits = model.logits(&data.x)?;
    let labels: Vec<usize> = (0..logits.shape()[0])
        .map(|i| {
            let row = &logits.row(i)[cols.clone()];
            pseudo_label(row, cols.start)
        })
        .collect::<Result<_>>()?;
    let keep: Vec<usize> = (0..labels.len())
        .filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() >= 2)
        .collect();
    if keep.is_empty() {
        return Ok(());
    }
    let features = model.features(&data.x.select_rows(&keep))?;
    let kept_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    let fresh = compute_prototypes(&features, &kept_labels)?;
    let mut all = model.prototypes.prototypes.clone();
    all.extend(fresh.prototypes);
    model.prototypes = PrototypeStore::new(all)?;
    Ok(())
}

/// Metrics of one novel task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub task: usize,
    /// Measured on the trained dual-branch model.
    pub pre_merge: MetricsReport,
    /// Measured on the merged single-branch model; absent in AFF mode.
    pub post_merge: Option<MetricsReport>,
    pub train: TrainLog,
}

impl TaskRecord {
    /// The report of the deployed model after this task.
    pub fn final_report(&self) -> &MetricsReport {
        self.post_merge.as_ref().unwrap_or(&self.pre_merge)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub base: MetricsReport,
    pub base_train_accuracy: f64,
    pub tasks: Vec<TaskRecord>,
    pub model: Model,
}

impl ExperimentReport {
    /// Base metrics followed by the final report of every task.
    pub fn reports(&self) -> Vec<MetricsReport> {
        std::iter::once(self.base.clone())
            .chain(self.tasks.iter().map(|t| t.final_report().clone()))
            .collect()
    }
}

/// Generates the configured synthetic stream and runs the whole experiment.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let stream = make_synthetic_stream(&StreamSpec::from_config(cfg))?;
    run_experiment_on(cfg, &stream, out)
}

/// Pretrain, then expand, train, evaluate, merge and evaluate again for
/// every novel task. With `out`, metrics files are rewritten after each task
/// and the final model is checkpointed.
pub fn run_experiment_on(cfg: &ExperimentConfig, stream: &TaskStream, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    if stream.novel.len() != cfg.novel_classes.len() {
        return Err(Error::Config(format!(
            "stream has {} novel tasks, config lists {}",
            stream.novel.len(),
            cfg.novel_classes.len()
        )));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pre = pretrain_base(cfg, &stream.base_train)?;
    let mut model = pre.model;
    let mut known = ClassMap::new();
    let mut old_test = stream.base_test.clone();
    let base = evaluate(&model, 0, &old_test, None, &known)?;
    let mut report = ExperimentReport {
        base,
        base_train_accuracy: pre.train_accuracy,
        tasks: Vec::new(),
        model: model.clone(),
    };
    write_outputs(out, &report, &model)?;

    for (i, task) in stream.novel.iter().enumerate() {
        let t = i + 1;
        expand_novel_branch(&mut model, task.train.num_classes, cfg.merge_mode, cfg)?;
        let train = train_task(&mut model, &task.train, cfg)?;
        let new = Some((&task.test, task.classes.clone()));
        let pre_merge = evaluate(&model, t, &old_test, new.clone(), &known)?;
        let post_merge = if cfg.merge_mode.is_mergeable() {
            merge_task(&mut model)?;
            extend_prototypes(&mut model, &task.train, t)?;
            Some(evaluate(&model, t, &old_test, new, &known)?)
        } else {
            None
        };
        let record = TaskRecord {
            task: t,
            pre_merge,
            post_merge,
            train,
        };
        record.final_report().record_mapping(&mut known);
        old_test = LabeledSet {
            x: Tensor::concat_rows(&[&old_test.x, &task.test.x])?,
            y: old_test.y.iter().chain(&task.test.y).copied().collect(),
        };
        report.tasks.push(record);
        report.model = model.clone();
        write_outputs(out, &report, &model)?;
    }
    Ok(report)
}

/// Scores `model` on every task its head knows about, in order, re-deriving
/// each task's Hungarian mapping from the model's current predictions.
pub fn evaluate_model(model: &Model, stream: &TaskStream) -> Result<Vec<MetricsReport>> {
    let tasks = model.class_counts.len() - 1;
    if tasks > stream.novel.len() {
        return Err(Error::invalid(
            "evaluate_model",
            format!("model has seen {tasks} novel tasks, the stream holds {}", stream.novel.len()),
        ));
    }
    let mut known = ClassMap::new();
    let mut old_test = stream.base_test.clone();
    let mut reports = vec![evaluate(model, 0, &old_test, None, &known)?];
    for (i, task) in stream.novel.iter().take(tasks).enumerate() {
        if model.task_columns(i + 1) != task.classes {
            return Err(Error::invalid(
                "evaluate_model",
                format!("task {} columns {:?} differ from stream classes {:?}", i + 1, model.task_columns(i + 1), task.classes),
            ));
        }
        let report = evaluate(model, i + 1, &old_test, Some((&task.test, task.classes.clone())), &known)?;
        report.record_mapping(&mut known);
        old_test = LabeledSet {
            x: Tensor::concat_rows(&[&old_test.x, &task.test.x])?,
            y: old_test.y.iter().chain(&task.test.y).copied().collect(),
        };
        reports.push(report);
    }
    Ok(reports)
}

/// Outcome of [`merge_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct MergeCheck {
    pub mode: MergeMode,
    /// Largest logit difference between the dual-branch and merged model.
    pub max_abs_diff: f32,
    pub backbone_params_before: usize,
    pub backbone_params_expanded: usize,
    pub backbone_params_after: usize,
}

/// Expands the untrained network of `cfg`, randomizes every novel branch
/// (kernel, running statistics and affine terms), merges, and compares
/// logits on `samples` random inputs.
pub fn merge_check(cfg: &ExperimentConfig, mode: MergeMode, samples: usize) -> Result<MergeCheck> {
    cfg.validate()?;
    let mut model = initial_network(cfg)?.fold()?;
    let before = model.backbone_param_count();
    let mut rng = stage_rng(cfg.seed, STREAM_MERGE_CHECK);
    let novel = cfg.novel_classes.first().copied().unwrap_or(1).max(1);
    model.expand(novel, mode, cfg.head_init_std, &mut rng)?;
    for layer in model.layers.iter_mut() {
        if let Layer::Dual(d) = layer {
            let c = d.novel.bn.channels();
            d.novel.kernel = Tensor::randn(d.novel.kernel.shape(), 0.3, &mut rng);
            d.novel.bn.mean = Tensor::<f32>::randn(&[c], 0.5, &mut rng).into_vec();
            d.novel.bn.var = Tensor::<f32>::uniform(&[c], 0.5, 2.0, &mut rng).into_vec();
            d.novel.bn.gamma = Tensor::<f32>::uniform(&[c], 0.5, 1.5, &mut rng).into_vec();
            d.novel.bn.beta = Tensor::<f32>::randn(&[c], 0.3, &mut rng).into_vec();
        }
    }
    let expanded = model.backbone_param_count();
    let x = Tensor::randn(&[samples.max(1), cfg.arch.input_dim()], 1.0, &mut rng);
    let dual = model.logits(&x)?;
    merge_task(&mut model)?;
    let merged = model.logits(&x)?;
    Ok(MergeCheck {
        mode,
        max_abs_diff: dual.max_abs_diff(&merged)?,
        backbone_params_before: before,
        backbone_params_expanded: expanded,
        backbone_params_after: model.backbone_param_count(),
    })
}

fn write_outputs(out: Option<&Path>, report: &ExperimentReport, model: &Model) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    let reports = report.reports();
    emit_report(&reports, &dir.join("metrics.csv"), ReportFormat::Csv)?;
    emit_report(&reports, &dir.join("metrics.md"), ReportFormat::Markdown)?;
    save_checkpoint(model, &dir.join("model.admc"))
}
