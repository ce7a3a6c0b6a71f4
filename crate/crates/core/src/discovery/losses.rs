use rand::Rng;

use super::head::{HeadVars, JointHead};
use super::mining::TripletBatch;
use super::prototypes::PrototypeStore;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters of the discovery objective.
///
/// Each term has its own multiplier so single terms can be ablated; the
/// defaults weight every term by 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights<T: Scalar = f32> {
    /// Contrastive temperature.
    pub temperature: T,
    /// Steps until the self-training weight reaches 1.
    pub rampup_length: usize,
    /// Triplet margin, used only when `hinge` is set.
    pub margin: T,
    pub hinge: bool,
    pub kd: T,
    pub contrastive: T,
    pub replay: T,
    pub triplet: T,
    pub prob_reg: T,
    pub self_train: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            temperature: T::from_f64_lossy(0.5),
            rampup_length: 50,
            margin: T::one(),
            hinge: false,
            kd: T::one(),
            contrastive: T::one(),
            replay: T::one(),
            triplet: T::one(),
            prob_reg: T::one(),
            self_train: T::one(),
        }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > T::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.rampup_length == 0 {
            return Err(Error::Config("rampup length must be positive".into()));
        }
        if !(self.margin >= T::zero()) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }

    pub fn omega(&self, step: usize) -> T {
        rampup(step, self.rampup_length)
    }
}

/// `exp(-5 (1 - min(t, T) / T)^2)`: `e^-5` at `t = 0`, 1 from `t = T` on.
pub fn rampup<T: Scalar>(t: usize, length: usize) -> T {
    if length == 0 {
        return T::one();
    }
    let phase = 1.0 - t.min(length) as f64 / length as f64;
    T::from_f64_lossy((-5.0 * phase * phase).exp())
}

/// Individual loss values (or tape handles) of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<V> {
    pub kd: Option<V>,
    pub contrastive: Option<V>,
    pub replay: Option<V>,
    pub triplet: Option<V>,
    pub prob_reg: Option<V>,
    pub self_train: Option<V>,
}

impl<V> Default for LossParts<V> {
    fn default() -> Self {
        Self {
            kd: None,
            contrastive: None,
            replay: None,
            triplet: None,
            prob_reg: None,
            self_train: None,
        }
    }
}

impl<V: Copy> LossParts<V> {
    fn weighted<T: Scalar>(&self, w: &LossWeights<T>, step: usize) -> [(Option<V>, T); 6] {
        [
            (self.kd, w.kd),
            (self.contrastive, w.contrastive),
            (self.replay, w.replay),
            (self.triplet, w.triplet),
            (self.prob_reg, w.prob_reg),
            (self.self_train, w.self_train * w.omega(step)),
        ]
    }
}

/// `L = (L_kd + L_con) + (L_replay + L_triplet + L_reg + omega(t) L_self)`,
/// each term scaled by its multiplier. Missing parts count as zero.
pub fn total_loss<T: Scalar>(parts: &LossParts<T>, weights: &LossWeights<T>, step: usize) -> T {
    parts
        .weighted(weights, step)
        .iter()
        .filter_map(|&(v, w)| v.map(|v| v * w))
        .fold(T::zero(), |a, b| a + b)
}

/// Tape form of [`total_loss`]. Terms with a zero multiplier are left out of
/// the graph entirely.
pub fn total_loss_on<T: Scalar>(tape: &mut Tape<T>, parts: &LossParts<Var>, weights: &LossWeights<T>, step: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, w) in parts.weighted(weights, step) {
        let Some(v) = v else { continue };
        if w == T::zero() {
            continue;
        }
        let term = tape.scale(v, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

fn batch_rows<T: Scalar>(tape: &Tape<T>, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [n, k] => Ok((n, k)),
        _ => Err(Error::shape(op, "rank", 2, tape.shape(v).len())),
    }
}

/// Mean over `i` of `-log(exp(z_i . zh_i / tau) / sum_j exp(z_i . zh_j / tau))`
/// with both inputs normalized to unit rows. The sum runs over every row of `zh`.
pub fn contrastive_loss_on<T: Scalar>(tape: &mut Tape<T>, z: Var, z_hat: Var, temperature: T) -> Result<Var> {
    let (n, d) = batch_rows(tape, z, "contrastive_loss")?;
    let (m, dh) = batch_rows(tape, z_hat, "contrastive_loss")?;
    if (m, dh) != (n, d) {
        return Err(Error::shape("contrastive_loss", "rows", n, m));
    }
    if n < 2 {
        return Err(Error::invalid("contrastive_loss", "batch needs at least 2 rows for a negative"));
    }
    if !(temperature > T::zero()) {
        return Err(Error::invalid("contrastive_loss", "temperature must be positive"));
    }
    let zn = tape.l2_normalize_rows(z)?;
    let zhn = tape.l2_normalize_rows(z_hat)?;
    let sim = tape.matmul_t(zn, zhn)?;
    let sim = tape.scale(sim, T::one() / temperature);
    let log_p = tape.log_softmax_rows(sim)?;
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick_cols(log_p, &diag)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -T::one()))
}

pub fn contrastive_loss<T: Scalar>(z: &Tensor<T>, z_hat: &Tensor<T>, temperature: T) -> Result<T> {
    eval2(z, z_hat, |tape, a, b| contrastive_loss_on(tape, a, b, temperature))
}

/// Mean Euclidean distance between matching rows.
pub fn kd_loss_on<T: Scalar>(tape: &mut Tape<T>, base_features: Var, novel_features: Var) -> Result<Var> {
    let diff = tape.sub(base_features, novel_features)?;
    batch_rows(tape, diff, "kd_loss")?;
    let norms = tape.row_norms(diff)?;
    tape.mean(norms)
}

pub fn kd_loss<T: Scalar>(base_features: &Tensor<T>, novel_features: &Tensor<T>) -> Result<T> {
    eval2(base_features, novel_features, kd_loss_on)
}

/// `num_base + argmax(novel_logits)`, ties to the lowest index.
pub fn pseudo_label<T: Scalar>(novel_logits: &[T], num_base: usize) -> Result<usize> {
    if novel_logits.is_empty() {
        return Err(Error::invalid("pseudo_label", "no novel logits"));
    }
    let mut best = 0;
    for (k, &v) in novel_logits.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NonFinite { op: "pseudo_label" });
        }
        if v > novel_logits[best] {
            best = k;
        }
    }
    Ok(num_base + best)
}

/// Cross-entropy against the pseudo labels, scaled by `1 / num_classes`.
pub fn self_train_loss_on<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, k) = batch_rows(tape, logits, "self_train_loss")?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("self_train_loss", format!("label {bad} outside 0..{k}")));
    }
    let log_p = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_cols(log_p, labels)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -T::one() / T::from_usize_lossy(k)))
}

pub fn self_train_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    eval1(logits, |tape, l| self_train_loss_on(tape, l, labels))
}

/// Per row `(1/K) |s(a) - s(p)|^2 - (1/K) |s(a) - s(n)|^2` with `s` the row
/// softmax, averaged over rows. With `hinge_margin = Some(m)` each row is
/// replaced by `max(0, pos - neg + m)`.
pub fn triplet_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    hinge_margin: Option<T>,
) -> Result<Var> {
    let (_, k) = batch_rows(tape, anchor, "triplet_loss")?;
    let sa = tape.softmax_rows(anchor)?;
    let sp = tape.softmax_rows(positive)?;
    let sn = tape.softmax_rows(negative)?;
    let inv_k = T::one() / T::from_usize_lossy(k);
    let dp = tape.sub(sa, sp)?;
    let dp = tape.square(dp);
    let pos = tape.sum_cols(dp)?;
    let dn = tape.sub(sa, sn)?;
    let dn = tape.square(dn);
    let neg = tape.sum_cols(dn)?;
    let rows = tape.sub(pos, neg)?;
    let mut rows = tape.scale(rows, inv_k);
    if let Some(m) = hinge_margin {
        let shifted = tape.add_scalar(rows, m);
        rows = tape.relu(shifted);
    }
    tape.mean(rows)
}

pub fn triplet_loss<T: Scalar>(batch: &TripletBatch<T>, hinge_margin: Option<T>) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(batch.anchor.clone());
    let p = tape.constant(batch.positive.clone());
    let n = tape.constant(batch.negative.clone());
    let out = triplet_loss_on(&mut tape, a, p, n, hinge_margin)?;
    tape.value(out).item()
}

/// Negative entropy of the batch-mean distribution, `sum_k pbar_k log pbar_k`.
/// Minimizing it spreads predictions across the novel classes.
pub fn prob_regularization_on<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<Var> {
    batch_rows(tape, probs, "prob_regularization")?;
    let mean = tape.mean_rows(probs)?;
    let log_mean = tape.log_clamped(mean, T::min_positive_value());
    let plogp = tape.mul(mean, log_mean)?;
    Ok(tape.sum(plogp))
}

pub fn prob_regularization<T: Scalar>(probs: &Tensor<T>) -> Result<T> {
    if probs.rank() != 2 {
        return Err(Error::shape("prob_regularization", "rank", 2, probs.rank()));
    }
    let tol = T::epsilon().sqrt() * T::from_f64_lossy(10.0);
    for i in 0..probs.shape()[0] {
        let row = probs.row(i);
        let total: T = row.iter().copied().sum();
        if (total - T::one()).abs() > tol || row.iter().any(|&p| !(p >= T::zero())) {
            return Err(Error::invalid(
                "prob_regularization",
                format!("row {i} is not a probability vector (sums to {total})"),
            ));
        }
    }
    eval1(probs, prob_regularization_on)
}

/// Cross-entropy of the joint head on features sampled from the base-class
/// prototypes, averaged over all draws. `features` and `labels` come from
/// [`PrototypeStore::sample`].
pub fn feature_replay_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    head: &JointHead<T>,
    vars: HeadVars,
    features: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = head.forward_on_tape(tape, features, vars)?;
    let log_p = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_cols(log_p, labels)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -T::one()))
}

pub fn feature_replay_loss<T: Scalar, R: Rng + ?Sized>(
    head: &JointHead<T>,
    store: &PrototypeStore<T>,
    per_class: usize,
    rng: &mut R,
) -> Result<T> {
    if per_class == 0 {
        return Err(Error::invalid("feature_replay_loss", "need at least one draw per class"));
    }
    let (samples, labels) = store.sample(per_class, rng)?;
    if store.feature_dim() != head.feature_dim() {
        return Err(Error::shape("feature_replay_loss", "feature width", head.feature_dim(), store.feature_dim()));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= head.num_base()) {
        return Err(Error::invalid("feature_replay_loss", format!("class {c} has no base column")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(samples);
    let vars = head.register(&mut tape, false, false);
    let out = feature_replay_loss_on(&mut tape, head, vars, x, &labels)?;
    tape.value(out).item()
}

fn eval1<T: Scalar>(a: &Tensor<T>, f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>) -> Result<T> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let out = f(&mut tape, av)?;
    tape.value(out).item()
}

fn eval2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>) -> Result<T> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let out = f(&mut tape, av, bv)?;
    tape.value(out).item()
}
