//! Central finite-difference checks against the tape's reverse pass.
//!
//! A probe owns its data in f64 and rebuilds the same scalar function at any
//! precision. The single-precision check runs the analytic pass in f32 and
//! differentiates the f64 evaluation at the f32-rounded inputs, so the
//! reference is not swamped by f32 cancellation in the difference quotient.

use adm_core::discovery::{
    contrastive_loss_on, feature_replay_loss_on, kd_loss_on, prob_regularization_on, self_train_loss_on,
    triplet_loss_on, HeadVars, JointHead,
};
use adm_core::reparam::{BnMode, UnitVars};
use adm_core::{BnParams, ConvBnUnit, ConvSpec, DualBranchLayer, FoldedConv, MergeMode, Scalar, Tape, Tensor, Var};
use rand::Rng;

pub trait Probe {
    /// The differentiated inputs.
    fn inputs(&self) -> Vec<Tensor<f64>>;
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var]) -> Var;
}

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

fn value<P: Probe>(p: &P, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = p.loss(&mut tape, &vars);
    tape.value(l).item().unwrap()
}

fn analytic<T: Scalar, P: Probe>(p: &P, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast::<T>())).collect();
    let l = p.loss(&mut tape, &vars);
    let grads = tape.backward(l).unwrap();
    vars.iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v)).cast::<f64>())
        .collect()
}

fn central_differences<P: Probe>(p: &P, inputs: &[Tensor<f64>], step: f64) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Tensor::<f64>::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = value(p, &work);
            work[i].data_mut()[j] = orig - step;
            let down = value(p, &work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `||a - n|| / max(||a||, ||n||)` over all inputs together.
pub fn relative_error(a: &[Tensor<f64>], n: &[Tensor<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (x, y) in a.iter().zip(n) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nn += v * v;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Relative error of the analytic gradient at precision `T`.
pub fn gradient_error<T: Scalar, P: Probe>(p: &P) -> f64 {
    let inputs: Vec<Tensor<f64>> = p.inputs().iter().map(|t| t.cast::<T>().cast::<f64>()).collect();
    let step = if std::mem::size_of::<T>() == 4 { 1e-3 } else { 1e-6 };
    relative_error(&analytic::<T, P>(p, &inputs), &central_differences(p, &inputs, step))
}

fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

pub struct Contrastive {
    pub z: Tensor<f64>,
    pub z_hat: Tensor<f64>,
    pub temperature: f64,
}

impl Contrastive {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(2..=5);
        Self {
            z: randn(&[n, d], 1.0, rng),
            z_hat: randn(&[n, d], 1.0, rng),
            temperature: rng.random_range(0.3..1.0),
        }
    }
}

impl Probe for Contrastive {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.z.clone(), self.z_hat.clone()]
    }
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        contrastive_loss_on(tape, v[0], v[1], T::from_f64_lossy(self.temperature)).unwrap()
    }
}

pub struct Kd {
    pub base: Tensor<f64>,
    pub novel: Tensor<f64>,
}

impl Kd {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=6);
        Self {
            base: randn(&[n, d], 1.0, rng),
            novel: randn(&[n, d], 1.0, rng),
        }
    }
}

impl Probe for Kd {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.base.clone(), self.novel.clone()]
    }
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        kd_loss_on(tape, v[0], v[1]).unwrap()
    }
}

pub struct SelfTrain {
    pub logits: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl SelfTrain {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(2..=10);
        Self {
            logits: randn(&[n, k], 2.0, rng),
            labels: (0..n).map(|_| rng.random_range(0..k)).collect(),
        }
    }
}

impl Probe for SelfTrain {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.logits.clone()]
    }
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        self_train_loss_on(tape, v[0], &self.labels).unwrap()
    }
}

/// Anchor, positive and negative rows gathered from one logit matrix, as in
/// training; with `columns` set only that slice is compared.
pub struct Triplet {
    pub logits: Tensor<f64>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub columns: Option<(usize, usize)>,
}

impl Triplet {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(3..=8);
        let k = rng.random_range(2..=8);
        let features = randn(&[n, 4], 1.0, rng);
        let (positives, negatives) = adm_core::discovery::mine_triplet_indices(&features).unwrap();
        let columns = (k > 2 && rng.random_bool(0.5)).then(|| (rng.random_range(0..k - 1), k));
        Self {
            logits: randn(&[n, k], 1.5, rng),
            positives,
            negatives,
            columns,
        }
    }
}

impl Probe for Triplet {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.logits.clone()]
    }
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let mut a = v[0];
        let mut p = tape.gather_rows(a, &self.positives).unwrap();
        let mut n = tape.gather_rows(a, &self.negatives).unwrap();
        if let Some((lo, hi)) = self.columns {
            a = tape.slice_cols(a, lo, hi).unwrap();
            p = tape.slice_cols(p, lo, hi).unwrap();
            n = tape.slice_cols(n, lo, hi).unwrap();
        }
        triplet_loss_on(tape, a, p, n, None).unwrap()
    }
}

/// The regularizer applied to the softmax of free logits.
pub struct ProbReg {
    pub logits: Tensor<f64>,
}

impl ProbReg {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(2..=6);
        Self {
            logits: randn(&[n, k], 1.5, rng),
        }
    }
}

impl Probe for ProbReg {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.logits.clone()]
    }
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let p = tape.softmax_rows(v[0]).unwrap();
        prob_regularization_on(tape, p).unwrap()
    }
}

/// Replay cross-entropy with respect to all four head tensors.
pub struct Replay {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub head: [Tensor<f64>; 4],
}

impl Replay {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let base = rng.random_range(2..=5);
        let novel = rng.random_range(0..=4);
        let d = rng.random_range(2..=6);
        let n = rng.random_range(2..=10);
        Self {
            features: randn(&[n, d], 1.0, rng),
            labels: (0..n).map(|_| rng.random_range(0..base)).collect(),
            head: [
                randn(&[base, d], 0.7, rng),
                randn(&[base], 0.3, rng),
                randn(&[novel, d], 0.7, rng),
                randn(&[novel], 0.3, rng),
            ],
        }
    }
}

impl Probe for Replay {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.head.to_vec()
    }
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let [bw, bb, nw, nb] = &self.head;
        let head = JointHead::new(bw.cast::<T>(), bb.cast::<T>(), nw.cast::<T>(), nb.cast::<T>()).unwrap();
        let vars = HeadVars {
            base_weight: v[0],
            base_bias: v[1],
            novel_weight: v[2],
            novel_bias: v[3],
        };
        let z = tape.constant(self.features.cast::<T>());
        feature_replay_loss_on(tape, &head, vars, z, &self.labels).unwrap()
    }
}

/// A dual-branch layer forward contracted with fixed random weights. The
/// novel kernel, scale and offset are differentiated, plus the input for AMM
/// (the AFF gate is computed from the input and treated as a constant, so the
/// input is held fixed there).
pub struct Gated {
    pub mode: MergeMode,
    pub bn_mode: BnMode,
    pub spec: ConvSpec,
    pub x: Tensor<f64>,
    pub base_kernel: Tensor<f64>,
    pub base_bias: Vec<f64>,
    pub novel_kernel: Tensor<f64>,
    pub gamma: Tensor<f64>,
    pub beta: Tensor<f64>,
    pub running: (Vec<f64>, Vec<f64>),
    pub gate_gamma: Vec<f64>,
    pub weights: Tensor<f64>,
}

impl Gated {
    pub fn random<R: Rng>(mode: MergeMode, rng: &mut R) -> Self {
        let spec = ConvSpec::new(rng.random_range(1..=3), rng.random_range(1..=3), 3, 1, 1).unwrap();
        let n = rng.random_range(2..=3);
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let o = spec.out_channels;
        let kshape = spec.kernel_shape();
        let bn_mode = if rng.random_bool(0.5) { BnMode::Train } else { BnMode::Infer };
        Self {
            mode,
            bn_mode,
            spec,
            x: randn(&[n, spec.in_channels, h, w], 1.0, rng),
            base_kernel: randn(&kshape, 0.5, rng),
            base_bias: (0..o).map(|_| rng.random_range(-0.5..0.5)).collect(),
            novel_kernel: randn(&kshape, 0.5, rng),
            gamma: Tensor::uniform(&[o], 0.5, 1.5, rng),
            beta: randn(&[o], 0.3, rng),
            running: (
                (0..o).map(|_| rng.random_range(-0.5..0.5)).collect(),
                (0..o).map(|_| rng.random_range(0.5..2.0)).collect(),
            ),
            gate_gamma: (0..o).map(|_| rng.random_range(-2.0..2.0)).collect(),
            weights: randn(&[n, o, h, w], 1.0, rng),
        }
    }

    fn differentiates_input(&self) -> bool {
        self.mode != MergeMode::Aff
    }
}

impl Probe for Gated {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut v = Vec::new();
        if self.differentiates_input() {
            v.push(self.x.clone());
        }
        v.extend([self.novel_kernel.clone(), self.gamma.clone(), self.beta.clone()]);
        v
    }

    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let (x, rest) = if self.differentiates_input() {
            (v[0], &v[1..])
        } else {
            (tape.constant(self.x.cast::<T>()), v)
        };
        let base = FoldedConv::new(self.spec, self.base_kernel.cast::<T>(), cast(&self.base_bias)).unwrap();
        let bn = BnParams::new(
            cast(&self.running.0),
            cast(&self.running.1),
            cast(self.gamma.data()),
            cast(self.beta.data()),
            T::from_f64_lossy(1e-5),
        )
        .unwrap();
        let novel = ConvBnUnit::new(self.spec, self.novel_kernel.cast::<T>(), bn).unwrap();
        let layer = DualBranchLayer::new(base, novel, cast(&self.gate_gamma), self.mode).unwrap();
        let vars = UnitVars {
            kernel: rest[0],
            gamma: rest[1],
            beta: rest[2],
        };
        let (out, _) = layer.forward_on_tape(tape, x, vars, self.bn_mode).unwrap();
        let weighted = tape.mul_const(out, self.weights.cast::<T>()).unwrap();
        tape.sum(weighted)
    }
}
