//! Structural re-parameterization of convolution branches.
//!
//! A [`ConvBnUnit`] (convolution followed by batch norm) folds into a single
//! biased convolution, a [`FoldedConv`]. During a novel task the frozen base
//! convolution is paired with a trainable novel unit in a [`DualBranchLayer`]:
//!
//! * IMM: `f_b(x) + f_n(x)`
//! * AFF: `f_b(x) + G(-f_b(x)) * f_n(x)` (sample dependent, not mergeable)
//! * AMM: `f_b(x) + G(-gamma_b) * f_n(x)` with one gate per output channel
//!
//! where `G` is the logistic function. IMM and AMM collapse back into one
//! convolution because convolution is linear in its kernel and bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, sigmoid, BnParams, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// How the novel branch output is combined with the base branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MergeMode {
    Imm,
    Aff,
    Amm,
}

impl MergeMode {
    pub fn is_mergeable(self) -> bool {
        !matches!(self, MergeMode::Aff)
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Imm => "imm",
            MergeMode::Aff => "aff",
            MergeMode::Amm => "amm",
        })
    }
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "imm" => Ok(MergeMode::Imm),
            "aff" => Ok(MergeMode::Aff),
            "amm" => Ok(MergeMode::Amm),
            other => Err(Error::invalid("merge_mode", format!("unknown mode `{other}` (expected imm, aff or amm)"))),
        }
    }
}

/// Batch-norm behaviour during a forward pass on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize with mini-batch statistics.
    Train,
    /// Normalize with the stored running statistics.
    Infer,
}

/// Tape handles for the trainable tensors of a [`ConvBnUnit`].
#[derive(Clone, Copy, Debug)]
pub struct UnitVars {
    pub kernel: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Batch statistics observed in a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// A bias-free convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnUnit<T: Scalar = f32> {
    pub spec: ConvSpec,
    pub kernel: Tensor<T>,
    pub bn: BnParams<T>,
}

impl<T: Scalar> ConvBnUnit<T> {
    pub fn new(spec: ConvSpec, kernel: Tensor<T>, bn: BnParams<T>) -> Result<Self> {
        let unit = Self { spec, kernel, bn };
        unit.validate()?;
        Ok(unit)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        ops::check_kernel(&self.kernel, &self.spec)?;
        self.bn.validate()?;
        if self.bn.channels() != self.spec.out_channels {
            return Err(Error::shape(
                "conv_bn_unit",
                "bn channels",
                self.spec.out_channels,
                self.bn.channels(),
            ));
        }
        Ok(())
    }

    /// He-normal kernel with identity batch norm, used for base networks.
    pub fn he_init<R: Rng + ?Sized>(spec: ConvSpec, eps: T, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel_height * spec.kernel_width;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            spec,
            kernel: Tensor::randn(&spec.kernel_shape(), std, rng),
            bn: BnParams::identity(spec.out_channels, eps),
        }
    }

    /// Novel-branch initialization: kernel entries drawn from
    /// `N(0, (0.01 / sqrt(fan_in))^2)`, `gamma = 1`, `beta = 0`.
    pub fn novel_init<R: Rng + ?Sized>(spec: ConvSpec, eps: T, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel_height * spec.kernel_width;
        let std = 0.01 / (fan_in as f64).sqrt();
        Self {
            spec,
            kernel: Tensor::randn(&spec.kernel_shape(), std, rng),
            bn: BnParams::identity(spec.out_channels, eps),
        }
    }

    /// All-zero kernel, scale and offset: contributes nothing to any output.
    pub fn zeroed(spec: ConvSpec, eps: T) -> Self {
        let mut bn = BnParams::identity(spec.out_channels, eps);
        bn.gamma.fill(T::zero());
        Self {
            spec,
            kernel: Tensor::zeros(&spec.kernel_shape()),
            bn,
        }
    }

    /// Trainable entries: kernel, scale and offset (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.kernel.numel() + 2 * self.spec.out_channels
    }

    /// Inference forward: `BN(conv(x, W))` with running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let zero = vec![T::zero(); self.spec.out_channels];
        let y = ops::conv2d(x, &self.kernel, &zero, &self.spec)?;
        ops::batchnorm_infer(&y, &self.bn)
    }

    /// Registers kernel, scale and offset on the tape.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> UnitVars {
        UnitVars {
            kernel: tape.leaf(self.kernel.clone(), trainable),
            gamma: tape.leaf(Tensor::from_vec(&[self.bn.channels()], self.bn.gamma.clone()).expect("channel count"), trainable),
            beta: tape.leaf(Tensor::from_vec(&[self.bn.channels()], self.bn.beta.clone()).expect("channel count"), trainable),
        }
    }

    /// Forward on the tape using the registered `vars`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        vars: UnitVars,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let y = tape.conv2d(x, vars.kernel, None, self.spec)?;
        match mode {
            BnMode::Train => {
                let count = tape.value(y).numel() / self.spec.out_channels;
                let (out, mean, var) = tape.batch_norm_train(y, vars.gamma, vars.beta, self.bn.eps)?;
                Ok((out, Some(BatchStats { mean, var, count })))
            }
            BnMode::Infer => {
                let out = tape.batch_norm_fixed(y, vars.gamma, vars.beta, &self.bn.mean, &self.bn.var, self.bn.eps)?;
                Ok((out, None))
            }
        }
    }

    /// Exponential moving update of the running statistics. The stored
    /// variance uses the unbiased batch estimate.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>, momentum: T) {
        let unbias = if stats.count > 1 {
            T::from_usize_lossy(stats.count) / T::from_usize_lossy(stats.count - 1)
        } else {
            T::one()
        };
        let keep = T::one() - momentum;
        for c in 0..self.bn.channels() {
            self.bn.mean[c] = keep * self.bn.mean[c] + momentum * stats.mean[c];
            self.bn.var[c] = keep * self.bn.var[c] + momentum * stats.var[c] * unbias;
        }
    }
}

/// A single biased convolution: the mergeable canonical form.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedConv<T: Scalar = f32> {
    pub spec: ConvSpec,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> FoldedConv<T> {
    pub fn new(spec: ConvSpec, kernel: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        spec.validate()?;
        ops::check_kernel(&kernel, &spec)?;
        if bias.len() != spec.out_channels {
            return Err(Error::shape("folded_conv", "bias length", spec.out_channels, bias.len()));
        }
        Ok(Self { spec, kernel, bias })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.kernel, &self.bias, &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.len()
    }

    /// Forward on the tape with kernel and bias as constants.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = tape.constant(self.kernel.clone());
        let b = tape.constant(Tensor::from_vec(&[self.bias.len()], self.bias.clone())?);
        tape.conv2d(x, k, Some(b), self.spec)
    }

    fn check_same_geometry(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::invalid(
                op,
                format!("branch geometry differs: {:?} vs {:?}", self.spec, other.spec),
            ));
        }
        self.kernel.expect_same_shape(&other.kernel, op)?;
        if self.bias.len() != other.bias.len() {
            return Err(Error::shape(op, "bias length", self.bias.len(), other.bias.len()));
        }
        Ok(())
    }
}

/// Folds batch norm into the preceding convolution:
/// `W' = gamma / sqrt(var + eps) * W` and `B' = beta - gamma * mean / sqrt(var + eps)`
/// per output channel.
pub fn fold_conv_bn<T: Scalar>(unit: &ConvBnUnit<T>) -> Result<FoldedConv<T>> {
    unit.validate()?;
    let scale: Vec<T> = unit
        .bn
        .inv_std()
        .iter()
        .zip(&unit.bn.gamma)
        .map(|(&s, &g)| s * g)
        .collect();
    let per_out = unit.kernel.numel() / unit.spec.out_channels;
    let mut kernel = unit.kernel.clone();
    for (i, w) in kernel.data_mut().iter_mut().enumerate() {
        *w = *w * scale[i / per_out];
    }
    let bias = (0..unit.spec.out_channels)
        .map(|c| unit.bn.beta[c] - unit.bn.mean[c] * scale[c])
        .collect();
    FoldedConv::new(unit.spec, kernel, bias)
}

/// `G(-gamma)` per channel.
pub fn amm_gate<T: Scalar>(gamma: &[T]) -> Vec<T> {
    gamma.iter().map(|&g| sigmoid(-g)).collect()
}

/// Additive merge: `W' = W'_b + W'_n`, `B' = B'_b + B'_n`.
pub fn imm_merge<T: Scalar>(base: &FoldedConv<T>, novel: &FoldedConv<T>) -> Result<FoldedConv<T>> {
    let ones = vec![T::one(); base.spec.out_channels];
    weighted_merge(base, novel, &ones, "imm_merge")
}

/// Gated merge: `W' = W'_b + G(-gamma_b) * W'_n`, `B' = B'_b + G(-gamma_b) * B'_n`.
pub fn amm_merge<T: Scalar>(base: &FoldedConv<T>, novel: &FoldedConv<T>, gamma_b: &[T]) -> Result<FoldedConv<T>> {
    if gamma_b.len() != base.spec.out_channels {
        return Err(Error::shape("amm_merge", "gate length", base.spec.out_channels, gamma_b.len()));
    }
    weighted_merge(base, novel, &amm_gate(gamma_b), "amm_merge")
}

fn weighted_merge<T: Scalar>(
    base: &FoldedConv<T>,
    novel: &FoldedConv<T>,
    weight: &[T],
    op: &'static str,
) -> Result<FoldedConv<T>> {
    base.check_same_geometry(novel, op)?;
    let per_out = base.kernel.numel() / base.spec.out_channels;
    let mut kernel = base.kernel.clone();
    for (i, (w, &n)) in kernel.data_mut().iter_mut().zip(novel.kernel.data()).enumerate() {
        *w = *w + weight[i / per_out] * n;
    }
    let bias = base
        .bias
        .iter()
        .zip(&novel.bias)
        .zip(weight)
        .map(|((&b, &n), &g)| b + g * n)
        .collect();
    FoldedConv::new(base.spec, kernel, bias)
}

/// Carries the gate vector into the next task: `gamma' = gamma_b + G(-gamma_b) * gamma_n`.
pub fn gamma_update<T: Scalar>(gamma_b: &[T], gamma_n: &[T]) -> Result<Vec<T>> {
    if gamma_b.len() != gamma_n.len() {
        return Err(Error::shape("gamma_update", "gate length", gamma_b.len(), gamma_n.len()));
    }
    Ok(gamma_b
        .iter()
        .zip(gamma_n)
        .map(|(&b, &n)| b + sigmoid(-b) * n)
        .collect())
}

/// A frozen base convolution paired with a trainable novel unit.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchLayer<T: Scalar = f32> {
    pub base: FoldedConv<T>,
    pub novel: ConvBnUnit<T>,
    pub gate_gamma: Vec<T>,
    pub mode: MergeMode,
}

impl<T: Scalar> DualBranchLayer<T> {
    pub fn new(base: FoldedConv<T>, novel: ConvBnUnit<T>, gate_gamma: Vec<T>, mode: MergeMode) -> Result<Self> {
        let layer = Self {
            base,
            novel,
            gate_gamma,
            mode,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        self.novel.validate()?;
        if self.base.spec != self.novel.spec {
            return Err(Error::invalid(
                "dual_branch_layer",
                format!(
                    "novel branch geometry {:?} must mirror base {:?}",
                    self.novel.spec, self.base.spec
                ),
            ));
        }
        if self.gate_gamma.len() != self.base.spec.out_channels {
            return Err(Error::shape(
                "dual_branch_layer",
                "gate length",
                self.base.spec.out_channels,
                self.gate_gamma.len(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> ConvSpec {
        self.base.spec
    }

    /// Base branch output `f_b(x)`.
    pub fn base_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.base.forward(x)
    }

    /// Ungated novel branch output `f_n(x)`, with running statistics.
    pub fn novel_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.novel.forward(x)
    }

    /// The novel branch's contribution to the layer output for this mode.
    pub fn novel_contribution(&self, x: &Tensor<T>, base_out: &Tensor<T>) -> Result<Tensor<T>> {
        let fn_ = self.novel_forward(x)?;
        match self.mode {
            MergeMode::Imm => Ok(fn_),
            MergeMode::Amm => {
                let zeros = vec![T::zero(); self.gate_gamma.len()];
                ops::channel_affine(&fn_, &amm_gate(&self.gate_gamma), &zeros, "amm_forward")
            }
            MergeMode::Aff => {
                let gate = ops::sigmoid_gate(&base_out.scale(-T::one()));
                gate.zip_map(&fn_, "aff_forward", |g, n| g * n)
            }
        }
    }

    /// Inference forward in the layer's own mode.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let fb = self.base_forward(x)?;
        let contribution = self.novel_contribution(x, &fb)?;
        fb.add(&contribution)
    }

    /// Forward on the tape: the base branch and every gate are constants, the
    /// novel branch uses `vars`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        vars: UnitVars,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let fb = self.base.forward_on_tape(tape, x)?;
        let (fn_, stats) = self.novel.forward_on_tape(tape, x, vars, mode)?;
        let contribution = match self.mode {
            MergeMode::Imm => fn_,
            MergeMode::Amm => tape.channel_scale(fn_, amm_gate(&self.gate_gamma))?,
            MergeMode::Aff => {
                let gate = ops::sigmoid_gate(&tape.value(fb).scale(-T::one()));
                tape.mul_const(fn_, gate)?
            }
        };
        Ok((tape.add(fb, contribution)?, stats))
    }

    /// Folds the novel unit and merges it into the base. Returns the merged
    /// convolution and the gate vector for the next task.
    pub fn merge(&self) -> Result<(FoldedConv<T>, Vec<T>)> {
        let novel = fold_conv_bn(&self.novel)?;
        let merged = match self.mode {
            MergeMode::Imm => imm_merge(&self.base, &novel)?,
            MergeMode::Amm => amm_merge(&self.base, &novel, &self.gate_gamma)?,
            MergeMode::Aff => {
                return Err(Error::State(
                    "AFF gates each sample by its own base activations, so the branches \
                     cannot be folded into one convolution"
                        .into(),
                ))
            }
        };
        let gamma = gamma_update(&self.gate_gamma, &self.novel.bn.gamma)?;
        Ok((merged, gamma))
    }
}

fn expect_mode<T: Scalar>(layer: &DualBranchLayer<T>, mode: MergeMode, op: &'static str) -> Result<()> {
    if layer.mode != mode {
        return Err(Error::invalid(op, format!("layer is in {} mode", layer.mode)));
    }
    Ok(())
}

/// `f_b(x) + BN(conv(x, W_n))`.
pub fn imm_forward<T: Scalar>(x: &Tensor<T>, layer: &DualBranchLayer<T>) -> Result<Tensor<T>> {
    expect_mode(layer, MergeMode::Imm, "imm_forward")?;
    layer.forward(x)
}

/// `f_b(x) + G(-f_b(x)) * f_n(x)`.
pub fn aff_forward<T: Scalar>(x: &Tensor<T>, layer: &DualBranchLayer<T>) -> Result<Tensor<T>> {
    expect_mode(layer, MergeMode::Aff, "aff_forward")?;
    layer.forward(x)
}

/// `f_b(x) + G(-gamma_b) * f_n(x)`.
pub fn amm_forward<T: Scalar>(x: &Tensor<T>, layer: &DualBranchLayer<T>) -> Result<Tensor<T>> {
    expect_mode(layer, MergeMode::Amm, "amm_forward")?;
    layer.forward(x)
}
