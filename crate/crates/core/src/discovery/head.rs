use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One task-agnostic classifier over base and novel classes.
///
/// Logits are `[base | novel]`: columns `0..num_base` score base classes and
/// the remaining columns score the novel classes discovered so far.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHead<T: Scalar = f32> {
    /// `[num_base, feature_dim]`
    pub base_weight: Tensor<T>,
    pub base_bias: Tensor<T>,
    /// `[num_novel, feature_dim]`
    pub novel_weight: Tensor<T>,
    pub novel_bias: Tensor<T>,
}

/// Tape handles of a registered [`JointHead`].
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub base_weight: Var,
    pub base_bias: Var,
    pub novel_weight: Var,
    pub novel_bias: Var,
}

impl<T: Scalar> JointHead<T> {
    pub fn new(base_weight: Tensor<T>, base_bias: Tensor<T>, novel_weight: Tensor<T>, novel_bias: Tensor<T>) -> Result<Self> {
        let head = Self {
            base_weight,
            base_bias,
            novel_weight,
            novel_bias,
        };
        head.validate()?;
        Ok(head)
    }

    /// A head with only base columns, weights drawn from `N(0, 1/feature_dim)`.
    pub fn init_base<R: Rng + ?Sized>(feature_dim: usize, num_base: usize, rng: &mut R) -> Self {
        let std = 1.0 / (feature_dim as f64).sqrt();
        Self {
            base_weight: Tensor::randn(&[num_base, feature_dim], std, rng),
            base_bias: Tensor::zeros(&[num_base]),
            novel_weight: Tensor::zeros(&[0, feature_dim]),
            novel_bias: Tensor::zeros(&[0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        for (name, w, b) in [
            ("base", &self.base_weight, &self.base_bias),
            ("novel", &self.novel_weight, &self.novel_bias),
        ] {
            if w.rank() != 2 {
                return Err(Error::shape("joint_head", format!("{name} weight rank"), 2, w.rank()));
            }
            if w.shape()[1] != d {
                return Err(Error::shape("joint_head", format!("{name} feature width"), d, w.shape()[1]));
            }
            if b.shape() != [w.shape()[0]] {
                return Err(Error::shape("joint_head", format!("{name} bias length"), w.shape()[0], b.numel()));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.base_weight.shape()[1]
    }

    pub fn num_base(&self) -> usize {
        self.base_weight.shape()[0]
    }

    pub fn num_novel(&self) -> usize {
        self.novel_weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.num_base() + self.num_novel()
    }

    pub fn param_count(&self) -> usize {
        self.base_weight.numel() + self.base_bias.numel() + self.novel_weight.numel() + self.novel_bias.numel()
    }

    /// Appends `count` novel columns with weights from `N(0, std^2)` and zero bias.
    pub fn add_novel_columns<R: Rng + ?Sized>(&mut self, count: usize, std: f64, rng: &mut R) -> Result<()> {
        let d = self.feature_dim();
        let fresh = Tensor::randn(&[count, d], std, rng);
        let weight = if self.num_novel() == 0 {
            fresh
        } else {
            Tensor::concat_rows(&[&self.novel_weight, &fresh])?
        };
        let mut bias = self.novel_bias.clone().into_vec();
        bias.extend(std::iter::repeat_n(T::zero(), count));
        self.novel_bias = Tensor::from_vec(&[bias.len()], bias)?;
        self.novel_weight = weight;
        Ok(())
    }

    /// Moves every novel column into the base block, so the classes they
    /// score count as known from now on.
    pub fn absorb_novel(&mut self) -> Result<()> {
        if self.num_novel() == 0 {
            return Ok(());
        }
        self.base_weight = Tensor::concat_rows(&[&self.base_weight, &self.novel_weight])?;
        let mut bias = self.base_bias.clone().into_vec();
        bias.extend_from_slice(self.novel_bias.data());
        self.base_bias = Tensor::from_vec(&[bias.len()], bias)?;
        let d = self.feature_dim();
        self.novel_weight = Tensor::zeros(&[0, d]);
        self.novel_bias = Tensor::zeros(&[0]);
        Ok(())
    }

    /// Joint logits `[N, num_classes]` for features `[N, feature_dim]`.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let vars = self.register(&mut tape, false, false);
        let out = self.forward_on_tape(&mut tape, x, vars)?;
        Ok(tape.value(out).clone())
    }

    /// Registers the head on the tape; the two blocks can be trained independently.
    pub fn register(&self, tape: &mut Tape<T>, train_base: bool, train_novel: bool) -> HeadVars {
        HeadVars {
            base_weight: tape.leaf(self.base_weight.clone(), train_base),
            base_bias: tape.leaf(self.base_bias.clone(), train_base),
            novel_weight: tape.leaf(self.novel_weight.clone(), train_novel),
            novel_bias: tape.leaf(self.novel_bias.clone(), train_novel),
        }
    }

    pub fn forward_on_tape(&self, tape: &mut Tape<T>, features: Var, vars: HeadVars) -> Result<Var> {
        let base = tape.linear(features, vars.base_weight, Some(vars.base_bias))?;
        if self.num_novel() == 0 {
            return Ok(base);
        }
        let novel = tape.linear(features, vars.novel_weight, Some(vars.novel_bias))?;
        tape.concat_cols(&[base, novel])
    }
}
