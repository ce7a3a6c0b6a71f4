//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its variables. Parameters are
//! registered as leaves at the start of a step, the loss is built from the
//! recorded operations, and [`Tape::backward`] returns gradients for every leaf
//! that asked for one. Nodes that no gradient-requiring leaf reaches are skipped.

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    ChannelScale(Var, Vec<T>),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Exp(Var),
    Log(Var, T),
    Square(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulT(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Tensor<T>),
    LogSumExpRows(Var, Tensor<T>),
    L2NormalizeRows(Var, Vec<T>),
    RowNorms(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Reshape(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` if no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, "rank", 2, t.rank())),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant that receives no gradient.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, "mul_const", |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    /// Multiplies channel `c` (axis 1) by the constant `scale[c]`.
    pub fn channel_scale(&mut self, a: Var, scale: Vec<T>) -> Result<Var> {
        let zeros = vec![T::zero(); scale.len()];
        let v = ops::channel_affine(self.value(a), &scale, &zeros, "channel_scale")?;
        Ok(self.push(v, Op::ChannelScale(a, scale), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddConst(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Natural log of `max(x, floor)`.
    pub fn log_clamped(&mut self, a: Var, floor: T) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::Log(a, floor), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let zero_bias;
        let bias_vals: &[T] = match bias {
            Some(b) => self.value(b).data(),
            None => {
                zero_bias = vec![T::zero(); spec.out_channels];
                &zero_bias
            }
        };
        let v = ops::conv2d(self.value(x), self.value(kernel), bias_vals, &spec)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(v, Op::Conv2d { x, kernel, bias, spec }, &inputs))
    }

    /// Training-mode batch norm. Returns the output with the batch mean and
    /// biased batch variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (mean, var) = ops::channel_stats(self.value(x))?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
        let xhat = ops::channel_affine(self.value(x), &inv_std, &shift, "batch_norm_train")?;
        let out = self.affine_from_xhat(&xhat, gamma, beta, "batch_norm_train")?;
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Batch norm with fixed statistics and trainable scale/offset.
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
        let xhat = ops::channel_affine(self.value(x), &inv_std, &shift, "batch_norm_fixed")?;
        let out = self.affine_from_xhat(&xhat, gamma, beta, "batch_norm_fixed")?;
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn affine_from_xhat(&self, xhat: &Tensor<T>, gamma: Var, beta: Var, op: &'static str) -> Result<Tensor<T>> {
        let c = xhat.shape()[1];
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.numel() != c {
            return Err(Error::shape(op, "gamma length", c, g.numel()));
        }
        if b.numel() != c {
            return Err(Error::shape(op, "beta length", c, b.numel()));
        }
        ops::channel_affine(xhat, g.data(), b.data(), op)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = match *t.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape("global_avg_pool", "rank", 4, t.rank())),
        };
        let hw = h * w;
        let denom = T::from_usize_lossy(hw);
        let data = t
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() / denom)
            .collect();
        let v = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x: [N, D]`, `w: [K, D]`, `b: [K]` gives `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x), "linear")?;
        let (k, dw) = rows_cols(self.value(w), "linear")?;
        if d != dw {
            return Err(Error::shape("linear", "input features", dw, d));
        }
        if let Some(b) = b {
            if self.value(b).numel() != k {
                return Err(Error::shape("linear", "bias length", k, self.value(b).numel()));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * k];
        for (xr, orow) in xd.chunks_exact(d.max(1)).zip(out.chunks_exact_mut(k.max(1))) {
            for (j, (o, wr)) in orow.iter_mut().zip(wd.chunks_exact(d.max(1))).enumerate() {
                *o = bias.map_or(T::zero(), |bv| bv[j]) + ops::dot(xr, wr);
            }
        }
        let v = Tensor::from_vec(&[n, k], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &inputs))
    }

    /// `a: [N, D]`, `b: [M, D]` gives `a b^T: [N, M]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = rows_cols(self.value(a), "matmul_t")?;
        let (m, db) = rows_cols(self.value(b), "matmul_t")?;
        if d != db {
            return Err(Error::shape("matmul_t", "inner dimension", d, db));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = ops::dot(&ad[i * d..(i + 1) * d], &bd[j * d..(j + 1) * d]);
            }
        }
        let v = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(v, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / T::from_usize_lossy(t.numel()));
        Ok(self.push(v, Op::MeanAll(a), &[a]))
    }

    /// Mean over the rows of `[N, K]`, giving `[K]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a), "mean_rows")?;
        if n == 0 {
            return Err(Error::invalid("mean_rows", "no rows"));
        }
        let d = self.value(a).data();
        let denom = T::from_usize_lossy(n);
        let out = (0..k)
            .map(|j| (0..n).map(|i| d[i * k + j]).sum::<T>() / denom)
            .collect();
        let v = Tensor::from_vec(&[k], out)?;
        Ok(self.push(v, Op::MeanRows(a), &[a]))
    }

    /// Row sums of `[N, K]`, giving `[N]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, _) = rows_cols(self.value(a), "sum_cols")?;
        let out = (0..n).map(|i| self.value(a).row(i).iter().copied().sum()).collect();
        let v = Tensor::from_vec(&[n], out)?;
        Ok(self.push(v, Op::SumCols(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a), "softmax_rows")?;
        if !self.value(a).all_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            ops::softmax_slice(self.value(a).row(i), &mut out[i * k..(i + 1) * k]);
        }
        let v = Tensor::from_vec(&[n, k], out)?;
        Ok(self.push(v, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a), "log_softmax_rows")?;
        if !self.value(a).all_finite() {
            return Err(Error::NonFinite { op: "log_softmax_rows" });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let row = self.value(a).row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                out[i * k + j] = row[j] - lse;
                probs[i * k + j] = out[i * k + j].exp();
            }
        }
        let v = Tensor::from_vec(&[n, k], out)?;
        let probs = Tensor::from_vec(&[n, k], probs)?;
        Ok(self.push(v, Op::LogSoftmaxRows(a, probs), &[a]))
    }

    /// `log sum_j exp(x_ij)` per row over the entries where `mask(i, j)` holds.
    pub fn logsumexp_rows(&mut self, a: Var, mask: impl Fn(usize, usize) -> bool) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a), "logsumexp_rows")?;
        let mut weights = vec![T::zero(); n * k];
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            let row = self.value(a).row(i);
            let max = (0..k)
                .filter(|&j| mask(i, j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::invalid("logsumexp_rows", format!("row {i} has no unmasked entry")));
            }
            let mut total = T::zero();
            for j in (0..k).filter(|&j| mask(i, j)) {
                let e = (row[j] - max).exp();
                weights[i * k + j] = e;
                total = total + e;
            }
            for w in &mut weights[i * k..(i + 1) * k] {
                *w = *w / total;
            }
            out[i] = total.ln() + max;
        }
        let v = Tensor::from_vec(&[n], out)?;
        let weights = Tensor::from_vec(&[n, k], weights)?;
        Ok(self.push(v, Op::LogSumExpRows(a, weights), &[a]))
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a), "l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let row = self.value(a).row(i);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                for j in 0..k {
                    out[i * k + j] = row[j] / norm;
                }
            }
            norms.push(norm);
        }
        let v = Tensor::from_vec(&[n, k], out)?;
        Ok(self.push(v, Op::L2NormalizeRows(a, norms), &[a]))
    }

    /// Euclidean norm per row, giving `[N]`. The gradient at a zero row is zero.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (n, _) = rows_cols(self.value(a), "row_norms")?;
        let out = (0..n)
            .map(|i| self.value(a).row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let v = Tensor::from_vec(&[n], out)?;
        Ok(self.push(v, Op::RowNorms(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (n, _) = rows_cols(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.value(p), "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", "rows", n, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_vec(&[n, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of `[N, K]`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a), "slice_cols")?;
        if start > end || end > k {
            return Err(Error::invalid("slice_cols", format!("range {start}..{end} outside 0..{k}")));
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).row(i)[start..end]);
        }
        let v = Tensor::from_vec(&[n, end - start], out)?;
        Ok(self.push(v, Op::SliceCols(a, start), &[a]))
    }

    /// Gathers entries of the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(a).shape().first().copied().unwrap_or(0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range 0..{n}")));
        }
        let v = self.value(a).select_rows(rows);
        Ok(self.push(v, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    /// Picks `x[i, cols[i]]` from `[N, K]`, giving `[N]`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (n, k) = rows_cols(self.value(a), "pick_cols")?;
        if cols.len() != n {
            return Err(Error::shape("pick_cols", "index count", n, cols.len()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::invalid("pick_cols", format!("column {bad} out of range 0..{k}")));
        }
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.value(a).data()[i * k + c])
            .collect();
        let v = Tensor::from_vec(&[n], out)?;
        Ok(self.push(v, Op::PickCols(a, cols.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Propagates the gradient of a scalar `loss` back to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, delta: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a = *a + d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.scale(-T::one()), &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::MulConst(a, c) => {
                    send(*a, g.zip_map(c, "mul_const", |x, y| x * y)?, &mut grads);
                }
                Op::ChannelScale(a, s) => {
                    let zeros = vec![T::zero(); s.len()];
                    send(*a, ops::channel_affine(&g, s, &zeros, "channel_scale")?, &mut grads);
                }
                Op::Scale(a, s) => send(*a, g.scale(*s), &mut grads),
                Op::AddConst(a) => send(*a, g, &mut grads),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                    send(*a, ga, &mut grads);
                }
                Op::Exp(a) => {
                    send(*a, g.zip_map(&node.value, "exp", |gv, y| gv * y)?, &mut grads);
                }
                Op::Log(a, floor) => {
                    let floor = *floor;
                    let ga = g.zip_map(self.value(*a), "log", |gv, x| gv / x.max(floor))?;
                    send(*a, ga, &mut grads);
                }
                Op::Square(a) => {
                    let two = T::one() + T::one();
                    let ga = g.zip_map(self.value(*a), "square", |gv, x| two * gv * x)?;
                    send(*a, ga, &mut grads);
                }
                Op::Conv2d { x, kernel, bias, spec } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*kernel),
                        &g,
                        spec,
                        self.nodes[x.0].needs_grad,
                        self.nodes[kernel.0].needs_grad,
                    );
                    send(*x, gx, &mut grads);
                    send(*kernel, gk, &mut grads);
                    if let Some(b) = bias {
                        let shape = self.value(*b).shape().to_vec();
                        send(*b, Tensor::from_vec(&shape, gb)?, &mut grads);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (dgamma, dbeta) = affine_param_grads(&g, xhat);
                    let c = inv_std.len();
                    let inner: usize = g.shape()[2..].iter().product();
                    let m = T::from_usize_lossy(g.numel() / c);
                    let gd = self.value(*gamma).data();
                    // sum over the channel of dxhat and dxhat * xhat
                    let mut s1 = vec![T::zero(); c];
                    let mut s2 = vec![T::zero(); c];
                    for (i, (&gv, &xh)) in g.data().iter().zip(xhat.data()).enumerate() {
                        let ch = (i / inner) % c;
                        let d = gv * gd[ch];
                        s1[ch] = s1[ch] + d;
                        s2[ch] = s2[ch] + d * xh;
                    }
                    let mut gx = g.clone();
                    for (i, (v, &xh)) in gx.data_mut().iter_mut().zip(xhat.data()).enumerate() {
                        let ch = (i / inner) % c;
                        let d = *v * gd[ch];
                        *v = inv_std[ch] / m * (m * d - s1[ch] - xh * s2[ch]);
                    }
                    send(*x, gx, &mut grads);
                    send(*gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma)?, &mut grads);
                    send(*beta, Tensor::from_vec(self.value(*beta).shape(), dbeta)?, &mut grads);
                }
                Op::ChannelAffine {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (dgamma, dbeta) = affine_param_grads(&g, xhat);
                    let scale: Vec<T> = inv_std
                        .iter()
                        .zip(self.value(*gamma).data())
                        .map(|(&s, &gm)| s * gm)
                        .collect();
                    let zeros = vec![T::zero(); scale.len()];
                    send(*x, ops::channel_affine(&g, &scale, &zeros, "batch_norm_fixed")?, &mut grads);
                    send(*gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma)?, &mut grads);
                    send(*beta, Tensor::from_vec(self.value(*beta).shape(), dbeta)?, &mut grads);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape();
                    let hw = xs[2] * xs[3];
                    let denom = T::from_usize_lossy(hw);
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv / denom, hw))
                        .collect();
                    send(*x, Tensor::from_vec(xs, data)?, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, d) = (xv.shape()[0], xv.shape()[1]);
                    let k = wv.shape()[0];
                    let gd = g.data();
                    let (xd, wd) = (xv.data(), wv.data());
                    let mut gx = vec![T::zero(); n * d];
                    let mut gw = vec![T::zero(); k * d];
                    let (want_x, want_w) = (self.nodes[x.0].needs_grad, self.nodes[w.0].needs_grad);
                    for i in 0..n {
                        for j in 0..k {
                            let gv = gd[i * k + j];
                            if gv == T::zero() {
                                continue;
                            }
                            if want_x {
                                ops::axpy(&mut gx[i * d..(i + 1) * d], gv, &wd[j * d..(j + 1) * d]);
                            }
                            if want_w {
                                ops::axpy(&mut gw[j * d..(j + 1) * d], gv, &xd[i * d..(i + 1) * d]);
                            }
                        }
                    }
                    send(*x, Tensor::from_vec(&[n, d], gx)?, &mut grads);
                    send(*w, Tensor::from_vec(&[k, d], gw)?, &mut grads);
                    if let Some(b) = b {
                        let gb = (0..k).map(|j| (0..n).map(|i| gd[i * k + j]).sum()).collect();
                        send(*b, Tensor::from_vec(self.value(*b).shape(), gb)?, &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, d) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[0];
                    let gd = g.data();
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga = vec![T::zero(); n * d];
                    let mut gb = vec![T::zero(); m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gv = gd[i * m + j];
                            if gv == T::zero() {
                                continue;
                            }
                            ops::axpy(&mut ga[i * d..(i + 1) * d], gv, &bd[j * d..(j + 1) * d]);
                            ops::axpy(&mut gb[j * d..(j + 1) * d], gv, &ad[i * d..(i + 1) * d]);
                        }
                    }
                    send(*a, Tensor::from_vec(&[n, d], ga)?, &mut grads);
                    send(*b, Tensor::from_vec(&[m, d], gb)?, &mut grads);
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    send(*a, Tensor::full(self.value(*a).shape(), gv), &mut grads);
                }
                Op::MeanAll(a) => {
                    let av = self.value(*a);
                    let gv = g.data()[0] / T::from_usize_lossy(av.numel());
                    send(*a, Tensor::full(av.shape(), gv), &mut grads);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let denom = T::from_usize_lossy(n);
                    let data = (0..n * k).map(|i| g.data()[i % k] / denom).collect();
                    send(*a, Tensor::from_vec(&[n, k], data)?, &mut grads);
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let data = (0..n * k).map(|i| g.data()[i / k]).collect();
                    send(*a, Tensor::from_vec(&[n, k], data)?, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (n, k) = (y.shape()[0], y.shape()[1]);
                    let mut ga = vec![T::zero(); n * k];
                    for i in 0..n {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..k {
                            ga[i * k + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*a, Tensor::from_vec(&[n, k], ga)?, &mut grads);
                }
                Op::LogSoftmaxRows(a, probs) => {
                    let (n, k) = (probs.shape()[0], probs.shape()[1]);
                    let mut ga = vec![T::zero(); n * k];
                    for i in 0..n {
                        let gr = g.row(i);
                        let total: T = gr.iter().copied().sum();
                        for j in 0..k {
                            ga[i * k + j] = gr[j] - probs.row(i)[j] * total;
                        }
                    }
                    send(*a, Tensor::from_vec(&[n, k], ga)?, &mut grads);
                }
                Op::LogSumExpRows(a, weights) => {
                    let k = weights.shape()[1];
                    let data = weights
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &w)| w * g.data()[i / k])
                        .collect();
                    send(*a, Tensor::from_vec(weights.shape(), data)?, &mut grads);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let (n, k) = (y.shape()[0], y.shape()[1]);
                    let mut ga = vec![T::zero(); n * k];
                    for i in 0..n {
                        if norms[i] == T::zero() {
                            continue;
                        }
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..k {
                            ga[i * k + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    send(*a, Tensor::from_vec(&[n, k], ga)?, &mut grads);
                }
                Op::RowNorms(a) => {
                    let av = self.value(*a);
                    let k = av.shape()[1];
                    let data = av
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let norm = node.value.data()[i / k];
                            if norm == T::zero() {
                                T::zero()
                            } else {
                                g.data()[i / k] * x / norm
                            }
                        })
                        .collect();
                    send(*a, Tensor::from_vec(av.shape(), data)?, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let n = g.shape()[0];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        send(p, Tensor::from_vec(&[n, w], data)?, &mut grads);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let w = g.shape()[1];
                    let mut data = vec![T::zero(); n * k];
                    for i in 0..n {
                        data[i * k + start..i * k + start + w].copy_from_slice(g.row(i));
                    }
                    send(*a, Tensor::from_vec(&[n, k], data)?, &mut grads);
                }
                Op::GatherRows(a, rows) => {
                    let av = self.value(*a);
                    let stride = av.numel() / av.shape()[0].max(1);
                    let mut data = vec![T::zero(); av.numel()];
                    for (dst, &r) in rows.iter().enumerate() {
                        for t in 0..stride {
                            data[r * stride + t] = data[r * stride + t] + g.data()[dst * stride + t];
                        }
                    }
                    send(*a, Tensor::from_vec(av.shape(), data)?, &mut grads);
                }
                Op::PickCols(a, cols) => {
                    let av = self.value(*a);
                    let k = av.shape()[1];
                    let mut data = vec![T::zero(); av.numel()];
                    for (i, &c) in cols.iter().enumerate() {
                        data[i * k + c] = g.data()[i];
                    }
                    send(*a, Tensor::from_vec(av.shape(), data)?, &mut grads);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    send(*a, g.reshape(&shape)?, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn affine_param_grads<T: Scalar>(g: &Tensor<T>, xhat: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = xhat.shape()[1];
    let inner: usize = xhat.shape()[2..].iter().product();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (&gv, &xh)) in g.data().iter().zip(xhat.data()).enumerate() {
        let ch = (i / inner) % c;
        dgamma[ch] = dgamma[ch] + gv * xh;
        dbeta[ch] = dbeta[ch] + gv;
    }
    (dgamma, dbeta)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient<T: Scalar>(x: &Tensor<T>, step: f64, mut f: impl FnMut(&Tensor<T>) -> T) -> Tensor<T> {
    let h = T::from_f64_lossy(step);
    let two_h = h + h;
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / two_h;
    }
    out
}

/// `|a - b| / max(|a|, |b|)` measured in Euclidean norm over all entries.
pub fn relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.norm().to_f64_lossy();
    let nb = numeric.norm().to_f64_lossy();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
