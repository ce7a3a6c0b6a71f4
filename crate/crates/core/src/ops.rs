//! Stateless numeric kernels shared by the inference paths and the tape.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default batch-norm epsilon.
pub const BN_EPSILON: f64 = 1e-5;

/// Geometry of a 2-D convolution over `NCHW` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel_height: kernel,
            kernel_width: kernel,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_height", self.kernel_height),
            ("kernel_width", self.kernel_width),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("conv_spec", format!("{name} must be positive")));
            }
        }
        if self.padding >= self.kernel_height || self.padding >= self.kernel_width {
            return Err(Error::invalid(
                "conv_spec",
                format!(
                    "padding {} must be smaller than kernel extent {}x{}",
                    self.padding, self.kernel_height, self.kernel_width
                ),
            ));
        }
        Ok(())
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_height,
            self.kernel_width,
        ]
    }

    pub fn kernel_numel(&self) -> usize {
        self.kernel_shape().iter().product()
    }

    /// Output spatial extent for an input of `height x width`.
    pub fn output_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let ph = height + 2 * self.padding;
        let pw = width + 2 * self.padding;
        if ph < self.kernel_height {
            return Err(Error::shape("conv2d", "padded height", self.kernel_height, ph));
        }
        if pw < self.kernel_width {
            return Err(Error::shape("conv2d", "padded width", self.kernel_width, pw));
        }
        Ok((
            (ph - self.kernel_height) / self.stride + 1,
            (pw - self.kernel_width) / self.stride + 1,
        ))
    }
}

/// Batch-norm statistics and affine parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>, gamma: Vec<T>, beta: Vec<T>, eps: T) -> Result<Self> {
        let p = Self {
            mean,
            var,
            gamma,
            beta,
            eps,
        };
        p.validate()?;
        Ok(p)
    }

    /// Fresh statistics (`mu = 0`, `var = 1`) with unit scale and zero offset.
    pub fn identity(channels: usize, eps: T) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, v) in [("mean", &self.mean), ("var", &self.var), ("beta", &self.beta)] {
            if v.len() != c {
                return Err(Error::shape("bn_params", name, c, v.len()));
            }
        }
        if let Some(ch) = self.var.iter().position(|&v| v + self.eps <= T::zero()) {
            return Err(Error::invalid(
                "bn_params",
                format!("variance + epsilon must be positive (channel {ch})"),
            ));
        }
        Ok(())
    }

    /// `1 / sqrt(var + eps)` per channel.
    pub fn inv_std(&self) -> Vec<T> {
        self.var
            .iter()
            .map(|&v| T::one() / (v + self.eps).sqrt())
            .collect()
    }
}

fn expect_rank4<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, "rank", 4, x.rank())),
    }
}

/// Cross-correlation of `x: [N, C, H, W]` with `kernel: [O, C, kh, kw]` plus a per-channel bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &[T], spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let [n, c, h, w] = expect_rank4(x, "conv2d")?;
    if c != spec.in_channels {
        return Err(Error::shape("conv2d", "input channels", spec.in_channels, c));
    }
    check_kernel(kernel, spec)?;
    if bias.len() != spec.out_channels {
        return Err(Error::shape("conv2d", "bias length", spec.out_channels, bias.len()));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let o = spec.out_channels;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); n * o * oh * ow];
    let plane = oh * ow;
    for win in windows(spec, h, w, oh, ow) {
        let ck = win.compact(kd, o);
        let t = win.taps.len();
        let mut patch = vec![T::zero(); t];
        for b in 0..n {
            let xb = &xd[b * c * h * w..(b + 1) * c * h * w];
            for &(pos, base) in &win.positions {
                win.fill(&mut patch, xb, base);
                for oc in 0..o {
                    out[(b * o + oc) * plane + pos] = bias[oc] + dot(&patch, &ck[oc * t..(oc + 1) * t]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], out)
}

/// For each output position along one axis, the kernel taps `lo..hi` that
/// land inside the (unpadded) input.
fn tap_ranges(out_len: usize, in_len: usize, k: usize, spec: &ConvSpec) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|o| {
            let start = o * spec.stride;
            let lo = spec.padding.saturating_sub(start).min(k);
            let hi = (in_len + spec.padding).saturating_sub(start).min(k).max(lo);
            (lo, hi)
        })
        .collect()
}

/// Output positions that see the same set of in-bounds kernel taps.
struct Window {
    /// Offsets into one kernel row `[C, kh, kw]`, paired with the matching
    /// input offset relative to the position's base.
    taps: Vec<(usize, isize)>,
    /// Flat output position and the input offset of kernel tap (0, 0).
    positions: Vec<(usize, isize)>,
}

impl Window {
    fn compact<T: Scalar>(&self, kernel: &[T], out_channels: usize) -> Vec<T> {
        let row = kernel.len() / out_channels.max(1);
        (0..out_channels)
            .flat_map(|oc| self.taps.iter().map(move |&(k, _)| kernel[oc * row + k]))
            .collect()
    }

    fn fill<T: Scalar>(&self, patch: &mut [T], input: &[T], base: isize) {
        for (p, &(_, rel)) in patch.iter_mut().zip(&self.taps) {
            *p = input[(base + rel) as usize];
        }
    }
}

fn windows(spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize) -> Vec<Window> {
    let (kh, kw) = (spec.kernel_height, spec.kernel_width);
    let rows = tap_ranges(oh, h, kh, spec);
    let cols = tap_ranges(ow, w, kw, spec);
    let mut out: Vec<((usize, usize, usize, usize), Window)> = Vec::new();
    for (y, &(ky0, ky1)) in rows.iter().enumerate() {
        for (xo, &(kx0, kx1)) in cols.iter().enumerate() {
            let key = (ky0, ky1, kx0, kx1);
            let base = (y * spec.stride) as isize * w as isize - (spec.padding * w) as isize
                + (xo * spec.stride) as isize
                - spec.padding as isize;
            let pos = y * ow + xo;
            if let Some((_, win)) = out.iter_mut().find(|(k, _)| *k == key) {
                win.positions.push((pos, base));
                continue;
            }
            let mut taps = Vec::new();
            for ic in 0..spec.in_channels {
                for ki in ky0..ky1 {
                    for kj in kx0..kx1 {
                        let rel = (ic * h * w + ki * w + kj) as isize;
                        taps.push(((ic * kh + ki) * kw + kj, rel));
                    }
                }
            }
            out.push((
                key,
                Window {
                    taps,
                    positions: vec![(pos, base)],
                },
            ));
        }
    }
    out.into_iter().map(|(_, w)| w).collect()
}

pub(crate) fn check_kernel<T: Scalar>(kernel: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    let expected = spec.kernel_shape();
    if kernel.rank() != 4 {
        return Err(Error::shape("conv2d", "kernel rank", 4, kernel.rank()));
    }
    let names = ["kernel out channels", "kernel in channels", "kernel height", "kernel width"];
    for ((&e, &g), name) in expected.iter().zip(kernel.shape()).zip(names) {
        if e != g {
            return Err(Error::shape("conv2d", name, e, g));
        }
    }
    Ok(())
}

/// Gradients of `conv2d` with respect to its input and kernel; either may be
/// skipped (returned as zeros) when the caller does not need it.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    want_input: bool,
    want_kernel: bool,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, c, h, w] = expect_rank4(x, "conv2d").expect("validated in forward");
    let [_, o, oh, ow] = expect_rank4(grad_out, "conv2d").expect("validated in forward");
    let (kh, kw) = (spec.kernel_height, spec.kernel_width);
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); xd.len()];
    let mut gk = vec![T::zero(); kd.len()];
    let mut gb = vec![T::zero(); o];
    let plane = oh * ow;
    let row = c * kh * kw;
    for win in windows(spec, h, w, oh, ow) {
        let ck = win.compact(kd, o);
        let t = win.taps.len();
        let mut gck = vec![T::zero(); o * t];
        let mut patch = vec![T::zero(); t];
        let mut gpatch = vec![T::zero(); t];
        for b in 0..n {
            let off = b * c * h * w;
            for &(pos, base) in &win.positions {
                if want_kernel {
                    win.fill(&mut patch, &xd[off..off + c * h * w], base);
                }
                gpatch.iter_mut().for_each(|v| *v = T::zero());
                for oc in 0..o {
                    let g = gd[(b * o + oc) * plane + pos];
                    gb[oc] = gb[oc] + g;
                    if g == T::zero() {
                        continue;
                    }
                    if want_input {
                        axpy(&mut gpatch, g, &ck[oc * t..(oc + 1) * t]);
                    }
                    if want_kernel {
                        axpy(&mut gck[oc * t..(oc + 1) * t], g, &patch);
                    }
                }
                if want_input {
                    for (&gv, &(_, rel)) in gpatch.iter().zip(&win.taps) {
                        let i = off + (base + rel) as usize;
                        gx[i] = gx[i] + gv;
                    }
                }
            }
        }
        if want_kernel {
            for oc in 0..o {
                for (&gv, &(k, _)) in gck[oc * t..(oc + 1) * t].iter().zip(&win.taps) {
                    gk[oc * row + k] = gk[oc * row + k] + gv;
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), gx).expect("same shape"),
        Tensor::from_vec(kernel.shape(), gk).expect("same shape"),
        gb,
    )
}

/// Inference-mode batch norm over the channel axis (axis 1) of `x`.
pub fn batchnorm_infer<T: Scalar>(x: &Tensor<T>, p: &BnParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let scale: Vec<T> = p
        .inv_std()
        .iter()
        .zip(&p.gamma)
        .map(|(&s, &g)| s * g)
        .collect();
    let shift: Vec<T> = p
        .mean
        .iter()
        .zip(&scale)
        .zip(&p.beta)
        .map(|((&m, &s), &b)| b - m * s)
        .collect();
    channel_affine(x, &scale, &shift, "batchnorm_infer")
}

/// `y = scale[c] * x + shift[c]` over the channel axis (axis 1).
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T], op: &'static str) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape(op, "rank", 2, x.rank()));
    }
    let c = x.shape()[1];
    if scale.len() != c {
        return Err(Error::shape(op, "channels", scale.len(), c));
    }
    if shift.len() != c {
        return Err(Error::shape(op, "channels", shift.len(), c));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / inner) % c;
        *v = scale[ch] * *v + shift[ch];
    }
    Ok(out)
}

/// Per-channel mean and biased variance over every axis except 1.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if x.rank() < 2 {
        return Err(Error::shape("channel_stats", "rank", 2, x.rank()));
    }
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let count = x.numel() / c;
    if count == 0 {
        return Err(Error::invalid("channel_stats", "empty batch"));
    }
    let denom = T::from_usize_lossy(count);
    let mut mean = vec![T::zero(); c];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = (i / inner) % c;
        mean[ch] = mean[ch] + v;
    }
    for m in &mut mean {
        *m = *m / denom;
    }
    let mut var = vec![T::zero(); c];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = (i / inner) % c;
        let d = v - mean[ch];
        var[ch] = var[ch] + d * d;
    }
    for v in &mut var {
        *v = *v / denom;
    }
    Ok((mean, var))
}

/// Softmax along `axis`, computed with a max shift.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= logits.rank() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for rank {}", logits.rank()),
        ));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let shape = logits.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = logits.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = (d[idx(k)] - max).exp();
                d[idx(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                d[idx(k)] = d[idx(k)] / total;
            }
        }
    }
    Ok(out)
}

/// Softmax of a single row, no validation.
pub(crate) fn softmax_slice<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.expect_same_shape(b, "cosine_distance")?;
    cosine_distance_slice(a.data(), b.data())
        .ok_or_else(|| Error::invalid("cosine_distance", "zero-norm input has no direction"))
}

pub(crate) fn cosine_distance_slice<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let two = T::one() + T::one();
    Some((T::one() - dot / (na * nb)).max(T::zero()).min(two))
}

/// Logistic function evaluated without overflow for either sign.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Inner product with eight independent partial sums.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    acc.iter().copied().sum::<T>() + tail
}

/// `y += a * x`.
pub(crate) fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

/// Elementwise logistic gate.
pub fn sigmoid_gate<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    v.map(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], s: &ConvSpec) -> Tensor<f64> {
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (oh, ow) = s.output_hw(h, w).unwrap();
        let mut out = Tensor::zeros(&[n, s.out_channels, oh, ow]);
        let ph = h + 2 * s.padding;
        let pw = w + 2 * s.padding;
        // explicit zero-padded copy, then a plain windowed sum
        let mut padded = vec![0.0; n * c * ph * pw];
        for b_ in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        padded[((b_ * c + ch) * ph + i + s.padding) * pw + j + s.padding] =
                            x.data()[((b_ * c + ch) * h + i) * w + j];
                    }
                }
            }
        }
        for b_ in 0..n {
            for o in 0..s.out_channels {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[o];
                        for ch in 0..c {
                            for ki in 0..s.kernel_height {
                                for kj in 0..s.kernel_width {
                                    acc += padded[((b_ * c + ch) * ph + i * s.stride + ki) * pw + j * s.stride + kj]
                                        * k.data()[((o * c + ch) * s.kernel_height + ki) * s.kernel_width + kj];
                                }
                            }
                        }
                        out.data_mut()[((b_ * s.out_channels + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        let spec = ConvSpec::new(1, 1, 1, 1, 0).unwrap();
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &k, &[0.0], &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let spec = ConvSpec::new(2, 3, 3, 1, 1).unwrap();
        let k = Tensor::zeros(&spec.kernel_shape());
        let y = conv2d(&x, &k, &[1.5, -2.0, 0.25], &spec).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / 9) % 3;
            assert_eq!(v, [1.5, -2.0, 0.25][ch]);
        }
    }

    #[test]
    fn random_kernel_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut rng);
            let spec = ConvSpec::new(1, 1, 3, stride, padding).unwrap();
            let k = Tensor::randn(&spec.kernel_shape(), 1.0, &mut rng);
            let got = conv2d(&x, &k, &[0.3], &spec).unwrap();
            let want = naive_conv(&x, &k, &[0.3], &spec);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
        let x = Tensor::<f64>::randn(&[2, 3, 5, 4], 1.0, &mut rng);
        let spec = ConvSpec::new(3, 4, 3, 1, 1).unwrap();
        let k = Tensor::randn(&spec.kernel_shape(), 1.0, &mut rng);
        let b = [0.1, 0.2, -0.3, 0.0];
        let got = conv2d(&x, &k, &b, &spec).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &k, &b, &spec)).unwrap() < 1e-12);
    }

    #[test]
    fn conv_rejects_mismatch_with_named_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let spec = ConvSpec::new(3, 1, 3, 1, 1).unwrap();
        let k = Tensor::zeros(&spec.kernel_shape());
        let err = conv2d(&x, &k, &[0.0], &spec).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let bad = Tensor::zeros(&[1, 3, 2, 3]);
        let err = conv2d(&x, &bad, &[0.0], &spec).unwrap_err().to_string();
        assert!(err.contains("kernel height"), "{err}");
        let err = conv2d(&x, &k, &[0.0, 1.0], &spec).unwrap_err().to_string();
        assert!(err.contains("bias length"), "{err}");
    }

    #[test]
    fn conv_spec_rejects_bad_geometry() {
        assert!(ConvSpec::new(1, 1, 3, 0, 1).is_err());
        assert!(ConvSpec::new(1, 1, 3, 1, 3).is_err());
        assert!(ConvSpec::new(0, 1, 3, 1, 1).is_err());
    }

    #[test]
    fn conv_is_linear_in_kernel_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new(2, 3, 3, 1, 1).unwrap();
        let x = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let k1 = Tensor::randn(&spec.kernel_shape(), 1.0, &mut rng);
        let k2 = Tensor::randn(&spec.kernel_shape(), 1.0, &mut rng);
        let (b1, b2) = ([0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]);
        let (a, c) = (0.7, -1.3);
        let k = k1.scale(a).add(&k2.scale(c)).unwrap();
        let b: Vec<f64> = b1.iter().zip(&b2).map(|(p, q)| a * p + c * q).collect();
        let lhs = conv2d(&x, &k, &b, &spec).unwrap();
        let rhs = conv2d(&x, &k1, &b1, &spec)
            .unwrap()
            .scale(a)
            .add(&conv2d(&x, &k2, &b2, &spec).unwrap().scale(c))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn batchnorm_identity_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let id = BnParams::identity(3, 0.0);
        assert_eq!(batchnorm_infer(&x, &id).unwrap(), x);
        let mut aff = BnParams::identity(3, 0.0);
        aff.gamma = vec![2.0; 3];
        aff.beta = vec![3.0; 3];
        let y = batchnorm_infer(&x, &aff).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * b + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[3, 4, 2, 3], 2.0, &mut rng);
        let p = BnParams::new(
            Tensor::<f64>::randn(&[4], 1.0, &mut rng).into_vec(),
            Tensor::<f64>::uniform(&[4], 0.1, 3.0, &mut rng).into_vec(),
            Tensor::<f64>::randn(&[4], 1.0, &mut rng).into_vec(),
            Tensor::<f64>::randn(&[4], 1.0, &mut rng).into_vec(),
            1e-5,
        )
        .unwrap();
        let y = batchnorm_infer(&x, &p).unwrap();
        for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
            let c = (i / 6) % 4;
            let want = p.gamma[c] * (xv - p.mean[c]) / (p.var[c] + p.eps).sqrt() + p.beta[c];
            assert!((yv - want).abs() < 1e-12);
        }
        let wrong = BnParams::<f64>::identity(3, 1e-5);
        assert!(batchnorm_infer(&x, &wrong).is_err());
    }

    #[test]
    fn bn_params_reject_nonpositive_variance() {
        assert!(BnParams::<f32>::new(vec![0.0], vec![-1.0], vec![1.0], vec![0.0], 1e-5).is_err());
        assert!(BnParams::<f32>::new(vec![0.0, 0.0], vec![1.0], vec![1.0], vec![0.0], 1e-5).is_err());
    }

    #[test]
    fn softmax_examples() {
        let eq = softmax(&Tensor::<f64>::full(&[4], 0.7), 0).unwrap();
        for &p in eq.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let big = softmax(&Tensor::<f32>::from_vec(&[2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-7 && big.data()[1] < 1e-30);
        // exact values of e^k / (e + e^2 + e^3)
        let p = softmax(&Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let bad = Tensor::<f32>::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(softmax(&bad, 0).is_err());
    }

    #[test]
    fn softmax_along_non_last_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[3, 4, 2], 3.0, &mut rng);
        let p = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..4).map(|k| p.data()[(o * 4 + k) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_distance_examples() {
        let a = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, -1.0]).unwrap();
        assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-12);
        let e1 = Tensor::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::<f64>::from_vec(&[2], vec![0.0, 3.0]).unwrap();
        assert!((cosine_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&a, &a.scale(-1.0)).unwrap() - 2.0).abs() < 1e-12);
        let z = Tensor::<f64>::zeros(&[3]);
        assert!(cosine_distance(&a, &z).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        // 1 / (1 + e^10)
        assert!((sigmoid(-10.0f64) - 4.539_786_870_243_439e-5).abs() < 1e-18);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Tensor::<f64>::randn(&[50], 5.0, &mut rng);
        let g = sigmoid_gate(&v);
        let gn = sigmoid_gate(&v.scale(-1.0));
        for (a, b) in g.data().iter().zip(gn.data()) {
            assert!((a + b - 1.0).abs() < 1e-15);
            assert!(*a > 0.0 && *a < 1.0);
        }
        assert!(sigmoid(-800.0f64).is_finite() && sigmoid(800.0f64) == 1.0);
    }
}
