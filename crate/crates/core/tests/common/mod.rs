//! Reference implementations used only as test oracles.
#![allow(dead_code)]

use adm_core::{BnParams, ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod grad;

/// Every permutation of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                prefix.push(c);
                rec(prefix, used, out);
                prefix.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Exhaustive minimum-cost assignment; the first minimum in lexicographic
/// order wins, totals summed in row order.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in permutations(cost.len()) {
        let total: f64 = p.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        if best.as_ref().is_none_or(|b| total < b.1) {
            best = Some((p, total));
        }
    }
    best.unwrap_or((vec![], 0.0))
}

/// Clustering accuracy: best one-to-one matching of cluster ids to labels,
/// found exhaustively (k <= 8).
pub fn cluster_accuracy(assign: &[usize], labels: &[usize], k: usize, label_offset: usize) -> f64 {
    let mut co = vec![vec![0usize; k]; k];
    for (&a, &y) in assign.iter().zip(labels) {
        co[a][y - label_offset] += 1;
    }
    let best = permutations(k)
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(a, &y)| co[a][y]).sum::<usize>())
        .max()
        .unwrap_or(0);
    best as f64 / labels.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding, best of `restarts` by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if target < di {
                    pick = i;
                    break;
                }
                target -= di;
            }
            centers.push(points[pick].clone());
        }
        let mut assign = vec![0; points.len()];
        for _ in 0..300 {
            let next: Vec<usize> = points
                .iter()
                .map(|p| {
                    (0..k)
                        .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                        .unwrap()
                })
                .collect();
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&next).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    for (j, v) in center.iter_mut().enumerate() {
                        *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
            let done = next == assign;
            assign = next;
            if done {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, assign));
        }
    }
    best.unwrap().1
}

/// Multinomial logistic regression by full-batch gradient descent; returns
/// training accuracy.
pub fn logistic_regression_accuracy(x: &[Vec<f64>], y: &[usize], classes: usize, iters: usize, lr: f64) -> f64 {
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; classes];
    let n = x.len() as f64;
    for _ in 0..iters {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = w.iter().map(|wc| wc[d] + wc[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / s - if c == yi { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * xi[j] / n;
                }
                grad[c][d] += g / n;
            }
        }
        for c in 0..classes {
            for j in 0..=d {
                w[c][j] -= lr * grad[c][j];
            }
        }
    }
    let hits = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let z: Vec<f64> = w.iter().map(|wc| wc[d] + wc[..d].iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>()).collect();
            (0..classes).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap() == yi
        })
        .count();
    hits as f64 / n
}

pub fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

/// Direct-loop convolution with optional bias, accumulated in f64. `x` is NCHW.
pub fn conv_oracle(x: &[f64], shape: [usize; 4], kernel: &[f64], bias: Option<&[f64]>, spec: &ConvSpec) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let (kh, kw, s, p) = (spec.kernel_height, spec.kernel_width, spec.stride, spec.padding as isize);
    let oh = (h + 2 * spec.padding - kh) / s + 1;
    let ow = (w + 2 * spec.padding - kw) / s + 1;
    let o = spec.out_channels;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * s + i) as isize - p;
                                let ix = (xo * s + j) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                acc += xv * kernel[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

/// Conv followed by inference batch norm, all in f64.
pub fn conv_bn_oracle(x: &Tensor<f32>, kernel: &Tensor<f32>, bn: &BnParams<f32>, spec: &ConvSpec) -> Vec<f64> {
    let xs = x.shape();
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let k64: Vec<f64> = kernel.data().iter().map(|&v| v as f64).collect();
    let mut y = conv_oracle(&x64, [xs[0], xs[1], xs[2], xs[3]], &k64, None, spec);
    let o = spec.out_channels;
    let inner = y.len() / xs[0] / o;
    for (i, v) in y.iter_mut().enumerate() {
        let c = (i / inner) % o;
        let inv = 1.0 / (bn.var[c] as f64 + bn.eps as f64).sqrt();
        *v = (*v - bn.mean[c] as f64) * inv * bn.gamma[c] as f64 + bn.beta[c] as f64;
    }
    y
}

/// A random conv geometry with small extents: 1..=4 input and output
/// channels, kernel 1 or 3, stride 1 or 2, padding up to kernel/2.
pub fn random_spec<R: Rng>(rng: &mut R) -> ConvSpec {
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    ConvSpec::new(
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        k,
        rng.random_range(1..=2),
        rng.random_range(0..=k / 2),
    )
    .unwrap()
}

/// Batch-norm statistics and affine terms away from degenerate values.
pub fn random_bn<R: Rng>(channels: usize, rng: &mut R) -> BnParams<f32> {
    let mut draw = |lo: f32, hi: f32| (0..channels).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    let mean = draw(-1.0, 1.0);
    let var = draw(0.2, 3.0);
    let gamma = draw(-2.0, 2.0);
    let beta = draw(-1.0, 1.0);
    BnParams::new(mean, var, gamma, beta, 1e-5).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
