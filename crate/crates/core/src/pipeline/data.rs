//! Task streams: one labeled base task followed by unlabeled novel tasks.

use std::cell::Cell;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples `x: [N, D]` with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Unlabeled training data of one novel task with two augmented views per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub x: Tensor<f32>,
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    /// Number of classes the task is known to contain.
    pub num_classes: usize,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground truth of an unlabeled set. Kept apart from [`UnlabeledSet`] so no
/// training entry point can take it; reads are counted.
#[derive(Debug)]
pub struct HiddenLabels {
    labels: Vec<usize>,
    reads: Cell<usize>,
}

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self {
            labels,
            reads: Cell::new(0),
        }
    }

    pub fn labels(&self) -> &[usize] {
        self.reads.set(self.reads.get() + 1);
        &self.labels
    }

    /// How often [`HiddenLabels::labels`] has been called.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

impl Clone for HiddenLabels {
    fn clone(&self) -> Self {
        Self::new(self.labels.clone())
    }
}

impl PartialEq for HiddenLabels {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovelTask {
    pub train: UnlabeledSet,
    pub hidden: HiddenLabels,
    pub test: LabeledSet,
    /// Class ids of this task.
    pub classes: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub dims: usize,
    pub base_train: LabeledSet,
    pub base_test: LabeledSet,
    pub novel: Vec<NovelTask>,
    /// Cluster center of every class id.
    pub centers: Vec<Vec<f64>>,
}

impl TaskStream {
    pub fn num_base(&self) -> usize {
        self.novel.first().map_or(self.centers.len(), |t| t.classes.start)
    }
}

/// Parameters of [`make_synthetic_stream`].
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub seed: u64,
    pub dims: usize,
    /// Class count per task; entry 0 is the labeled base task.
    pub classes_per_task: Vec<usize>,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    /// Minimum pairwise distance between class centers.
    pub separation: f64,
    pub cluster_std: f64,
    /// Noise scale of the views relative to each dimension's spread.
    pub view_noise: f64,
    /// Fraction of coordinates zeroed in each view.
    pub view_mask: f64,
}

impl StreamSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let mut classes_per_task = vec![cfg.base_classes];
        classes_per_task.extend(&cfg.novel_classes);
        Self {
            seed: cfg.seed,
            dims: cfg.arch.input_dim(),
            classes_per_task,
            samples_per_class: cfg.samples_per_class,
            test_samples_per_class: cfg.test_samples_per_class,
            separation: cfg.separation,
            cluster_std: cfg.cluster_std,
            view_noise: cfg.view_noise,
            view_mask: cfg.view_mask,
        }
    }
}

const PACKING_ATTEMPTS: usize = 20_000;

/// Rejection-samples `count` centers in `[-sep, sep]^dims`, pairwise at least `sep` apart.
pub fn pack_centers<R: Rng + ?Sized>(count: usize, dims: usize, separation: f64, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if !(separation > 0.0) {
        return Err(Error::invalid("make_synthetic_stream", "separation must be positive"));
    }
    if dims == 0 {
        return Err(Error::invalid("make_synthetic_stream", "dims must be positive"));
    }
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while centers.len() < count {
        attempts += 1;
        if attempts > PACKING_ATTEMPTS {
            return Err(Error::invalid(
                "make_synthetic_stream",
                format!(
                    "cannot place {count} centers {separation} apart in {dims} dimensions \
                     (placed {} after {PACKING_ATTEMPTS} draws)",
                    centers.len()
                ),
            ));
        }
        let c: Vec<f64> = (0..dims).map(|_| rng.random_range(-separation..=separation)).collect();
        let ok = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
        });
        if ok {
            centers.push(c);
        }
    }
    Ok(centers)
}

fn draw_cluster<R: Rng + ?Sized>(center: &[f64], n: usize, std: f64, rng: &mut R) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * center.len());
    for _ in 0..n {
        for &m in center {
            let z: f64 = StandardNormal.sample(rng);
            out.push((m + std * z) as f32);
        }
    }
    out
}

fn shuffled(x: Vec<f32>, y: Vec<usize>, dims: usize, rng: &mut ChaCha8Rng) -> Result<LabeledSet> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.shuffle(rng);
    let x = Tensor::from_vec(&[y.len(), dims], x)?.select_rows(&order);
    let y = order.iter().map(|&i| y[i]).collect();
    Ok(LabeledSet { x, y })
}

/// Gaussian noise scaled per dimension plus random coordinate masking.
pub fn make_view<R: Rng + ?Sized>(x: &Tensor<f32>, noise: f64, mask: f64, rng: &mut R) -> Tensor<f32> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| x.row(i)[j] as f64).collect();
            let mean = col.iter().sum::<f64>() / n.max(1) as f64;
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64).sqrt()
        })
        .collect();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        let noisy = *v as f64 + noise * scale[k % d] * z;
        *v = if rng.random::<f64>() < mask { 0.0 } else { noisy as f32 };
    }
    out
}

/// Builds a seeded stream of isotropic Gaussian classes. Class ids run
/// consecutively across tasks, so task label sets are disjoint.
pub fn make_synthetic_stream(spec: &StreamSpec) -> Result<TaskStream> {
    if spec.classes_per_task.is_empty() || spec.classes_per_task.contains(&0) {
        return Err(Error::invalid("make_synthetic_stream", "every task needs at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.classes_per_task.iter().sum();
    let centers = pack_centers(total, spec.dims, spec.separation, &mut rng)?;

    let split = |classes: Range<usize>, rng: &mut ChaCha8Rng| -> Result<(LabeledSet, LabeledSet)> {
        let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
        for c in classes {
            tx.extend(draw_cluster(&centers[c], spec.samples_per_class, spec.cluster_std, rng));
            ty.extend(std::iter::repeat_n(c, spec.samples_per_class));
            vx.extend(draw_cluster(&centers[c], spec.test_samples_per_class, spec.cluster_std, rng));
            vy.extend(std::iter::repeat_n(c, spec.test_samples_per_class));
        }
        Ok((shuffled(tx, ty, spec.dims, rng)?, shuffled(vx, vy, spec.dims, rng)?))
    };

    let base = spec.classes_per_task[0];
    let (base_train, base_test) = split(0..base, &mut rng)?;
    let mut novel = Vec::new();
    let mut start = base;
    for &k in &spec.classes_per_task[1..] {
        let classes = start..start + k;
        let (train, test) = split(classes.clone(), &mut rng)?;
        let view1 = make_view(&train.x, spec.view_noise, spec.view_mask, &mut rng);
        let view2 = make_view(&train.x, spec.view_noise, spec.view_mask, &mut rng);
        novel.push(NovelTask {
            train: UnlabeledSet {
                x: train.x,
                view1,
                view2,
                num_classes: k,
            },
            hidden: HiddenLabels::new(train.y),
            test,
            classes,
        });
        start += k;
    }
    Ok(TaskStream {
        dims: spec.dims,
        base_train,
        base_test,
        novel,
        centers,
    })
}

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 style binary records (1 label byte, 3072 channel-major
/// pixel bytes). Pixels are scaled to `[0, 1]`; `x` has shape `[N, 3, 32, 32]`.
pub fn read_cifar_records(path: &Path) -> Result<(Tensor<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes)
}

pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::invalid(
            "read_cifar_records",
            format!("{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::from_vec(&[n, 3, 32, 32], data)?, labels))
}
