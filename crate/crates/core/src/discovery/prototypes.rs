use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Diagonal Gaussian summary of one class's features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype<T: Scalar = f32> {
    pub class: usize,
    pub mean: Vec<T>,
    /// Unbiased per-dimension variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Per-class feature Gaussians used for generative replay, ordered by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeStore<T: Scalar = f32> {
    pub prototypes: Vec<ClassPrototype<T>>,
}

impl<T: Scalar> PrototypeStore<T> {
    pub fn new(mut prototypes: Vec<ClassPrototype<T>>) -> Result<Self> {
        prototypes.sort_by_key(|p| p.class);
        let store = Self { prototypes };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim();
        for (i, p) in self.prototypes.iter().enumerate() {
            if i > 0 && self.prototypes[i - 1].class >= p.class {
                return Err(Error::invalid("prototype_store", format!("class {} listed twice", p.class)));
            }
            if p.mean.len() != dim || p.var.len() != dim {
                return Err(Error::shape("prototype_store", "feature width", dim, p.mean.len().max(p.var.len())));
            }
            if p.var.iter().any(|v| !(*v >= T::zero())) {
                return Err(Error::invalid("prototype_store", format!("class {} has a negative variance", p.class)));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.mean.len())
    }

    pub fn classes(&self) -> Vec<usize> {
        self.prototypes.iter().map(|p| p.class).collect()
    }

    /// Draws `per_class` features `z ~ N(mean_c, diag(var_c))` for every class,
    /// class-major. Returns the samples `[len * per_class, dim]` and their labels.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Result<(Tensor<T>, Vec<usize>)> {
        if self.is_empty() {
            return Err(Error::invalid("prototype_store", "no class prototypes to sample from"));
        }
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(self.len() * per_class * dim);
        let mut labels = Vec::with_capacity(self.len() * per_class);
        for p in &self.prototypes {
            for _ in 0..per_class {
                for (&m, &v) in p.mean.iter().zip(&p.var) {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(m + v.sqrt() * T::from_f64_lossy(z));
                }
                labels.push(p.class);
            }
        }
        Ok((Tensor::from_vec(&[labels.len(), dim], data)?, labels))
    }
}

/// Per-class mean and unbiased variance of `features: [N, D]`.
pub fn compute_prototypes<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<PrototypeStore<T>> {
    if features.rank() != 2 {
        return Err(Error::shape("compute_prototypes", "rank", 2, features.rank()));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape("compute_prototypes", "label count", n, labels.len()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut prototypes = Vec::with_capacity(classes.len());
    for class in classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if rows.len() < 2 {
            return Err(Error::invalid(
                "compute_prototypes",
                format!("class {class} has {} sample(s); at least 2 are needed for a variance", rows.len()),
            ));
        }
        let count = T::from_usize_lossy(rows.len());
        let mut mean = vec![T::zero(); d];
        for &i in &rows {
            for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        let mut var = vec![T::zero(); d];
        for &i in &rows {
            for ((s, &v), &m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / (count - T::one()));
        prototypes.push(ClassPrototype {
            class,
            mean,
            var,
            count: rows.len(),
        });
    }
    PrototypeStore::new(prototypes)
}
