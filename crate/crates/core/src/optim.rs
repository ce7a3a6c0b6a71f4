use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`; a missing gradient counts as zero.
    /// Parameter order must be the same on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                p.expect_same_shape(g, "sgd")?;
            }
        }
        let mut flat: Vec<&mut [T]> = params.iter_mut().map(|p| p.data_mut()).collect();
        self.step_slices(&mut flat, grads)
    }

    /// Same update for parameters held as plain slices (e.g. batch-norm scale).
    pub fn step_slices(&mut self, params: &mut [&mut [T]], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd", "gradient count", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::shape("sgd", "parameter count", self.velocity.len(), params.len()));
        }
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if vel.len() != p.len() {
                return Err(Error::shape("sgd", "parameter length", vel.len(), p.len()));
            }
            match g {
                Some(g) => {
                    if g.numel() != p.len() {
                        return Err(Error::shape("sgd", "gradient length", p.len(), g.numel()));
                    }
                    for (vv, &gv) in vel.iter_mut().zip(g.data()) {
                        *vv = self.momentum * *vv + gv;
                    }
                }
                None => vel.iter_mut().for_each(|vv| *vv = self.momentum * *vv),
            }
            for (pv, &vv) in p.iter_mut().zip(vel.iter()) {
                *pv = *pv - self.lr * vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut [&mut p], &[Some(g.clone())]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-12);
        opt.step(&mut [&mut p], &[Some(g)]).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((p.data()[0] - (0.9 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_leave_fresh_params_unchanged() {
        let mut p = Tensor::<f32>::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let before = p.clone();
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Some(Tensor::zeros(&[2]))]).unwrap();
            opt.step(&mut [&mut p], &[None]).unwrap();
        }
        assert_eq!(p, before);
    }
}
