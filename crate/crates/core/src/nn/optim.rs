//! Adam with L2 weight decay and the warmup + poly learning-rate schedule.

use crate::error::{PsgrError, Result};
use crate::tensor::{Scalar, Tensor};

/// `base · min(1, (e+1)/warmup) · (1 − e/E)^0.9` for zero-based epoch `e`.
pub fn lr_at(base: f64, epoch: usize, epochs: usize, warmup: usize) -> f64 {
    let warm = if warmup == 0 {
        1.0
    } else {
        ((epoch + 1) as f64 / warmup as f64).min(1.0)
    };
    let poly = (1.0 - epoch as f64 / epochs.max(1) as f64).max(0.0).powf(0.9);
    base * warm * poly
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads[i]` must match `params[i]` in shape.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(PsgrError::invalid("adam: parameter count changed"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(PsgrError::shape("adam", format!("grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            let mut data = std::mem::replace(p, Tensor::zeros(&[0])).into_data();
            for (j, (w, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                let w64 = w.as_f64();
                let g64 = gj.as_f64() + self.weight_decay * w64;
                let m = b1 * self.m[i][j].as_f64() + (1.0 - b1) * g64;
                let v = b2 * self.v[i][j].as_f64() + (1.0 - b2) * g64 * g64;
                self.m[i][j] = T::from_f64(m);
                self.v[i][j] = T::from_f64(v);
                let update = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                *w = T::from_f64(w64 - update);
            }
            *p = Tensor::from_parts(g.shape().to_vec(), data);
        }
        Ok(())
    }
}
