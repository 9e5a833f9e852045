//! SGD with momentum and Adam, both with L2 weight decay folded into the
//! gradient. Parameters without a populated gradient are left untouched.

use super::{Real, Result, Tensor, TensorError};

fn positive_lr<T: Real>(lr: T) -> Result<()> {
    if lr > T::zero() && lr.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument { op: "optimizer", detail: format!("learning rate must be > 0, got {lr}") })
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T: Real = f32> {
    lr: T,
    momentum: T,
    weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Result<Self> {
        positive_lr(lr)?;
        Ok(Self { lr, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    /// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), Vec::new());
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let (data, grad) = p.parts_mut();
            let Some(grad) = grad else { continue };
            if v.len() != data.len() {
                *v = vec![T::zero(); data.len()];
            }
            for ((x, &g), vel) in data.iter_mut().zip(grad).zip(v.iter_mut()) {
                let g = g + self.weight_decay * *x;
                *vel = self.momentum * *vel + g;
                *x -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    steps: i32,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T, weight_decay: T) -> Result<Self> {
        positive_lr(lr)?;
        Ok(Self { lr, beta1, beta2, eps, weight_decay, steps: 0, moments: Vec::new() })
    }

    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn with_defaults(lr: T, weight_decay: T) -> Result<Self> {
        Self::new(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8), weight_decay)
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        let lrs = vec![self.lr; params.len()];
        self.step_with_lrs(params, &lrs)
    }

    /// One update where parameter `i` uses learning rate `lrs[i]` (parameter
    /// groups).
    pub fn step_with_lrs(&mut self, params: &mut [&mut Tensor<T>], lrs: &[T]) -> Result<()> {
        if lrs.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                detail: format!("{} learning rates for {} parameters", lrs.len(), params.len()),
            });
        }
        for &lr in lrs {
            positive_lr(lr)?;
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), (Vec::new(), Vec::new()));
        }
        self.steps += 1;
        let bc1 = T::one() - self.beta1.powi(self.steps);
        let bc2 = T::one() - self.beta2.powi(self.steps);
        for ((p, (m, v)), &lr) in params.iter_mut().zip(self.moments.iter_mut()).zip(lrs) {
            let (data, grad) = p.parts_mut();
            let Some(grad) = grad else { continue };
            if m.len() != data.len() {
                *m = vec![T::zero(); data.len()];
                *v = vec![T::zero(); data.len()];
            }
            for (((x, &g), mi), vi) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + self.weight_decay * *x;
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
