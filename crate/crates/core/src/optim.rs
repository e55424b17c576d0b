//! AdamW with bias-corrected moments and decoupled weight decay.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to tensors of rank two or more only; biases, norm gains and
    /// the class token are never decayed.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every tensor from its accumulated gradient. Tensors
    /// without a gradient buffer are left alone. The tensor list must be in
    /// the same order on every call.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (data, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = grad[j].as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = data[j].as_f64();
                x -= c.lr * decay * x;
                x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                data[j] = T::from_f64(x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut t = Tensor::<f32>::from_f64([2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap().with_grad();
        t.grad_mut();
        let before = t.clone();
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0));
        opt.step(&mut [&mut t]);
        assert_eq!(t.data(), before.data());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut t = Tensor::<f64>::from_f64([1], &[0.3]).unwrap().with_grad();
        t.grad_mut()[0] = 1.0;
        let mut opt = AdamW::new(AdamConfig::new(1e-3, 0.0));
        opt.step(&mut [&mut t]);
        assert!((t.data()[0] - (0.3 - 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_matrices() {
        let mut w = Tensor::<f64>::full([2, 2], 1.0).with_grad();
        let mut b = Tensor::<f64>::full([2], 1.0).with_grad();
        w.grad_mut();
        b.grad_mut();
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.05));
        opt.step(&mut [&mut w, &mut b]);
        assert!((w.data()[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-12);
        assert_eq!(b.data()[0], 1.0);
    }
}
