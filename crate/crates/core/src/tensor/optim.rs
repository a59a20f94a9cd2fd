use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over an ordered list of trainable tensors.
///
/// Moment buffers are allocated on the first step and must keep matching
/// the parameter shapes afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores moment buffers and the step counter (e.g. from a checkpoint).
    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }

    /// Applies one update to every tensor that carries a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().filter(|p| p.requires_grad()).collect();
        if self.m.is_empty() && self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || params.iter().zip(&self.m).any(|(p, m)| p.numel() != m.len()) {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: self.m.iter().map(Vec::len).collect(),
                right: params.iter().map(|p| p.numel()).collect(),
            });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.data_and_grad();
            let grad = grad.expect("filtered to trainable tensors");
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn restore(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().filter(|p| p.requires_grad()).collect();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len()
            || params.iter().zip(&self.velocity).any(|(p, v)| p.numel() != v.len())
        {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                left: self.velocity.iter().map(Vec::len).collect(),
                right: params.iter().map(|p| p.numel()).collect(),
            });
        }
        let SgdConfig { lr, momentum } = self.config;
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let (data, grad) = p.data_and_grad();
            let grad = grad.expect("filtered to trainable tensors");
            for i in 0..data.len() {
                if momentum == 0.0 {
                    data[i] -= lr * grad[i];
                } else {
                    vel[i] = momentum * vel[i] + grad[i];
                    data[i] -= lr * vel[i];
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::scalar(value).with_requires_grad(true);
        t.grad_mut().unwrap()[0] = grad;
        t
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut p = param(0.0, g);
            let mut st = AdamState::new(AdamConfig::new(1e-4, 0.5, 0.999));
            st.step([&mut p]).unwrap();
            let d = p.item();
            assert!((d.abs() - 1e-4).abs() < 1e-8, "step {d} for grad {g}");
            assert_eq!(d.signum(), -g.signum());
            assert_eq!(st.steps(), 1);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = param(3.0, 0.0);
        let mut st = AdamState::new(AdamConfig::new(1e-4, 0.5, 0.999));
        st.step([&mut p]).unwrap();
        assert_eq!(p.item(), 3.0);
    }

    #[test]
    fn adam_two_unit_gradient_steps() {
        // t=1: m̂ = 1, v̂ = 1 → Δ = −0.1/(1+1e-8)
        // t=2: m = 0.19, v = 0.001999; m̂ = 0.19/0.19, v̂ = 0.001999/0.001999 → same
        let mut p = param(0.0, 1.0);
        let mut st = AdamState::new(AdamConfig::new(0.1, 0.9, 0.999));
        st.step([&mut p]).unwrap();
        let after1 = p.item();
        st.step([&mut p]).unwrap();
        let after2 = p.item();
        let (d1, d2) = (-after1, after1 - after2);
        assert!(d1 > 0.0 && d1 <= 0.1);
        assert!(d2 > 0.0 && d2 <= 0.1);
        assert!((d1 - 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_changed_parameter_set() {
        let mut a = param(0.0, 1.0);
        let mut st = AdamState::new(AdamConfig::new(0.1, 0.9, 0.999));
        st.step([&mut a]).unwrap();
        let mut b = Tensor::zeros(&[3]).with_requires_grad(true);
        assert!(st.step([&mut b]).is_err());
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = param(1.0, 2.0);
        let mut st = SgdState::new(SgdConfig { lr: 0.5, momentum: 0.0 });
        st.step([&mut p]).unwrap();
        assert_eq!(p.item(), 0.0);
        st.step([&mut p]).unwrap();
        assert_eq!(p.item(), -1.0);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut p = param(0.0, 1.0);
        let mut st = SgdState::new(SgdConfig { lr: 1.0, momentum: 0.9 });
        st.step([&mut p]).unwrap();
        assert!((p.item() + 1.0).abs() < 1e-15);
        st.step([&mut p]).unwrap();
        assert!((p.item() + 2.9).abs() < 1e-12);
    }
}
