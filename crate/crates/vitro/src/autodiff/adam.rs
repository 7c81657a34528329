use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter Adam moment buffers.
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over an explicit set of trainable tensors.
///
/// The parameter set is fixed at construction and refuses frozen tensors, so
/// anything with trainable=false is structurally outside the optimizer.
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    params: Vec<Tensor>,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, cfg: AdamConfig) -> Result<Adam> {
        for p in &params {
            if !p.is_trainable() {
                return Err(Error::Contract(format!(
                    "optimizer parameter set must contain only trainable tensors, got frozen tensor id {}",
                    p.id()
                )));
            }
        }
        let states = params
            .iter()
            .map(|p| AdamState {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            })
            .collect();
        Ok(Adam {
            cfg,
            step_count: 0,
            params,
            states,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Seeds a zero gradient on any parameter the last backward pass never
    /// reached. Callers use this when a parameter can legitimately sit out a
    /// step (e.g. a batch whose templates all lack the shared slot).
    pub fn zero_missing_grads(&self) {
        for p in &self.params {
            if p.grad().is_none() {
                p.seed_grad(0.0);
            }
        }
    }

    /// One update over every parameter; gradients are consumed (zeroed).
    pub fn step(&mut self) -> Result<()> {
        for p in &self.params {
            if p.grad().is_none() {
                return Err(Error::Contract(format!(
                    "adam step with missing gradient on tensor id {} (shape {:?})",
                    p.id(),
                    p.shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);
        for (p, st) in self.params.iter().zip(self.states.iter_mut()) {
            let grad = p.grad().expect("checked above");
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let g = grad[i];
                st.m[i] = self.cfg.beta1 * st.m[i] + (1.0 - self.cfg.beta1) * g;
                st.v[i] = self.cfg.beta2 * st.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            p.overwrite_data(&data);
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_over_one_plus_eps() {
        // t=1, g=1, lr=0.1: bias correction makes m_hat = v_hat = 1, so the
        // update is 0.1 / (1 + 1e-8).
        let p = Tensor::from_vec(vec![1], vec![5.0]).unwrap().trainable();
        let mut adam = Adam::new(vec![p.clone()], AdamConfig::with_lr(0.1)).unwrap();
        p.accumulate_grad(&[1.0]);
        adam.step().unwrap();
        let expected = 5.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.value() - expected).abs() < 1e-15);
        assert!(p.grad().is_none(), "grads must be zeroed after the step");
    }

    #[test]
    fn zero_grad_leaves_parameter_unchanged() {
        let p = Tensor::from_vec(vec![2], vec![1.5, -2.5]).unwrap().trainable();
        let mut adam = Adam::new(vec![p.clone()], AdamConfig::with_lr(0.1)).unwrap();
        p.accumulate_grad(&[0.0, 0.0]);
        adam.step().unwrap();
        assert_eq!(p.to_vec(), vec![1.5, -2.5]);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let p = Tensor::from_vec(vec![1], vec![1.0]).unwrap().trainable();
        let mut adam = Adam::new(vec![p], AdamConfig::with_lr(0.1)).unwrap();
        assert!(matches!(adam.step(), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_tensor_rejected_from_parameter_set() {
        let frozen = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            Adam::new(vec![frozen], AdamConfig::with_lr(0.1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identical_runs_produce_bit_identical_trajectories() {
        let run = || {
            let p = Tensor::from_vec(vec![3], vec![0.3, -0.7, 1.1]).unwrap().trainable();
            let mut adam = Adam::new(vec![p.clone()], AdamConfig::with_lr(0.05)).unwrap();
            let mut trajectory = Vec::new();
            for step in 0..50 {
                let g: Vec<f64> = p.to_vec().iter().map(|x| x * 0.5 + step as f64 * 0.01).collect();
                p.accumulate_grad(&g);
                adam.step().unwrap();
                trajectory.extend(p.to_vec().iter().map(|x| x.to_bits()));
            }
            trajectory
        };
        assert_eq!(run(), run());
    }
}
