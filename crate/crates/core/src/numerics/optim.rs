use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamW {
    pub fn new<'t>(config: AdamWConfig, params: impl IntoIterator<Item = &'t Tensor>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|t| t.shape().to_vec()).collect();
        let first = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        let second = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        Self { config, step: 0, first, second, shapes }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One update using each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.shapes[i].as_slice() {
                return Err(Error::Shape(format!("parameter {i} changed shape")));
            }
            if p.grad().is_none() {
                return Err(Error::Contract(format!("parameter {i} has no gradient")));
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().unwrap().to_vec();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(values: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let mut t = Tensor::new(vec![values.len()], values).unwrap();
        t.accumulate_grad(&grad).unwrap();
        t
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = with_grad(vec![0.3, -1.2, 4.0], vec![0.0; 3]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, [&p]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), &[0.3, -1.2, 4.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // From zero state m̂ = g and v̂ = g², so the update is lr·g/(|g|+eps).
        let g = [0.5, -2.0, 1e-3];
        let mut p = with_grad(vec![1.0, 1.0, 1.0], g.to_vec());
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg.clone(), [&p]);
        opt.step(&mut [&mut p]).unwrap();
        for (w, gi) in p.values().iter().zip(g) {
            let expected = 1.0 - cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((w - expected).abs() < 1e-14, "{w} vs {expected}");
        }
    }

    #[test]
    fn two_steps_match_reference_adamw() {
        // torch.optim.AdamW(lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1), float64
        let cfg = AdamWConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
        let mut p = Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 0.0]).unwrap();
        let mut opt = AdamW::new(cfg, [&p]);
        let expected = [
            [0.4895000003333333, -1.238750000142857, 1.988000000090909, 0.0],
            [0.48756529509252633, -1.2353875768591638, 1.9761135083840253, -0.007441366131459889],
        ];
        for (g, want) in [[0.3, -0.7, 1.1, 0.0], [-0.2, 0.4, 0.9, 0.05]].iter().zip(expected) {
            p.zero_grad();
            p.accumulate_grad(g).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            for (a, b) in p.values().iter().zip(want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(AdamWConfig::default(), [&p]);
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Contract(_))));
        assert_eq!(opt.steps(), 0);
    }
}
