//! AdamW (decoupled weight decay) over named parameter tensors.

use std::collections::BTreeMap;

use crate::error::{MorphError, Result};
use crate::tensor::Tensor;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;
pub const WEIGHT_DECAY: f32 = 0.01;

pub struct AdamW {
    lr: f32,
    weight_decay: f32,
    step_count: u64,
    params: Vec<(String, Tensor)>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: Vec<(String, Tensor)>, lr: f32) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            lr,
            weight_decay: WEIGHT_DECAY,
            step_count: 0,
            params,
            m,
            v,
        }
    }

    pub fn without_weight_decay(mut self) -> Self {
        self.weight_decay = 0.0;
        self
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients accumulated on the parameters,
    /// then clear them. Parameters with no gradient this step are skipped
    /// (their moments still decay nothing; step count is global).
    pub fn step(&mut self) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - (BETA1 as f64).powf(t);
        let bc2 = 1.0 - (BETA2 as f64).powf(t);
        for (i, (name, p)) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(MorphError::numeric(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
            let mut data = p.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + EPS as f64)
                    + self.weight_decay as f64 * data[j] as f64;
                data[j] = (data[j] as f64 - self.lr as f64 * update) as f32;
            }
            p.set_data(&data)?;
            p.zero_grad();
        }
        Ok(())
    }

    /// Moment buffers keyed by parameter name, for checkpointing.
    pub fn state(&self) -> BTreeMap<String, (Vec<f32>, Vec<f32>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), (self.m[i].clone(), self.v[i].clone())))
            .collect()
    }

    pub fn restore_state(
        &mut self,
        step_count: u64,
        state: &BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    ) -> Result<()> {
        self.step_count = step_count;
        for (i, (name, p)) in self.params.iter().enumerate() {
            let Some((m, v)) = state.get(name) else {
                return Err(MorphError::format(format!(
                    "optimizer state missing parameter `{name}`"
                )));
            };
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(MorphError::shape(format!(
                    "optimizer state for `{name}`: {} values, parameter has {}",
                    m.len(),
                    p.numel()
                )));
            }
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2; AdamW with tiny decay still lands near 3.
        let x = Tensor::from_vec(vec![0.0], &[1]).unwrap().requires_grad();
        let mut opt = AdamW::new(vec![("x".to_string(), x.clone())], 0.1);
        for _ in 0..500 {
            let loss = x.shift(-3.0).square().sum();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        let v = x.to_vec()[0];
        assert!((v - 3.0).abs() < 0.1, "converged to {v}");
    }

    #[test]
    fn skips_params_without_grad() {
        let a = Tensor::from_vec(vec![1.0], &[1]).unwrap().requires_grad();
        let b = Tensor::from_vec(vec![5.0], &[1]).unwrap().requires_grad();
        let mut opt = AdamW::new(
            vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())],
            0.01,
        );
        let loss = a.square().sum();
        loss.backward().unwrap();
        opt.step().unwrap();
        assert_eq!(b.to_vec(), vec![5.0]);
        assert_ne!(a.to_vec(), vec![1.0]);
    }

    #[test]
    fn state_round_trips() {
        let x = Tensor::from_vec(vec![2.0, -1.0], &[2]).unwrap().requires_grad();
        let mut opt = AdamW::new(vec![("x".to_string(), x.clone())], 0.05);
        for _ in 0..3 {
            x.mean_square().backward().unwrap();
            opt.step().unwrap();
        }
        let saved = opt.state();
        let step = opt.step_count();
        let mut opt2 = AdamW::new(vec![("x".to_string(), x.clone())], 0.05);
        opt2.restore_state(step, &saved).unwrap();
        assert_eq!(opt2.state(), saved);
        assert_eq!(opt2.step_count(), 3);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let x = Tensor::from_vec(vec![1.0], &[1]).unwrap().requires_grad();
        let mut opt = AdamW::new(vec![("x".to_string(), x.clone())], 0.01);
        let loss = x.scale(f32::NAN).sum();
        loss.backward().unwrap();
        assert!(opt.step().is_err());
    }
}
