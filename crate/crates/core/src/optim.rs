//! AdamW with decoupled weight decay and the poly learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// `lr0 * (1 - step / total)^power`, reaching 0 at `step == total`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total) as f64) / total as f64;
    lr0 * (1.0 - frac).powf(power)
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u32,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.values.iter().map(|v| vec![0.0; v.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One update. Weight decay shrinks the parameters directly rather
    /// than entering the moment estimates.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if grads.values.len() != params.values.len() || params.values.len() != self.first.len() {
            return Err(Error::ShapeMismatch("gradient layout differs from parameters".into()));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, (p, g)) in params.values.iter_mut().zip(&grads.values).enumerate() {
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch(format!("parameter {}", params.names[i])));
            }
            let m1 = &mut self.first[i];
            let m2 = &mut self.second[i];
            for j in 0..p.len() {
                m1[j] = self.beta1 * m1[j] + (1.0 - self.beta1) * g[j];
                m2[j] = self.beta2 * m2[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m1[j] / bc1) / ((m2[j] / bc2).sqrt() + self.eps);
                p[j] -= lr * (update + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Vec<f64>) -> ParamSet {
        ParamSet {
            names: vec!["p".into()],
            values: vec![v],
        }
    }

    #[test]
    fn poly_endpoints_and_monotone() {
        assert_eq!(poly_lr(2e-4, 0, 100, 0.9), 2e-4);
        assert_eq!(poly_lr(2e-4, 100, 100, 0.9), 0.0);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = poly_lr(1.0, t, 100, 0.9);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(vec![1.0, -2.0]);
        let g = single(vec![0.5, -3.0]);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.values[0][0] - 0.9).abs() < 1e-6);
        assert!((p.values[0][1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = single(vec![2.0]);
        let g = single(vec![0.0]);
        let mut opt = AdamW::new(&p, 0.5);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.values[0][0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = single(vec![3.0]);
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..2000 {
            let g = single(vec![2.0 * p.values[0][0]]);
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        assert!(p.values[0][0].abs() < 1e-2);
    }
}
