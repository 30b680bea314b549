//! Adam optimizer with bias correction.

use super::array::DiffArray;
use crate::{Error, Result};

/// Adam hyperparameters. Defaults follow the standard published values.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update on a single tensor. `t` is the 1-based step count after
/// this update (used for bias correction); the caller increments it once per
/// optimizer step, shared across tensors.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::Shape(format!(
            "adam_step: lengths differ (params {}, grads {}, m {}, v {})",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Config("adam_step: step count t must be ≥ 1".into()));
    }
    let b1c = 1.0 - hp.beta1.powi(t as i32);
    let b2c = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(Error::Numerical(format!("adam_step: non-finite gradient {g}")));
        }
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = m[i] / b1c;
        let vhat = v[i] / b2c;
        params[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Optimizer state for a fixed ordered list of tensors.
///
/// The tensor order is established at construction and must match the order
/// used for every subsequent [`Adam::step`]; training code derives both from
/// the model's parameter registry, so they cannot drift.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hp: AdamParams,
    /// Completed step count (0 before the first update).
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    /// Fresh state (all moments zero) for tensors of the given sizes.
    pub fn new(sizes: &[usize], hp: AdamParams) -> Self {
        Adam {
            hp,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update across all tensors, advancing the shared step count.
    pub fn step(&mut self, params: &mut [DiffArray], grads: &[DiffArray]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: tensor counts differ (params {}, grads {}, state {})",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        for i in 0..params.len() {
            adam_step(
                params[i].values_mut(),
                grads[i].values(),
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                &self.hp,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_fresh_params_unchanged() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        adam_step(&mut p, &g, &mut m, &mut v, 1, &AdamParams::with_lr(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = vec![1.0];
        let g = vec![3.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_step(&mut p, &g, &mut m, &mut v, 1, &AdamParams::with_lr(0.0)).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // Hand evaluation: m=0.1, v=0.001; bias-corrected mhat=1, vhat=1;
        // p -= 0.1·1/(1+1e-8) ≈ 0.1.
        let mut p = vec![1.0];
        let g = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_step(&mut p, &g, &mut m, &mut v, 1, &AdamParams::with_lr(0.1)).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn rejects_mismatched_lengths_and_nonfinite_grads() {
        let mut p = vec![1.0, 2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        assert!(adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &AdamParams::with_lr(0.1)).is_err());
        assert!(
            adam_step(&mut p, &[1.0, f64::NAN], &mut m, &mut v, 1, &AdamParams::with_lr(0.1))
                .is_err()
        );
    }

    #[test]
    fn stateful_adam_steps_multiple_tensors() {
        let mut params = vec![
            DiffArray::new(vec![2], vec![1.0, 1.0]).unwrap(),
            DiffArray::new(vec![1], vec![-1.0]).unwrap(),
        ];
        let grads = vec![
            DiffArray::new(vec![2], vec![1.0, -1.0]).unwrap(),
            DiffArray::new(vec![1], vec![1.0]).unwrap(),
        ];
        let mut opt = Adam::new(&[2, 1], AdamParams::with_lr(0.1));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(opt.t, 1);
        assert!((params[0].values()[0] - 0.9).abs() < 1e-6);
        assert!((params[0].values()[1] - 1.1).abs() < 1e-6);
        assert!((params[1].values()[0] + 1.1).abs() < 1e-6);
    }
}
