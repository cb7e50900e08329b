//! AdamW with decoupled weight decay, cosine learning-rate annealing, and
//! global-norm gradient clipping. Moment tables live in double precision
//! regardless of the parameter element type.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct AdamW {
    pub cfg: AdamConfig,
    pub step_count: u64,
    /// first/second moment per parameter, keyed like the parameter map
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW { cfg, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update over every parameter. `grads` must cover exactly the keys
    /// of `params`.
    pub fn step<E: Element>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<E>>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        for name in params.keys() {
            if !grads.contains_key(name) {
                return Err(Error::Parameter(format!("gradient missing for parameter {name:?}")));
            }
        }
        if grads.len() != params.len() {
            return Err(Error::Parameter(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            if g.len() != p.len() {
                return Err(Error::shape(format!(
                    "gradient for {name:?} has {} entries, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let x = p.data()[i].to_real();
                let updated = x - lr * (mhat / (vhat.sqrt() + eps) + weight_decay * x);
                p.data_mut()[i] = E::from_real(updated);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from lr_init (epoch 0) to lr_min (epoch == total).
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Schedule("cosine schedule needs at least one epoch".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Schedule(format!(
            "epoch {epoch} beyond schedule horizon {total_epochs}"
        )));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Parameter(format!("clip norm must be positive, got {max_norm}")));
    }
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![x]))])
    }

    fn grad_of(map: &BTreeMap<String, Tensor<f64>>, f: impl Fn(f64) -> f64) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), vec![f(map["w"].data()[0])])])
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        let mut p = one_param(1.0);
        let g = BTreeMap::from([("w".to_string(), vec![0.3])]);
        opt.step(&mut p, &g, 0.01).unwrap();
        // bias-corrected first step is lr * g/(|g|+eps') ~ lr * sign(g)
        assert!((p["w"].data()[0] - (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut opt = AdamW::new(cfg);
        let mut p = one_param(0.5);
        let lr = 0.1;
        let (g1, g2) = (0.4, -0.2);
        opt.step(&mut p, &BTreeMap::from([("w".into(), vec![g1])]), lr).unwrap();
        opt.step(&mut p, &BTreeMap::from([("w".into(), vec![g2])]), lr).unwrap();
        // hand replay
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut x = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
        }
        assert!((p["w"].data()[0] - x).abs() < 1e-14);
    }

    #[test]
    fn weight_decay_is_decoupled_from_moments() {
        let mut opt = AdamW::new(AdamConfig::default());
        let mut p = one_param(2.0);
        let zero_grad = BTreeMap::from([("w".to_string(), vec![0.0])]);
        let lr = 0.05;
        opt.step(&mut p, &zero_grad, lr).unwrap();
        opt.step(&mut p, &zero_grad, lr).unwrap();
        // zero gradient leaves moments at zero; only multiplicative decay acts
        let want = 2.0 * (1.0 - lr * 0.01) * (1.0 - lr * 0.01);
        assert!((p["w"].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn quadratic_descent_converges() {
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        let mut p = one_param(3.0);
        for _ in 0..2000 {
            let g = grad_of(&p, |x| 2.0 * x);
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        assert!(p["w"].data()[0].abs() < 1e-3, "got {}", p["w"].data()[0]);
    }

    #[test]
    fn missing_or_misshapen_gradients_rejected() {
        let mut opt = AdamW::new(AdamConfig::default());
        let mut p = one_param(1.0);
        assert!(opt.step(&mut p, &BTreeMap::new(), 0.01).is_err());
        let wrong = BTreeMap::from([("w".to_string(), vec![0.1, 0.2])]);
        assert!(opt.step(&mut p, &wrong, 0.01).is_err());
        let ok = BTreeMap::from([("w".to_string(), vec![0.1])]);
        assert!(opt.step(&mut p, &ok, -1.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_shape() {
        let (lr0, lrn) = (1e-4, 1e-6);
        assert_eq!(cosine_lr(0, 30, lr0, lrn).unwrap(), lr0);
        assert!((cosine_lr(30, 30, lr0, lrn).unwrap() - lrn).abs() < 1e-20);
        let mid = cosine_lr(15, 30, lr0, lrn).unwrap();
        assert!((mid - (lr0 + lrn) / 2.0).abs() < 1e-12);
        let mut prev = f64::MAX;
        for e in 0..=30 {
            let lr = cosine_lr(e, 30, lr0, lrn).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
        assert!(matches!(cosine_lr(31, 30, lr0, lrn), Err(Error::Schedule(_))));
        assert!(matches!(cosine_lr(0, 0, lr0, lrn), Err(Error::Schedule(_))));
    }

    #[test]
    fn clipping_preserves_direction_and_returns_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), vec![6.0, 0.0]),
            ("b".to_string(), vec![0.0, 8.0]),
        ]);
        let norm = clip_global_norm(&mut g, 5.0).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((g["a"][0] - 3.0).abs() < 1e-12);
        assert!((g["b"][1] - 4.0).abs() < 1e-12);
        let mut small = BTreeMap::from([("a".to_string(), vec![0.3, 0.4])]);
        let norm = clip_global_norm(&mut small, 5.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(small["a"], vec![0.3, 0.4]);
    }
}
