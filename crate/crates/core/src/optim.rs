//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("adam {name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config(format!("adam eps must be finite and > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = |p: &Param| vec![0.0; p.tensor.numel()];
        Self {
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }
}

/// One Adam update at step `t` (1-based), in place.
///
/// Every gradient is checked before any parameter is touched, so a
/// non-finite gradient leaves parameters and state unchanged.
pub fn adam_step(
    params: &mut [Param],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adam step index starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} gradients, {} state buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if g.len() != p.tensor.numel() || m.len() != p.tensor.numel() {
            return Err(Error::dim(format!("adam: size mismatch for {}", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
    }

    let exponent = i32::try_from(t).unwrap_or(i32::MAX);
    let correction1 = 1.0 - cfg.beta1.powi(exponent);
    let correction2 = 1.0 - cfg.beta2.powi(exponent);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::{stream_rng, uniform};

    fn param(values: Vec<f64>) -> Param {
        Param {
            name: "w".into(),
            tensor: Tensor::from_vec(values),
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = vec![param(vec![0.3, -1.2, 4.0])];
        let before = params[0].tensor.clone();
        let mut state = AdamState::new(&params);
        for t in 1..=20 {
            adam_step(&mut params, &[vec![0.0; 3]], &mut state, t, &AdamConfig::default()).unwrap();
        }
        assert_eq!(params[0].tensor, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![param(vec![0.0])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig { learning_rate: 0.1, ..Default::default() };
        adam_step(&mut params, &[vec![1.0]], &mut state, 1, &cfg).unwrap();
        assert!((params[0].tensor.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut rng = stream_rng(99, "adam-bowl");
        let target: Vec<f64> = (0..10).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let start: Vec<f64> = (0..10).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let mut params = vec![param(start)];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig { learning_rate: 0.05, ..Default::default() };
        for t in 1..=500 {
            let grad: Vec<f64> = params[0].tensor.data().iter().zip(&target).map(|(w, c)| 2.0 * (w - c)).collect();
            adam_step(&mut params, &[grad], &mut state, t, &cfg).unwrap();
        }
        let dist: f64 = params[0].tensor.data().iter().zip(&target).map(|(w, c)| (w - c).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "distance {dist}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut params = vec![param(vec![1.0, 2.0])];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[vec![0.5, f64::NAN]], &mut state, 1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "w"));
        assert_eq!(params[0].tensor.data(), &[1.0, 2.0]);
    }

    #[test]
    fn validates_config() {
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        AdamConfig::default().validate().unwrap();
    }
}
