//! The dual-domain objective: a spectral fidelity term, a smoothed isotropic
//! total variation, its scale-normalised form, and their weighted sum.
//!
//! Every term is evaluated together with its gradient in the reconstruction,
//! so it can be attached to an autodiff [`Graph`] as a single node.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::spectrum::{ComplexSpectrum, Fft2Plan};

/// Weights and stabilisers of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the spectral fidelity term.
    pub alpha: f64,
    /// Weight of the normalised TV term.
    pub beta: f64,
    /// Added to `‖F(y)‖²` in the spectral denominator.
    pub gamma_spec: f64,
    /// TV smoothing constant, also added to `‖x̂‖²` in the TV denominator.
    pub gamma_tv: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-4,
            gamma_spec: 1e-8,
            gamma_tv: 1e-8,
        }
    }
}

impl ObjectiveConfig {
    /// Weights may be zero (to isolate one term); stabilisers must be positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("gamma_spec", self.gamma_spec), ("gamma_tv", self.gamma_tv)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    /// Differences across the far image border are zero.
    Neumann,
}

/// Forward differences of every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceField {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub boundary: Boundary,
}

/// `dx(i,j) = x(i,j+1) − x(i,j)`, `dy(i,j) = x(i+1,j) − x(i,j)`, zero on the
/// last column / last row.
pub fn finite_differences(x: &Image) -> FiniteDifferenceField {
    let (h, w) = (x.height(), x.width());
    let mut dx = vec![0.0; x.len()];
    let mut dy = vec![0.0; x.len()];
    for c in 0..x.channels() {
        let plane = x.channel(c);
        let base = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                if j + 1 < w {
                    dx[base + p] = plane[p + 1] - plane[p];
                }
                if i + 1 < h {
                    dy[base + p] = plane[p + w] - plane[p];
                }
            }
        }
    }
    FiniteDifferenceField {
        dx,
        dy,
        boundary: Boundary::Neumann,
    }
}

/// Compensated (Neumaier) summation.
fn accurate_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_gamma(gamma: f64, name: &str) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be finite and > 0, got {gamma}")))
    }
}

/// `Σ sqrt(dx² + dy² + γ²)` over all pixels of all channels.
pub fn smoothed_tv(x: &Image, gamma_tv: f64) -> Result<f64> {
    check_gamma(gamma_tv, "gamma_tv")?;
    let fd = finite_differences(x);
    let g2 = gamma_tv * gamma_tv;
    Ok(accurate_sum(
        fd.dx.iter().zip(&fd.dy).map(|(a, b)| (a * a + b * b + g2).sqrt()),
    ))
}

/// [`smoothed_tv`] and its gradient, the negative divergence of the
/// normalised gradient field.
pub fn smoothed_tv_grad(x: &Image, gamma_tv: f64) -> Result<(f64, Vec<f64>)> {
    check_gamma(gamma_tv, "gamma_tv")?;
    let fd = finite_differences(x);
    let g2 = gamma_tv * gamma_tv;
    let norms: Vec<f64> = fd
        .dx
        .iter()
        .zip(&fd.dy)
        .map(|(a, b)| (a * a + b * b + g2).sqrt())
        .collect();
    let value = accurate_sum(norms.iter().copied());

    let (h, w) = (x.height(), x.width());
    let mut grad = vec![0.0; x.len()];
    for c in 0..x.channels() {
        let base = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let p = base + i * w + j;
                let px = fd.dx[p] / norms[p];
                let py = fd.dy[p] / norms[p];
                grad[p] -= px + py;
                if j + 1 < w {
                    grad[p + 1] += px;
                }
                if i + 1 < h {
                    grad[p + w] += py;
                }
            }
        }
    }
    Ok((value, grad))
}

/// `TV(x) / (‖x‖² + γ)`.
pub fn normalized_tv_loss(x: &Image, gamma_tv: f64) -> Result<f64> {
    Ok(smoothed_tv(x, gamma_tv)? / (x.squared_norm() + gamma_tv))
}

pub fn normalized_tv_loss_grad(x: &Image, gamma_tv: f64) -> Result<(f64, Vec<f64>)> {
    let (tv, tv_grad) = smoothed_tv_grad(x, gamma_tv)?;
    let denom = x.squared_norm() + gamma_tv;
    let value = tv / denom;
    let grad = tv_grad
        .iter()
        .zip(x.as_slice())
        .map(|(g, v)| g / denom - 2.0 * value * v / denom)
        .collect();
    Ok((value, grad))
}

/// Spectral fidelity against a fixed observation `y`.
///
/// `F(y)` and the denominator `‖F(y)‖² + γ` are computed once at
/// construction; `y` is data, so no gradient flows through them.
#[derive(Debug, Clone)]
pub struct SpectralFidelity {
    plan: Fft2Plan,
    target: Image,
    target_spectrum: ComplexSpectrum,
    denominator: f64,
}

impl SpectralFidelity {
    pub fn new(y: &Image, gamma_spec: f64) -> Result<Self> {
        check_gamma(gamma_spec, "gamma_spec")?;
        let plan = Fft2Plan::new(y.height(), y.width());
        let target_spectrum = plan.forward(y)?;
        let denominator = target_spectrum.squared_norm() + gamma_spec;
        Ok(Self {
            plan,
            target: y.clone(),
            target_spectrum,
            denominator,
        })
    }

    pub fn denominator(&self) -> f64 {
        self.denominator
    }

    pub fn value(&self, xhat: &Image) -> Result<f64> {
        xhat.check_same_shape(&self.target, "spectral fidelity")?;
        let spectrum = self.plan.forward(xhat)?;
        Ok(spectrum.squared_distance(&self.target_spectrum)? / self.denominator)
    }

    /// Value and gradient `2·H·W·(x̂ − y) / (‖F(y)‖² + γ)` (Parseval).
    pub fn value_and_grad(&self, xhat: &Image) -> Result<(f64, Vec<f64>)> {
        let value = self.value(xhat)?;
        let scale = 2.0 * xhat.pixels_per_channel() as f64 / self.denominator;
        let grad = xhat
            .as_slice()
            .iter()
            .zip(self.target.as_slice())
            .map(|(a, b)| scale * (a - b))
            .collect();
        Ok((value, grad))
    }
}

pub fn spectral_fidelity_loss(xhat: &Image, y: &Image, gamma_spec: f64) -> Result<f64> {
    xhat.check_same_shape(y, "spectral fidelity")?;
    SpectralFidelity::new(y, gamma_spec)?.value(xhat)
}

pub fn spectral_fidelity_loss_grad(xhat: &Image, y: &Image, gamma_spec: f64) -> Result<(f64, Vec<f64>)> {
    xhat.check_same_shape(y, "spectral fidelity")?;
    SpectralFidelity::new(y, gamma_spec)?.value_and_grad(xhat)
}

/// Values of the objective's components at one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub spectral: f64,
    pub tv: f64,
}

/// `α·L_IS + β·L_TV` bound to one observation.
#[derive(Debug, Clone)]
pub struct Objective {
    cfg: ObjectiveConfig,
    spectral: SpectralFidelity,
}

impl Objective {
    pub fn new(y: &Image, cfg: ObjectiveConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            spectral: SpectralFidelity::new(y, cfg.gamma_spec)?,
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.cfg
    }

    pub fn terms(&self, xhat: &Image) -> Result<LossTerms> {
        let spectral = self.spectral.value(xhat)?;
        let tv = normalized_tv_loss(xhat, self.cfg.gamma_tv)?;
        Ok(LossTerms {
            total: self.cfg.alpha * spectral + self.cfg.beta * tv,
            spectral,
            tv,
        })
    }

    pub fn terms_and_grad(&self, xhat: &Image) -> Result<(LossTerms, Vec<f64>)> {
        let (spectral, gs) = self.spectral.value_and_grad(xhat)?;
        let (tv, gt) = normalized_tv_loss_grad(xhat, self.cfg.gamma_tv)?;
        let (a, b) = (self.cfg.alpha, self.cfg.beta);
        let grad = gs.iter().zip(&gt).map(|(s, t)| a * s + b * t).collect();
        Ok((
            LossTerms {
                total: a * spectral + b * tv,
                spectral,
                tv,
            },
            grad,
        ))
    }

    /// Attaches both terms to `graph` as functions of the node `xhat` and
    /// returns the scalar total.
    pub fn record(&self, graph: &mut Graph, xhat: TensorId) -> Result<(TensorId, LossTerms)> {
        let img = Image::from_tensor(graph.value(xhat))?;
        let (spectral, gs) = self.spectral.value_and_grad(&img)?;
        let (tv, gt) = normalized_tv_loss_grad(&img, self.cfg.gamma_tv)?;
        let spectral_node = graph.scalar_fn(xhat, spectral, gs, "spectral_fidelity")?;
        let tv_node = graph.scalar_fn(xhat, tv, gt, "normalized_tv")?;
        let weighted_spectral = graph.scale(spectral_node, self.cfg.alpha)?;
        let weighted_tv = graph.scale(tv_node, self.cfg.beta)?;
        let total = graph.add(weighted_spectral, weighted_tv)?;
        let terms = LossTerms {
            total: graph.value(total).item().expect("scalar"),
            spectral,
            tv,
        };
        Ok((total, terms))
    }
}

pub fn total_loss(xhat: &Image, y: &Image, cfg: &ObjectiveConfig) -> Result<LossTerms> {
    xhat.check_same_shape(y, "total_loss")?;
    Objective::new(y, *cfg)?.terms(xhat)
}
