//! Degradation model, PSNR, synthetic phantoms and the classical TV baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{smoothed_tv, smoothed_tv_grad};
use crate::rng::{fill_standard_normal, stream, stream_rng};

/// Additive white Gaussian noise with σ on the 0–255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_8bit: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma_8bit: f64, seed: u64) -> Result<Self> {
        let spec = Self { sigma_8bit, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_8bit.is_finite() && self.sigma_8bit > 0.0) {
            return Err(Error::config(format!(
                "sigma must be finite and > 0, got {}",
                self.sigma_8bit
            )));
        }
        Ok(())
    }

    /// Standard deviation on images scaled to `[0, 1]`.
    pub fn sigma_unit(&self) -> f64 {
        self.sigma_8bit / 255.0
    }
}

/// `y = x + n`, `n ~ N(0, (σ/255)²)` i.i.d. The result is not clipped; use
/// [`Image::clamp01`] for that.
pub fn add_gaussian_noise(x: &Image, spec: &NoiseSpec) -> Image {
    let mut noise = vec![0.0; x.len()];
    fill_standard_normal(&mut stream_rng(spec.seed, stream::NOISE), &mut noise);
    let sigma = spec.sigma_unit();
    let mut y = x.clone();
    for (v, n) in y.as_mut_slice().iter_mut().zip(&noise) {
        *v += sigma * n;
    }
    y
}

/// Mean squared difference over all channels and pixels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::dim("mse of empty images"));
    }
    let sum: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(peak² / MSE)` in dB.
///
/// Identical images give `f64::INFINITY`, which no finite MSE can produce.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::config(format!("psnr peak must be finite and > 0, got {peak}")));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// Formats a PSNR value, printing the identical-image sentinel as `inf`.
pub fn format_db(db: f64) -> String {
    if db == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

/// Gradient descent on `‖x − y‖² + λ·TV_γ(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvClassicalConfig {
    pub lambda: f64,
    /// TV smoothing constant. Much larger than the training default because
    /// the admissible step shrinks with it.
    pub gamma: f64,
    pub steps: usize,
    /// Defaults to `1 / (2 + 8λ/γ)`, the inverse Lipschitz bound of the
    /// gradient, which guarantees descent.
    pub step_size: Option<f64>,
}

impl Default for TvClassicalConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.01,
            steps: 1000,
            step_size: None,
        }
    }
}

impl TvClassicalConfig {
    pub fn effective_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or_else(|| 1.0 / (2.0 + 8.0 * self.lambda / self.gamma))
    }

    pub fn validate(&self) -> Result<()> {
        let step = self.effective_step_size();
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("step_size", step)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("tv {name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TvDenoised {
    pub image: Image,
    /// Objective at the start and after every step.
    pub objective: Vec<f64>,
}

pub fn tv_classical_objective(x: &Image, y: &Image, lambda: f64, gamma: f64) -> Result<f64> {
    let fidelity = x.zip_map(y, |a, b| a - b)?.squared_norm();
    Ok(fidelity + lambda * smoothed_tv(x, gamma)?)
}

/// Minimises the smoothed TV objective from `x = y`.
///
/// Fails with [`Error::StepSize`] if any step raises the objective by more
/// than `1e-9` relative.
pub fn tv_denoise_classical(y: &Image, cfg: &TvClassicalConfig) -> Result<TvDenoised> {
    cfg.validate()?;
    if !y.is_finite() {
        return Err(Error::config("observation contains non-finite values"));
    }
    let step = cfg.effective_step_size();
    let mut x = y.clone();
    let mut objective = Vec::with_capacity(cfg.steps + 1);
    objective.push(tv_classical_objective(&x, y, cfg.lambda, cfg.gamma)?);
    for k in 1..=cfg.steps {
        let (_, tv_grad) = smoothed_tv_grad(&x, cfg.gamma)?;
        for ((v, &obs), g) in x.as_mut_slice().iter_mut().zip(y.as_slice()).zip(&tv_grad) {
            *v -= step * (2.0 * (*v - obs) + cfg.lambda * g);
        }
        let before = objective[k - 1];
        let after = tv_classical_objective(&x, y, cfg.lambda, cfg.gamma)?;
        if !after.is_finite() || after > before + 1e-9 * before.abs().max(1.0) {
            return Err(Error::StepSize { step: k, before, after });
        }
        objective.push(after);
    }
    Ok(TvDenoised { image: x, objective })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Flat,
    Step,
    Circles,
    Ramp,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 4] = [Self::Flat, Self::Step, Self::Circles, Self::Ramp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Step => "step",
            Self::Circles => "circles",
            Self::Ramp => "ramp",
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown phantom `{s}` (flat, step, circles, ramp)")))
    }
}

// (centre row, centre column, radius, value), in unit coordinates; later
// disks are painted over earlier ones.
const DISKS: [(f64, f64, f64, f64); 3] = [
    (0.5, 0.5, 0.38, 0.6),
    (0.36, 0.4, 0.13, 0.9),
    (0.64, 0.63, 0.1, 0.35),
];
const CIRCLES_BACKGROUND: f64 = 0.15;

/// Deterministic analytic test image with values in `[0, 1]`, identical in
/// every channel.
pub fn make_phantom(kind: PhantomKind, height: usize, width: usize, channels: usize) -> Result<Image> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::dim(format!(
            "phantom size {channels}x{height}x{width} has a zero extent"
        )));
    }
    let (h, w) = (height as f64, width as f64);
    let img = Image::from_fn(channels, height, width, |_, i, j| match kind {
        PhantomKind::Flat => 0.5,
        PhantomKind::Step => {
            if j < width / 2 {
                0.25
            } else {
                0.75
            }
        }
        PhantomKind::Ramp => (j as f64 + 0.5) / w,
        PhantomKind::Circles => {
            let (u, v) = ((i as f64 + 0.5) / h, (j as f64 + 0.5) / w);
            DISKS
                .iter()
                .filter(|(cu, cv, r, _)| (u - cu).powi(2) + (v - cv).powi(2) <= r * r)
                .next_back()
                .map_or(CIRCLES_BACKGROUND, |d| d.3)
        }
    });
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    fn noisy(x: &Image, sigma: f64, seed: u64) -> Image {
        add_gaussian_noise(x, &NoiseSpec::new(sigma, seed).unwrap())
    }

    #[test]
    fn vanishing_sigma_is_identity() {
        let x = make_phantom(PhantomKind::Circles, 16, 16, 1).unwrap();
        let y = noisy(&x, 1e-12, 3);
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_is_seeded() {
        let x = make_phantom(PhantomKind::Flat, 8, 8, 3).unwrap();
        assert_eq!(noisy(&x, 25.0, 1), noisy(&x, 25.0, 1));
        assert_ne!(noisy(&x, 25.0, 1), noisy(&x, 25.0, 2));
    }

    #[test]
    fn noise_sample_std() {
        let x = Image::zeros(1, 256, 256);
        let y = noisy(&x, 25.0, 7);
        let n = y.len() as f64;
        let mean = y.as_slice().iter().sum::<f64>() / n;
        let var = y.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = 25.0 / 255.0;
        assert!((var.sqrt() - want).abs() < 0.02 * want, "std {}", var.sqrt());
        assert!(mean.abs() < 4.0 * want / n.sqrt());
    }

    #[test]
    fn noise_is_not_clipped() {
        let x = make_phantom(PhantomKind::Step, 32, 32, 1).unwrap();
        let y = noisy(&x, 50.0, 0);
        assert!(y.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)));
        assert!(y.clamp01().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(NoiseSpec::new(0.0, 0).is_err());
        assert!(NoiseSpec::new(f64::NAN, 0).is_err());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let x = make_phantom(PhantomKind::Ramp, 5, 7, 2).unwrap();
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = Image::filled(1, 4, 4, 0.1);
        let b = Image::zeros(1, 4, 4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((psnr(&a, &b, 2.0).unwrap() - (20.0 + 20.0 * 2f64.log10())).abs() < 1e-12);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Image::zeros(1, 4, 4);
        assert!(matches!(psnr(&a, &Image::zeros(1, 4, 5), 1.0), Err(Error::Dimension(_))));
        assert!(matches!(psnr(&a, &Image::zeros(3, 4, 4), 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn noisy_phantom_psnr_matches_sigma() {
        let x = make_phantom(PhantomKind::Circles, 64, 64, 1).unwrap();
        let expected = 10.0 * (255.0f64 / 25.0).powi(2).log10();
        for seed in 0..5 {
            let got = psnr(&x, &noisy(&x, 25.0, seed), 1.0).unwrap();
            assert!((got - expected).abs() < 0.3, "seed {seed}: {got} vs {expected}");
        }
    }

    #[test]
    fn psnr_decreases_with_sigma() {
        let x = make_phantom(PhantomKind::Circles, 32, 32, 1).unwrap();
        let mean_psnr = |sigma: f64| {
            (0..8).map(|s| psnr(&x, &noisy(&x, sigma, s), 1.0).unwrap()).sum::<f64>() / 8.0
        };
        let values: Vec<f64> = [5.0, 10.0, 15.0, 25.0, 50.0].map(mean_psnr).to_vec();
        assert!(values.windows(2).all(|p| p[0] > p[1]), "{values:?}");
    }

    #[test]
    fn phantoms() {
        let flat = make_phantom(PhantomKind::Flat, 6, 6, 2).unwrap();
        assert!(flat.as_slice().iter().all(|&v| v == 0.5));
        let step = make_phantom(PhantomKind::Step, 4, 6, 1).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(step.get(0, i, j), if j < 3 { 0.25 } else { 0.75 });
            }
        }
        for kind in PhantomKind::ALL {
            let img = make_phantom(kind, 17, 9, 3).unwrap();
            assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(kind.name().parse::<PhantomKind>().unwrap(), kind);
        }
        assert!(make_phantom(PhantomKind::Flat, 0, 4, 1).is_err());
        assert!("disk".parse::<PhantomKind>().is_err());
    }

    #[test]
    fn circles_golden_checksum() {
        let img = make_phantom(PhantomKind::Circles, 64, 64, 1).unwrap();
        let bytes: Vec<u8> = img.as_slice().iter().map(|v| (v * 255.0 + 0.5).floor() as u8).collect();
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, CIRCLES_64_SHA256);
    }

    const CIRCLES_64_SHA256: &str = "9dd706f99afa18276004e72e8cf43af83fc3ef1e1b3650710f5ae3181f98f14a";

    #[test]
    fn tv_classical_tiny_lambda_returns_input() {
        let x = make_phantom(PhantomKind::Step, 16, 16, 1).unwrap();
        let y = noisy(&x, 25.0, 4);
        let cfg = TvClassicalConfig { lambda: 1e-12, steps: 200, ..Default::default() };
        let out = tv_denoise_classical(&y, &cfg).unwrap();
        for (a, b) in out.image.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tv_classical_constant_is_fixed() {
        let y = Image::filled(2, 8, 8, 0.37);
        let out = tv_denoise_classical(&y, &TvClassicalConfig::default()).unwrap();
        assert_eq!(out.image, y);
    }

    #[test]
    fn tv_classical_matches_long_small_step_solve() {
        let x = make_phantom(PhantomKind::Step, 32, 32, 1).unwrap();
        let y = noisy(&x, 25.0, 8);
        let cfg = TvClassicalConfig { lambda: 0.1, ..Default::default() };
        let out = tv_denoise_classical(&y, &cfg).unwrap();
        let fine = TvClassicalConfig {
            steps: cfg.steps * 100,
            step_size: Some(cfg.effective_step_size() / 10.0),
            ..cfg
        };
        let oracle = tv_denoise_classical(&y, &fine).unwrap();
        let (a, b) = (*out.objective.last().unwrap(), *oracle.objective.last().unwrap());
        assert!((a - b).abs() < 1e-3 * b, "{a} vs {b}");
        assert!(out.objective.windows(2).all(|p| p[1] <= p[0] + 1e-9 * p[0]));
    }

    #[test]
    fn tv_classical_improves_psnr() {
        let x = make_phantom(PhantomKind::Step, 32, 32, 1).unwrap();
        let y = noisy(&x, 25.0, 9);
        let out = tv_denoise_classical(&y, &TvClassicalConfig::default()).unwrap();
        assert!(psnr(&x, &out.image, 1.0).unwrap() > psnr(&x, &y, 1.0).unwrap() + 3.0);
    }

    #[test]
    fn tv_classical_reports_divergence() {
        let y = noisy(&make_phantom(PhantomKind::Step, 8, 8, 1).unwrap(), 25.0, 1);
        let cfg = TvClassicalConfig { step_size: Some(2.0), steps: 10, ..Default::default() };
        assert!(matches!(tv_denoise_classical(&y, &cfg), Err(Error::StepSize { step: 1, .. })));
    }

    #[test]
    fn tv_classical_lowers_tv_at_large_lambda() {
        for (kind, seed) in [(PhantomKind::Step, 1), (PhantomKind::Circles, 2), (PhantomKind::Ramp, 3)] {
            let y = noisy(&make_phantom(kind, 16, 16, 1).unwrap(), 25.0, seed);
            let cfg = TvClassicalConfig { lambda: 1.0, steps: 300, ..Default::default() };
            let out = tv_denoise_classical(&y, &cfg).unwrap();
            assert!(smoothed_tv(&out.image, cfg.gamma).unwrap() <= smoothed_tv(&y, cfg.gamma).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn psnr_symmetric_and_shift_invariant(seed in 0u64..1_000_000, shift in -1.0f64..1.0) {
            let a = noisy(&make_phantom(PhantomKind::Circles, 8, 8, 2).unwrap(), 10.0, seed);
            let b = noisy(&make_phantom(PhantomKind::Ramp, 8, 8, 2).unwrap(), 10.0, seed + 1);
            let p = psnr(&a, &b, 1.0).unwrap();
            prop_assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
            let q = psnr(&a.map(|v| v + shift), &b.map(|v| v + shift), 1.0).unwrap();
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}
