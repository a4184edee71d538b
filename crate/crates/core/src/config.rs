//! Job configuration and method dispatch.
//!
//! A [`JobConfig`] round-trips through TOML; every section may be partial,
//! missing fields take their defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::ObjectiveConfig;
use crate::network::NetworkConfig;
use crate::noise_metrics::{tv_denoise_classical, NoiseSpec, TvClassicalConfig};
use crate::train::{denoise, denoise_dip_baseline, LossRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Generator fitted with the spectral + normalised TV objective.
    Dna,
    /// Generator fitted with pixel MSE only.
    Dip,
    /// Gradient descent on `‖x − y‖² + λ·TV`.
    #[serde(alias = "tv")]
    TvClassical,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dna, Method::Dip, Method::TvClassical];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dna => "dna",
            Method::Dip => "dip",
            Method::TvClassical => "tv_classical",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dna" => Ok(Method::Dna),
            "dip" => Ok(Method::Dip),
            "tv" | "tv_classical" => Ok(Method::TvClassical),
            _ => Err(Error::config(format!("unknown method `{s}` (dna, dip, tv)"))),
        }
    }
}

/// Settings shared by every method, i.e. everything except file paths.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub objective: ObjectiveConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub tv: TvClassicalConfig,
}

impl MethodSettings {
    /// Validates only what `method` reads.
    pub fn validate_for(&self, method: Method) -> Result<()> {
        match method {
            Method::Dna => {
                self.objective.validate()?;
                self.network.validate()?;
                self.train.validate()
            }
            Method::Dip => {
                self.network.validate()?;
                self.train.validate()
            }
            Method::TvClassical => self.tv.validate(),
        }
    }

    /// Seeds the network; the training seed is kept as provenance.
    pub fn set_seed(&mut self, seed: u64) {
        self.network.seed = seed;
        self.train.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub method: Method,
    /// Noise added to the input before denoising.
    pub noise: Option<NoiseSpec>,
    /// Clamp the noisy observation to `[0, 1]`.
    pub clip: bool,
    /// Reference for PSNR. Defaults to the input when noise is synthesised.
    pub clean: Option<PathBuf>,
    #[serde(flatten)]
    pub settings: MethodSettings,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            output: PathBuf::new(),
            method: Method::Dna,
            noise: None,
            clip: false,
            clean: None,
            settings: MethodSettings::default(),
        }
    }
}

impl JobConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigFile(e.to_string()))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::ConfigFile(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigFile(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.as_os_str().is_empty() {
            return Err(Error::config("input path is empty"));
        }
        if self.output.as_os_str().is_empty() {
            return Err(Error::config("output path is empty"));
        }
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        self.settings.validate_for(self.method)
    }
}

/// What a method produced, independent of how it got there.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub xhat: Image,
    pub losses: LossSummary,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSummary {
    /// dna and dip: sampled objective values over training.
    Network { final_loss: LossRecord, trace: Vec<LossRecord> },
    /// tv_classical: the variational objective before and after descent.
    Variational { initial_objective: f64, final_objective: f64, steps: usize },
}

/// Runs `method` on the observation `y`.
///
/// Network methods need sides divisible by `2^depth`; other sizes are padded
/// by edge replication and the result is cropped back.
pub fn run_method(method: Method, y: &Image, settings: &MethodSettings) -> Result<MethodRun> {
    settings.validate_for(method)?;
    let started = Instant::now();
    let (xhat, losses) = match method {
        Method::Dna | Method::Dip => {
            let multiple = 1usize << settings.network.depth;
            let padded = pad_to_multiple(y, multiple);
            let result = if method == Method::Dna {
                denoise(&padded, &settings.objective, &settings.network, &settings.train)?
            } else {
                denoise_dip_baseline(&padded, &settings.network, &settings.train)?
            };
            let xhat = crop(&result.xhat, y.height(), y.width());
            let losses = LossSummary::Network {
                final_loss: *result.final_loss(),
                trace: result.loss_trace,
            };
            (xhat, losses)
        }
        Method::TvClassical => {
            let out = tv_denoise_classical(y, &settings.tv)?;
            let losses = LossSummary::Variational {
                initial_objective: out.objective[0],
                final_objective: *out.objective.last().expect("objective history is never empty"),
                steps: settings.tv.steps,
            };
            (out.image, losses)
        }
    };
    Ok(MethodRun {
        xhat,
        losses,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// Replicates the last row and column until both sides divide `multiple`.
pub fn pad_to_multiple(img: &Image, multiple: usize) -> Image {
    let round_up = |n: usize| n.div_ceil(multiple) * multiple;
    let (h, w) = (round_up(img.height()), round_up(img.width()));
    if (h, w) == (img.height(), img.width()) {
        return img.clone();
    }
    let (last_i, last_j) = (img.height() - 1, img.width() - 1);
    Image::from_fn(img.channels(), h, w, |c, i, j| img.get(c, i.min(last_i), j.min(last_j)))
}

/// Top-left `height × width` window.
pub fn crop(img: &Image, height: usize, width: usize) -> Image {
    if (height, width) == (img.height(), img.width()) {
        return img.clone();
    }
    Image::from_fn(img.channels(), height, width, |c, i, j| img.get(c, i, j))
}
