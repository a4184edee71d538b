//! Convolutional encoder–decoder generator `x̂ = f_θ(z)`.
//!
//! Layout for `depth = d`:
//!
//! ```text
//! z ─ enc1 ─ enc2 ─ … ─ enc_d            (k×k conv, stride 2, leaky ReLU)
//! │    │                  │
//! skip0 skip1 …          up ─ concat ─ dec_d   (nearest 2× upsample, k×k conv, leaky ReLU)
//!                  …
//! dec_1 ─ 1×1 conv ─ sigmoid ─ x̂
//! ```
//!
//! Skip `i` is a 1×1 conv of the encoder activation at the resolution decoder
//! stage `i + 1` produces (skip 0 reads `z` itself). With `skip_channels = 0`
//! the skips are omitted.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, stream, stream_rng, uniform};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub skip_channels: usize,
    pub z_channels: usize,
    /// `z` is drawn uniformly from `[0, z_noise_scale]`.
    pub z_noise_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            kernel_size: 3,
            skip_channels: 4,
            z_channels: 8,
            z_noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("network depth must be >= 1"));
        }
        if self.depth >= usize::BITS as usize / 2 {
            return Err(Error::config(format!("network depth {} is too large", self.depth)));
        }
        if self.base_channels == 0 || self.z_channels == 0 {
            return Err(Error::config("base_channels and z_channels must be >= 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.z_noise_scale.is_finite() && self.z_noise_scale > 0.0) {
            return Err(Error::config(format!(
                "z_noise_scale must be finite and > 0, got {}",
                self.z_noise_scale
            )));
        }
        Ok(())
    }

    /// Height and width must both be multiples of `2^depth`.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let factor = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
            return Err(Error::dim(format!(
                "image size {height}x{width} is not divisible by 2^depth = {factor}"
            )));
        }
        Ok(())
    }
}

/// Fixed network input: i.i.d. uniform on `[0, z_noise_scale]`.
pub fn sample_input(cfg: &NetworkConfig, height: usize, width: usize) -> Result<Tensor> {
    cfg.check_extent(height, width)?;
    let mut rng = stream_rng(cfg.seed, stream::INPUT);
    let n = cfg.z_channels * height * width;
    let data = (0..n).map(|_| uniform(&mut rng, 0.0, cfg.z_noise_scale)).collect();
    Tensor::new(vec![cfg.z_channels, height, width], data)
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    out_channels: usize,
    height: usize,
    width: usize,
    params: Vec<Param>,
    z: Tensor,
    encoders: Vec<ConvLayer>,
    skips: Vec<Option<ConvLayer>>,
    decoders: Vec<ConvLayer>,
    output: ConvLayer,
}

/// Node ids of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: TensorId,
    /// One id per parameter, in [`Network::params`] order.
    pub params: Vec<TensorId>,
}

struct Builder {
    rng: rng::SplitMix64,
    params: Vec<Param>,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> ConvLayer {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * k * k;
        let weights = (0..n).map(|_| uniform(&mut self.rng, -bound, bound)).collect();
        self.params.push(Param {
            name: format!("{name}.weight"),
            tensor: Tensor::new(vec![c_out, c_in, k, k], weights).expect("valid weight shape"),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            tensor: Tensor::zeros(&[c_out]),
        });
        ConvLayer {
            weight: self.params.len() - 2,
            bias: self.params.len() - 1,
            stride,
            padding: k / 2,
        }
    }
}

impl Network {
    /// Builds the generator for `out_channels × height × width` images and
    /// samples its fixed input. Weights are He-uniform, biases zero.
    pub fn new(cfg: NetworkConfig, out_channels: usize, height: usize, width: usize) -> Result<Self> {
        cfg.check_extent(height, width)?;
        if out_channels == 0 {
            return Err(Error::config("output channel count must be >= 1"));
        }
        let z = sample_input(&cfg, height, width)?;
        let mut b = Builder {
            rng: stream_rng(cfg.seed, stream::WEIGHTS),
            params: Vec::new(),
        };
        let (k, base, skip) = (cfg.kernel_size, cfg.base_channels, cfg.skip_channels);

        let encoders = (0..cfg.depth)
            .map(|i| {
                let c_in = if i == 0 { cfg.z_channels } else { base };
                b.conv(&format!("enc{}", i + 1), c_in, base, k, 2)
            })
            .collect();
        let skips = (0..cfg.depth)
            .map(|i| {
                let c_in = if i == 0 { cfg.z_channels } else { base };
                (skip > 0).then(|| b.conv(&format!("skip{i}"), c_in, skip, 1, 1))
            })
            .collect();
        // Decoder stages are stored deepest first, the order they run in.
        let decoders = (0..cfg.depth)
            .rev()
            .map(|i| b.conv(&format!("dec{}", i + 1), base + skip, base, k, 1))
            .collect();
        let output = b.conv("out", base, out_channels, 1, 1);

        Ok(Self {
            cfg,
            out_channels,
            height,
            width,
            params: b.params,
            z,
            encoders,
            skips,
            decoders,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.height, self.width]
    }

    pub fn input(&self) -> &Tensor {
        &self.z
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records `f_θ(z)` on `graph`. Parameters become trainable leaves, `z` a constant.
    pub fn forward(&self, graph: &mut Graph) -> Result<ForwardPass> {
        let params: Vec<TensorId> = self.params.iter().map(|p| graph.param(p.tensor.clone())).collect();
        let conv = |g: &mut Graph, x: TensorId, layer: &ConvLayer| {
            g.conv2d(x, params[layer.weight], params[layer.bias], layer.stride, layer.padding)
        };

        let z = graph.constant(self.z.clone());
        // activations[i] is at resolution H / 2^i; activations[0] = z.
        let mut activations = vec![z];
        for layer in &self.encoders {
            let x = conv(graph, *activations.last().expect("non-empty"), layer)?;
            activations.push(graph.leaky_relu(x, LEAKY_SLOPE)?);
        }

        let mut x = activations[self.cfg.depth];
        for (stage, layer) in (0..self.cfg.depth).rev().zip(&self.decoders) {
            let up = graph.upsample_nearest2x(x)?;
            let merged = match &self.skips[stage] {
                Some(skip) => {
                    let s = conv(graph, activations[stage], skip)?;
                    graph.concat_channels(&[up, s])?
                }
                None => up,
            };
            let h = conv(graph, merged, layer)?;
            x = graph.leaky_relu(h, LEAKY_SLOPE)?;
        }

        let logits = conv(graph, x, &self.output)?;
        let output = graph.sigmoid(logits)?;
        Ok(ForwardPass { output, params })
    }

    /// Evaluates the current reconstruction without keeping the graph.
    pub fn reconstruct(&self) -> Result<Image> {
        let mut graph = Graph::new();
        let pass = self.forward(&mut graph)?;
        Image::from_tensor(graph.value(pass.output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};

    /// Closed-form parameter count, written out per layer independently of the builder.
    fn expected_parameter_count(cfg: &NetworkConfig, out_channels: usize) -> usize {
        let (d, b, k, s, zc) = (
            cfg.depth,
            cfg.base_channels,
            cfg.kernel_size,
            cfg.skip_channels,
            cfg.z_channels,
        );
        let first_encoder = b * zc * k * k + b;
        let other_encoders = (d - 1) * (b * b * k * k + b);
        let skips = if s == 0 { 0 } else { (s * zc + s) + (d - 1) * (s * b + s) };
        let decoders = d * (b * (b + s) * k * k + b);
        let head = out_channels * b + out_channels;
        first_encoder + other_encoders + skips + decoders + head
    }

    #[test]
    fn default_config_values() {
        let cfg = NetworkConfig::default();
        assert_eq!(
            (cfg.depth, cfg.base_channels, cfg.kernel_size, cfg.skip_channels, cfg.z_channels),
            (3, 16, 3, 4, 8)
        );
        assert_eq!(cfg.z_noise_scale, 0.1);
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = NetworkConfig::default();
        let net = Network::new(cfg, 1, 64, 64).unwrap();
        // 1168 + 2*2320 + (36 + 2*68) + 3*2896 + 17
        assert_eq!(expected_parameter_count(&cfg, 1), 14_685);
        assert_eq!(net.parameter_count(), 14_685);

        for (depth, skip, c) in [(1, 0, 3), (2, 5, 1), (4, 1, 3)] {
            let cfg = NetworkConfig { depth, skip_channels: skip, base_channels: 6, kernel_size: 5, ..cfg };
            let net = Network::new(cfg, c, 16, 32).unwrap();
            assert_eq!(net.parameter_count(), expected_parameter_count(&cfg, c));
        }
    }

    #[test]
    fn tiny_network_shape() {
        let cfg = NetworkConfig { depth: 1, base_channels: 1, kernel_size: 3, ..Default::default() };
        let net = Network::new(cfg, 1, 8, 8).unwrap();
        let out = net.reconstruct().unwrap();
        assert_eq!(out.shape(), [1, 8, 8]);
    }

    #[test]
    fn output_in_unit_interval() {
        let net = Network::new(NetworkConfig::default(), 3, 16, 24).unwrap();
        let out = net.reconstruct().unwrap();
        assert_eq!(out.shape(), [3, 16, 24]);
        assert!(out.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_indivisible_extent() {
        let cfg = NetworkConfig::default();
        assert!(matches!(Network::new(cfg, 1, 60, 64), Err(Error::Dimension(_))));
        assert!(matches!(sample_input(&cfg, 64, 12), Err(Error::Dimension(_))));
        assert!(Network::new(cfg, 1, 8, 8).is_ok());
    }

    #[test]
    fn rejects_even_kernel() {
        let cfg = NetworkConfig { kernel_size: 4, ..Default::default() };
        assert!(matches!(Network::new(cfg, 1, 16, 16), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_from_seed() {
        let cfg = NetworkConfig { seed: 42, ..Default::default() };
        let a = Network::new(cfg, 1, 16, 16).unwrap();
        let b = Network::new(cfg, 1, 16, 16).unwrap();
        assert_eq!(a.input(), b.input());
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.tensor, q.tensor);
        }
        let c = Network::new(NetworkConfig { seed: 43, ..cfg }, 1, 16, 16).unwrap();
        assert_ne!(a.params()[0].tensor, c.params()[0].tensor);
    }

    #[test]
    fn input_range_and_determinism() {
        let cfg = NetworkConfig::default();
        let z = sample_input(&cfg, 64, 64).unwrap();
        assert_eq!(z.shape(), &[8, 64, 64]);
        assert!(z.data().iter().all(|&v| (0.0..=0.1).contains(&v)));
        assert_eq!(z, sample_input(&cfg, 64, 64).unwrap());
    }

    #[test]
    fn input_mean_matches_uniform_moments() {
        // 10^6 samples of U[0, 0.1]: mean 0.05, standard error 0.1/sqrt(12)/1000.
        let cfg = NetworkConfig { z_channels: 1, depth: 1, ..Default::default() };
        let z = sample_input(&cfg, 1000, 1000).unwrap();
        let n = z.numel() as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let se = 0.1 / 12f64.sqrt() / n.sqrt();
        assert!((mean - 0.05).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn sum_gradient_matches_finite_differences() {
        let cfg = NetworkConfig { depth: 1, base_channels: 3, skip_channels: 2, z_channels: 2, seed: 5, ..Default::default() };
        let net = Network::new(cfg, 1, 8, 8).unwrap();
        let mut graph = Graph::new();
        let pass = net.forward(&mut graph).unwrap();
        let loss = graph.sum(pass.output).unwrap();
        let grads = graph.backward(loss).unwrap();
        for (i, id) in pass.params.iter().enumerate() {
            let analytic = grads.get(*id).unwrap();
            let numeric = finite_diff_grad(
                |t| {
                    let mut probe = net.clone();
                    probe.params_mut()[i].tensor = t.clone();
                    probe.reconstruct().unwrap().as_slice().iter().sum()
                },
                &net.params()[i].tensor,
                1e-4,
            );
            let err = max_relative_error(analytic, &numeric, 1e-7);
            assert!(err < 1e-3, "{}: {err}", net.params()[i].name);
        }
    }
}
