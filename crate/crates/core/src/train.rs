//! Fitting the generator to a single noisy observation.
//!
//! [`denoise`] minimises the dual-domain objective over the network
//! parameters; [`denoise_dip_baseline`] runs the same loop on plain
//! pixel-space mean squared error.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{LossTerms, Objective, ObjectiveConfig};
use crate::network::{Network, NetworkConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fixed budget of optimisation steps; there is no early stopping.
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Trace sampling interval, in steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        self.adam().validate()
    }
}

/// Objective values after `iteration` optimisation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub spectral: f64,
    pub tv: f64,
}

impl LossRecord {
    fn new(iteration: usize, terms: LossTerms) -> Self {
        Self {
            iteration,
            total: terms.total,
            spectral: terms.spectral,
            tv: terms.tv,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub xhat: Image,
    pub loss_trace: Vec<LossRecord>,
    pub elapsed_seconds: f64,
    /// `None` for the pixel-fidelity baseline.
    pub objective: Option<ObjectiveConfig>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl DenoiseResult {
    pub fn final_loss(&self) -> &LossRecord {
        self.loss_trace.last().expect("trace is never empty")
    }

    /// `iteration,total,spectral,tv`, one row per trace record.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_trace_csv(&self.loss_trace, out)
    }
}

pub fn write_trace_csv<W: Write>(trace: &[LossRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,total,spectral,tv")?;
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e}", r.iteration, r.total, r.spectral, r.tv)?;
    }
    Ok(())
}

/// A scalar training loss attached to the reconstruction node of a graph.
pub trait TrainingObjective {
    /// Records the loss as a function of `xhat` and returns its node along
    /// with the values that go into the trace.
    fn record(&self, graph: &mut Graph, xhat: TensorId) -> Result<(TensorId, LossTerms)>;
}

impl TrainingObjective for Objective {
    fn record(&self, graph: &mut Graph, xhat: TensorId) -> Result<(TensorId, LossTerms)> {
        Objective::record(self, graph, xhat)
    }
}

/// `‖x̂ − y‖² / (C·H·W)`, the pixel-space fidelity of the DIP baseline.
///
/// The trace still reports the spectral and TV terms (default stabilisers)
/// so runs can be compared column for column.
#[derive(Debug, Clone)]
pub struct PixelFidelity {
    target: Image,
    diagnostics: Objective,
}

impl PixelFidelity {
    pub fn new(y: &Image) -> Result<Self> {
        Ok(Self {
            target: y.clone(),
            diagnostics: Objective::new(y, ObjectiveConfig::default())?,
        })
    }

    pub fn value_and_grad(&self, xhat: &Image) -> Result<(f64, Vec<f64>)> {
        xhat.check_same_shape(&self.target, "pixel fidelity")?;
        let n = xhat.len() as f64;
        let diff: Vec<f64> = xhat
            .as_slice()
            .iter()
            .zip(self.target.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad = diff.iter().map(|d| 2.0 * d / n).collect();
        Ok((value, grad))
    }
}

impl TrainingObjective for PixelFidelity {
    fn record(&self, graph: &mut Graph, xhat: TensorId) -> Result<(TensorId, LossTerms)> {
        let img = Image::from_tensor(graph.value(xhat))?;
        let (value, grad) = self.value_and_grad(&img)?;
        let node = graph.scalar_fn(xhat, value, grad, "pixel_mse")?;
        let diag = self.diagnostics.terms(&img)?;
        Ok((
            node,
            LossTerms {
                total: value,
                spectral: diag.spectral,
                tv: diag.tv,
            },
        ))
    }
}

/// Loss at the current parameters and its gradient for every parameter tensor.
pub fn loss_and_gradients(
    net: &Network,
    objective: &dyn TrainingObjective,
) -> Result<(LossTerms, Image, Vec<Vec<f64>>)> {
    let mut graph = Graph::new();
    let pass = net.forward(&mut graph)?;
    let xhat = Image::from_tensor(graph.value(pass.output))?;
    let (loss, terms) = objective.record(&mut graph, pass.output)?;
    let mut grads = graph.backward(loss)?;
    let per_param = pass
        .params
        .iter()
        .zip(net.params())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();
    Ok((terms, xhat, per_param))
}

/// Runs exactly `train.iterations` forward/backward/Adam steps.
///
/// The trace holds the pre-step loss every `log_every` steps (starting at
/// step 0) plus the loss of the returned reconstruction.
pub fn train(
    y: &Image,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    objective: &dyn TrainingObjective,
) -> Result<(Image, Vec<LossRecord>, f64)> {
    train_cfg.validate()?;
    if !y.is_finite() {
        return Err(Error::config("observation contains non-finite values"));
    }
    let started = Instant::now();
    let mut net = Network::new(*net_cfg, y.channels(), y.height(), y.width())?;
    let mut state = AdamState::new(net.params());
    let adam = train_cfg.adam();
    let mut trace = Vec::with_capacity(train_cfg.iterations / train_cfg.log_every + 2);

    let fail = |iteration: usize, trace: &[LossRecord], e: Error| Error::Training {
        iteration,
        trace: trace.to_vec(),
        source: Box::new(e),
    };

    for step in 0..train_cfg.iterations {
        let (terms, _, grads) = loss_and_gradients(&net, objective).map_err(|e| fail(step, &trace, e))?;
        if step % train_cfg.log_every == 0 {
            trace.push(LossRecord::new(step, terms));
        }
        adam_step(net.params_mut(), &grads, &mut state, step as u64 + 1, &adam)
            .map_err(|e| fail(step, &trace, e))?;
    }

    let final_step = train_cfg.iterations;
    let mut graph = Graph::new();
    let pass = net.forward(&mut graph).map_err(|e| fail(final_step, &trace, e))?;
    let (_, terms) = objective
        .record(&mut graph, pass.output)
        .map_err(|e| fail(final_step, &trace, e))?;
    trace.push(LossRecord::new(final_step, terms));
    let xhat = Image::from_tensor(graph.value(pass.output))?;
    Ok((xhat, trace, started.elapsed().as_secs_f64()))
}

/// Minimises `α·L_IS + β·L_TV` over the generator parameters.
pub fn denoise(
    y: &Image,
    obj: &ObjectiveConfig,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
) -> Result<DenoiseResult> {
    let objective = Objective::new(y, *obj)?;
    let (xhat, loss_trace, elapsed_seconds) = train(y, net_cfg, train_cfg, &objective)?;
    Ok(DenoiseResult {
        xhat,
        loss_trace,
        elapsed_seconds,
        objective: Some(*obj),
        network: *net_cfg,
        train: *train_cfg,
    })
}

/// Deep-image-prior baseline: pixel MSE, no explicit regulariser.
pub fn denoise_dip_baseline(
    y: &Image,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
) -> Result<DenoiseResult> {
    let objective = PixelFidelity::new(y)?;
    let (xhat, loss_trace, elapsed_seconds) = train(y, net_cfg, train_cfg, &objective)?;
    Ok(DenoiseResult {
        xhat,
        loss_trace,
        elapsed_seconds,
        objective: None,
        network: *net_cfg,
        train: *train_cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};
    use crate::rng::{stream_rng, uniform};

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            depth: 1,
            base_channels: 4,
            skip_channels: 2,
            z_channels: 3,
            seed: 11,
            ..Default::default()
        }
    }

    fn target(h: usize, w: usize) -> Image {
        Image::from_fn(1, h, w, |_, i, j| if (i / 4 + j / 4) % 2 == 0 { 0.2 } else { 0.8 })
    }

    #[test]
    fn defaults() {
        let t = TrainConfig::default();
        assert_eq!(t.iterations, 3000);
        assert_eq!(t.learning_rate, 3e-4);
        assert_eq!((t.adam_beta1, t.adam_beta2, t.adam_eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn single_iteration_trace() {
        let y = target(8, 8);
        let cfg = TrainConfig { iterations: 1, ..Default::default() };
        let r = denoise(&y, &ObjectiveConfig::default(), &small_net(), &cfg).unwrap();
        assert_eq!(r.loss_trace.len(), 2);
        assert_eq!(r.loss_trace[0].iteration, 0);
        assert_eq!(r.loss_trace[1].iteration, 1);
        assert_eq!(r.xhat.shape(), y.shape());
    }

    #[test]
    fn trace_sampling() {
        let y = target(8, 8);
        let cfg = TrainConfig { iterations: 7, log_every: 3, ..Default::default() };
        let r = denoise(&y, &ObjectiveConfig::default(), &small_net(), &cfg).unwrap();
        let its: Vec<_> = r.loss_trace.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 3, 6, 7]);
    }

    #[test]
    fn bit_identical_runs() {
        let y = target(16, 16);
        let cfg = TrainConfig { iterations: 15, log_every: 1, ..Default::default() };
        let a = denoise(&y, &ObjectiveConfig::default(), &small_net(), &cfg).unwrap();
        let b = denoise(&y, &ObjectiveConfig::default(), &small_net(), &cfg).unwrap();
        assert_eq!(a.xhat, b.xhat);
        assert_eq!(a.loss_trace, b.loss_trace);
        let c = denoise_dip_baseline(&y, &small_net(), &cfg).unwrap();
        let d = denoise_dip_baseline(&y, &small_net(), &cfg).unwrap();
        assert_eq!(c.xhat, d.xhat);
    }

    #[test]
    fn loss_decreases_and_output_stays_in_range() {
        let y = target(16, 16);
        let cfg = TrainConfig { iterations: 60, log_every: 10, ..Default::default() };
        let r = denoise(&y, &ObjectiveConfig::default(), &small_net(), &cfg).unwrap();
        assert!(r.final_loss().total < r.loss_trace[0].total);
        assert!(r.xhat.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(r.loss_trace.iter().all(|l| l.total.is_finite()));
    }

    #[test]
    fn rejects_indivisible_observation() {
        let y = Image::zeros(1, 10, 8);
        let err = denoise(&y, &ObjectiveConfig::default(), &NetworkConfig::default(), &TrainConfig::default());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_non_finite_observation() {
        let mut y = target(8, 8);
        y.set(0, 1, 1, f64::NAN);
        assert!(denoise(&y, &ObjectiveConfig::default(), &small_net(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn numeric_failure_reports_iteration_and_trace() {
        let y = target(8, 8);
        let cfg = TrainConfig { iterations: 5, learning_rate: 1e300, log_every: 1, ..Default::default() };
        match denoise(&y, &ObjectiveConfig::default(), &small_net(), &cfg) {
            Err(Error::Training { iteration, trace, .. }) => {
                assert!(iteration >= 1);
                assert_eq!(trace.len(), iteration);
            }
            other => panic!("expected a training failure, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_format() {
        let trace = [LossRecord { iteration: 0, total: 0.5, spectral: 0.25, tv: 2.0 }];
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,total,spectral,tv\n0,5e-1,2.5e-1,2e0\n");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let y = target(8, 8).map(|v| v + 0.05);
        let cfg = ObjectiveConfig { beta: 0.5, gamma_tv: 1e-2, ..Default::default() };
        let objective = Objective::new(&y, cfg).unwrap();
        // Zero biases leave the small-input preactivations sitting on the
        // leaky kink, where central differences are meaningless.
        let mut net = Network::new(small_net(), 1, 8, 8).unwrap();
        let mut rng = stream_rng(5, "bias-jitter");
        for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.tensor.data_mut().iter_mut().for_each(|b| *b = uniform(&mut rng, -0.2, 0.2));
        }
        let (_, _, grads) = loss_and_gradients(&net, &objective).unwrap();
        for (i, analytic) in grads.iter().enumerate() {
            let numeric = finite_diff_grad(
                |t| {
                    let mut probe = net.clone();
                    probe.params_mut()[i].tensor = t.clone();
                    objective.terms(&probe.reconstruct().unwrap()).unwrap().total
                },
                &net.params()[i].tensor,
                1e-6,
            );
            let gmax = analytic.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            let err = max_relative_error(analytic, &numeric, 1e-4 * gmax);
            assert!(err < 1e-3, "{}: {err}", net.params()[i].name);
        }
    }

    #[test]
    fn dip_and_spectral_share_gradient_direction_at_init() {
        // With beta = 0 and a negligible stabiliser both losses are the pixel
        // residual energy up to a positive constant.
        let y = target(16, 16).map(|v| 0.9 * v + 0.03);
        let net = Network::new(small_net(), 1, 16, 16).unwrap();
        let cfg = ObjectiveConfig { beta: 0.0, gamma_spec: 1e-300, ..Default::default() };
        let (_, _, g_dna) = loss_and_gradients(&net, &Objective::new(&y, cfg).unwrap()).unwrap();
        let (_, _, g_dip) = loss_and_gradients(&net, &PixelFidelity::new(&y).unwrap()).unwrap();
        let flat = |g: &[Vec<f64>]| g.iter().flatten().copied().collect::<Vec<f64>>();
        let (a, b) = (flat(&g_dna), flat(&g_dip));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (x, y) in a.iter().zip(&b) {
            assert!((x / na - y / nb).abs() < 1e-6);
        }
    }
}
