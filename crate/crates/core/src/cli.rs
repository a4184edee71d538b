//! Command-line front end.
//!
//! Every subcommand exits 0 on success and 1 on any error. Output files are
//! produced only after all computation has finished and are written
//! atomically; if one write fails, files already written by the same
//! invocation are removed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{run_bench, BenchConfig};
use crate::config::{run_method, JobConfig, LossSummary, Method, MethodSettings};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{encode_for_path, read_image, write_atomic};
use crate::noise_metrics::{add_gaussian_noise, format_db, make_phantom, psnr, NoiseSpec, PhantomKind};
use crate::train::write_trace_csv;

#[derive(Debug, Parser)]
#[command(name = "dualdenoise", version, about = "Unsupervised single-image denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Denoise one image, optionally after adding synthetic noise.
    Denoise(DenoiseArgs),
    /// Run every method over a directory of clean images and noise levels.
    Bench(BenchArgs),
    /// Print the PSNR between two images ("inf" when identical).
    Psnr(PsnrArgs),
    /// Add seeded Gaussian noise to an image.
    Noise(NoiseArgs),
    /// Write a synthetic test image.
    Phantom(PhantomArgs),
}

/// Overrides shared by `denoise` and `bench`.
#[derive(Debug, Args)]
struct Tuning {
    /// Weight of the spectral fidelity term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the normalised TV term.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma_spec: Option<f64>,
    #[arg(long)]
    gamma_tv: Option<f64>,
    /// Optimisation steps (training iterations, or descent steps for tv).
    #[arg(long)]
    iters: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// TV weight of the classical baseline.
    #[arg(long)]
    lambda: Option<f64>,
    /// Clamp noisy observations to [0, 1].
    #[arg(long)]
    clip: bool,
    /// Write wall-clock runtimes into reports (makes them non-reproducible).
    #[arg(long)]
    record_runtime: bool,
}

impl Tuning {
    fn apply(&self, s: &mut MethodSettings) {
        if let Some(v) = self.alpha {
            s.objective.alpha = v;
        }
        if let Some(v) = self.beta {
            s.objective.beta = v;
        }
        if let Some(v) = self.gamma_spec {
            s.objective.gamma_spec = v;
        }
        if let Some(v) = self.gamma_tv {
            s.objective.gamma_tv = v;
        }
        if let Some(v) = self.iters {
            s.train.iterations = v;
            s.tv.steps = v;
        }
        if let Some(v) = self.lr {
            s.train.learning_rate = v;
        }
        if let Some(v) = self.lambda {
            s.tv.lambda = v;
        }
    }
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// dna, dip or tv.
    #[arg(long)]
    method: Option<Method>,
    /// Add Gaussian noise of this σ (0–255 scale) to the input first.
    #[arg(long)]
    sigma: Option<f64>,
    /// Seed of the network and of synthetic noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Clean reference for PSNR.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Metrics and configuration echo as JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// TOML job file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Directory of clean .pgm/.png images; subdirectories name modalities.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// Comma-separated subset of dna, dip, tv.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// CSV report path (stdout when omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Markdown table path.
    #[arg(long)]
    markdown: Option<PathBuf>,
    /// Cells run in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// TOML bench file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Debug, Args)]
struct PsnrArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clip: bool,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// flat, step, circles or ramp.
    #[arg(long)]
    kind: PhantomKind,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    output: PathBuf,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Denoise(a) => cmd_denoise(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Psnr(a) => cmd_psnr(a),
        Command::Noise(a) => cmd_noise(a),
        Command::Phantom(a) => cmd_phantom(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Training { trace, .. } = &e {
                if let Some(last) = trace.last() {
                    eprintln!("last recorded loss: iteration {} total {:e}", last.iteration, last.total);
                }
            }
            ExitCode::FAILURE
        }
    }
}

fn usage_error(msg: &str, sub: &str) -> Error {
    let mut cmd = Cli::command();
    cmd.build();
    let usage = cmd
        .find_subcommand_mut(sub)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    Error::config(format!("{msg}\n\n{usage}"))
}

/// Writes all `(path, bytes)` pairs or none of them.
fn write_all_or_nothing(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (k, (path, bytes)) in files.iter().enumerate() {
        if let Err(e) = write_atomic(path, bytes) {
            for (done, _) in &files[..k] {
                let _ = std::fs::remove_file(done);
            }
            return Err(e);
        }
    }
    Ok(())
}

/// PSNR as a JSON number, with `"inf"` for identical images.
#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Db {
    Finite(f64),
    Sentinel(&'static str),
}

impl From<f64> for Db {
    fn from(v: f64) -> Self {
        if v.is_finite() {
            Db::Finite(v)
        } else {
            Db::Sentinel("inf")
        }
    }
}

#[derive(Debug, Serialize)]
struct DenoiseMetrics<'a> {
    method: Method,
    shape: [usize; 3],
    psnr_noisy: Option<Db>,
    psnr_denoised: Option<Db>,
    losses: &'a LossSummary,
    runtime_s: Option<f64>,
    config: &'a JobConfig,
}

fn resolve_job(a: &DenoiseArgs) -> Result<JobConfig> {
    let mut job = match &a.config {
        Some(path) => JobConfig::from_toml_file(path)?,
        None => JobConfig::default(),
    };
    if let Some(p) = &a.input {
        job.input = p.clone();
    }
    if let Some(p) = &a.output {
        job.output = p.clone();
    }
    if let Some(m) = a.method {
        job.method = m;
    }
    if let Some(p) = &a.clean {
        job.clean = Some(p.clone());
    }
    a.tuning.apply(&mut job.settings);
    job.clip |= a.tuning.clip;
    let seed = a.seed.unwrap_or(job.settings.network.seed);
    job.settings.set_seed(seed);
    if let Some(sigma) = a.sigma {
        job.noise = Some(NoiseSpec { sigma_8bit: sigma, seed });
    } else if let Some(noise) = job.noise.as_mut() {
        noise.seed = seed;
    }
    if job.input.as_os_str().is_empty() {
        return Err(usage_error("--input is required (or `input` in --config)", "denoise"));
    }
    if job.output.as_os_str().is_empty() {
        return Err(usage_error("--output is required (or `output` in --config)", "denoise"));
    }
    job.validate()?;
    Ok(job)
}

/// Same columns for every method; the classical baseline has no separate
/// spectral and TV terms, so those stay blank.
fn trace_csv(losses: &LossSummary) -> Vec<u8> {
    let mut out = Vec::new();
    match losses {
        LossSummary::Network { trace, .. } => write_trace_csv(trace, &mut out).expect("writing to a Vec cannot fail"),
        LossSummary::Variational { initial_objective, final_objective, steps } => {
            out.extend_from_slice(
                format!("iteration,total,spectral,tv\n0,{initial_objective:e},,\n{steps},{final_objective:e},,\n").as_bytes(),
            );
        }
    }
    out
}

fn cmd_denoise(a: DenoiseArgs) -> Result<ExitCode> {
    let job = resolve_job(&a)?;
    let input = read_image(&job.input)?;
    let observed = match &job.noise {
        Some(spec) => {
            let y = add_gaussian_noise(&input, spec);
            if job.clip {
                y.clamp01()
            } else {
                y
            }
        }
        None => input.clone(),
    };
    let clean: Option<Image> = match (&job.clean, &job.noise) {
        (Some(path), _) => Some(read_image(path)?),
        (None, Some(_)) => Some(input),
        (None, None) => None,
    };
    if let Some(c) = &clean {
        c.check_same_shape(&observed, "clean reference")?;
    }

    let run = run_method(job.method, &observed, &job.settings)?;
    eprintln!("{}: {} in {:.2} s", job.input.display(), job.method, run.runtime_s);

    let psnr_noisy = clean.as_ref().map(|c| psnr(c, &observed, 1.0)).transpose()?;
    let psnr_denoised = clean.as_ref().map(|c| psnr(c, &run.xhat, 1.0)).transpose()?;
    if let (Some(n), Some(d)) = (psnr_noisy, psnr_denoised) {
        println!("psnr_noisy {}\npsnr_denoised {}", format_db(n), format_db(d));
    }

    let mut files = vec![(job.output.clone(), encode_for_path(&job.output, &run.xhat)?)];
    if let Some(path) = &a.trace {
        files.push((path.clone(), trace_csv(&run.losses)));
    }
    if let Some(path) = &a.metrics {
        let metrics = DenoiseMetrics {
            method: job.method,
            shape: observed.shape(),
            psnr_noisy: psnr_noisy.map(Db::from),
            psnr_denoised: psnr_denoised.map(Db::from),
            losses: &run.losses,
            runtime_s: a.tuning.record_runtime.then_some(run.runtime_s),
            config: &job,
        };
        let mut json = serde_json::to_vec_pretty(&metrics).map_err(|e| Error::config(e.to_string()))?;
        json.push(b'\n');
        files.push((path.clone(), json));
    }
    write_all_or_nothing(&files)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::ConfigFile(format!("{}: {e}", path.display())))?
        }
        None => BenchConfig::default(),
    };
    if let Some(d) = &a.dir {
        cfg.dir = d.clone();
    }
    if let Some(v) = &a.sigmas {
        cfg.sigmas = v.clone();
    }
    if let Some(v) = &a.methods {
        cfg.methods = v.clone();
    }
    if let Some(v) = &a.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    a.tuning.apply(&mut cfg.settings);
    cfg.clip |= a.tuning.clip;
    cfg.record_runtime |= a.tuning.record_runtime;
    if cfg.dir.as_os_str().is_empty() {
        return Err(usage_error("--dir is required (or `dir` in --config)", "bench"));
    }

    let report = run_bench(&cfg, &|row| match &row.outcome {
        Ok(db) => eprintln!(
            "{} σ={} {} seed {}: {} dB ({:.2} s)",
            row.image,
            row.sigma,
            row.method,
            row.master_seed,
            format_db(*db),
            row.runtime_s
        ),
        Err(e) => eprintln!("{} σ={} {} seed {}: failed: {e}", row.image, row.sigma, row.method, row.master_seed),
    })?;

    let csv = report.to_csv();
    let mut files = Vec::new();
    match &a.csv {
        Some(path) => files.push((path.clone(), csv.into_bytes())),
        None => print!("{csv}"),
    }
    if let Some(path) = &a.markdown {
        files.push((path.clone(), report.to_markdown()?.into_bytes()));
    }
    write_all_or_nothing(&files)?;

    let failed = report.failures();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", report.rows.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_psnr(a: PsnrArgs) -> Result<ExitCode> {
    let (x, y) = (read_image(&a.a)?, read_image(&a.b)?);
    println!("{}", format_db(psnr(&x, &y, a.peak)?));
    Ok(ExitCode::SUCCESS)
}

fn cmd_noise(a: NoiseArgs) -> Result<ExitCode> {
    let spec = NoiseSpec::new(a.sigma, a.seed)?;
    let x = read_image(&a.input)?;
    let y = add_gaussian_noise(&x, &spec);
    let y = if a.clip { y.clamp01() } else { y };
    write_output(&a.output, &y)
}

fn cmd_phantom(a: PhantomArgs) -> Result<ExitCode> {
    let img = make_phantom(a.kind, a.height, a.width, a.channels)?;
    write_output(&a.output, &img)
}

fn write_output(path: &Path, img: &Image) -> Result<ExitCode> {
    write_atomic(path, &encode_for_path(path, img)?)?;
    Ok(ExitCode::SUCCESS)
}
