//! Benchmark grid: every clean image × noise level × method × seed.
//!
//! Each cell synthesises its own noisy observation, denoises it and scores
//! the result against the clean image. Cells are independent, so they run in
//! parallel, but results are always reported in grid order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{run_method, Method, MethodSettings};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::read_image;
use crate::noise_metrics::{add_gaussian_noise, format_db, psnr, NoiseSpec};
use crate::rng::derive_seed;

pub const CSV_HEADER: &str = "image,modality,sigma,method,psnr_db,runtime_s,seed";

/// Modality tag of images directly inside the benchmark directory.
pub const DEFAULT_MODALITY: &str = "generic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dir: PathBuf,
    /// Noise levels on the 0–255 scale.
    pub sigmas: Vec<f64>,
    pub methods: Vec<Method>,
    /// Master seeds; each adds one row per (image, σ, method).
    pub seeds: Vec<u64>,
    pub clip: bool,
    pub jobs: usize,
    /// Wall-clock times make reports differ between runs, so they are only
    /// written when asked for.
    pub record_runtime: bool,
    #[serde(flatten)]
    pub settings: MethodSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::new(),
            sigmas: vec![15.0, 25.0, 50.0],
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
            clip: false,
            jobs: 1,
            record_runtime: false,
            settings: MethodSettings::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sigmas, methods and seeds must each be non-empty"));
        }
        for &sigma in &self.sigmas {
            NoiseSpec::new(sigma, 0)?;
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be >= 1"));
        }
        for &m in &self.methods {
            self.settings.validate_for(m)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchImage {
    /// Path relative to the benchmark directory, `/`-separated.
    pub id: String,
    /// First directory component of `id`, or [`DEFAULT_MODALITY`].
    pub modality: String,
    pub path: PathBuf,
}

/// All `.pgm` and `.png` files under `dir`, sorted by id.
pub fn discover_images(dir: &Path) -> Result<Vec<BenchImage>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<BenchImage>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("pgm" | "png")) {
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path);
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            let modality = if parts.len() > 1 { parts[0].clone() } else { DEFAULT_MODALITY.to_string() };
            out.push(BenchImage { id: parts.join("/"), modality, path });
        }
        Ok(())
    }
    let mut images = Vec::new();
    walk(dir, dir, &mut images)?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(images)
}

/// Seed of one grid cell, used for both its noise and its network.
///
/// Depends only on the cell's own coordinates, so growing the grid never
/// changes existing cells.
pub fn cell_seed(master: u64, image_id: &str, sigma: f64, method: Method) -> u64 {
    derive_seed(
        master,
        &[image_id.as_bytes(), &sigma.to_bits().to_le_bytes(), method.name().as_bytes()],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub image: String,
    pub modality: String,
    pub sigma: f64,
    pub method: Method,
    pub master_seed: u64,
    pub seed: u64,
    /// PSNR in dB, or the failure message.
    pub outcome: std::result::Result<f64, String>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

struct Cell<'a> {
    image: &'a BenchImage,
    clean: &'a std::result::Result<Image, String>,
    sigma: f64,
    method: Method,
    master_seed: u64,
}

fn run_cell(cell: &Cell<'_>, cfg: &BenchConfig) -> BenchRow {
    let seed = cell_seed(cell.master_seed, &cell.image.id, cell.sigma, cell.method);
    let mut runtime_s = 0.0;
    let outcome = cell.clean.clone().and_then(|clean| {
        let noisy = add_gaussian_noise(&clean, &NoiseSpec { sigma_8bit: cell.sigma, seed });
        let y = if cfg.clip { noisy.clamp01() } else { noisy };
        let mut settings = cfg.settings;
        settings.set_seed(seed);
        let run = run_method(cell.method, &y, &settings).map_err(|e| e.to_string())?;
        runtime_s = run.runtime_s;
        psnr(&clean, &run.xhat, 1.0).map_err(|e| e.to_string())
    });
    BenchRow {
        image: cell.image.id.clone(),
        modality: cell.image.modality.clone(),
        sigma: cell.sigma,
        method: cell.method,
        master_seed: cell.master_seed,
        seed,
        outcome,
        runtime_s,
    }
}

/// Runs the whole grid. `on_row` sees each row as it finishes, in completion
/// order; the returned report is in grid order.
pub fn run_bench(cfg: &BenchConfig, on_row: &(dyn Fn(&BenchRow) + Sync)) -> Result<BenchReport> {
    cfg.validate()?;
    let images = discover_images(&cfg.dir)?;
    if images.is_empty() {
        return Err(Error::config(format!("no images found in {}", cfg.dir.display())));
    }
    let cleans: Vec<std::result::Result<Image, String>> = images
        .iter()
        .map(|im| read_image(&im.path).map_err(|e| e.to_string()))
        .collect();

    let mut cells = Vec::new();
    for (image, clean) in images.iter().zip(&cleans) {
        for &sigma in &cfg.sigmas {
            for &method in &cfg.methods {
                for &master_seed in &cfg.seeds {
                    cells.push(Cell { image, clean, sigma, method, master_seed });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let row = run_cell(cell, cfg);
                on_row(&row);
                row
            })
            .collect()
    });
    Ok(BenchReport { config: cfg.clone(), rows })
}

impl BenchReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    /// One line per row under [`CSV_HEADER`]. Failed cells have `failed` in
    /// the PSNR column; runtimes are blank unless recorded.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let psnr = match &r.outcome {
                Ok(db) if db.is_infinite() => "inf".to_string(),
                Ok(db) => format!("{db:.6}"),
                Err(_) => "failed".to_string(),
            };
            let runtime = if self.config.record_runtime { format!("{:.3}", r.runtime_s) } else { String::new() };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                csv_field(&r.image),
                csv_field(&r.modality),
                r.sigma,
                r.method,
                psnr,
                runtime,
                r.seed
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    /// Rows are image/σ pairs, columns are methods; each cell is the mean
    /// PSNR over seeds. Ends with any failures and the full configuration.
    pub fn to_markdown(&self) -> Result<String> {
        let cfg = &self.config;
        let mut out = String::from("# Denoising benchmark\n\n");
        let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
        writeln!(
            out,
            "PSNR (dB) of the denoised image against the clean image; mean over master seeds {}.\n",
            seeds.join(", ")
        )
        .unwrap();
        let methods: Vec<&str> = cfg.methods.iter().map(|m| m.name()).collect();
        writeln!(out, "| image | modality | σ | {} |", methods.join(" | ")).unwrap();
        writeln!(out, "|:--|:--|--:|{}", "--:|".repeat(methods.len())).unwrap();

        let mut seen: Vec<(&str, f64)> = Vec::new();
        for r in &self.rows {
            if !seen.iter().any(|&(img, s)| img == r.image && s == r.sigma) {
                seen.push((&r.image, r.sigma));
            }
        }
        for (image, sigma) in seen {
            let group: Vec<&BenchRow> = self.rows.iter().filter(|r| r.image == image && r.sigma == sigma).collect();
            let cells: Vec<String> = cfg
                .methods
                .iter()
                .map(|&m| {
                    let outcomes: Vec<&std::result::Result<f64, String>> =
                        group.iter().filter(|r| r.method == m).map(|r| &r.outcome).collect();
                    if outcomes.iter().any(|o| o.is_err()) {
                        "failed".to_string()
                    } else {
                        let sum: f64 = outcomes.iter().map(|o| *o.as_ref().unwrap()).sum();
                        let mean = sum / outcomes.len() as f64;
                        if mean.is_infinite() { "inf".to_string() } else { format!("{mean:.2}") }
                    }
                })
                .collect();
            writeln!(out, "| {} | {} | {} | {} |", image, group[0].modality, sigma, cells.join(" | ")).unwrap();
        }

        let failed: Vec<&BenchRow> = self.rows.iter().filter(|r| r.outcome.is_err()).collect();
        if !failed.is_empty() {
            out.push_str("\n## Failures\n\n");
            for r in failed {
                let msg = r.outcome.as_ref().unwrap_err();
                writeln!(out, "- {} σ={} {} seed {}: {}", r.image, r.sigma, r.method, r.master_seed, msg).unwrap();
            }
        }

        let toml = toml::to_string(cfg).map_err(|e| Error::ConfigFile(e.to_string()))?;
        write!(out, "\n## Configuration\n\n```toml\n{toml}```\n").unwrap();
        Ok(out)
    }

    /// PSNR values formatted for a terminal summary.
    pub fn summary_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                let v = match &r.outcome {
                    Ok(db) => format_db(*db),
                    Err(e) => format!("failed: {e}"),
                };
                format!("{} σ={} {} seed {}: {}", r.image, r.sigma, r.method, r.master_seed, v)
            })
            .collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_image;
    use crate::noise_metrics::{make_phantom, PhantomKind};

    fn quick_config(dir: &Path) -> BenchConfig {
        let mut cfg = BenchConfig {
            dir: dir.to_path_buf(),
            sigmas: vec![25.0],
            methods: vec![Method::Dna, Method::TvClassical],
            ..Default::default()
        };
        cfg.settings.train.iterations = 3;
        cfg.settings.network.depth = 1;
        cfg.settings.network.base_channels = 4;
        cfg.settings.tv.steps = 20;
        cfg
    }

    fn phantom_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("mri")).unwrap();
        write_image(dir.path().join("b.pgm"), &make_phantom(PhantomKind::Step, 8, 8, 1).unwrap()).unwrap();
        write_image(dir.path().join("mri/a.png"), &make_phantom(PhantomKind::Circles, 8, 8, 3).unwrap()).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        dir
    }

    #[test]
    fn discovers_sorted_with_modalities() {
        let dir = phantom_dir();
        let found = discover_images(dir.path()).unwrap();
        let ids: Vec<(&str, &str)> = found.iter().map(|i| (i.id.as_str(), i.modality.as_str())).collect();
        assert_eq!(ids, [("b.pgm", "generic"), ("mri/a.png", "mri")]);
    }

    #[test]
    fn grid_has_one_row_per_cell() {
        let dir = phantom_dir();
        let mut cfg = quick_config(dir.path());
        cfg.seeds = vec![0, 1];
        let report = run_bench(&cfg, &|_| {}).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 2);
        assert_eq!(report.failures(), 0);
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().nth(1).unwrap().starts_with("b.pgm,generic,25,dna,"));
    }

    #[test]
    fn cell_seeds_are_independent_of_grid() {
        let a = cell_seed(0, "x.pgm", 25.0, Method::Dna);
        assert_eq!(a, cell_seed(0, "x.pgm", 25.0, Method::Dna));
        assert_ne!(a, cell_seed(0, "x.pgm", 25.0, Method::Dip));
        assert_ne!(a, cell_seed(0, "x.pgm", 15.0, Method::Dna));
        assert_ne!(a, cell_seed(1, "x.pgm", 25.0, Method::Dna));
    }

    #[test]
    fn parallel_and_serial_reports_match() {
        let dir = phantom_dir();
        let mut cfg = quick_config(dir.path());
        let serial = run_bench(&cfg, &|_| {}).unwrap();
        cfg.jobs = 3;
        let parallel = run_bench(&cfg, &|_| {}).unwrap();
        assert_eq!(serial.to_csv(), parallel.to_csv());
    }

    #[test]
    fn failures_are_recorded_and_run_continues() {
        let dir = phantom_dir();
        std::fs::write(dir.path().join("broken.pgm"), b"P5\n4 4\n255\n\x00").unwrap();
        let report = run_bench(&quick_config(dir.path()), &|_| {}).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(report.failures(), 2);
        let md = report.to_markdown().unwrap();
        assert!(md.contains("| broken.pgm | generic | 25 | failed | failed |"));
        assert!(md.contains("## Failures"));
        assert!(report.to_csv().contains("broken.pgm,generic,25,dna,failed,,"));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_bench(&quick_config(dir.path()), &|_| {}).unwrap_err();
        assert!(err.to_string().contains("no images found"));
    }

    #[test]
    fn markdown_layout() {
        let cfg = BenchConfig { methods: vec![Method::Dna, Method::Dip], seeds: vec![0, 1], ..Default::default() };
        let row = |image: &str, method, seed, db| BenchRow {
            image: image.into(),
            modality: "generic".into(),
            sigma: 15.0,
            method,
            master_seed: seed,
            seed,
            outcome: Ok(db),
            runtime_s: 1.0,
        };
        let report = BenchReport {
            config: cfg,
            rows: vec![
                row("a.pgm", Method::Dna, 0, 30.0),
                row("a.pgm", Method::Dna, 1, 31.0),
                row("a.pgm", Method::Dip, 0, 28.0),
                row("a.pgm", Method::Dip, 1, f64::INFINITY),
            ],
        };
        let md = report.to_markdown().unwrap();
        let table: Vec<&str> = md.lines().filter(|l| l.starts_with('|')).collect();
        assert_eq!(
            table,
            ["| image | modality | σ | dna | dip |", "|:--|:--|--:|--:|--:|", "| a.pgm | generic | 15 | 30.50 | inf |"]
        );
        assert!(md.contains("```toml\n"));
        assert!(report.to_csv().lines().all(|l| l.split(',').nth(5) == Some("") || l == CSV_HEADER));
    }

    #[test]
    fn csv_quotes_awkward_names() {
        assert_eq!(csv_field("a,b.pgm"), "\"a,b.pgm\"");
        assert_eq!(csv_field("plain.pgm"), "plain.pgm");
    }
}
