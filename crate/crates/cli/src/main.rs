//! `spoi` — command-line experiments for sPA unmixing.
//!
//! Exit codes: 0 success, 2 input/validation error, 3 numerical failure.
//! `SPOI_THREADS` caps the size of the internal thread pool.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;

use spoi_core::baselines::{linear_reconstruction, nls_unmix, nmf_unmix, DEFAULT_SWEEPS};
use spoi_core::config::RunConfig;
use spoi_core::io::{load_mask, save_json, write_atomic, Dataset, TensorFile};
use spoi_core::metrics::{so2, so2_mae, EvalReport, So2Map};
use spoi_core::model::{train, SpoiModel};
use spoi_core::phantom::{generate, truth_path, PhantomSpec, Truth};
use spoi_core::spectra::hemoglobin_spectra;
use spoi_core::{ConcentrationMatrix, Error, PixelBatch, SpectraMatrix, WavelengthGrid};

const CHECKPOINT: &str = "checkpoint.spoi";
const METRICS_LOG: &str = "metrics.jsonl";
const RESULT_TENSORS: &str = "result.tensors";

#[derive(Parser)]
#[command(name = "spoi", version, about = "Physics-informed unmixing of spectroscopic photoacoustic pixels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset (`<out>` plus `<out>.truth`).
    Phantom {
        /// Phantom spec JSON; omit for the built-in default phantom.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a CSV table (wavelength header, then `depth_mm,p_1..p_L` rows) to a dataset file.
    ImportCsv {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a SPOI-AE model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Unmix a dataset with a baseline or a trained model.
    Unmix {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        dataset: PathBuf,
        /// Required for `--method spoi`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// NMF sweep count.
        #[arg(long, default_value_t = DEFAULT_SWEEPS)]
        sweeps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a reconstruction against its dataset (and optionally the truth).
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// An `unmix` output directory, or a dataset file used as the reconstruction.
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Where to write report.json and series.csv (defaults to the result directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Nls,
    Nmf,
    Spoi,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPOI_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SPOI_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("SPOI_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom { spec, out } => cmd_phantom(spec.as_deref(), &out),
        Command::ImportCsv { csv, out } => cmd_import_csv(&csv, &out),
        Command::Train { config } => cmd_train(&config),
        Command::Unmix { method, dataset, checkpoint, sweeps, out } => {
            cmd_unmix(method, &dataset, checkpoint.as_deref(), sweeps, &out)
        }
        Command::Eval { dataset, result, truth, out } => cmd_eval(&dataset, &result, truth.as_deref(), out.as_deref()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let (pixels, depths) = ds.batch.clone().into_parts();
    let mut batch = PixelBatch::new(pixels, depths)?;
    batch.normalize_global()?;
    ds.batch = batch;
    Ok(ds)
}

fn spectra_for(grid: &WavelengthGrid) -> Result<SpectraMatrix> {
    Ok(hemoglobin_spectra(grid)?)
}

fn cmd_phantom(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .map_err(Error::from)
                .with_context(|| format!("invalid phantom spec {}", p.display()))?
        }
        None => spoi_core::phantom::default_paper_phantom(),
    };
    spec.validate().context("invalid phantom spec")?;
    let grid = WavelengthGrid::default();
    let labeled = generate(&spec, &grid, &spectra_for(&grid)?)?;
    labeled.save(out)?;
    println!(
        "wrote {} (I = {}, L = {}) and {}",
        out.display(),
        labeled.dataset.batch.len(),
        grid.len(),
        truth_path(out).display()
    );
    println!("grid {}x{} at {} mm, depth offset {} mm", spec.grid_shape[0], spec.grid_shape[1], spec.pixel_pitch_mm, spec.depth_offset_mm);
    println!("{:>3} {:>10} {:>10} {:>10} {:>7} {:>8}", "#", "row_mm", "col_mm", "radius_mm", "SO2_%", "tHb");
    for (i, inc) in spec.inclusions.iter().enumerate() {
        println!(
            "{:>3} {:>10.3} {:>10.3} {:>10.3} {:>7.1} {:>8.4}",
            i, inc.center_mm[0], inc.center_mm[1], inc.radius_mm, inc.so2_percent, inc.total_hemoglobin
        );
    }
    Ok(())
}

fn cmd_import_csv(csv: &Path, out: &Path) -> Result<()> {
    let file = File::open(csv).with_context(|| format!("opening {}", csv.display()))?;
    let ds = Dataset::from_csv(file).with_context(|| format!("parsing {}", csv.display()))?;
    ds.save(out)?;
    println!("wrote {} (I = {}, L = {})", out.display(), ds.batch.len(), ds.grid.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a RunConfig,
    train_pixels: usize,
    eval_pixels: usize,
    epochs_run: usize,
    final_train_mse: Option<f64>,
    final_train_msad: Option<f64>,
    final_eval_mse: Option<f64>,
    final_eval_msad: Option<f64>,
    gamma_phi0: Vec<f64>,
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let cfg = RunConfig::from_json(&text).with_context(|| format!("invalid run config {}", config_path.display()))?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let ds = load_dataset(&cfg.dataset)?;
    let data = match &cfg.mask {
        Some(m) => {
            let mask = load_mask(m, ds.batch.len()).with_context(|| format!("reading mask {}", m.display()))?;
            let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            if idx.len() < 2 {
                bail!("mask {} selects {} pixels; training needs at least 2", m.display(), idx.len());
            }
            ds.batch.select(&idx)
        }
        None => ds.batch.clone(),
    };
    let spectra = spectra_for(&ds.grid)?;
    let train_cfg = cfg.train_config();
    fs::create_dir_all(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join(METRICS_LOG);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_err: Option<std::io::Error> = None;
    let outcome = train::<f32>(&data, &spectra, &cfg.model, &train_cfg, |r| {
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {:>4}  mse {:.6}  msad {:.6}  loss {:.6}  ({} ms)",
            r.epoch, r.train_mse, r.train_msad, r.loss, r.wall_ms
        );
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing metrics log");
    }
    let ckpt = cfg.output_dir.join(CHECKPOINT);
    outcome.model.to_tensor_file(Some(&outcome.adam))?.save(&ckpt)?;
    let last = outcome.history.last();
    let summary = TrainSummary {
        config: &cfg,
        train_pixels: outcome.train_indices.len(),
        eval_pixels: outcome.eval_indices.len(),
        epochs_run: outcome.history.len(),
        final_train_mse: last.map(|r| r.train_mse),
        final_train_msad: last.map(|r| r.train_msad),
        final_eval_mse: last.and_then(|r| r.eval_mse),
        final_eval_msad: last.and_then(|r| r.eval_msad),
        gamma_phi0: outcome.model.gamma_phi0.iter().map(|&g| g as f64).collect(),
    };
    save_json(&cfg.output_dir.join("train_summary.json"), &summary)?;
    println!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

#[derive(Serialize)]
struct UnmixSummary {
    method: Method,
    dataset: PathBuf,
    pixels: usize,
    wavelengths: usize,
    chromophores: Vec<String>,
    mse: f64,
    msad: f64,
    so2_mean: Option<f64>,
    so2_defined: usize,
    nmf_sweeps: Option<usize>,
}

fn so2_record(map: &So2Map) -> Vec<f64> {
    map.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
}

fn cmd_unmix(method: Method, dataset: &Path, checkpoint: Option<&Path>, sweeps: usize, out: &Path) -> Result<()> {
    if matches!(method, Method::Spoi) && checkpoint.is_none() {
        bail!("--method spoi requires --checkpoint");
    }
    let ds = load_dataset(dataset)?;
    let pixels = ds.batch.pixels();
    let mut tensors = TensorFile::new();
    let (conc, recon, spectra, names): (ConcentrationMatrix, Array2<f64>, Array2<f64>, Vec<String>) = match method {
        Method::Nls => {
            let e = spectra_for(&ds.grid)?;
            let c = nls_unmix(&e, pixels)?;
            let rec = linear_reconstruction(e.values(), &c);
            (c, rec, e.values().to_owned(), e.names().to_vec())
        }
        Method::Nmf => {
            let e = spectra_for(&ds.grid)?;
            let r = nmf_unmix(&e, pixels, sweeps)?;
            tensors.push_vec("nmf_objective", &r.objective_trace)?;
            let rec = linear_reconstruction(r.spectra.view(), &r.conc);
            (r.conc, rec, r.spectra, e.names().to_vec())
        }
        Method::Spoi => {
            let path = checkpoint.expect("checked above");
            let file = TensorFile::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let (model, _) = SpoiModel::<f32>::from_tensor_file(&file)?;
            if model.wavelength_count() != ds.grid.len() {
                bail!(Error::DimensionMismatch(format!(
                    "checkpoint has {} wavelengths, dataset has {}",
                    model.wavelength_count(),
                    ds.grid.len()
                )));
            }
            let r = model.infer(&ds.batch)?;
            tensors.push_array2("mu_a", r.mu_a.view())?;
            tensors.push_array2("mu_a_hat", r.mu_a_hat.view())?;
            tensors.push_array2("mu_s_prime", r.mu_s_prime.view())?;
            let e = model.spectra()?;
            (r.conc, r.pressure_hat, e.values().to_owned(), model.chromophores().to_vec())
        }
    };
    let so2_map = so2(&conc)?;
    tensors.push_array2("conc", conc.values())?;
    tensors.push_vec("so2", &so2_record(&so2_map))?;
    tensors.push_array2("reconstruction", recon.view())?;
    tensors.push_array2("spectra", spectra.view())?;
    fs::create_dir_all(out)?;
    tensors.save(&out.join(RESULT_TENSORS))?;
    let spectra_matrix = SpectraMatrix::with_stale_pinv(spectra, names.clone())?;
    spectra_matrix.save_csv(&ds.grid, &out.join("spectra.csv"))?;
    let summary = UnmixSummary {
        method,
        dataset: dataset.to_owned(),
        pixels: ds.batch.len(),
        wavelengths: ds.grid.len(),
        chromophores: names,
        mse: spoi_core::metrics::mse(pixels, recon.view())?,
        msad: spoi_core::metrics::msad(pixels, recon.view())?,
        so2_mean: so2_map.mean(),
        so2_defined: so2_map.values.iter().filter(|v| v.is_some()).count(),
        nmf_sweeps: matches!(method, Method::Nmf).then_some(sweeps),
    };
    save_json(&out.join("summary.json"), &summary)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Reconstruction and (if present) SO2 map stored at `result`.
fn load_result(result: &Path) -> Result<(Array2<f64>, Option<So2Map>)> {
    if result.is_dir() {
        let f = TensorFile::load(&result.join(RESULT_TENSORS))
            .with_context(|| format!("reading {}", result.join(RESULT_TENSORS).display()))?;
        let recon = f.require("reconstruction")?.to_array2()?;
        let so2 = f.get("so2").map(|r| So2Map {
            values: r.to_vec_f64().into_iter().map(|v| v.is_finite().then_some(v)).collect(),
        });
        Ok((recon, so2))
    } else {
        let ds = load_dataset(result)?;
        Ok((ds.batch.pixels().to_owned(), None))
    }
}

fn cmd_eval(dataset: &Path, result: &Path, truth: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let (recon, so2_est) = load_result(result)?;
    if recon.dim() != ds.batch.pixels().dim() {
        bail!(Error::DimensionMismatch(format!(
            "reconstruction is {:?}, dataset is {:?}",
            recon.dim(),
            ds.batch.pixels().dim()
        )));
    }
    let mut report = EvalReport::compute(ds.batch.pixels(), recon.view())?;
    if let Some(tp) = truth {
        let t = Truth::load(tp).with_context(|| format!("reading truth {}", tp.display()))?;
        if t.vessel_mask.len() != ds.batch.len() {
            bail!(Error::DimensionMismatch(format!(
                "truth covers {} pixels, dataset has {}",
                t.vessel_mask.len(),
                ds.batch.len()
            )));
        }
        let est = so2_est.context("result has no SO2 map to compare against the truth")?;
        report.so2_mae = Some(so2_mae(&est, &t.so2, &t.vessel_mask)?);
    }
    let out_dir = match out {
        Some(d) => d.to_owned(),
        None if result.is_dir() => result.to_owned(),
        None => result.parent().map(Path::to_owned).unwrap_or_default(),
    };
    fs::create_dir_all(&out_dir)?;
    save_json(&out_dir.join("report.json"), &report)?;
    write_atomic(out_dir.join("series.csv"), |w| report.write_series_csv(&ds.grid, w))?;
    println!(
        "mse {:.6}  msad {:.6}  r2 mean {}  so2 mae {}",
        report.mse,
        report.msad,
        report.r2_mean.map_or("undefined".into(), |v| format!("{v:.6}")),
        report.so2_mae.map_or("n/a".into(), |v| format!("{v:.3} pp")),
    );
    Ok(())
}
