use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spcde::calibration::{self, CalibrationModel};
use spcde::config::RunConfig;
use spcde::dataio::{self, Dataset};
use spcde::field::{GridField, Source};
use spcde::metrics;
use spcde::par::Execution;
use spcde::qm;
use spcde::synth::{self, SynthSpec};
use spcde::Error;

#[derive(Parser)]
#[command(name = "spcde", version, about = "Conditional density correction of gridded TMAX/PRCP model output")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic observed/model dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
        #[arg(long)]
        tmax_shift: Option<f64>,
        #[arg(long)]
        prcp_scale: Option<f64>,
        #[arg(long)]
        drizzle: Option<f64>,
        /// Model field equal to the observations.
        #[arg(long)]
        identical: bool,
    },
    /// Fit the conditional models on the training span.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model_dir: PathBuf,
    },
    /// Project and calibrate the model field over the test span.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile-mapping baseline: fit on the training span, apply on the test span.
    Qm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare corrected fields and the raw model against observations.
    Evaluate {
        /// Dataset holding the observed and model fields.
        #[arg(long)]
        data: PathBuf,
        /// Corrected fields as `NAME=path.csv`; repeatable.
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<(String, PathBuf)>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Full experiment: fit, calibrate, quantile mapping and evaluation.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=path, got {s:?}"))?;
    if name.is_empty() || path.is_empty() {
        return Err(format!("expected NAME=path, got {s:?}"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

#[derive(Serialize)]
struct FileRef {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: Vec<String>,
    created_utc: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<FileRef>,
    outputs: Vec<String>,
}

fn file_ref(path: &Path) -> spcde::Result<FileRef> {
    let bytes = std::fs::read(path)?;
    Ok(FileRef {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn write_manifest(
    at: &Path,
    command: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
) -> spcde::Result<()> {
    let m = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        args: std::env::args().collect(),
        created_utc: chrono::Utc::now().to_rfc3339(),
        seed,
        config,
        inputs: inputs.iter().map(|p| file_ref(p)).collect::<spcde::Result<_>>()?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    std::fs::write(at, serde_json::to_string_pretty(&m)?)?;
    log::info!("wrote run manifest {}", at.display());
    Ok(())
}

/// `<file>.manifest.json` next to a file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>) -> spcde::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn pair(data: &Dataset) -> spcde::Result<(&GridField, &GridField)> {
    let obs = data.require(Source::Observed)?;
    let model = data.require(Source::Model)?;
    obs.check_aligned(model)?;
    Ok((obs, model))
}

fn bounds(f: &GridField) -> (chrono::NaiveDate, chrono::NaiveDate) {
    (f.dates()[0], f.dates()[f.n_days() - 1])
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 2,
        Error::Parse { .. }
        | Error::Validation { .. }
        | Error::Completeness(_)
        | Error::Alignment(_)
        | Error::InvalidInput(_)
        | Error::Csv(_) => 3,
        Error::FitFailures { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> spcde::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Synth {
            out,
            config,
            seed,
            days,
            nx,
            ny,
            tmax_shift,
            prcp_scale,
            drizzle,
            identical,
        } => {
            let mut spec = match &config {
                Some(p) => {
                    let s = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str::<SynthSpec>(&s).map_err(|e| Error::Config(e.to_string()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(v) = seed {
                spec.seed = v;
            }
            if let Some(v) = days {
                spec.n_days = v;
            }
            if let Some(v) = nx {
                spec.nx = v;
            }
            if let Some(v) = ny {
                spec.ny = v;
            }
            if let Some(v) = tmax_shift {
                spec.tmax_shift = v;
            }
            if let Some(v) = prcp_scale {
                spec.prcp_scale = v;
            }
            if let Some(v) = drizzle {
                spec.drizzle = v;
            }
            spec.identical |= identical;
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (obs, model) = synth::generate(&spec)?;
            dataio::write_fields(&out, &[&obs, &model])?;
            let inputs: Vec<&Path> = config.iter().map(PathBuf::as_path).collect();
            write_manifest(&sidecar(&out), "synth", Some(spec.seed), serde_json::to_value(&spec)?, &inputs, &[&out])?;
            log::info!("wrote {} locations x {} days to {}", obs.n_locations(), obs.n_days(), out.display());
        }
        Command::Fit {
            data,
            config,
            model_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = dataio::read_dataset(&data)?;
            let (obs, model) = pair(&ds)?;
            let (first, last) = bounds(obs);
            let spans = cfg.spans(first, last);
            let obs_h = obs.slice_dates(spans.train.0, spans.train.1)?;
            let model_h = model.slice_dates(spans.train.0, spans.train.1)?;
            let fitted = calibration::fit_calibration(&obs_h, &model_h, &cfg.hyper()?, exec)?;
            fitted.save(&model_dir)?;
            let mut inputs = vec![data.as_path()];
            inputs.extend(config.as_deref());
            write_manifest(
                &model_dir.join("run.json"),
                "fit",
                Some(cfg.seed),
                serde_json::to_value(&cfg)?,
                &inputs,
                &[&model_dir],
            )?;
            log::info!("fitted {} conditional models into {}", fitted.n_models(), model_dir.display());
        }
        Command::Calibrate {
            data,
            model_dir,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = dataio::read_dataset(&data)?;
            let model = ds.require(Source::Model)?;
            let fitted = CalibrationModel::load(&model_dir)?;
            let (first, last) = bounds(model);
            let spans = cfg.spans(first, last);
            let cal = calibration::calibrate_span(&fitted, model, spans.test.0, spans.test.1, exec)?;
            if cal.first_day_uncalibrated {
                log::warn!(
                    "no day precedes {}; it seeds the lags and is written uncalibrated",
                    spans.test.0
                );
            }
            dataio::write_fields(&out, &[&cal.field])?;
            let model_manifest = model_dir.join("manifest.json");
            let mut inputs = vec![data.as_path(), model_manifest.as_path()];
            inputs.extend(config.as_deref());
            write_manifest(&sidecar(&out), "calibrate", Some(cfg.seed), serde_json::to_value(&cfg)?, &inputs, &[&out])?;
        }
        Command::Qm { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = dataio::read_dataset(&data)?;
            let (obs, model) = pair(&ds)?;
            let (first, last) = bounds(obs);
            let spans = cfg.spans(first, last);
            let maps = qm::fit_qm_field(
                &obs.slice_dates(spans.train.0, spans.train.1)?,
                &model.slice_dates(spans.train.0, spans.train.1)?,
                &cfg.qm()?,
            )?;
            let mapped = qm::apply_qm_field(&maps, &model.slice_dates(spans.test.0, spans.test.1)?)?;
            dataio::write_fields(&out, &[&mapped])?;
            let mut inputs = vec![data.as_path()];
            inputs.extend(config.as_deref());
            write_manifest(&sidecar(&out), "qm", Some(cfg.seed), serde_json::to_value(&cfg)?, &inputs, &[&out])?;
        }
        Command::Evaluate {
            data,
            methods,
            out_dir,
        } => {
            let ds = dataio::read_dataset(&data)?;
            let obs = ds.require(Source::Observed)?;
            let raw = ds.require(Source::Model)?;
            let mut fields = Vec::new();
            for (name, path) in &methods {
                let d = dataio::read_dataset(path)?;
                let f = d
                    .calibrated
                    .or(d.model)
                    .ok_or_else(|| Error::Completeness(format!("{} has no calibrated rows", path.display())))?;
                fields.push((name.clone(), f));
            }
            // Evaluate over the calendar of the corrected fields.
            let (a, b) = match fields.first() {
                Some((_, f)) => bounds(f),
                None => bounds(obs),
            };
            let obs_w = obs.slice_dates(a, b)?;
            let mut sliced: Vec<(String, GridField)> = Vec::new();
            for (name, f) in fields {
                sliced.push((name, f.slice_dates(a, b)?));
            }
            sliced.push(("Model".into(), raw.slice_dates(a, b)?));
            let refs: Vec<(&str, &GridField)> = sliced.iter().map(|(n, f)| (n.as_str(), f)).collect();
            let report = metrics::rmse_table(&obs_w, &refs, exec)?;
            let outputs = write_report(&out_dir, &report)?;
            let mut inputs = vec![data.as_path()];
            inputs.extend(methods.iter().map(|(_, p)| p.as_path()));
            let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
            write_manifest(&out_dir.join("manifest.json"), "evaluate", None, serde_json::Value::Null, &inputs, &out_refs)?;
            print!("{}", report.render());
        }
        Command::Report {
            data,
            config,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let out_dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let ds = dataio::read_dataset(&data)?;
            let (obs, model) = pair(&ds)?;
            let (first, last) = bounds(obs);
            let spans = cfg.spans(first, last);
            let qm_cfg = cfg.qm()?;
            let res = calibration::run_spans(obs, model, &spans, &cfg.hyper()?, Some(&qm_cfg), exec)?;
            std::fs::create_dir_all(&out_dir)?;
            let model_dir = out_dir.join("model");
            res.model.save(&model_dir)?;
            let cal_path = out_dir.join("calibrated.csv");
            dataio::write_fields(&cal_path, &[&res.calibrated.field])?;
            let mut outputs = vec![model_dir.clone(), cal_path];
            if let Some(q) = &res.qm {
                let p = out_dir.join("qm.csv");
                dataio::write_fields(&p, &[q])?;
                outputs.push(p);
            }
            if let Some(report) = &res.report {
                outputs.extend(write_report(&out_dir, report)?);
                print!("{}", report.render());
            }
            let mut inputs = vec![data.as_path()];
            inputs.extend(config.as_deref());
            let out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
            write_manifest(
                &out_dir.join("manifest.json"),
                "report",
                Some(cfg.seed),
                serde_json::to_value(&cfg)?,
                &inputs,
                &out_refs,
            )?;
        }
    }
    Ok(())
}

fn write_report(dir: &Path, report: &metrics::MetricsReport) -> spcde::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (dir.join("metrics_cells.csv"), report.cells_csv()),
        (dir.join("metrics_summary.csv"), report.summary_csv()),
        (dir.join("metrics_table.txt"), report.render()),
    ];
    for (p, s) in &files {
        std::fs::write(p, s)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
