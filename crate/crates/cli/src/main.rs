//! `rfp`: generate synthetic WiFi fingerprinting datasets, train and evaluate
//! models, and run the experiment suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rfp_core::experiment::{emit_report, run_experiment, ExperimentName, ExperimentSpec, ResultTable, Workbench};
use rfp_core::mcaff::{Model, ModelKind};
use rfp_core::radio::dataset::{read_dataset, write_dataset};
use rfp_core::radio::{generate_dataset, GenConfig};
use rfp_core::train::{History, SplitPlan, SplitScheme, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "rfp", version, about = "Multi-channel RF fingerprinting on synthetic WiFi preambles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a dataset of impaired L-STF frames.
    GenData {
        #[arg(long, default_value_t = 16)]
        devices: usize,
        #[arg(long, default_value_t = 8)]
        days: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store frames with noise at this SNR (dB) instead of noiseless.
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and save its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mcaff")]
        model: ModelKind,
        #[command(flatten)]
        split: SplitArgs,
        /// Noise added to training frames (dB).
        #[arg(long, default_value_t = 30.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the full-size network instead of the desk-scale one.
        #[arg(long)]
        full_scale: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split it was trained against.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `rfp train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Test noise (dB). Defaults to the training SNR.
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment suite and write its CSV, SVG and provenance.
    Experiment {
        /// ablation_fraction, same_day, day_split, snr_sweep or attention_ablation.
        name: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated model list.
        #[arg(long, value_delimiter = ',')]
        model: Option<Vec<ModelKind>>,
        /// Training SNR (dB).
        #[arg(long)]
        snr: Option<f64>,
        /// JSON experiment specification; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Redraw the SVG chart of every result CSV in a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SplitArgs {
    /// Fraction of each device's frames used for training.
    #[arg(long, conflicts_with = "train_days")]
    fraction: Option<f64>,
    /// Comma-separated training days counted from 1; the other days test.
    #[arg(long, value_delimiter = ',')]
    train_days: Option<Vec<usize>>,
}

impl SplitArgs {
    fn scheme(&self, n_days: usize) -> Result<Option<SplitScheme>> {
        if let Some(f) = self.fraction {
            return Ok(Some(SplitScheme::Fraction { fraction: f }));
        }
        let Some(days) = &self.train_days else {
            return Ok(None);
        };
        if days.iter().any(|&d| d == 0 || d > n_days) {
            bail!("training days must lie in 1..={n_days}");
        }
        let train_days: Vec<usize> = days.iter().map(|d| d - 1).collect();
        let test_days = (0..n_days).filter(|d| !train_days.contains(d)).collect();
        Ok(Some(SplitScheme::DayPartition { train_days, test_days }))
    }
}

/// Written next to a checkpoint so `eval` can rebuild the same split.
#[derive(Serialize, Deserialize)]
struct TrainRecord {
    plan: SplitPlan,
    train: TrainConfig,
    snr_db: f64,
    history: History,
    train_seconds: f64,
}

fn record_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("train.json")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(devices: usize, days: usize, frames: usize, seed: u64, snr: Option<f64>, out: &Path) -> Result<()> {
    let cfg = GenConfig {
        snr_db: snr,
        ..GenConfig::new(devices, days, frames, seed)
    };
    let (manifest, array) = generate_dataset(&cfg).context("gen-data: synthesis")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).context("gen-data: creating output directory")?;
    }
    write_dataset(out, &manifest, &array).context("gen-data: writing dataset")?;
    eprintln!("wrote {} frames to {}", devices * days * frames, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: &Path,
    model: ModelKind,
    split: &SplitArgs,
    snr: f64,
    seed: u64,
    config: Option<&Path>,
    full_scale: bool,
    out: &Path,
) -> Result<()> {
    let (manifest, frames) = read_dataset(data).context("train: loading dataset")?;
    let mut train_cfg: TrainConfig = match config {
        Some(p) => read_json(p).context("train: reading config")?,
        None => TrainConfig::default(),
    };
    train_cfg.seed = seed;
    let scheme = split
        .scheme(manifest.extents.n_d)?
        .unwrap_or(SplitScheme::Fraction { fraction: 0.5 });
    let plan = SplitPlan::new(scheme, seed);
    let mut wb = Workbench::new(manifest, frames, train_cfg.clone(), seed);
    wb.train_snr_db = Some(snr);
    if full_scale {
        wb.scale = rfp_core::experiment::Scale::Full;
    }
    let mut cell = wb.train_cell(model, &plan).context("train: training")?;
    let acc = wb
        .accuracy(&mut cell.model, &cell.splits.test, Some(snr))
        .context("train: scoring")?;
    cell.model.save(out).context("train: saving checkpoint")?;
    let record = TrainRecord {
        plan,
        train: train_cfg,
        snr_db: snr,
        history: cell.history.clone(),
        train_seconds: cell.train_seconds,
    };
    fs::write(record_path(out), serde_json::to_string_pretty(&record)?).context("train: saving record")?;
    fs::write(out.with_extension("history.csv"), cell.history.to_csv()).context("train: saving history")?;
    println!(
        "{model}: best epoch {} of {}, test accuracy {acc:.4} at {snr} dB",
        cell.history.best_epoch,
        cell.history.epochs.len()
    );
    Ok(())
}

fn eval_cmd(data: &Path, ckpt: &Path, split: &SplitArgs, snr: Option<f64>, seed: Option<u64>) -> Result<()> {
    let (manifest, frames) = read_dataset(data).context("eval: loading dataset")?;
    let mut model = Model::load(ckpt).context("eval: loading checkpoint")?;
    let record: Option<TrainRecord> = match record_path(ckpt) {
        p if p.exists() => Some(read_json(&p).context("eval: reading training record")?),
        _ => None,
    };
    let seed = seed.or(record.as_ref().map(|r| r.plan.seed)).unwrap_or(0);
    let plan = match split.scheme(manifest.extents.n_d)? {
        Some(s) => SplitPlan::new(s, seed),
        None => match &record {
            Some(r) => r.plan.clone(),
            None => SplitPlan::new(SplitScheme::Fraction { fraction: 0.5 }, seed),
        },
    };
    let snr = snr.or(record.as_ref().map(|r| r.snr_db));
    let splits = rfp_core::train::split_dataset(&manifest.extents, &plan).context("eval: splitting")?;
    let n_classes = manifest.extents.n_n;
    let wb = Workbench::new(manifest, frames, TrainConfig::default(), seed);
    let data = rfp_core::train::materialize(
        &wb.frames,
        wb.manifest.sample_rate,
        &splits.test,
        model.kind().branches(),
        snr.map(|snr_db| rfp_core::train::NoiseSpec { snr_db, seed }),
        &wb.repr,
    )
    .context("eval: building inputs")?;
    if model.config.n_classes != n_classes {
        bail!(
            "eval: checkpoint has {} classes, dataset {}",
            model.config.n_classes,
            n_classes
        );
    }
    let e = rfp_core::train::evaluate(&mut model, &data, 256).context("eval: scoring")?;
    println!("accuracy {:.4} on {} frames", e.accuracy, data.len());
    for row in &e.confusion {
        println!("{}", row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn experiment_cmd(
    name: &str,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    models: Option<Vec<ModelKind>>,
    snr: Option<f64>,
    config: Option<&Path>,
) -> Result<()> {
    let exp = ExperimentName::parse(name)?;
    let mut spec = match config {
        Some(p) => {
            let spec: ExperimentSpec = read_json(p).context("experiment: reading config")?;
            if spec.name != exp {
                bail!("experiment: config describes {}, not {name}", spec.name.name());
            }
            spec
        }
        None => {
            let (Some(d), Some(o)) = (&data, &out) else {
                bail!("experiment: --data and --out are required without --config");
            };
            ExperimentSpec::new(exp, d, o, seed.unwrap_or(0))
        }
    };
    if let Some(d) = data {
        spec.dataset = d;
    }
    if let Some(o) = out {
        spec.out_dir = o;
    }
    if let Some(s) = seed {
        spec.seed = s;
        spec.train.seed = s;
    }
    if let Some(m) = models {
        spec.models = m;
    }
    if snr.is_some() {
        spec.train_snr_db = snr;
    }
    let table = run_experiment(&spec).context("experiment: running cells")?;
    let files = emit_report(&table, &spec.out_dir).context("experiment: writing report")?;
    for r in &table.rows {
        println!("{},{},{:.4}", r.model, r.condition, r.accuracy);
    }
    eprintln!("wrote {} and {}", files.csv.display(), files.svg.display());
    Ok(())
}

fn report_cmd(out: &Path) -> Result<()> {
    let mut count = 0;
    let mut entries: Vec<PathBuf> = fs::read_dir(out)
        .with_context(|| format!("report: listing {}", out.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && !p.to_string_lossy().ends_with(".history.csv"))
        .collect();
    entries.sort();
    for path in entries {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = fs::read_to_string(&path).with_context(|| format!("report: reading {}", path.display()))?;
        let table = ResultTable::from_csv(&stem, &text).with_context(|| format!("report: parsing {}", path.display()))?;
        if table.rows.is_empty() {
            continue;
        }
        fs::write(out.join(format!("{stem}.svg")), rfp_core::experiment::render_svg(&table)?)
            .context("report: writing chart")?;
        count += 1;
    }
    if count == 0 {
        bail!("report: no result tables in {}", out.display());
    }
    eprintln!("rendered {count} chart(s)");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            devices,
            days,
            frames,
            seed,
            snr,
            out,
        } => gen_data(devices, days, frames, seed, snr, &out),
        Command::Train {
            data,
            model,
            split,
            snr,
            seed,
            config,
            full_scale,
            out,
        } => train_cmd(&data, model, &split, snr, seed, config.as_deref(), full_scale, &out),
        Command::Eval {
            data,
            model,
            split,
            snr,
            seed,
        } => eval_cmd(&data, &model, &split, snr, seed),
        Command::Experiment {
            name,
            data,
            out,
            seed,
            model,
            snr,
            config,
        } => experiment_cmd(&name, data, out, seed, model, snr, config.as_deref()),
        Command::Report { out } => report_cmd(&out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
