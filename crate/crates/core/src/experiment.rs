//! Experiment suites: training cells, result tables and their reports.
//!
//! A cell is one trained model for one split. Cells are cached in a
//! checkpoint directory keyed by a hash of everything that determines the
//! training, so suites that share a cell (the SNR sweep and the attention
//! ablation both use the 50 % split) train it once.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::ReprConfig;
use crate::error::{Result, RfpError};
use crate::mcaff::{Model, ModelConfig, ModelKind};
use crate::radio::dataset::{read_dataset, DatasetManifest, FrameArray};
use crate::train::{
    evaluate, materialize, split_dataset, train, History, NoiseSpec, SplitPlan, SplitScheme, Splits, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    AblationFraction,
    SameDay,
    DaySplit,
    SnrSweep,
    AttentionAblation,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 5] = [
        Self::AblationFraction,
        Self::SameDay,
        Self::DaySplit,
        Self::SnrSweep,
        Self::AttentionAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AblationFraction => "ablation_fraction",
            Self::SameDay => "same_day",
            Self::DaySplit => "day_split",
            Self::SnrSweep => "snr_sweep",
            Self::AttentionAblation => "attention_ablation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| RfpError::Usage(format!("unknown experiment '{s}'")))
    }

    pub fn default_models(self) -> Vec<ModelKind> {
        use ModelKind::*;
        match self {
            Self::AttentionAblation => vec![Mcaff, McaffNoattn],
            _ => vec![Mcaff, Miq, Mcfo, Mfft, Mstft],
        }
    }

    /// Default sweep: fractions, one-based days, training-day counts or SNRs in dB.
    pub fn default_sweep(self) -> Vec<f64> {
        match self {
            Self::AblationFraction => vec![0.01, 0.05, 0.15, 0.25, 0.5],
            Self::SameDay => (1..=8).map(f64::from).collect(),
            Self::DaySplit => vec![1.0, 2.0, 3.0, 4.0],
            Self::SnrSweep | Self::AttentionAblation => (2..=15).map(|k| f64::from(2 * k)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

impl Scale {
    pub fn model_config(self, kind: ModelKind, n_classes: usize) -> ModelConfig {
        match self {
            Scale::Desk => ModelConfig::desk(kind, n_classes),
            Scale::Full => ModelConfig::full(kind, n_classes),
        }
    }
}

fn default_train_snr() -> Option<f64> {
    Some(30.0)
}

fn default_fraction() -> f64 {
    0.5
}

/// One experiment run. Also the JSON accepted by `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub dataset: PathBuf,
    pub models: Vec<ModelKind>,
    pub sweep: Vec<f64>,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub train: TrainConfig,
    /// Noise added to training, validation and (outside SNR sweeps) test frames.
    #[serde(default = "default_train_snr")]
    pub train_snr_db: Option<f64>,
    /// Training share for the same-day split and the SNR sweeps.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName, dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            name,
            dataset: dataset.into(),
            models: name.default_models(),
            sweep: name.default_sweep(),
            out_dir: out_dir.into(),
            seed,
            scale: Scale::Desk,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            train_snr_db: default_train_snr(),
            fraction: default_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() || self.models.is_empty() {
            return Err(RfpError::Usage("experiment needs at least one model and one sweep value".into()));
        }
        if self.sweep.iter().any(|v| !v.is_finite()) {
            return Err(RfpError::Usage("sweep values must be finite".into()));
        }
        self.train.validate()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }
}

/// A loaded dataset plus everything needed to train and score cells on it.
pub struct Workbench {
    pub manifest: DatasetManifest,
    pub frames: FrameArray,
    pub dataset_sha256: String,
    pub repr: ReprConfig,
    pub scale: Scale,
    pub train_cfg: TrainConfig,
    pub train_snr_db: Option<f64>,
    pub noise_seed: u64,
    /// Where trained cells are cached; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

/// One trained model and how it was obtained.
pub struct Cell {
    pub kind: ModelKind,
    pub plan: SplitPlan,
    pub model: Model,
    pub splits: Splits,
    pub history: History,
    pub train_seconds: f64,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    history: History,
    train_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Workbench {
    pub fn new(manifest: DatasetManifest, frames: FrameArray, train_cfg: TrainConfig, noise_seed: u64) -> Self {
        let dataset_sha256 = sha256_hex(&frames.to_bytes());
        Self {
            manifest,
            frames,
            dataset_sha256,
            repr: ReprConfig::default(),
            scale: Scale::Desk,
            train_cfg,
            train_snr_db: default_train_snr(),
            noise_seed,
            cache_dir: None,
        }
    }

    pub fn for_spec(spec: &ExperimentSpec) -> Result<Self> {
        let (manifest, frames) = read_dataset(&spec.dataset)?;
        let mut wb = Self::new(manifest, frames, spec.train.clone(), spec.seed);
        wb.scale = spec.scale;
        wb.train_snr_db = spec.train_snr_db;
        wb.cache_dir = Some(spec.checkpoint_dir());
        Ok(wb)
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.extents.n_n
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        self.scale
            .model_config(kind, self.n_classes())
            .with_seed(self.train_cfg.seed)
    }

    fn noise(&self, snr_db: Option<f64>) -> Option<NoiseSpec> {
        snr_db.map(|snr_db| NoiseSpec {
            snr_db,
            seed: self.noise_seed,
        })
    }

    fn cell_key(&self, kind: ModelKind, plan: &SplitPlan) -> Result<String> {
        let key = serde_json::json!({
            "model": self.model_config(kind),
            "plan": plan,
            "train": self.train_cfg,
            "train_snr_db": self.train_snr_db,
            "noise_seed": self.noise_seed,
            "dataset": self.dataset_sha256,
            "repr": [self.repr.stft_window_len, self.repr.stft_hop],
        });
        Ok(sha256_hex(serde_json::to_string(&key)?.as_bytes())[..16].to_string())
    }

    /// Trains `kind` on `plan`, or loads the cached result of an identical earlier run.
    pub fn train_cell(&self, kind: ModelKind, plan: &SplitPlan) -> Result<Cell> {
        let splits = split_dataset(&self.manifest.extents, plan)?;
        let paths = match &self.cache_dir {
            Some(dir) => {
                let stem = format!("{kind}-{}", self.cell_key(kind, plan)?);
                Some((dir.join(format!("{stem}.mcaf")), dir.join(format!("{stem}.json"))))
            }
            None => None,
        };
        if let Some((ckpt, rec)) = &paths {
            if ckpt.exists() && rec.exists() {
                let bytes = fs::read(ckpt)?;
                let model = Model::from_checkpoint(&rfp_nn::Checkpoint::from_bytes(&bytes)?)?;
                let record: CellRecord = serde_json::from_slice(&fs::read(rec)?)?;
                return Ok(Cell {
                    kind,
                    plan: plan.clone(),
                    model,
                    splits,
                    history: record.history,
                    train_seconds: record.train_seconds,
                    checkpoint: Some(ckpt.clone()),
                    checkpoint_sha256: sha256_hex(&bytes),
                });
            }
        }
        let start = Instant::now();
        let reprs = kind.branches();
        let rate = self.manifest.sample_rate;
        let noise = self.noise(self.train_snr_db);
        let train_set = materialize(&self.frames, rate, &splits.train, reprs, noise, &self.repr)?;
        let val_set = materialize(&self.frames, rate, &splits.val, reprs, noise, &self.repr)?;
        let mut model = Model::new(self.model_config(kind))?;
        let history = train(&mut model, &train_set, &val_set, &self.train_cfg)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let bytes = model.to_checkpoint()?.to_bytes();
        let checkpoint_sha256 = sha256_hex(&bytes);
        if let Some((ckpt, rec)) = &paths {
            if let Some(dir) = ckpt.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(ckpt, &bytes)?;
            let record = CellRecord {
                history: history.clone(),
                train_seconds,
            };
            fs::write(rec, serde_json::to_string_pretty(&record)?)?;
            fs::write(ckpt.with_extension("history.csv"), history.to_csv())?;
        }
        Ok(Cell {
            kind,
            plan: plan.clone(),
            model,
            splits,
            history,
            train_seconds,
            checkpoint: paths.map(|p| p.0),
            checkpoint_sha256,
        })
    }

    /// Test accuracy of `model` on frames `indices` with noise at `snr_db`.
    pub fn accuracy(&self, model: &mut Model, indices: &[usize], snr_db: Option<f64>) -> Result<f64> {
        let data = materialize(
            &self.frames,
            self.manifest.sample_rate,
            indices,
            model.kind().branches(),
            self.noise(snr_db),
            &self.repr,
        )?;
        Ok(evaluate(model, &data, self.train_cfg.batch_size.max(256))?.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub condition: String,
    pub accuracy: f64,
    pub train_seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProvenance {
    pub model: String,
    pub condition: String,
    pub plan: SplitPlan,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: String,
    pub best_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: ExperimentSpec,
    pub dataset_sha256: String,
    pub dataset_seed: u64,
    pub tool_version: String,
    pub cells: Vec<CellProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub experiment: String,
    /// Rows ordered by condition (sweep order), then model (spec order).
    pub rows: Vec<ResultRow>,
    pub provenance: Option<Provenance>,
}

impl ResultTable {
    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model) {
                out.push(r.model.clone());
            }
        }
        out
    }

    pub fn conditions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.condition) {
                out.push(r.condition.clone());
            }
        }
        out
    }

    pub fn accuracy(&self, model: &str, condition: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.condition == condition)
            .map(|r| r.accuracy)
    }

    /// Accuracies of `model` in condition order.
    pub fn series(&self, model: &str) -> Vec<f64> {
        self.conditions()
            .iter()
            .filter_map(|c| self.accuracy(model, c))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| RfpError::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(experiment: &str, text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()
            .map_err(csv_err)?;
        Ok(Self {
            experiment: experiment.to_string(),
            rows,
            provenance: None,
        })
    }
}

fn csv_err(e: csv::Error) -> RfpError {
    let offset = e.position().map_or(0, |p| p.byte());
    RfpError::Format {
        offset,
        reason: e.to_string(),
    }
}

fn percent(f: f64) -> String {
    format!("{}%", (f * 1000.0).round() / 10.0)
}

fn snr_label(v: f64) -> String {
    format!("{v}dB")
}

/// Runs every (model, condition) cell of `spec` and scores it.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let wb = Workbench::for_spec(spec)?;
    run_on(&wb, spec)
}

/// [`run_experiment`] on an already loaded dataset.
pub fn run_on(wb: &Workbench, spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let e = wb.manifest.extents;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut record = |cell: &Cell, condition: &str, accuracy: f64, rows: &mut Vec<ResultRow>| {
        rows.push(ResultRow {
            model: cell.kind.to_string(),
            condition: condition.to_string(),
            accuracy,
            train_seconds: cell.train_seconds,
            seed: spec.seed,
        });
        if !cells.iter().any(|c: &CellProvenance| c.checkpoint_sha256 == cell.checkpoint_sha256) {
            cells.push(CellProvenance {
                model: cell.kind.to_string(),
                condition: condition.to_string(),
                plan: cell.plan.clone(),
                checkpoint: cell.checkpoint.clone(),
                checkpoint_sha256: cell.checkpoint_sha256.clone(),
                best_epoch: cell.history.best_epoch,
                epochs: cell.history.epochs.len(),
            });
        }
    };
    let plan = |scheme| SplitPlan::new(scheme, spec.seed);
    match spec.name {
        ExperimentName::SnrSweep | ExperimentName::AttentionAblation => {
            let p = plan(SplitScheme::Fraction { fraction: spec.fraction });
            let mut trained: Vec<Cell> = spec
                .models
                .iter()
                .map(|&k| wb.train_cell(k, &p))
                .collect::<Result<_>>()?;
            for &snr in &spec.sweep {
                for cell in &mut trained {
                    let acc = wb.accuracy(&mut cell.model, &cell.splits.test, Some(snr))?;
                    record(cell, &snr_label(snr), acc, &mut rows);
                }
            }
        }
        _ => {
            for &v in &spec.sweep {
                let (scheme, condition) = match spec.name {
                    ExperimentName::AblationFraction => (SplitScheme::Fraction { fraction: v }, percent(v)),
                    ExperimentName::SameDay => {
                        let day = v as usize;
                        if day == 0 || v.fract() != 0.0 {
                            return Err(RfpError::Usage(format!("same_day values are days counted from 1, got {v}")));
                        }
                        (
                            SplitScheme::SameDay {
                                day: day - 1,
                                fraction: spec.fraction,
                            },
                            format!("D{day}"),
                        )
                    }
                    _ => {
                        let k = v as usize;
                        if k == 0 || k >= e.n_d || v.fract() != 0.0 {
                            return Err(RfpError::Usage(format!(
                                "day_split needs 1..{} training days, got {v}",
                                e.n_d - 1
                            )));
                        }
                        (
                            SplitScheme::DayPartition {
                                train_days: (0..k).collect(),
                                test_days: (k..e.n_d).collect(),
                            },
                            format!("{k}/{}", e.n_d - k),
                        )
                    }
                };
                let p = plan(scheme);
                for &kind in &spec.models {
                    let mut cell = wb.train_cell(kind, &p)?;
                    let acc = wb.accuracy(&mut cell.model, &cell.splits.test, wb.train_snr_db)?;
                    record(&cell, &condition, acc, &mut rows);
                }
            }
        }
    }
    Ok(ResultTable {
        experiment: spec.name.name().to_string(),
        rows,
        provenance: Some(Provenance {
            spec: spec.clone(),
            dataset_sha256: wb.dataset_sha256.clone(),
            dataset_seed: wb.manifest.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            cells,
        }),
    })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Static line chart: conditions on x (evenly spaced), accuracy on y, one polyline per model.
pub fn render_svg(table: &ResultTable) -> Result<String> {
    if table.rows.is_empty() {
        return Err(RfpError::Usage("cannot chart an empty table".into()));
    }
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 30.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let conditions = table.conditions();
    let n = conditions.len();
    let x_at = |i: usize| {
        if n == 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |a: f64| top + ph * (1.0 - a.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        table.experiment
    );
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let y = y_at(a);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            left + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{a:.2}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    for (i, c) in conditions.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{c}</text>"#,
            x_at(i),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left:.1}" y1="{top:.1}" x2="{left:.1}" y2="{:.1}" stroke="black"/>"#,
        top + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (mi, model) in table.models().iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let points: Vec<String> = conditions
            .iter()
            .enumerate()
            .filter_map(|(i, c)| table.accuracy(model, c).map(|a| format!("{:.1},{:.1}", x_at(i), y_at(a))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 10.0 + 18.0 * mi as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{model}</text>"#, lx + 26.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub provenance: Option<PathBuf>,
}

/// Writes `<experiment>.csv`, `<experiment>.svg` and, when present, `<experiment>.provenance.json`.
pub fn emit_report(table: &ResultTable, out_dir: &Path) -> Result<ReportFiles> {
    if table.rows.is_empty() {
        return Err(RfpError::Usage("result table is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let csv = out_dir.join(format!("{}.csv", table.experiment));
    let svg = out_dir.join(format!("{}.svg", table.experiment));
    fs::write(&csv, table.to_csv()?)?;
    fs::write(&svg, render_svg(table)?)?;
    let provenance = match &table.provenance {
        Some(p) => {
            let path = out_dir.join(format!("{}.provenance.json", table.experiment));
            fs::write(&path, serde_json::to_string_pretty(p)?)?;
            Some(path)
        }
        None => None,
    };
    Ok(ReportFiles { csv, svg, provenance })
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(RfpError::Usage("spearman needs two equal-length series of at least 2".into()));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
