//! Experiment configuration, repeated runs, hyperparameter sweeps and the
//! cross-method comparison table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_split, write_embeddings, SkewSpec, SplitDataset, SplitSizes};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalSplit, FairnessReport, ProbeConfig};
use crate::par;
use crate::rng::{derive_seed, run_seed, Stream};
use crate::trainers::{self, EpochRecord, Method, TrainConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

/// Either a synthetic skewed corpus or three embedding files. Files win when
/// both are given.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub skew: SkewSpec,
    pub sizes: SplitSizes,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<DataFiles>,
}

impl DataConfig {
    /// Load or generate the splits. Relative file paths resolve against `base`.
    pub fn load(&self, seed: u64, base: &Path) -> Result<SplitDataset> {
        match &self.files {
            Some(f) => load_split(&base.join(&f.train), &base.join(&f.dev), &base.join(&f.test)),
            None => generate_synthetic(&self.skew, self.sizes, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub selection_epsilon: f64,
    pub split: EvalSplit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            selection_epsilon: 0.01,
            split: EvalSplit::Test,
        }
    }
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Beta,
    Tau,
    Lambda,
    Iterations,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "beta" => Some(Self::Beta),
            "tau" => Some(Self::Tau),
            "lambda" => Some(Self::Lambda),
            "iterations" => Some(Self::Iterations),
            _ => None,
        }
    }

    /// The axis a method is normally swept along.
    pub fn default_for(method: Method) -> Self {
        match method {
            Method::Inlp => Self::Iterations,
            Method::Adv => Self::Lambda,
            _ => Self::Beta,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Tau => "tau",
            Self::Lambda => "lambda",
            Self::Iterations => "iterations",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) -> Result<()> {
        let contrastive = matches!(cfg.method, Method::Con | Method::ConFt | Method::CeScl | Method::CeFcl);
        match self {
            Self::Beta | Self::Tau if !contrastive => {
                return Err(Error::validation(
                    "sweep.axis",
                    format!("{} needs a contrastive method, not {}", self.name(), cfg.method),
                ))
            }
            Self::Beta => cfg.loss.beta = value,
            Self::Tau => cfg.loss.tau = value,
            Self::Lambda => {
                cfg.adv
                    .as_mut()
                    .ok_or_else(|| Error::validation("sweep.axis", format!("lambda needs method adv, not {}", cfg.method)))?
                    .lambda = value
            }
            Self::Iterations => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::validation("sweep.values", "iterations must be whole numbers"));
                }
                cfg.inlp
                    .as_mut()
                    .ok_or_else(|| Error::validation("sweep.axis", format!("iterations needs method inlp, not {}", cfg.method)))?
                    .iterations = value as usize
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl SweepConfig {
    /// Parse `axis=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (axis, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::validation("sweep", format!("expected axis=v1,v2,... but got {spec:?}")))?;
        let axis = SweepAxis::parse(axis.trim())
            .ok_or_else(|| Error::validation("sweep.axis", format!("unknown axis {axis:?}")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::validation("sweep.values", format!("not a number: {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self { axis, values };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::validation("sweep.values", "must not be empty"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("sweep.values", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub runs: usize,
    pub workers: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 10,
            workers: 1,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: None,
        }
    }
}

fn prefixed(e: Error, prefix: &str) -> Error {
    match e {
        Error::Validation { field, message } => Error::Validation {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Parse TOML. Unknown keys are rejected and reported with their line.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: origin.to_string(),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::validation("runs", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::validation("workers", "must be at least 1"));
        }
        if self.data.files.is_none() {
            self.data.skew.validate().map_err(|e| prefixed(e, "data.skew"))?;
        }
        self.train.validate().map_err(|e| prefixed(e, "train"))?;
        self.eval.probe.validate().map_err(|e| prefixed(e, "eval.probe"))?;
        if !(self.eval.selection_epsilon >= 0.0) {
            return Err(Error::validation("eval.selection_epsilon", "must be non-negative"));
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write the three splits of a dataset as embedding CSV files.
pub fn write_dataset(data: &SplitDataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for (name, split) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        write_embeddings(&dir.join(format!("{name}.csv")), data.dim, data.num_classes, split)?;
    }
    Ok(())
}

/// Outcome of one seeded training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dev: FairnessReport,
    pub test: FairnessReport,
    pub history: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inlp_ranks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Aggregate over runs. Wall-clock times are kept out of this file so it is
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub accuracy: MeanStd,
    pub gap: MeanStd,
    pub leakage_h: MeanStd,
    pub leakage_yhat: MeanStd,
}

impl ExperimentSummary {
    pub fn from_runs(method: Method, runs: &[RunRecord]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Empty("summary"));
        }
        let pick = |f: fn(&FairnessReport) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
        Ok(Self {
            method,
            seeds: runs.iter().map(|r| r.seed).collect(),
            accuracy: pick(|r| r.accuracy),
            gap: pick(|r| r.gap),
            leakage_h: pick(|r| r.leakage_h),
            leakage_yhat: pick(|r| r.leakage_yhat),
        })
    }
}

/// Train and evaluate one seeded run.
pub fn run_once(data: &SplitDataset, cfg: &ExperimentConfig, seed: u64) -> Result<(TrainedModel, RunRecord)> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let model = trainers::train(data, &train_cfg)?;
    let probe_seed = derive_seed(seed, Stream::Run, 0, 0);
    let dev = evaluation::evaluate(&model, data, EvalSplit::Dev, None, &cfg.eval.probe, probe_seed)?;
    let test = evaluation::evaluate(&model, data, cfg.eval.split, None, &cfg.eval.probe, probe_seed)?;
    let record = RunRecord {
        method: model.method,
        seed,
        best_epoch: model.best_epoch,
        epochs_run: model.history.len(),
        dev,
        test,
        history: model.history.clone(),
        inlp_ranks: model
            .projector
            .as_ref()
            .map(|p| p.rank_history.clone())
            .unwrap_or_default(),
    };
    Ok((model, record))
}

/// Run `cfg.runs` seeds and collect their records without touching disk.
pub fn collect_runs(data: &SplitDataset, cfg: &ExperimentConfig) -> Result<Vec<(TrainedModel, RunRecord)>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.runs).map(|i| run_seed(cfg.seed, i)).collect();
    par::map_with_workers(seeds, cfg.workers, |s| run_once(data, cfg, s))
        .into_iter()
        .collect()
}

/// Run every seed and write `run_<seed>.json`, `model_<seed>.ckpt`,
/// `summary.json`, the resolved `config.toml`, and the first run's
/// representations under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &SplitDataset) -> Result<ExperimentSummary> {
    let outcomes = collect_runs(data, cfg)?;
    let out = &cfg.out;
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    for (model, record) in &outcomes {
        write_json(&out.join(format!("run_{}.json", record.seed)), record)?;
        model.checkpoint().save(&out.join(format!("model_{}.ckpt", record.seed)))?;
    }
    if let Some((model, _)) = outcomes.first() {
        evaluation::export_representations(model, data, out)?;
    }
    let records: Vec<RunRecord> = outcomes.into_iter().map(|(_, r)| r).collect();
    let summary = ExperimentSummary::from_runs(cfg.train.method, &records)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub dev: FairnessReport,
    pub test: FairnessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: Method,
    pub axis: SweepAxis,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
    /// Index chosen on dev by the selection rule.
    pub selected: usize,
    /// Indices on the test (accuracy, Leakage@h) Pareto frontier.
    pub frontier: Vec<usize>,
}

/// Train one model per sweep value with the base seed and evaluate each on
/// dev and test. INLP sweeps over iterations share one CE model.
pub fn collect_sweep(data: &SplitDataset, cfg: &ExperimentConfig, sweep: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    sweep.validate()?;
    let seed = cfg.seed;
    let mut base = cfg.train.clone();
    base.seed = seed;
    for &v in &sweep.values {
        let mut c = base.clone();
        sweep.axis.apply(&mut c, v)?;
        c.validate().map_err(|e| prefixed(e, "train"))?;
    }
    let probe_seed = derive_seed(seed, Stream::Run, 0, 0);
    let shared_ce = if base.method == Method::Inlp && sweep.axis == SweepAxis::Iterations {
        let mut ce = base.clone();
        ce.set_method(Method::Ce);
        Some(trainers::train_joint(data, &ce)?)
    } else {
        None
    };
    let evaluate_point = |value: f64| -> Result<SweepPoint> {
        let mut c = base.clone();
        sweep.axis.apply(&mut c, value)?;
        let model = match &shared_ce {
            Some(ce) => trainers::run_inlp(ce, data, &c, value as usize)?,
            None => trainers::train(data, &c)?,
        };
        Ok(SweepPoint {
            value,
            dev: evaluation::evaluate(&model, data, EvalSplit::Dev, None, &cfg.eval.probe, probe_seed)?,
            test: evaluation::evaluate(&model, data, EvalSplit::Test, None, &cfg.eval.probe, probe_seed)?,
        })
    };
    let points = par::map_with_workers(sweep.values.clone(), cfg.workers, evaluate_point)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let dev: Vec<(f64, FairnessReport)> = points.iter().map(|p| (p.value, p.dev.clone())).collect();
    let selected = trainers::select_model(&dev, cfg.eval.selection_epsilon)?;
    let frontier = evaluation::pareto_frontier(&points.iter().map(|p| (p.test.accuracy, p.test.leakage_h)).collect::<Vec<_>>());
    Ok(SweepResult {
        method: base.method,
        axis: sweep.axis,
        seed,
        points,
        selected,
        frontier,
    })
}

/// Run a sweep and write `sweep.json` and `frontier.csv` under `cfg.out`.
pub fn run_sweep(cfg: &ExperimentConfig, data: &SplitDataset, sweep: &SweepConfig) -> Result<SweepResult> {
    let result = collect_sweep(data, cfg, sweep)?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("sweep.json"), &result)?;
    let mut csv = format!("{},accuracy,gap,leakage_h,leakage_yhat,frontier,selected\n", result.axis.name());
    for (i, p) in result.points.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.value,
            p.test.accuracy,
            p.test.gap,
            p.test.leakage_h,
            p.test.leakage_yhat,
            result.frontier.contains(&i),
            i == result.selected
        ));
    }
    write_text(&cfg.out.join("frontier.csv"), &csv)?;
    Ok(result)
}

/// One method's row in the comparison table, all rates in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub accuracy: MeanStd,
    pub gap: MeanStd,
    pub leakage_h: MeanStd,
    pub leakage_yhat: MeanStd,
    pub tradeoff: Option<f64>,
    pub time_seconds: f64,
    pub time_ratio: Option<f64>,
}

/// Build comparison rows from each method's run records. Tradeoff uses the
/// mean metrics; time ratios are relative to the CE row when present.
pub fn compare(methods: &[(Method, Vec<RunRecord>)]) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(methods.len());
    for (method, runs) in methods {
        let s = ExperimentSummary::from_runs(*method, runs)?;
        let time = runs.iter().map(|r| r.test.time_seconds).sum::<f64>() / runs.len() as f64;
        rows.push(ComparisonRow {
            method: *method,
            accuracy: s.accuracy,
            gap: s.gap,
            leakage_h: s.leakage_h,
            leakage_yhat: s.leakage_yhat,
            tradeoff: None,
            time_seconds: time,
            time_ratio: None,
        });
    }
    let mut means: Vec<FairnessReport> = rows
        .iter()
        .map(|r| FairnessReport {
            accuracy: r.accuracy.mean,
            gap: r.gap.mean,
            leakage_h: r.leakage_h.mean,
            leakage_yhat: r.leakage_yhat.mean,
            tradeoff: None,
            time_seconds: r.time_seconds,
            time_ratio: None,
            gap_per_class: Vec::new(),
            warnings: Vec::new(),
        })
        .collect();
    evaluation::tradeoff_scores(&mut means)?;
    let baseline = rows.iter().find(|r| r.method == Method::Ce).map(|r| r.time_seconds);
    for (row, m) in rows.iter_mut().zip(&means) {
        row.tradeoff = m.tradeoff;
        row.time_ratio = baseline.map(|b| row.time_seconds / b);
    }
    Ok(rows)
}

/// Render rows as a table: percentages with `mean±std`, Tradeoff to two
/// decimals, and time as a multiple of CE.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let pct = |m: &MeanStd| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std);
    let mut out = String::from("method,accuracy,gap,leakage_h,leakage_yhat,tradeoff,time\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            pct(&r.accuracy),
            pct(&r.gap),
            pct(&r.leakage_h),
            pct(&r.leakage_yhat),
            r.tradeoff.map(|t| format!("{t:.2}")).unwrap_or_default(),
            r.time_ratio.map(|t| format!("{t:.1}×")).unwrap_or_else(|| "--".into()),
        ));
    }
    out
}

/// Read every `run_*.json` in an experiment directory, ordered by seed.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("run_") && name.ends_with(".json") {
            runs.push(read_json::<RunRecord>(&path)?);
        }
    }
    if runs.is_empty() {
        return Err(Error::validation(dir.display().to_string(), "no run_*.json files"));
    }
    runs.sort_by_key(|r| r.seed);
    Ok(runs)
}

/// Collect runs from experiment directories and write `comparison.csv`.
pub fn write_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<ComparisonRow>> {
    let mut methods = Vec::new();
    for dir in dirs {
        let runs = load_runs(dir)?;
        let method = runs[0].method;
        if runs.iter().any(|r| r.method != method) {
            return Err(Error::validation(dir.display().to_string(), "runs from different methods"));
        }
        methods.push((method, runs));
    }
    let rows = compare(&methods)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &comparison_csv(&rows))?;
    Ok(rows)
}
