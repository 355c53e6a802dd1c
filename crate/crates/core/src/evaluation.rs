//! Accuracy, TPR gap, linear leakage probes, Tradeoff normalisation, Pareto
//! frontiers, and report assembly.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_embeddings, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::network::argmax_rows;
use crate::numkit::{self, AdamState, Matrix, Vector};
use crate::par;
use crate::rng::{stream_rng, Stream};
use crate::trainers::TrainedModel;

/// Training budget for the hinge-loss leakage probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the `½‖w‖²` margin penalty.
    pub margin_penalty: f64,
    /// Fraction of the training representations held out for early stopping.
    pub holdout: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: 3,
            learning_rate: 0.01,
            batch_size: 256,
            margin_penalty: 1e-4,
            holdout: 0.1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::validation("patience", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if !(self.margin_penalty >= 0.0) {
            return Err(Error::validation("margin_penalty", "must be non-negative"));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::validation("holdout", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Linear separator `sign(w·x + b)` over raw (unstandardised) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vector,
    pub bias: f64,
}

impl ProbeModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        numkit::dot(&self.weights, x) + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.score(x) > 0.0)
    }
}

fn column_stats(x: &Matrix) -> (Vector, Vector) {
    let n = x.rows() as f64;
    let mean: Vector = x.column_sums().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for ((v, xi), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *v += (xi - m) * (xi - m);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(x: &Matrix, mean: &[f64], std: &[f64]) -> Matrix {
    let mut z = x.clone();
    for i in 0..z.rows() {
        for ((v, m), s) in z.row_mut(i).iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    z
}

fn accuracy_on(w: &[f64], b: f64, x: &Matrix, targets: &[u8], idx: &[usize]) -> f64 {
    let correct = idx
        .iter()
        .filter(|&&i| u8::from(numkit::dot(w, x.row(i)) + b > 0.0) == targets[i])
        .count();
    correct as f64 / idx.len() as f64
}

/// Fit a linear probe for a binary target with hinge loss and Adam.
///
/// Features are standardised for optimisation and the scaling is folded back
/// into the returned weights. A `holdout` fraction of the rows drives early
/// stopping; the best holdout snapshot is returned.
pub fn train_probe(reps: &Matrix, targets: &[u8], cfg: &ProbeConfig, seed: u64) -> Result<ProbeModel> {
    cfg.validate()?;
    if targets.len() != reps.rows() {
        return Err(Error::Dimension {
            context: "train_probe",
            expected: reps.rows(),
            found: targets.len(),
        });
    }
    let ones = targets.iter().filter(|&&t| t == 1).count();
    if ones == 0 || ones == targets.len() || targets.iter().any(|&t| t > 1) {
        return Err(Error::Contract(
            "probe training needs both attribute values present".into(),
        ));
    }
    let (mean, std) = column_stats(reps);
    let x = standardize(reps, &mean, &std);
    let d = x.cols();

    let mut rng = stream_rng(seed, Stream::Probe, 0, 0);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((x.rows() as f64 * cfg.holdout).round() as usize).clamp(1, x.rows() - 1);
    let (hold, fit) = order.split_at(n_hold);
    let mut fit = fit.to_vec();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut opt_w = AdamState::new(d, cfg.learning_rate);
    let mut opt_b = AdamState::new(1, cfg.learning_rate);
    let mut best = (accuracy_on(&w, b, &x, targets, hold), w.clone(), b);
    let mut stale = 0;
    let mut gw = vec![0.0; d];

    for _ in 0..cfg.max_epochs {
        fit.shuffle(&mut rng);
        for chunk in fit.chunks(cfg.batch_size) {
            gw.iter_mut().zip(&w).for_each(|(g, wi)| *g = cfg.margin_penalty * wi);
            let mut gb = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = if targets[i] == 1 { 1.0 } else { -1.0 };
                let xi = x.row(i);
                if s * (numkit::dot(&w, xi) + b) < 1.0 {
                    for (g, xk) in gw.iter_mut().zip(xi) {
                        *g -= scale * s * xk;
                    }
                    gb -= scale * s;
                }
            }
            opt_w.update(&mut w, &gw)?;
            let mut bb = [b];
            opt_b.update(&mut bb, &[gb])?;
            b = bb[0];
        }
        if !(w.iter().all(|v| v.is_finite()) && b.is_finite()) {
            return Err(Error::Contract("probe weights became non-finite".into()));
        }
        let acc = accuracy_on(&w, b, &x, targets, hold);
        if acc > best.0 {
            best = (acc, w.clone(), b);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (_, w, b) = best;
    let weights: Vector = w.iter().zip(&std).map(|(wi, s)| wi / s).collect();
    let bias = b - weights.iter().zip(&mean).map(|(wi, m)| wi * m).sum::<f64>();
    Ok(ProbeModel { weights, bias })
}

/// Fraction of rows whose attribute the probe recovers.
pub fn probe_accuracy(probe: &ProbeModel, reps: &Matrix, targets: &[u8]) -> Result<f64> {
    if reps.cols() != probe.weights.len() {
        return Err(Error::Dimension {
            context: "probe_accuracy",
            expected: probe.weights.len(),
            found: reps.cols(),
        });
    }
    if targets.len() != reps.rows() || targets.is_empty() {
        return Err(Error::Dimension {
            context: "probe_accuracy",
            expected: reps.rows(),
            found: targets.len(),
        });
    }
    let correct = (0..reps.rows())
        .filter(|&i| probe.predict(reps.row(i)) == targets[i])
        .count();
    Ok(correct as f64 / reps.rows() as f64)
}

/// Train a probe on `train` and report its accuracy on `eval`.
pub fn leakage(
    train: &Matrix,
    train_protected: &[u8],
    eval: &Matrix,
    eval_protected: &[u8],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let probe = train_probe(train, train_protected, cfg, seed)?;
    probe_accuracy(&probe, eval, eval_protected)
}

pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Dimension {
            context: "accuracy",
            expected: gold.len(),
            found: predictions.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapBreakdown {
    /// Root mean square of the per-class TPR gaps over defined classes.
    pub gap: f64,
    /// `|TPR_{a,y} − TPR_{¬a,y}|` per class; `None` where a cell is empty.
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Per-class true-positive-rate gap between the two attribute groups and its
/// root mean square.
pub fn compute_gap(predictions: &[usize], gold: &[usize], protected: &[u8], num_classes: usize) -> Result<GapBreakdown> {
    if predictions.len() != gold.len() || protected.len() != gold.len() {
        return Err(Error::Dimension {
            context: "compute_gap",
            expected: gold.len(),
            found: predictions.len().min(protected.len()),
        });
    }
    // [class][attribute] -> (hits, total)
    let mut cells = vec![[(0usize, 0usize); 2]; num_classes];
    for ((&p, &y), &a) in predictions.iter().zip(gold).zip(protected) {
        if y >= num_classes || a > 1 {
            return Err(Error::validation(
                "compute_gap",
                format!("label {y} / attribute {a} out of range"),
            ));
        }
        let c = &mut cells[y][a as usize];
        c.1 += 1;
        if p == y {
            c.0 += 1;
        }
    }
    let mut warnings = Vec::new();
    let per_class: Vec<Option<f64>> = cells
        .iter()
        .enumerate()
        .map(|(y, [g0, g1])| {
            if g0.1 == 0 || g1.1 == 0 {
                warnings.push(format!(
                    "class {y}: empty (class, attribute) cell; excluded from GAP"
                ));
                return None;
            }
            let tpr0 = g0.0 as f64 / g0.1 as f64;
            let tpr1 = g1.0 as f64 / g1.1 as f64;
            Some((tpr1 - tpr0).abs())
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Contract(
            "no class has instances from both attribute groups".into(),
        ));
    }
    let gap = (defined.iter().map(|g| g * g).sum::<f64>() / defined.len() as f64).sqrt();
    Ok(GapBreakdown {
        gap,
        per_class,
        warnings,
    })
}

/// One model's row in a comparison table. Rates are in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub gap: f64,
    pub leakage_h: f64,
    pub leakage_yhat: f64,
    /// Filled by [`tradeoff_scores`] relative to a set of reports.
    pub tradeoff: Option<f64>,
    pub time_seconds: f64,
    pub time_ratio: Option<f64>,
    pub gap_per_class: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FairnessReport {
    pub const CSV_HEADER: &'static str = "accuracy,gap,leakage_h,leakage_yhat,tradeoff,time";

    /// Table-ordered CSV row; empty fields for unset Tradeoff or ratio.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.accuracy,
            self.gap,
            self.leakage_h,
            self.leakage_yhat,
            opt(self.tradeoff),
            opt(self.time_ratio)
        )
    }
}

/// `½N(acc) + ¼N(1−GAP) + ⅛N(1−Leakage@h) + ⅛N(1−Leakage@ŷ)` where `N`
/// divides by the maximum over the report set.
pub fn tradeoff_scores(reports: &mut [FairnessReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Empty("tradeoff_scores"));
    }
    type Getter = fn(&FairnessReport) -> f64;
    let parts: [(&'static str, f64, Getter); 4] = [
        ("accuracy", 0.5, |r| r.accuracy),
        ("1 - gap", 0.25, |r| 1.0 - r.gap),
        ("1 - leakage_h", 0.125, |r| 1.0 - r.leakage_h),
        ("1 - leakage_yhat", 0.125, |r| 1.0 - r.leakage_yhat),
    ];
    let mut maxima = [0.0; 4];
    for (k, (name, _, get)) in parts.iter().enumerate() {
        let m = reports.iter().map(get).fold(f64::NEG_INFINITY, f64::max);
        if !(m > 0.0) {
            return Err(Error::DegenerateSet(name));
        }
        maxima[k] = m;
    }
    for r in reports.iter_mut() {
        let score = parts
            .iter()
            .zip(maxima)
            .map(|((_, weight, get), m)| weight * get(r) / m)
            .sum();
        r.tradeoff = Some(score);
    }
    Ok(())
}

/// Indices (in input order) of the points not strictly dominated under
/// higher accuracy and lower leakage. A point `(a₂, b₂)` is dominated when
/// some `(a₁, b₁)` has `a₁ > a₂` and `b₁ < b₂`.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| points[j].0.total_cmp(&points[i].0));
    let mut keep = vec![false; points.len()];
    // lowest leakage among points with strictly higher accuracy
    let mut best_above = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let acc = points[order[k]].0;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == acc {
            end += 1;
        }
        let mut group_min = f64::INFINITY;
        for &i in &order[k..end] {
            keep[i] = !(best_above < points[i].1);
            group_min = group_min.min(points[i].1);
        }
        best_above = best_above.min(group_min);
        k = end;
    }
    (0..points.len()).filter(|&i| keep[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Dev,
    Test,
}

/// Compute every per-model metric on the chosen split.
///
/// Leakage probes are fit on train-split outputs only and scored on the
/// evaluated split. `baseline_time` is the CE training time used for the
/// ratio, if known.
pub fn evaluate(
    model: &TrainedModel,
    data: &SplitDataset,
    split: EvalSplit,
    baseline_time: Option<f64>,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<FairnessReport> {
    let target = match split {
        EvalSplit::Dev => &data.dev,
        EvalSplit::Test => &data.test,
    };
    if target.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let train_h = model.representations(&data.train.x)?;
    let eval_h = model.representations(&target.x)?;
    let train_logits = model.logits_from_representations(&train_h)?;
    let eval_logits = model.logits_from_representations(&eval_h)?;

    let predictions = argmax_rows(&eval_logits);
    let acc = accuracy(&predictions, &target.labels)?;
    let gap = compute_gap(&predictions, &target.labels, &target.protected, data.num_classes)?;

    let (leak_h, leak_y) = par::join(
        || {
            leakage(
                &train_h,
                &data.train.protected,
                &eval_h,
                &target.protected,
                probe,
                crate::rng::derive_seed(seed, Stream::Probe, 1, 0),
            )
        },
        || {
            leakage(
                &train_logits,
                &data.train.protected,
                &eval_logits,
                &target.protected,
                probe,
                crate::rng::derive_seed(seed, Stream::Probe, 2, 0),
            )
        },
    );
    Ok(FairnessReport {
        accuracy: acc,
        gap: gap.gap,
        leakage_h: leak_h?,
        leakage_yhat: leak_y?,
        tradeoff: None,
        time_seconds: model.train_seconds,
        time_ratio: baseline_time.map(|b| model.train_seconds / b),
        gap_per_class: gap.per_class,
        warnings: gap.warnings,
    })
}

/// Write `reps_<split>.csv` files holding the model's representations in the
/// embedding CSV format.
pub fn export_representations(model: &TrainedModel, data: &SplitDataset, dir: &Path) -> Result<()> {
    for (name, split) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        let h = model.representations(&split.x)?;
        let dim = h.cols();
        let reps: Split = split.with_features(h)?;
        write_embeddings(&dir.join(format!("reps_{name}.csv")), dim, data.num_classes, &reps)?;
    }
    Ok(())
}
