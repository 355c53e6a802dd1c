//! Synthetic biased embeddings, the embedding CSV format, and seeded batching.
//!
//! Instances are stored column-wise per split (one embedding matrix plus label
//! and attribute vectors) since every consumer works on whole batches.
//! [`LabeledInstance`] is the row view used for construction and I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub embedding: Vec<f64>,
    pub label: usize,
    /// Binary protected attribute, 0 or 1.
    pub protected: u8,
}

/// One split of a dataset in columnar form.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub protected: Vec<u8>,
}

impl Split {
    pub fn from_instances(instances: &[LabeledInstance]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = instances.iter().map(|i| i.embedding.clone()).collect();
        Ok(Self {
            x: Matrix::from_rows(&rows)?,
            labels: instances.iter().map(|i| i.label).collect(),
            protected: instances.iter().map(|i| i.protected).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn instance(&self, i: usize) -> LabeledInstance {
        LabeledInstance {
            embedding: self.x.row(i).to_vec(),
            label: self.labels[i],
            protected: self.protected[i],
        }
    }

    pub fn instances(&self) -> Vec<LabeledInstance> {
        (0..self.len()).map(|i| self.instance(i)).collect()
    }

    pub fn protected_as_groups(&self) -> Vec<usize> {
        self.protected.iter().map(|&a| a as usize).collect()
    }

    /// The same labels with a different representation matrix, e.g. encoder
    /// outputs for the leakage probes or for export.
    pub fn with_features(&self, x: Matrix) -> Result<Self> {
        if x.rows() != self.len() {
            return Err(Error::Dimension {
                context: "Split::with_features",
                expected: self.len(),
                found: x.rows(),
            });
        }
        Ok(Self {
            x,
            labels: self.labels.clone(),
            protected: self.protected.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Split,
    pub dev: Split,
    pub test: Split,
    pub dim: usize,
    pub num_classes: usize,
}

impl SplitDataset {
    pub fn new(train: Split, dev: Split, test: Split, num_classes: usize) -> Result<Self> {
        let dim = train.dim();
        for (name, s) in [("train", &train), ("dev", &dev), ("test", &test)] {
            if s.is_empty() {
                return Err(Error::validation(name, "split is empty"));
            }
            if s.dim() != dim {
                return Err(Error::Dimension {
                    context: "SplitDataset::new",
                    expected: dim,
                    found: s.dim(),
                });
            }
            validate_labels(name, s, num_classes)?;
        }
        Ok(Self {
            train,
            dev,
            test,
            dim,
            num_classes,
        })
    }
}

fn validate_labels(name: &str, s: &Split, num_classes: usize) -> Result<()> {
    if let Some(i) = s.labels.iter().position(|&y| y >= num_classes) {
        return Err(Error::validation(
            format!("{name}[{i}].label"),
            format!("{} out of range for {num_classes} classes", s.labels[i]),
        ));
    }
    if let Some(i) = s.protected.iter().position(|&a| a > 1) {
        return Err(Error::validation(
            format!("{name}[{i}].protected"),
            "protected attribute must be 0 or 1",
        ));
    }
    Ok(())
}

/// How the dev and test splits are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Uniform over (class, attribute) cells.
    #[default]
    Balanced,
    /// Same joint table as train.
    Skewed,
}

/// Generator parameters for a biased synthetic embedding dataset.
///
/// Instance `(y, a)` is drawn from `N(μ_y + s_a · e_Y, σ² I)` where
/// `μ_y = class_separation · e_y`, `s_a = ±protected_shift`, and `e_k` is the
/// k-th coordinate axis, so the protected direction is orthogonal to every
/// class mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkewSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// `joint[y][a]`: training proportion of cell (y, a).
    pub joint: Vec<[f64; 2]>,
    pub class_separation: f64,
    pub protected_shift: f64,
    pub noise: f64,
    pub eval_mode: EvalMode,
}

impl Default for SkewSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            dim: 16,
            // class 0 pairs with attribute 1 and class 1 with attribute 0,
            // 40/10/10/40 skew
            joint: vec![[0.1, 0.4], [0.4, 0.1]],
            class_separation: 1.5,
            protected_shift: 1.5,
            noise: 1.0,
            eval_mode: EvalMode::Balanced,
        }
    }
}

impl SkewSpec {
    /// A balanced table over `num_classes` classes with the given skew: each
    /// class puts `agree` of its mass on the attribute value `y % 2`.
    pub fn with_classes(num_classes: usize, agree: f64) -> Self {
        let per = 1.0 / num_classes as f64;
        let joint = (0..num_classes)
            .map(|y| {
                if y % 2 == 0 {
                    [per * agree, per * (1.0 - agree)]
                } else {
                    [per * (1.0 - agree), per * agree]
                }
            })
            .collect();
        Self {
            num_classes,
            dim: (num_classes + 1).max(16),
            joint,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes", "must be at least 2"));
        }
        if self.joint.len() != self.num_classes {
            return Err(Error::validation(
                "joint",
                format!("expected {} rows, found {}", self.num_classes, self.joint.len()),
            ));
        }
        if self.dim < self.num_classes + 1 {
            return Err(Error::validation(
                "dim",
                "must be at least num_classes + 1 (one axis per class plus the protected axis)",
            ));
        }
        let mut total = 0.0;
        for (y, row) in self.joint.iter().enumerate() {
            for (a, &p) in row.iter().enumerate() {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(Error::validation(
                        format!("joint[{y}][{a}]"),
                        "proportions must be finite and non-negative",
                    ));
                }
                total += p;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(
                "joint",
                format!("proportions sum to {total}, expected 1"),
            ));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("protected_shift", self.protected_shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(name, "must be finite and non-negative"));
            }
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return Err(Error::validation("noise", "must be positive"));
        }
        Ok(())
    }

    fn cell_weights(&self, balanced: bool) -> Vec<f64> {
        if balanced {
            vec![1.0; self.num_classes * 2]
        } else {
            self.joint.iter().flat_map(|r| r.iter().copied()).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 10_000,
            dev: 2_000,
            test: 2_000,
        }
    }
}

/// Draw train/dev/test splits. A pure function of `(spec, sizes, seed)`.
pub fn generate_synthetic(spec: &SkewSpec, sizes: SplitSizes, seed: u64) -> Result<SplitDataset> {
    spec.validate()?;
    for (name, n) in [("train", sizes.train), ("dev", sizes.dev), ("test", sizes.test)] {
        if n == 0 {
            return Err(Error::validation(format!("sizes.{name}"), "must be positive"));
        }
    }
    let balanced_eval = spec.eval_mode == EvalMode::Balanced;
    let train = sample_split(spec, sizes.train, false, seed, 0)?;
    let dev = sample_split(spec, sizes.dev, balanced_eval, seed, 1)?;
    let test = sample_split(spec, sizes.test, balanced_eval, seed, 2)?;
    SplitDataset::new(train, dev, test, spec.num_classes)
}

fn sample_split(spec: &SkewSpec, n: usize, balanced: bool, seed: u64, which: u64) -> Result<Split> {
    let mut rng = stream_rng(seed, Stream::Data, which, 0);
    let cells = WeightedIndex::new(spec.cell_weights(balanced))
        .map_err(|e| Error::validation("joint", e.to_string()))?;
    let d = spec.dim;
    let protected_axis = spec.num_classes;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut protected = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = cells.sample(&mut rng);
        let (y, a) = (cell / 2, (cell % 2) as u8);
        let start = data.len();
        for _ in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(spec.noise * z);
        }
        data[start + y] += spec.class_separation;
        data[start + protected_axis] += if a == 1 {
            spec.protected_shift
        } else {
            -spec.protected_shift
        };
        labels.push(y);
        protected.push(a);
    }
    Ok(Split {
        x: Matrix::new(n, d, data)?,
        labels,
        protected,
    })
}

/// Contents of one embedding CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub num_classes: usize,
    pub instances: Vec<LabeledInstance>,
}

/// Render instances in the embedding CSV format: a `d,Y` line, then
/// `label,protected,v1,...,vd` per instance. Floats use the shortest
/// representation that parses back to the same bits.
pub fn format_embeddings(dim: usize, num_classes: usize, split: &Split) -> String {
    let mut out = String::with_capacity(split.len() * (dim * 20 + 8) + 16);
    let _ = writeln!(out, "{dim},{num_classes}");
    for i in 0..split.len() {
        let _ = write!(out, "{},{}", split.labels[i], split.protected[i]);
        for v in split.x.row(i) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(path: &Path, dim: usize, num_classes: usize, split: &Split) -> Result<()> {
    fs::write(path, format_embeddings(dim, num_classes, split)).map_err(|e| Error::io(path, e))
}

pub fn parse_embeddings(text: &str, origin: &str) -> Result<EmbeddingFile> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing `d,Y` header".into()))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() != 2 {
        return Err(err(1, format!("header must be `d,Y`, found `{header}`")));
    }
    let dim: usize = fields[0]
        .parse()
        .map_err(|_| err(1, format!("invalid dimension `{}`", fields[0])))?;
    let num_classes: usize = fields[1]
        .parse()
        .map_err(|_| err(1, format!("invalid class count `{}`", fields[1])))?;
    if dim == 0 {
        return Err(err(1, "dimension must be positive".into()));
    }
    if num_classes < 2 {
        return Err(err(1, "class count must be at least 2".into()));
    }

    let mut instances = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            return Err(err(lineno, "empty row".into()));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(err(
                lineno,
                format!("expected {} fields (label, protected, {dim} values), found {}", dim + 2, fields.len()),
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("invalid label `{}`", fields[0])))?;
        if label >= num_classes {
            return Err(err(lineno, format!("label {label} out of range for {num_classes} classes")));
        }
        let protected = match fields[1] {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(err(lineno, format!("protected attribute must be 0 or 1, found `{other}`"))),
        };
        let mut embedding = Vec::with_capacity(dim);
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| err(lineno, format!("invalid value `{f}`")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value `{f}`")));
            }
            embedding.push(v);
        }
        instances.push(LabeledInstance {
            embedding,
            label,
            protected,
        });
    }
    Ok(EmbeddingFile {
        dim,
        num_classes,
        instances,
    })
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, &path.display().to_string())
}

/// Load three embedding files as train/dev/test.
pub fn load_split(train: &Path, dev: &Path, test: &Path) -> Result<SplitDataset> {
    let files = [load_embeddings(train)?, load_embeddings(dev)?, load_embeddings(test)?];
    let (dim, num_classes) = (files[0].dim, files[0].num_classes);
    for (f, path) in files.iter().zip([train, dev, test]) {
        if f.dim != dim || f.num_classes != num_classes {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!(
                    "header {},{} disagrees with train header {dim},{num_classes}",
                    f.dim, f.num_classes
                ),
            });
        }
        if f.instances.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 2,
                message: "file has no instances".into(),
            });
        }
    }
    let [tr, dv, te] = files;
    SplitDataset::new(
        Split::from_instances(&tr.instances)?,
        Split::from_instances(&dv.instances)?,
        Split::from_instances(&te.instances)?,
        num_classes,
    )
}

/// Seeded shuffle of `0..len` for `(seed, epoch)`, chunked into batches.
/// A trailing batch of one instance is dropped since it has no pairs.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::validation("batch_size", "must be at least 2"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(seed, Stream::Batches, epoch as u64, 0);
    idx.shuffle(&mut rng);
    Ok(idx
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
