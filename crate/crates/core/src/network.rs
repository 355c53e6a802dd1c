//! Two-layer encoder, softmax classifier head, and hand-derived reverse-mode
//! gradients of the composite objective.
//!
//! The encoder computes `h = W₂·σ(W₁e + b₁) + b₂`; the nonlinearity sits
//! between the two fully-connected layers and `h` itself is linear in the
//! hidden activations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::numkit::{self, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::new(rows, cols, data).expect("positive shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// hidden × d
    pub w1: Matrix,
    pub b1: Vector,
    /// hidden × hidden
    pub w2: Matrix,
    pub b2: Vector,
    pub activation: Activation,
}

impl EncoderParams {
    /// Fan-in scaled uniform initialisation (He for ReLU, Glorot for tanh),
    /// zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = |fan_in: usize, fan_out: usize| match activation {
            Activation::Relu => (6.0 / fan_in as f64).sqrt(),
            Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        Self {
            w1: uniform_matrix(hidden, input_dim, bound(input_dim, hidden), rng),
            b1: vec![0.0; hidden],
            w2: uniform_matrix(hidden, hidden, bound(hidden, hidden), rng),
            b2: vec![0.0; hidden],
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// classes × hidden
    pub w: Matrix,
    pub b: Vector,
}

impl ClassifierHead {
    pub fn init<R: Rng>(hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w: uniform_matrix(num_classes, hidden, bound, rng),
            b: vec![0.0; num_classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [self.w.as_slice(), &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.as_mut_slice(), &mut self.b]
    }
}

/// Intermediate values of a batched encoder pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: Matrix,
    pub act: Matrix,
    pub h: Matrix,
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut z = numkit::matmul_nt(x, w)?;
    z.add_row_vector(b);
    Ok(z)
}

pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<ForwardCache> {
    if x.cols() != params.input_dim() {
        return Err(Error::Dimension {
            context: "encode",
            expected: params.input_dim(),
            found: x.cols(),
        });
    }
    let pre = affine(x, &params.w1, &params.b1)?;
    let mut act = pre.clone();
    act.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = params.activation.apply(*v));
    let h = affine(&act, &params.w2, &params.b2)?;
    Ok(ForwardCache { pre, act, h })
}

/// Encode every row of `x`.
pub fn encode_batch(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    Ok(forward(params, x)?.h)
}

pub fn encode(params: &EncoderParams, e: &[f64]) -> Result<Vector> {
    let x = Matrix::new(1, e.len(), e.to_vec())?;
    Ok(encode_batch(params, &x)?.into_vec())
}

fn check_head(head: &ClassifierHead, h_dim: usize) -> Result<()> {
    if h_dim != head.w.cols() {
        return Err(Error::Dimension {
            context: "classify",
            expected: head.w.cols(),
            found: h_dim,
        });
    }
    Ok(())
}

pub fn logits_batch(head: &ClassifierHead, h: &Matrix) -> Result<Matrix> {
    check_head(head, h.cols())?;
    affine(h, &head.w, &head.b)
}

pub fn classify_batch(head: &ClassifierHead, h: &Matrix) -> Result<Matrix> {
    let mut p = logits_batch(head, h)?;
    for i in 0..p.rows() {
        numkit::softmax_in_place(p.row_mut(i));
    }
    Ok(p)
}

/// Softmax class probabilities for one representation.
pub fn classify(head: &ClassifierHead, h: &[f64]) -> Result<Vector> {
    check_head(head, h.len())?;
    let x = Matrix::new(1, h.len(), h.to_vec())?;
    Ok(classify_batch(head, &x)?.into_vec())
}

/// Row-wise argmax.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Which terms of `α·Lce + β·(Lscl − Lfcl)` participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+scl")]
    CeScl,
    #[serde(rename = "ce-fcl")]
    CeFcl,
    #[serde(rename = "scl-fcl")]
    SclFcl,
    #[serde(rename = "full")]
    Full,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Ce,
        LossMode::CeScl,
        LossMode::CeFcl,
        LossMode::SclFcl,
        LossMode::Full,
    ];

    fn uses_ce(self) -> bool {
        !matches!(self, LossMode::SclFcl)
    }

    fn uses_scl(self) -> bool {
        matches!(self, LossMode::CeScl | LossMode::SclFcl | LossMode::Full)
    }

    fn uses_fcl(self) -> bool {
        matches!(self, LossMode::CeFcl | LossMode::SclFcl | LossMode::Full)
    }
}

/// A mini-batch gathered from a split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub protected: Vec<usize>,
}

impl Batch {
    pub fn gather(split: &Split, idx: &[usize]) -> Self {
        Self {
            x: split.x.select_rows(idx),
            labels: idx.iter().map(|&i| split.labels[i]).collect(),
            protected: idx.iter().map(|&i| split.protected[i] as usize).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Individual loss terms and the weighted total. Terms that do not
/// participate under the chosen mode (or have zero weight) are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub scl: f64,
    pub fcl: f64,
    pub total: f64,
}

impl LossTerms {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("ce", self.ce), ("scl", self.scl), ("fcl", self.fcl), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub loss: f64,
    pub terms: LossTerms,
}

/// Loss terms and `∂L/∂h`, `∂L/∂head` from an encoder output.
pub(crate) fn objective_at_h(
    head: &ClassifierHead,
    h: &Matrix,
    batch: &Batch,
    cfg: &LossConfig,
    mode: LossMode,
    want_grad: bool,
) -> Result<(LossTerms, Matrix, ClassifierHead)> {
    let mut terms = LossTerms::default();
    let mut dh = Matrix::zeros(h.rows(), h.cols());
    let mut dhead = head.zeros_like();
    let contrastive = cfg.beta != 0.0;

    if mode.uses_ce() {
        let logits = logits_batch(head, h)?;
        let (ce, mut dlogits) = losses::cross_entropy_with_grad(&logits, &batch.labels)?;
        terms.ce = ce;
        terms.total += cfg.alpha * ce;
        if want_grad {
            dlogits.as_mut_slice().iter_mut().for_each(|g| *g *= cfg.alpha);
            dhead.w = numkit::matmul_tn(&dlogits, h)?;
            dhead.b = dlogits.column_sums();
            dh = numkit::matmul_nn(&dlogits, &head.w)?;
        }
    }
    let mut add_contrastive = |groups: &[usize], sign: f64| -> Result<f64> {
        if want_grad {
            let (v, g) = losses::group_contrastive_with_grad(h, groups, cfg.tau)?;
            let w = sign * cfg.beta;
            for (d, gi) in dh.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *d += w * gi;
            }
            Ok(v)
        } else {
            losses::group_contrastive(h, groups, cfg.tau)
        }
    };
    if contrastive && mode.uses_scl() {
        terms.scl = add_contrastive(&batch.labels, 1.0)?;
        terms.total += cfg.beta * terms.scl;
    }
    if contrastive && mode.uses_fcl() {
        terms.fcl = add_contrastive(&batch.protected, -1.0)?;
        terms.total -= cfg.beta * terms.fcl;
    }
    Ok((terms, dh, dhead))
}

/// Gradients of the encoder parameters given `∂L/∂h`.
pub fn encoder_backward(params: &EncoderParams, cache: &ForwardCache, x: &Matrix, dh: &Matrix) -> Result<EncoderParams> {
    let w2 = numkit::matmul_tn(dh, &cache.act)?;
    let b2 = dh.column_sums();
    let mut dpre = numkit::matmul_nn(dh, &params.w2)?;
    for ((d, &z), &a) in dpre
        .as_mut_slice()
        .iter_mut()
        .zip(cache.pre.as_slice())
        .zip(cache.act.as_slice())
    {
        *d *= params.activation.derivative(z, a);
    }
    let w1 = numkit::matmul_tn(&dpre, x)?;
    let b1 = dpre.column_sums();
    Ok(EncoderParams {
        w1,
        b1,
        w2,
        b2,
        activation: params.activation,
    })
}

/// Forward-only loss terms for a batch.
pub fn loss_terms(
    params: &EncoderParams,
    head: &ClassifierHead,
    batch: &Batch,
    cfg: &LossConfig,
    mode: LossMode,
) -> Result<LossTerms> {
    let cache = forward(params, &batch.x)?;
    Ok(objective_at_h(head, &cache.h, batch, cfg, mode, false)?.0)
}

/// Exact gradients of the mode-selected objective w.r.t. every parameter.
pub fn backward(
    params: &EncoderParams,
    head: &ClassifierHead,
    batch: &Batch,
    cfg: &LossConfig,
    mode: LossMode,
) -> Result<GradientBundle> {
    let cache = forward(params, &batch.x)?;
    let (terms, dh, dhead) = objective_at_h(head, &cache.h, batch, cfg, mode, true)?;
    let encoder = encoder_backward(params, &cache, &batch.x, &dh)?;
    Ok(GradientBundle {
        encoder,
        head: dhead,
        loss: terms.total,
        terms,
    })
}

const CHECKPOINT_MAGIC: &str = "faircon-checkpoint v1";

/// Everything needed to reproduce a trained model's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub projector: Option<Matrix>,
}

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
    let _ = writeln!(out, "tensor {name} {rows} {cols}");
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        first = false;
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

impl Checkpoint {
    /// Text dump: a version line, the activation, then each tensor as a
    /// `tensor <name> <rows> <cols>` header followed by one line of values.
    /// Values are written in shortest round-trip form, so loading is
    /// bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "activation {}", self.encoder.activation.name());
        let e = &self.encoder;
        write_tensor(&mut out, "encoder.w1", e.w1.rows(), e.w1.cols(), e.w1.as_slice());
        write_tensor(&mut out, "encoder.b1", 1, e.b1.len(), &e.b1);
        write_tensor(&mut out, "encoder.w2", e.w2.rows(), e.w2.cols(), e.w2.as_slice());
        write_tensor(&mut out, "encoder.b2", 1, e.b2.len(), &e.b2);
        let h = &self.head;
        write_tensor(&mut out, "head.w", h.w.rows(), h.w.cols(), h.w.as_slice());
        write_tensor(&mut out, "head.b", 1, h.b.len(), &h.b);
        if let Some(p) = &self.projector {
            write_tensor(&mut out, "projector", p.rows(), p.cols(), p.as_slice());
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&CHECKPOINT_MAGIC) {
            return Err(err(1, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let activation = match lines.get(1).map(|l| l.trim()) {
            Some("activation relu") => Activation::Relu,
            Some("activation tanh") => Activation::Tanh,
            other => return Err(err(2, format!("bad activation line {other:?}"))),
        };
        let mut tensors: Vec<(String, Matrix)> = Vec::new();
        let mut i = 2;
        while i < lines.len() {
            let header: Vec<&str> = lines[i].split_whitespace().collect();
            if header.len() != 4 || header[0] != "tensor" {
                return Err(err(i + 1, format!("expected tensor header, found `{}`", lines[i])));
            }
            let rows: usize = header[2].parse().map_err(|_| err(i + 1, "bad row count".into()))?;
            let cols: usize = header[3].parse().map_err(|_| err(i + 1, "bad column count".into()))?;
            let body = lines
                .get(i + 1)
                .ok_or_else(|| err(i + 2, "missing tensor values".into()))?;
            let values = body
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| err(i + 2, format!("bad value `{v}`"))))
                .collect::<Result<Vec<f64>>>()?;
            let m = Matrix::new(rows, cols, values).map_err(|e| err(i + 2, e.to_string()))?;
            tensors.push((header[1].to_string(), m));
            i += 2;
        }
        let mut take = |name: &str| -> Option<Matrix> {
            let pos = tensors.iter().position(|(n, _)| n == name)?;
            Some(tensors.remove(pos).1)
        };
        let missing = |name: &str| err(lines.len(), format!("missing tensor {name}"));
        let w1 = take("encoder.w1").ok_or_else(|| missing("encoder.w1"))?;
        let b1 = take("encoder.b1").ok_or_else(|| missing("encoder.b1"))?.into_vec();
        let w2 = take("encoder.w2").ok_or_else(|| missing("encoder.w2"))?;
        let b2 = take("encoder.b2").ok_or_else(|| missing("encoder.b2"))?.into_vec();
        let hw = take("head.w").ok_or_else(|| missing("head.w"))?;
        let hb = take("head.b").ok_or_else(|| missing("head.b"))?.into_vec();
        let projector = take("projector");
        let hidden = w1.rows();
        let consistent = b1.len() == hidden
            && w2.rows() == hidden
            && w2.cols() == hidden
            && b2.len() == hidden
            && hw.cols() == hidden
            && hb.len() == hw.rows()
            && projector.as_ref().is_none_or(|p| p.rows() == hidden && p.cols() == hidden);
        if !consistent {
            return Err(err(lines.len(), "tensor shapes are inconsistent".into()));
        }
        Ok(Self {
            encoder: EncoderParams {
                w1,
                b1,
                w2,
                b2,
                activation,
            },
            head: ClassifierHead { w: hw, b: hb },
            projector,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}
