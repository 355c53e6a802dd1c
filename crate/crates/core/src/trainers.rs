//! Training procedures: cross-entropy, the joint contrastive objective and
//! its ablations, the pipelined contrastive variant, adversarial debiasing
//! with a discriminator ensemble, iterative nullspace projection, and the
//! dev-set model selection rule.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_batches, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, FairnessReport, ProbeConfig};
use crate::losses::LossConfig;
use crate::network::{
    self, argmax_rows, encoder_backward, objective_at_h, Activation, Batch, ClassifierHead, EncoderParams,
    LossMode, LossTerms,
};
use crate::numkit::{self, AdamState, Matrix, Vector};
use crate::par;
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "inlp")]
    Inlp,
    #[serde(rename = "adv")]
    Adv,
    #[serde(rename = "con")]
    Con,
    #[serde(rename = "con_ft")]
    ConFt,
    #[serde(rename = "ce+scl")]
    CeScl,
    #[serde(rename = "ce-fcl", alias = "ce−fcl")]
    CeFcl,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ce,
        Method::Inlp,
        Method::Adv,
        Method::Con,
        Method::ConFt,
        Method::CeScl,
        Method::CeFcl,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Inlp => "inlp",
            Method::Adv => "adv",
            Method::Con => "con",
            Method::ConFt => "con_ft",
            Method::CeScl => "ce+scl",
            Method::CeFcl => "ce-fcl",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        let tag = tag.replace('−', "-");
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }

    /// Loss mode for the end-to-end methods.
    fn joint_mode(self) -> Option<LossMode> {
        match self {
            Method::Ce | Method::Adv | Method::Inlp => Some(LossMode::Ce),
            Method::Con => Some(LossMode::Full),
            Method::CeScl => Some(LossMode::CeScl),
            Method::CeFcl => Some(LossMode::CeFcl),
            Method::ConFt => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InlpConfig {
    pub iterations: usize,
    /// Stop once the probe's dev accuracy is within this of chance.
    pub chance_tolerance: f64,
}

impl Default for InlpConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            chance_tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub discriminators: usize,
    /// Gradient reversal scale.
    pub lambda: f64,
    /// Weight of the pairwise orthogonality penalty.
    pub orthogonality: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            discriminators: 3,
            lambda: 1.0,
            orthogonality: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub loss: LossConfig,
    pub hidden: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inlp: Option<InlpConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv: Option<AdvConfig>,
    /// Probe settings used by INLP's iterative discriminators.
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ce,
            loss: LossConfig::default(),
            hidden: 300,
            activation: Activation::Relu,
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            inlp: None,
            adv: None,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        let mut cfg = Self::default();
        cfg.set_method(method);
        cfg
    }

    /// Switch method, adding default method-specific settings and dropping
    /// ones that no longer apply.
    pub fn set_method(&mut self, method: Method) {
        self.method = method;
        if method == Method::Inlp {
            self.inlp.get_or_insert_with(InlpConfig::default);
        } else {
            self.inlp = None;
        }
        if method == Method::Adv {
            self.adv.get_or_insert_with(AdvConfig::default);
        } else {
            self.adv = None;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prefix = |e: Error, p: &str| match e {
            Error::Validation { field, message } => Error::Validation {
                field: format!("{p}.{field}"),
                message,
            },
            other => other,
        };
        self.loss.validate().map_err(|e| prefix(e, "loss"))?;
        self.probe.validate().map_err(|e| prefix(e, "probe"))?;
        if self.hidden == 0 {
            return Err(Error::validation("hidden", "must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size", "must be at least 2"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::validation("patience", "must be at least 1"));
        }
        match (self.method, &self.inlp) {
            (Method::Inlp, None) => return Err(Error::validation("inlp", "required for method inlp")),
            (m, Some(_)) if m != Method::Inlp => {
                return Err(Error::validation("inlp", format!("not allowed for method {m}")))
            }
            (_, Some(c)) if !(c.chance_tolerance >= 0.0) => {
                return Err(Error::validation("inlp.chance_tolerance", "must be non-negative"))
            }
            _ => {}
        }
        match (self.method, &self.adv) {
            (Method::Adv, None) => return Err(Error::validation("adv", "required for method adv")),
            (m, Some(_)) if m != Method::Adv => {
                return Err(Error::validation("adv", format!("not allowed for method {m}")))
            }
            (_, Some(c)) => {
                if c.discriminators == 0 {
                    return Err(Error::validation("adv.discriminators", "must be positive"));
                }
                if !(c.lambda >= 0.0) || !c.lambda.is_finite() {
                    return Err(Error::validation("adv.lambda", "must be finite and non-negative"));
                }
                if !(c.orthogonality >= 0.0) || !c.orthogonality.is_finite() {
                    return Err(Error::validation("adv.orthogonality", "must be finite and non-negative"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Cumulative nullspace projection applied to encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub matrix: Matrix,
    pub iterations: usize,
    /// Rank after each applied iteration.
    pub rank_history: Vec<usize>,
}

impl Projector {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Matrix::identity(dim),
            iterations: 0,
            rank_history: Vec::new(),
        }
    }

    /// Rank of an orthogonal projector, read off its trace.
    pub fn rank(&self) -> usize {
        self.matrix.trace().round() as usize
    }

    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        // P is symmetric, so H·Pᵀ = H·P
        numkit::matmul_nt(h, &self.matrix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub train: LossTerms,
    /// Dev accuracy, or the dev contrastive objective for stage 1 of the
    /// pipelined method.
    pub dev_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversary_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub method: Method,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub projector: Option<Projector>,
    pub train_seconds: f64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainedModel {
    /// Encoder outputs, projected when a projector is attached.
    pub fn representations(&self, x: &Matrix) -> Result<Matrix> {
        let h = network::encode_batch(&self.encoder, x)?;
        match &self.projector {
            Some(p) => p.apply(&h),
            None => Ok(h),
        }
    }

    pub fn logits_from_representations(&self, h: &Matrix) -> Result<Matrix> {
        network::logits_batch(&self.head, h)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let h = self.representations(x)?;
        Ok(argmax_rows(&self.logits_from_representations(&h)?))
    }

    pub fn checkpoint(&self) -> network::Checkpoint {
        network::Checkpoint {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            projector: self.projector.as_ref().map(|p| p.matrix.clone()),
        }
    }

    pub fn from_checkpoint(method: Method, ck: network::Checkpoint) -> Self {
        let projector = ck.projector.map(|matrix| Projector {
            matrix,
            iterations: 0,
            rank_history: Vec::new(),
        });
        Self {
            method,
            encoder: ck.encoder,
            head: ck.head,
            projector,
            train_seconds: 0.0,
            history: Vec::new(),
            best_epoch: 0,
        }
    }
}

fn elapsed_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64().max(1e-9)
}

/// One Adam state per parameter tensor, in a fixed order.
struct TensorOptimizer {
    states: Vec<AdamState>,
}

impl TensorOptimizer {
    fn new(tensors: &[&[f64]], lr: f64) -> Self {
        Self {
            states: tensors.iter().map(|t| AdamState::new(t.len(), lr)).collect(),
        }
    }

    fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        for ((state, p), g) in self.states.iter_mut().zip(params).zip(grads) {
            state.update(p, g)?;
        }
        Ok(())
    }
}

fn dev_accuracy(encoder: &EncoderParams, head: &ClassifierHead, dev: &Split) -> Result<f64> {
    let h = network::encode_batch(encoder, &dev.x)?;
    let pred = argmax_rows(&network::logits_batch(head, &h)?);
    evaluation::accuracy(&pred, &dev.labels)
}

fn mean_terms(sum: LossTerms, n: usize) -> LossTerms {
    let k = n.max(1) as f64;
    LossTerms {
        ce: sum.ce / k,
        scl: sum.scl / k,
        fcl: sum.fcl / k,
        total: sum.total / k,
    }
}

fn accumulate(acc: &mut LossTerms, t: &LossTerms) {
    acc.ce += t.ce;
    acc.scl += t.scl;
    acc.fcl += t.fcl;
    acc.total += t.total;
}

/// A single binary discriminator: one ReLU hidden layer and a logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Vector,
    pub b2: f64,
}

impl Discriminator {
    fn init<R: rand::Rng>(hidden: usize, rng: &mut R) -> Self {
        let layer = EncoderParams::init(hidden, hidden, Activation::Relu, rng);
        let bound = 1.0 / (hidden as f64).sqrt();
        let w2 = (0..hidden).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            w1: layer.w1,
            b1: layer.b1,
            w2,
            b2: 0.0,
        }
    }
}

/// `Σ_{k<l} ⟨W₁ᵏ, W₁ˡ⟩²_F` over the discriminators' first-layer weights.
pub fn orthogonality_penalty(discriminators: &[Discriminator]) -> f64 {
    let mut total = 0.0;
    for k in 0..discriminators.len() {
        for l in k + 1..discriminators.len() {
            let ip = numkit::dot(discriminators[k].w1.as_slice(), discriminators[l].w1.as_slice());
            total += ip * ip;
        }
    }
    total
}

/// `∂/∂W₁ᵃ` of [`orthogonality_penalty`]: `Σ_{b≠a} 2⟨W₁ᵃ, W₁ᵇ⟩ W₁ᵇ`.
fn orthogonality_grad(discriminators: &[Discriminator], a: usize) -> Vec<f64> {
    let wa = discriminators[a].w1.as_slice();
    let mut grad = vec![0.0; wa.len()];
    for (b, other) in discriminators.iter().enumerate() {
        if a == b {
            continue;
        }
        let wb = other.w1.as_slice();
        let coeff = 2.0 * numkit::dot(wa, wb);
        for (g, w) in grad.iter_mut().zip(wb) {
            *g += coeff * w;
        }
    }
    grad
}

struct DiscriminatorGrads {
    w1: Matrix,
    b1: Vector,
    w2: Vector,
    b2: f64,
}

struct Adversary {
    cfg: AdvConfig,
    discriminators: Vec<Discriminator>,
    optimizers: Vec<TensorOptimizer>,
}

impl Adversary {
    fn new(cfg: AdvConfig, hidden: usize, seed: u64, lr: f64) -> Self {
        let mut rng = stream_rng(seed, Stream::Adversary, 0, 0);
        let discriminators: Vec<Discriminator> =
            (0..cfg.discriminators).map(|_| Discriminator::init(hidden, &mut rng)).collect();
        let optimizers = discriminators
            .iter()
            .map(|d| TensorOptimizer::new(&[d.w1.as_slice(), &d.b1, &d.w2, &[d.b2]], lr))
            .collect();
        Self {
            cfg,
            discriminators,
            optimizers,
        }
    }

    /// Mean binary cross-entropy of one discriminator, its parameter
    /// gradients, and `∂L/∂h`.
    fn discriminator_pass(d: &Discriminator, h: &Matrix, targets: &[usize]) -> Result<(f64, DiscriminatorGrads, Matrix)> {
        let n = h.rows() as f64;
        let mut pre = numkit::matmul_nt(h, &d.w1)?;
        pre.add_row_vector(&d.b1);
        let mut act = pre.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut loss = 0.0;
        let mut ds = Vec::with_capacity(h.rows());
        for (i, &t) in targets.iter().enumerate() {
            let s = numkit::dot(act.row(i), &d.w2) + d.b2;
            let t = t as f64;
            // softplus(s) − t·s, stable for either sign of s
            loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s;
            let sigma = 1.0 / (1.0 + (-s).exp());
            ds.push((sigma - t) / n);
        }
        let mut w2 = vec![0.0; d.w2.len()];
        for (i, &g) in ds.iter().enumerate() {
            for (acc, a) in w2.iter_mut().zip(act.row(i)) {
                *acc += g * a;
            }
        }
        let b2: f64 = ds.iter().sum();
        let mut dpre = Matrix::zeros(pre.rows(), pre.cols());
        for (i, &g) in ds.iter().enumerate() {
            let z = pre.row(i);
            for ((out, wk), zk) in dpre.row_mut(i).iter_mut().zip(&d.w2).zip(z) {
                *out = if *zk > 0.0 { g * wk } else { 0.0 };
            }
        }
        let w1 = numkit::matmul_tn(&dpre, h)?;
        let b1 = dpre.column_sums();
        let dh = numkit::matmul_nn(&dpre, &d.w1)?;
        Ok((loss / n, DiscriminatorGrads { w1, b1, w2, b2 }, dh))
    }

    /// Update every discriminator on `(h, a)` and return their mean loss and
    /// the summed, unreversed `∂L/∂h` computed before the update.
    fn step(&mut self, h: &Matrix, protected: &[usize]) -> Result<(f64, Matrix)> {
        let mut dh_total = Matrix::zeros(h.rows(), h.cols());
        let mut grads = Vec::with_capacity(self.discriminators.len());
        let mut loss = 0.0;
        let passes = par::map_indices(self.discriminators.len(), |k| {
            Self::discriminator_pass(&self.discriminators[k], h, protected)
        });
        for pass in passes {
            let (l, g, dh) = pass?;
            loss += l;
            for (acc, v) in dh_total.as_mut_slice().iter_mut().zip(dh.as_slice()) {
                *acc += v;
            }
            grads.push(g);
        }
        if self.cfg.orthogonality != 0.0 {
            for (a, grad) in grads.iter_mut().enumerate() {
                let g = orthogonality_grad(&self.discriminators, a);
                for (acc, v) in grad.w1.as_mut_slice().iter_mut().zip(g) {
                    *acc += self.cfg.orthogonality * v;
                }
            }
        }
        for ((d, opt), g) in self.discriminators.iter_mut().zip(&mut self.optimizers).zip(&grads) {
            let mut b2 = [d.b2];
            opt.apply(
                vec![d.w1.as_mut_slice(), &mut d.b1, &mut d.w2, &mut b2],
                vec![g.w1.as_slice(), &g.b1, &g.w2, &[g.b2]],
            )?;
            d.b2 = b2[0];
        }
        let loss = loss / self.discriminators.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Contract("discriminator loss became non-finite".into()));
        }
        Ok((loss, dh_total))
    }
}

fn check_data(data: &SplitDataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(Error::validation("train", "needs at least 2 instances"));
    }
    Ok(())
}

/// End-to-end training shared by CE, the contrastive objective and its
/// ablations, and adversarial debiasing.
fn train_end_to_end(data: &SplitDataset, cfg: &TrainConfig, mode: LossMode, adv: Option<AdvConfig>) -> Result<TrainedModel> {
    check_data(data, cfg)?;
    let start = Instant::now();
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
    let mut encoder = EncoderParams::init(data.dim, cfg.hidden, cfg.activation, &mut rng);
    let mut head = ClassifierHead::init(cfg.hidden, data.num_classes, &mut rng);
    let mut opt_enc = TensorOptimizer::new(&encoder.tensors(), cfg.learning_rate);
    let mut opt_head = TensorOptimizer::new(&head.tensors(), cfg.learning_rate);
    let mut adversary = adv.map(|a| Adversary::new(a, cfg.hidden, cfg.seed, cfg.learning_rate));

    let mut best = (f64::NEG_INFINITY, encoder.clone(), head.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let batches = make_batches(data.train.len(), cfg.batch_size, cfg.seed, epoch)?;
        let mut sum = LossTerms::default();
        let mut adv_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch = Batch::gather(&data.train, idx);
            let cache = network::forward(&encoder, &batch.x)?;
            let (terms, mut dh, dhead) = objective_at_h(&head, &cache.h, &batch, &cfg.loss, mode, true)?;
            if let Some(term) = terms.non_finite_term() {
                return Err(Error::Divergence { term, epoch, batch: b });
            }
            if let Some(adversary) = adversary.as_mut() {
                let (l, dh_adv) = adversary.step(&cache.h, &batch.protected)?;
                adv_sum += l;
                let lambda = adversary.cfg.lambda;
                if lambda != 0.0 {
                    for (d, g) in dh.as_mut_slice().iter_mut().zip(dh_adv.as_slice()) {
                        *d -= lambda * g;
                    }
                }
            }
            let denc = encoder_backward(&encoder, &cache, &batch.x, &dh)?;
            opt_enc.apply(encoder.tensors_mut().into(), denc.tensors().into())?;
            opt_head.apply(head.tensors_mut().into(), dhead.tensors().into())?;
            accumulate(&mut sum, &terms);
        }
        if !encoder.is_finite() {
            return Err(Error::Divergence {
                term: "parameters",
                epoch,
                batch: batches.len(),
            });
        }
        let dev = dev_accuracy(&encoder, &head, &data.dev)?;
        history.push(EpochRecord {
            epoch,
            stage: 0,
            train: mean_terms(sum, batches.len()),
            dev_metric: dev,
            adversary_loss: adversary.as_ref().map(|_| adv_sum / batches.len().max(1) as f64),
        });
        if dev > best.0 {
            best = (dev, encoder.clone(), head.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, encoder, head, best_epoch) = best;
    Ok(TrainedModel {
        method: cfg.method,
        encoder,
        head,
        projector: None,
        train_seconds: elapsed_since(start),
        history,
        best_epoch,
    })
}

/// End-to-end training for `ce`, `con`, `ce+scl` and `ce-fcl`: each epoch
/// runs seeded mini-batches through the mode-selected objective with Adam,
/// and early stopping on dev accuracy returns the best snapshot.
pub fn train_joint(data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let mode = match cfg.method {
        Method::Ce | Method::Con | Method::CeScl | Method::CeFcl => cfg.method.joint_mode().expect("joint method"),
        other => {
            return Err(Error::validation(
                "method",
                format!("{other} is not trained by train_joint"),
            ))
        }
    };
    train_end_to_end(data, cfg, mode, None)
}

/// CE training plus an ensemble of discriminators trained on the protected
/// attribute, whose `∂/∂h` reaches the encoder reversed and scaled by λ.
pub fn train_adversarial(data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let adv = cfg
        .adv
        .ok_or_else(|| Error::validation("adv", "required for adversarial training"))?;
    train_end_to_end(data, cfg, LossMode::Ce, Some(adv))
}

/// Softmax classifier trained with cross-entropy on fixed representations.
/// Returns the best-dev-accuracy head and per-epoch records.
pub fn fit_classifier(
    train_h: &Matrix,
    train_labels: &[usize],
    dev_h: &Matrix,
    dev_labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ClassifierHead, Vec<EpochRecord>)> {
    let mut rng = stream_rng(seed, Stream::Classifier, 0, 0);
    let mut head = ClassifierHead::init(train_h.cols(), num_classes, &mut rng);
    let mut opt = TensorOptimizer::new(&head.tensors(), cfg.learning_rate);
    let loss = LossConfig {
        alpha: 1.0,
        beta: 0.0,
        tau: 1.0,
    };
    let batch_seed = derive_seed(seed, Stream::Classifier, 1, 0);
    let mut best = (f64::NEG_INFINITY, head.clone());
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let batches = make_batches(train_h.rows(), cfg.batch_size, batch_seed, epoch)?;
        let mut sum = LossTerms::default();
        for (b, idx) in batches.iter().enumerate() {
            let h = train_h.select_rows(idx);
            let batch = Batch {
                x: h.clone(),
                labels: idx.iter().map(|&i| train_labels[i]).collect(),
                protected: vec![0; idx.len()],
            };
            let (terms, _, dhead) = objective_at_h(&head, &h, &batch, &loss, LossMode::Ce, true)?;
            if let Some(term) = terms.non_finite_term() {
                return Err(Error::Divergence { term, epoch, batch: b });
            }
            opt.apply(head.tensors_mut().into(), dhead.tensors().into())?;
            accumulate(&mut sum, &terms);
        }
        let pred = argmax_rows(&network::logits_batch(&head, dev_h)?);
        let dev = evaluation::accuracy(&pred, dev_labels)?;
        history.push(EpochRecord {
            epoch,
            stage: 2,
            train: mean_terms(sum, batches.len()),
            dev_metric: dev,
            adversary_loss: None,
        });
        if dev > best.0 {
            best = (dev, head.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, history))
}

/// Mean contrastive objective over fixed dev batches.
fn dev_contrastive(encoder: &EncoderParams, dev: &Split, cfg: &TrainConfig, dummy_head: &ClassifierHead) -> Result<f64> {
    let batch_seed = derive_seed(cfg.seed, Stream::Batches, u64::MAX, 0);
    let batches = make_batches(dev.len(), cfg.batch_size, batch_seed, 0)?;
    let mut total = 0.0;
    for idx in &batches {
        let batch = Batch::gather(dev, idx);
        total += network::loss_terms(encoder, dummy_head, &batch, &cfg.loss, LossMode::SclFcl)?.total;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Two-stage variant: the encoder is trained on `β·(Lscl − Lfcl)` alone with
/// early stopping on the dev objective, then frozen while a softmax
/// classifier is fit on its outputs.
pub fn train_pipelined(data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    check_data(data, cfg)?;
    if cfg.method != Method::ConFt {
        return Err(Error::validation("method", "train_pipelined expects con_ft"));
    }
    let start = Instant::now();
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
    let mut encoder = EncoderParams::init(data.dim, cfg.hidden, cfg.activation, &mut rng);
    // unused by the contrastive-only objective
    let dummy_head = ClassifierHead::init(cfg.hidden, data.num_classes, &mut rng);
    let mut opt = TensorOptimizer::new(&encoder.tensors(), cfg.learning_rate);

    let mut best = (dev_contrastive(&encoder, &data.dev, cfg, &dummy_head)?, encoder.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let batches = make_batches(data.train.len(), cfg.batch_size, cfg.seed, epoch)?;
        let mut sum = LossTerms::default();
        for (b, idx) in batches.iter().enumerate() {
            let batch = Batch::gather(&data.train, idx);
            let cache = network::forward(&encoder, &batch.x)?;
            let (terms, dh, _) = objective_at_h(&dummy_head, &cache.h, &batch, &cfg.loss, LossMode::SclFcl, true)?;
            if let Some(term) = terms.non_finite_term() {
                return Err(Error::Divergence { term, epoch, batch: b });
            }
            let denc = encoder_backward(&encoder, &cache, &batch.x, &dh)?;
            opt.apply(encoder.tensors_mut().into(), denc.tensors().into())?;
            accumulate(&mut sum, &terms);
        }
        let dev = dev_contrastive(&encoder, &data.dev, cfg, &dummy_head)?;
        if !dev.is_finite() {
            return Err(Error::Divergence {
                term: "dev objective",
                epoch,
                batch: 0,
            });
        }
        history.push(EpochRecord {
            epoch,
            stage: 1,
            train: mean_terms(sum, batches.len()),
            dev_metric: dev,
            adversary_loss: None,
        });
        if dev < best.0 {
            best = (dev, encoder.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, encoder, best_epoch) = best;
    let train_h = network::encode_batch(&encoder, &data.train.x)?;
    let dev_h = network::encode_batch(&encoder, &data.dev.x)?;
    let (head, stage2) = fit_classifier(
        &train_h,
        &data.train.labels,
        &dev_h,
        &data.dev.labels,
        data.num_classes,
        cfg,
        cfg.seed,
    )?;
    history.extend(stage2);
    Ok(TrainedModel {
        method: Method::ConFt,
        encoder,
        head,
        projector: None,
        train_seconds: elapsed_since(start),
        history,
        best_epoch,
    })
}

/// Iterative nullspace projection on top of a trained model.
///
/// Each iteration fits a hinge-loss probe for the protected attribute on the
/// currently projected train representations and removes its direction. The
/// loop stops at the iteration budget or once the probe's dev accuracy is
/// within `chance_tolerance` of the majority rate. If any direction was
/// removed, a new softmax classifier is fit on the projected representations.
pub fn run_inlp(model: &TrainedModel, data: &SplitDataset, cfg: &TrainConfig, iterations: usize) -> Result<TrainedModel> {
    let inlp = cfg.inlp.unwrap_or_default();
    let start = Instant::now();
    let train_h = network::encode_batch(&model.encoder, &data.train.x)?;
    let dev_h = network::encode_batch(&model.encoder, &data.dev.x)?;
    let dim = train_h.cols();
    let ones = data.dev.protected.iter().filter(|&&a| a == 1).count() as f64;
    let chance = (ones / data.dev.len() as f64).max(1.0 - ones / data.dev.len() as f64);

    let mut projector = Projector::identity(dim);
    for it in 0..iterations {
        let ptrain = projector.apply(&train_h)?;
        let pdev = projector.apply(&dev_h)?;
        let probe_seed = derive_seed(cfg.seed, Stream::Probe, 100 + it as u64, 0);
        let probe = evaluation::train_probe(&ptrain, &data.train.protected, &cfg.probe, probe_seed)?;
        let dev_acc = evaluation::probe_accuracy(&probe, &pdev, &data.dev.protected)?;
        if dev_acc <= chance + inlp.chance_tolerance {
            break;
        }
        // the probe only sees P·h, so its effective direction is P·w
        let w = projector.matrix.mat_vec(&probe.weights)?;
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("INLP probe produced non-finite weights".into()));
        }
        if numkit::norm(&w) <= numkit::ZERO_NORM_TOL {
            break;
        }
        let step = numkit::rank1_nullspace_projector(&w)?;
        let mut next = numkit::matmul_nn(&step, &projector.matrix)?;
        // re-symmetrise against rounding drift
        let t = next.transpose();
        next.as_mut_slice()
            .iter_mut()
            .zip(t.as_slice())
            .for_each(|(a, b)| *a = 0.5 * (*a + b));
        projector.matrix = next;
        projector.iterations += 1;
        let rank = projector.rank();
        projector.rank_history.push(rank);
    }

    let mut out = model.clone();
    out.method = Method::Inlp;
    if projector.iterations > 0 {
        let ptrain = projector.apply(&train_h)?;
        let pdev = projector.apply(&dev_h)?;
        let (head, history) = fit_classifier(
            &ptrain,
            &data.train.labels,
            &pdev,
            &data.dev.labels,
            data.num_classes,
            cfg,
            derive_seed(cfg.seed, Stream::Classifier, 2, 0),
        )?;
        out.head = head;
        out.history.extend(history);
    }
    out.projector = Some(projector);
    out.train_seconds = model.train_seconds + elapsed_since(start);
    Ok(out)
}

/// Train with whatever procedure `cfg.method` names. INLP trains a CE model
/// first and then projects it.
pub fn train(data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    match cfg.method {
        Method::Ce | Method::Con | Method::CeScl | Method::CeFcl => train_joint(data, cfg),
        Method::Adv => train_adversarial(data, cfg),
        Method::ConFt => train_pipelined(data, cfg),
        Method::Inlp => {
            let inlp = cfg.inlp.ok_or_else(|| Error::validation("inlp", "required for method inlp"))?;
            cfg.validate()?;
            let mut base_cfg = cfg.clone();
            base_cfg.set_method(Method::Ce);
            let base = train_joint(data, &base_cfg)?;
            run_inlp(&base, data, cfg, inlp.iterations)
        }
    }
}

/// Pick the candidate with the lowest dev GAP among those whose dev accuracy
/// is within `epsilon` of the best. Ties go to higher accuracy, then lower
/// Leakage@h, then the earliest candidate. Returns the chosen index.
pub fn select_model<C>(candidates: &[(C, FairnessReport)], epsilon: f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Contract("select_model needs at least one candidate".into()));
    }
    let best_acc = candidates
        .iter()
        .map(|(_, r)| r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut chosen: Option<usize> = None;
    for (i, (_, r)) in candidates.iter().enumerate() {
        if r.accuracy < best_acc - epsilon {
            continue;
        }
        let better = match chosen {
            None => true,
            Some(j) => {
                let c = &candidates[j].1;
                (r.gap, -r.accuracy, r.leakage_h) < (c.gap, -c.accuracy, c.leakage_h)
            }
        };
        if better {
            chosen = Some(i);
        }
    }
    Ok(chosen.expect("the best-accuracy candidate always passes the filter"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SkewSpec, SplitSizes};
    use rand::Rng;

    fn report(acc: f64, gap: f64, lh: f64) -> FairnessReport {
        FairnessReport {
            accuracy: acc,
            gap,
            leakage_h: lh,
            leakage_yhat: 0.5,
            tradeoff: None,
            time_seconds: 1.0,
            time_ratio: None,
            gap_per_class: vec![],
            warnings: vec![],
        }
    }

    #[test]
    fn select_model_examples() {
        assert_eq!(select_model(&[("a", report(0.7, 0.3, 0.6))], 0.01).unwrap(), 0);
        let c = [("a", report(0.80, 0.20, 0.6)), ("b", report(0.795, 0.10, 0.6))];
        assert_eq!(select_model(&c, 0.01).unwrap(), 1);
        let c = [
            ("a", report(0.70, 0.01, 0.6)),
            ("b", report(0.90, 0.30, 0.6)),
            ("c", report(0.85, 0.02, 0.6)),
        ];
        assert_eq!(select_model(&c, 0.01).unwrap(), 1);
        let ties = [
            ("a", report(0.80, 0.10, 0.7)),
            ("b", report(0.80, 0.10, 0.6)),
            ("c", report(0.80, 0.10, 0.6)),
        ];
        assert_eq!(select_model(&ties, 0.01).unwrap(), 1);
        let empty: [((), FairnessReport); 0] = [];
        assert!(select_model(&empty, 0.01).is_err());
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_tag(m.tag()), Some(m));
        }
        assert_eq!(Method::from_tag("ce−fcl"), Some(Method::CeFcl));
        assert_eq!(Method::from_tag("nope"), None);
    }

    #[test]
    fn config_validation_requires_method_fields() {
        let mut cfg = TrainConfig::for_method(Method::Adv);
        assert!(cfg.validate().is_ok());
        cfg.adv = None;
        assert!(matches!(cfg.validate(), Err(Error::Validation { ref field, .. }) if field == "adv"));
        let mut cfg = TrainConfig::for_method(Method::Ce);
        cfg.inlp = Some(InlpConfig::default());
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.loss.tau = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Validation { ref field, .. }) if field == "loss.tau"));
    }

    #[test]
    fn orthogonality_penalty_prefers_orthogonal_discriminators() {
        let d = |w: Vec<f64>| Discriminator {
            w1: Matrix::new(2, 2, w).unwrap(),
            b1: vec![0.0; 2],
            w2: vec![0.0; 2],
            b2: 0.0,
        };
        let same = [d(vec![1.0, 2.0, 0.0, 1.0]), d(vec![1.0, 2.0, 0.0, 1.0])];
        let orth = [d(vec![1.0, 0.0, 0.0, 0.0]), d(vec![0.0, 0.0, 0.0, 1.0])];
        assert_eq!(orthogonality_penalty(&same), 36.0);
        assert_eq!(orthogonality_penalty(&orth), 0.0);
    }

    #[test]
    fn orthogonality_gradient_matches_finite_differences() {
        let mut rng = stream_rng(4, Stream::Adversary, 0, 0);
        let discs: Vec<Discriminator> = (0..3).map(|_| Discriminator::init(4, &mut rng)).collect();
        let step = 1e-6;
        for a in 0..discs.len() {
            let analytic = orthogonality_grad(&discs, a);
            for k in 0..analytic.len() {
                let mut plus = discs.clone();
                plus[a].w1.as_mut_slice()[k] += step;
                let mut minus = discs.clone();
                minus[a].w1.as_mut_slice()[k] -= step;
                let numeric = (orthogonality_penalty(&plus) - orthogonality_penalty(&minus)) / (2.0 * step);
                assert!((analytic[k] - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "{} vs {numeric}", analytic[k]);
            }
        }
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut rng = stream_rng(6, Stream::Adversary, 0, 0);
        let mut d = Discriminator::init(5, &mut rng);
        d.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        let h = Matrix::new(6, 5, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let targets = [0, 1, 1, 0, 1, 0];
        let (_, grads, dh) = Adversary::discriminator_pass(&d, &h, &targets).unwrap();
        let loss = |d: &Discriminator, h: &Matrix| Adversary::discriminator_pass(d, h, &targets).unwrap().0;
        let step = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-5 * (1.0 + n.abs());
        for k in 0..h.as_slice().len() {
            let mut plus = h.clone();
            plus.as_mut_slice()[k] += step;
            let mut minus = h.clone();
            minus.as_mut_slice()[k] -= step;
            let numeric = (loss(&d, &plus) - loss(&d, &minus)) / (2.0 * step);
            assert!(close(dh.as_slice()[k], numeric), "dh[{k}]");
        }
        for k in 0..d.w1.as_slice().len() {
            let mut plus = d.clone();
            plus.w1.as_mut_slice()[k] += step;
            let mut minus = d.clone();
            minus.w1.as_mut_slice()[k] -= step;
            let numeric = (loss(&plus, &h) - loss(&minus, &h)) / (2.0 * step);
            assert!(close(grads.w1.as_slice()[k], numeric), "w1[{k}]");
        }
        for k in 0..d.w2.len() {
            let mut plus = d.clone();
            plus.w2[k] += step;
            let mut minus = d.clone();
            minus.w2[k] -= step;
            let numeric = (loss(&plus, &h) - loss(&minus, &h)) / (2.0 * step);
            assert!(close(grads.w2[k], numeric), "w2[{k}]");
        }
        let mut plus = d.clone();
        plus.b2 += step;
        let mut minus = d.clone();
        minus.b2 -= step;
        assert!(close(grads.b2, (loss(&plus, &h) - loss(&minus, &h)) / (2.0 * step)));
    }

    fn tiny_data() -> SplitDataset {
        let spec = SkewSpec {
            class_separation: 3.0,
            ..SkewSpec::default()
        };
        generate_synthetic(
            &spec,
            SplitSizes {
                train: 400,
                dev: 100,
                test: 100,
            },
            1,
        )
        .unwrap()
    }

    fn tiny_cfg(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::for_method(method);
        cfg.hidden = 16;
        cfg.max_epochs = 4;
        cfg.batch_size = 32;
        cfg.learning_rate = 3e-3;
        cfg
    }

    #[test]
    fn early_stopping_returns_best_dev_snapshot() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(Method::Ce);
        cfg.max_epochs = 10;
        cfg.patience = 2;
        let model = train_joint(&data, &cfg).unwrap();
        let best = model
            .history
            .iter()
            .map(|r| r.dev_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(model.history[model.best_epoch].dev_metric, best);
        assert_eq!(dev_accuracy(&model.encoder, &model.head, &data.dev).unwrap(), best);
        assert!(model.history.len() <= cfg.max_epochs);
        assert!(model.train_seconds > 0.0);
    }

    #[test]
    fn pipelined_stage_two_leaves_encoder_untouched() {
        let data = tiny_data();
        let cfg = tiny_cfg(Method::ConFt);
        let model = train_pipelined(&data, &cfg).unwrap();
        let dummy = ClassifierHead::init(cfg.hidden, data.num_classes, &mut stream_rng(0, Stream::Init, 9, 9));
        let frozen = dev_contrastive(&model.encoder, &data.dev, &cfg, &dummy).unwrap();
        let stage1_best = model
            .history
            .iter()
            .filter(|r| r.stage == 1)
            .map(|r| r.dev_metric)
            .fold(f64::INFINITY, f64::min);
        assert!(frozen <= stage1_best);
        let again = train_pipelined(&data, &cfg).unwrap();
        assert_eq!(model.encoder, again.encoder);
        assert_eq!(model.head, again.head);
        assert!(model.history.iter().any(|r| r.stage == 1));
        assert!(model.history.iter().any(|r| r.stage == 2));
    }

    #[test]
    fn inlp_with_zero_iterations_is_the_identity() {
        let data = tiny_data();
        let cfg = tiny_cfg(Method::Inlp);
        let mut ce_cfg = cfg.clone();
        ce_cfg.set_method(Method::Ce);
        let base = train_joint(&data, &ce_cfg).unwrap();
        let projected = run_inlp(&base, &data, &cfg, 0).unwrap();
        assert_eq!(projected.head, base.head);
        assert_eq!(projected.predict(&data.test.x).unwrap(), base.predict(&data.test.x).unwrap());
        assert_eq!(
            projected.representations(&data.test.x).unwrap(),
            base.representations(&data.test.x).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported_with_the_offending_term() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(Method::CeFcl);
        cfg.loss.beta = 1e300;
        cfg.loss.tau = 1e-300;
        match train_joint(&data, &cfg) {
            Err(Error::Divergence { term, .. }) => assert!(["fcl", "total", "parameters"].contains(&term), "{term}"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }
}
