//! Class representations from filtered documents.
//!
//! The plain representation is the mean sentence embedding. The weighted
//! representation scores every sentence with a small rectifier network,
//! turns the scores into per-document softmax weights and combines
//! `a = (1/m) * sum_j weight_j * h_j` over the `m` kept sentences. The
//! network is first fit so each weighted vector stays close (in cosine) to
//! the class mean, then fine-tuned with a hinge that only pushes apart class
//! pairs whose cosine exceeds a threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json, write_jsonl, Corpus};
use crate::error::{Error, Result};
use crate::filter::{FilteredCorpus, FilteredDocument};
use crate::nn::{Mlp, Trace};
use crate::optim::{Optimizer, OptimizerKind};
use crate::vecmath::{self, axpy, cosine, cosine_grad_u, dot, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReprKind {
    Average,
    Weighted,
    /// Weight network trained jointly with the alignment loss.
    WeightedDirect,
    External,
}

impl ReprKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReprKind::Average => "average",
            ReprKind::Weighted => "weighted",
            ReprKind::WeightedDirect => "weighted-direct",
            ReprKind::External => "external",
        }
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "average" | "avg" => Ok(ReprKind::Average),
            "weighted" => Ok(ReprKind::Weighted),
            "weighted-direct" => Ok(ReprKind::WeightedDirect),
            "external" => Ok(ReprKind::External),
            other => Err(Error::Invalid(format!("unknown representation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub class_id: String,
    pub kind: ReprKind,
    pub vector: Vec<f64>,
}

pub type Representations = BTreeMap<String, Representation>;

/// Scores sentences; softmax over a document's scores gives sentence weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNet {
    mlp: Mlp,
}

pub const DEFAULT_WEIGHT_HIDDEN: [usize; 2] = [256, 256];

impl WeightNet {
    fn widths(dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut w = vec![dim];
        w.extend_from_slice(hidden);
        w.push(1);
        w
    }

    pub fn zeros(dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::zeros(&Self::widths(dim, hidden))?,
        })
    }

    /// Small random weights and zero biases, so the initial weights are
    /// close to uniform.
    pub fn random(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        Self::random_scaled(dim, hidden, 0.01, seed)
    }

    pub fn random_scaled(dim: usize, hidden: &[usize], output_scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            mlp: Mlp::random(&Self::widths(dim, hidden), output_scale, &mut rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 || mlp.is_identity() {
            return Err(Error::Shape("weight network must map to a single score".into()));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn score(&self, h: &[f64]) -> f64 {
        self.mlp.forward(h)[0]
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::Shape(format!(
                "weight network expects {}-dim input, corpus has {dim}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), &self.mlp)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mlp: Mlp = read_json(path.as_ref())?;
        let mlp = Mlp::from_parts(mlp.widths().to_vec(), mlp.params().to_vec())?;
        Self::from_mlp(mlp)
    }
}

fn ensure_non_empty(doc: &FilteredDocument) -> Result<()> {
    if doc.is_empty() {
        return Err(Error::Empty(format!("filtered document for `{}`", doc.class_id)));
    }
    Ok(())
}

pub fn average_repr(doc: &FilteredDocument, corpus: &Corpus) -> Result<Representation> {
    ensure_non_empty(doc)?;
    let rows = doc.embeddings(corpus)?;
    Ok(Representation {
        class_id: doc.class_id.clone(),
        kind: ReprKind::Average,
        vector: vecmath::mean(&rows),
    })
}

/// Softmax of the network scores over one document.
pub fn softmax_weights(net: &WeightNet, embeddings: &[&[f64]]) -> Vec<f64> {
    let logits: Vec<f64> = embeddings.iter().map(|h| net.score(h)).collect();
    softmax(&logits)
}

pub fn lambda_weights(net: &WeightNet, doc: &FilteredDocument, corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    ensure_non_empty(doc)?;
    net.check_dim(corpus.dim())?;
    let rows = doc.embeddings(corpus)?;
    let weights = softmax_weights(net, &rows);
    Ok(doc.sentence_ids().map(String::from).zip(weights).collect())
}

/// `scale * sum_j weights_j * h_j` with `scale = 1/m` when `scale_by_count`.
pub fn combine(weights: &[f64], embeddings: &[&[f64]], scale_by_count: bool) -> Vec<f64> {
    let dim = embeddings.first().map_or(0, |h| h.len());
    let scale = if scale_by_count { 1.0 / embeddings.len() as f64 } else { 1.0 };
    let mut out = vec![0.0; dim];
    for (w, h) in weights.iter().zip(embeddings) {
        axpy(scale * w, h, &mut out);
    }
    out
}

pub fn weighted_repr(net: &WeightNet, doc: &FilteredDocument, corpus: &Corpus, scale_by_count: bool) -> Result<Representation> {
    ensure_non_empty(doc)?;
    net.check_dim(corpus.dim())?;
    let rows = doc.embeddings(corpus)?;
    let weights = softmax_weights(net, &rows);
    Ok(Representation {
        class_id: doc.class_id.clone(),
        kind: ReprKind::Weighted,
        vector: combine(&weights, &rows, scale_by_count),
    })
}

/// Owned embeddings of one class's filtered document, ready for training.
#[derive(Debug, Clone)]
pub struct ClassDoc {
    pub class_id: String,
    pub embeddings: Vec<Vec<f64>>,
    pub average: Vec<f64>,
}

impl ClassDoc {
    pub fn new(class_id: impl Into<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        let class_id = class_id.into();
        if embeddings.is_empty() {
            return Err(Error::Empty(format!("document for `{class_id}`")));
        }
        let rows: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let average = vecmath::mean(&rows);
        Ok(Self {
            class_id,
            embeddings,
            average,
        })
    }

    fn rows(&self) -> Vec<&[f64]> {
        self.embeddings.iter().map(Vec::as_slice).collect()
    }
}

/// Collects the documents of `classes` (all filtered classes if `None`).
pub fn class_docs(filtered: &FilteredCorpus, corpus: &Corpus, classes: Option<&BTreeSet<String>>) -> Result<Vec<ClassDoc>> {
    let mut docs = Vec::new();
    match classes {
        Some(set) => {
            for c in set {
                let f = filtered.get(c).ok_or_else(|| Error::MissingClass(c.clone()))?;
                docs.push(ClassDoc::new(c.clone(), f.embeddings(corpus)?.into_iter().map(<[f64]>::to_vec).collect())?);
            }
        }
        None => {
            for (c, f) in filtered {
                docs.push(ClassDoc::new(c.clone(), f.embeddings(corpus)?.into_iter().map(<[f64]>::to_vec).collect())?);
            }
        }
    }
    Ok(docs)
}

/// Forward state for one document, kept for backpropagation.
pub struct DocForward {
    traces: Vec<Trace>,
    pub weights: Vec<f64>,
    pub vector: Vec<f64>,
}

pub fn doc_forward(net: &WeightNet, doc: &ClassDoc, scale_by_count: bool) -> DocForward {
    let traces: Vec<Trace> = doc.embeddings.iter().map(|h| net.mlp.forward_trace(h)).collect();
    let logits: Vec<f64> = traces.iter().map(|t| t.output()[0]).collect();
    let weights = softmax(&logits);
    let vector = combine(&weights, &doc.rows(), scale_by_count);
    DocForward { traces, weights, vector }
}

/// Backpropagates `d loss / d vector` to the network parameters.
pub fn doc_backward(
    net: &WeightNet,
    doc: &ClassDoc,
    fwd: &DocForward,
    grad_vector: &[f64],
    scale_by_count: bool,
    grad: &mut [f64],
) {
    let scale = if scale_by_count { 1.0 / doc.embeddings.len() as f64 } else { 1.0 };
    let d_weight: Vec<f64> = doc.embeddings.iter().map(|h| scale * dot(h, grad_vector)).collect();
    let mean_term: f64 = fwd.weights.iter().zip(&d_weight).map(|(w, d)| w * d).sum();
    for ((trace, w), d) in fwd.traces.iter().zip(&fwd.weights).zip(&d_weight) {
        let d_logit = w * (d - mean_term);
        if d_logit != 0.0 {
            net.mlp.backward(trace, &[d_logit], grad);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprTrainConfig {
    pub epsilon: f64,
    pub tau: f64,
    pub step_size: f64,
    pub init_epochs: usize,
    pub margin_epochs: usize,
    /// Unordered class pairs sampled per margin step; 0 uses every pair.
    pub pair_batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Keep the leading `1/m` factor of the weighted average.
    pub scale_by_count: bool,
    pub hidden: Vec<usize>,
}

impl Default for ReprTrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.9,
            tau: 0.95,
            step_size: 2e-4,
            init_epochs: 200,
            margin_epochs: 500,
            pair_batch: 0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            scale_by_count: true,
            hidden: DEFAULT_WEIGHT_HIDDEN.to_vec(),
        }
    }
}

impl ReprTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        Ok(())
    }
}

fn sum_grads(parts: Vec<(f64, Option<Vec<f64>>)>, len: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; len];
    for (l, g) in parts {
        loss += l;
        if let Some(g) = g {
            axpy(1.0, &g, &mut grad);
        }
    }
    (loss, grad)
}

/// `sum_c max(0, epsilon - cos(a_c, mean_c))` and its gradient.
pub fn init_loss_and_grad(net: &WeightNet, docs: &[ClassDoc], epsilon: f64, scale_by_count: bool) -> (f64, Vec<f64>) {
    let len = net.params().len();
    let parts: Vec<(f64, Option<Vec<f64>>)> = docs
        .par_iter()
        .map(|doc| {
            let fwd = doc_forward(net, doc, scale_by_count);
            let (c, dcos) = cosine_grad_u(&fwd.vector, &doc.average);
            if vecmath::norm(&fwd.vector) == 0.0 {
                log::warn!("degenerate representation for `{}`", doc.class_id);
            }
            let term = epsilon - c;
            if term <= 0.0 {
                return (0.0, None);
            }
            let g_vec: Vec<f64> = dcos.iter().map(|g| -g).collect();
            let mut grad = vec![0.0; len];
            doc_backward(net, doc, &fwd, &g_vec, scale_by_count, &mut grad);
            (term, Some(grad))
        })
        .collect();
    sum_grads(parts, len)
}

/// `sum over pairs of max(0, cos(a_c, a_c') - tau)`, both vectors functions
/// of the network, and its gradient.
pub fn margin_loss_and_grad(
    net: &WeightNet,
    docs: &[ClassDoc],
    pairs: &[(usize, usize)],
    tau: f64,
    scale_by_count: bool,
) -> (f64, Vec<f64>) {
    let len = net.params().len();
    let mut involved: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    involved.sort_unstable();
    involved.dedup();
    let forwards: BTreeMap<usize, DocForward> = involved
        .par_iter()
        .map(|&i| (i, doc_forward(net, &docs[i], scale_by_count)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let mut loss = 0.0;
    let mut grad_vectors: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(a, b) in pairs {
        let (va, vb) = (&forwards[&a].vector, &forwards[&b].vector);
        let c = cosine(va, vb);
        if c <= tau {
            continue;
        }
        loss += c - tau;
        let (_, ga) = cosine_grad_u(va, vb);
        let (_, gb) = cosine_grad_u(vb, va);
        let dim = va.len();
        axpy(1.0, &ga, grad_vectors.entry(a).or_insert_with(|| vec![0.0; dim]));
        axpy(1.0, &gb, grad_vectors.entry(b).or_insert_with(|| vec![0.0; dim]));
    }
    let parts: Vec<(f64, Option<Vec<f64>>)> = grad_vectors
        .par_iter()
        .map(|(&i, gv)| {
            let mut grad = vec![0.0; len];
            doc_backward(net, &docs[i], &forwards[&i], gv, scale_by_count, &mut grad);
            (0.0, Some(grad))
        })
        .collect();
    let (_, grad) = sum_grads(parts, len);
    (loss, grad)
}

pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReprTrainLog {
    pub init_losses: Vec<f64>,
    pub margin_losses: Vec<f64>,
}

fn check_finite(stage: &'static str, step: usize, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() || !vecmath::is_finite(grad) {
        return Err(Error::NonFinite {
            stage,
            detail: format!("step {step}: loss {loss}"),
        });
    }
    Ok(())
}

/// Fits the network so every weighted vector keeps cosine above epsilon
/// with its class mean. Stops early once the hinge is inactive everywhere.
pub fn train_weightnet_init(net: &mut WeightNet, docs: &[ClassDoc], config: &ReprTrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let mut opt = Optimizer::new(config.optimizer, config.step_size, net.params().len());
    let mut losses = Vec::new();
    for step in 0..config.init_epochs {
        let (loss, grad) = init_loss_and_grad(net, docs, config.epsilon, config.scale_by_count);
        check_finite("weight-net init", step, loss, &grad)?;
        losses.push(loss);
        if loss == 0.0 {
            break;
        }
        opt.step(net.params_mut(), &grad);
    }
    let (loss, _) = init_loss_and_grad(net, docs, config.epsilon, config.scale_by_count);
    losses.push(loss);
    log::info!("weight-net init phase: final loss {loss:.6}");
    Ok(losses)
}

/// Fine-tunes the network to push over-similar class pairs below tau.
pub fn train_weightnet_margin(net: &mut WeightNet, docs: &[ClassDoc], config: &ReprTrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let pairs = all_pairs(docs.len());
    let full_batch = config.pair_batch == 0 || config.pair_batch >= pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.step_size, net.params().len());
    let mut losses = Vec::new();
    for step in 0..config.margin_epochs {
        let batch: Vec<(usize, usize)> = if full_batch {
            pairs.clone()
        } else {
            let mut idx = sample(&mut rng, pairs.len(), config.pair_batch).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pairs[i]).collect()
        };
        let (loss, grad) = margin_loss_and_grad(net, docs, &batch, config.tau, config.scale_by_count);
        check_finite("weight-net margin", step, loss, &grad)?;
        losses.push(loss);
        if loss == 0.0 && full_batch {
            break;
        }
        opt.step(net.params_mut(), &grad);
    }
    if full_batch {
        let (loss, _) = margin_loss_and_grad(net, docs, &pairs, config.tau, config.scale_by_count);
        losses.push(loss);
        log::info!("weight-net margin phase: final loss {loss:.6}");
    }
    Ok(losses)
}

/// Both phases in sequence, starting from a fresh seeded network.
pub fn train_weightnet(docs: &[ClassDoc], dim: usize, config: &ReprTrainConfig) -> Result<(WeightNet, ReprTrainLog)> {
    let mut net = WeightNet::random(dim, &config.hidden, config.seed)?;
    let init_losses = train_weightnet_init(&mut net, docs, config)?;
    let margin_losses = train_weightnet_margin(&mut net, docs, config)?;
    Ok((
        net,
        ReprTrainLog {
            init_losses,
            margin_losses,
        },
    ))
}

pub fn build_representations(
    corpus: &Corpus,
    filtered: &FilteredCorpus,
    kind: ReprKind,
    net: Option<&WeightNet>,
    scale_by_count: bool,
) -> Result<Representations> {
    filtered
        .par_iter()
        .map(|(c, doc)| {
            let rep = match kind {
                ReprKind::Average => average_repr(doc, corpus)?,
                ReprKind::Weighted | ReprKind::WeightedDirect => {
                    let net = net.ok_or_else(|| Error::Config("weight network required".into()))?;
                    let mut r = weighted_repr(net, doc, corpus, scale_by_count)?;
                    r.kind = kind;
                    r
                }
                ReprKind::External => {
                    return Err(Error::Config("external representations are loaded, not built".into()))
                }
            };
            Ok((c.clone(), rep))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

pub fn write_representations(reps: &Representations, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), reps.values())
}

#[derive(Deserialize)]
struct ReprLine {
    class_id: String,
    #[serde(default)]
    kind: Option<ReprKind>,
    vector: Vec<f64>,
}

fn read_repr_lines(path: &Path, default_kind: ReprKind) -> Result<Representations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Representations::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let rec: ReprLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(rec.vector.len());
        if expected == 0 || rec.vector.len() != expected {
            return Err(Error::DimensionMismatch {
                line: line_no,
                expected,
                found: rec.vector.len(),
            });
        }
        if !vecmath::is_finite(&rec.vector) {
            return Err(Error::Malformed {
                line: line_no,
                message: "vector contains non-finite values".into(),
            });
        }
        if out.contains_key(&rec.class_id) {
            return Err(Error::Duplicate {
                what: "class_id",
                id: rec.class_id,
                line: line_no,
            });
        }
        out.insert(
            rec.class_id.clone(),
            Representation {
                class_id: rec.class_id,
                kind: rec.kind.unwrap_or(default_kind),
                vector: rec.vector,
            },
        );
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{} has no representations", path.display())));
    }
    Ok(out)
}

pub fn read_representations(path: impl AsRef<Path>) -> Result<Representations> {
    read_repr_lines(path.as_ref(), ReprKind::Average)
}

/// Loads precomputed per-class vectors (e.g. word vectors) as external
/// representations. `required` lists classes that must be present.
pub fn ingest_external_representations(path: impl AsRef<Path>, required: Option<&BTreeSet<String>>) -> Result<Representations> {
    let mut reps = read_repr_lines(path.as_ref(), ReprKind::External)?;
    for r in reps.values_mut() {
        r.kind = ReprKind::External;
    }
    if let Some(required) = required {
        if let Some(missing) = required.iter().find(|c| !reps.contains_key(*c)) {
            return Err(Error::MissingClass(missing.clone()));
        }
    }
    Ok(reps)
}

/// Cosine between every pair of representations, keyed by ordered class ids.
pub fn pairwise_cosines(reps: &Representations) -> BTreeMap<(String, String), f64> {
    let items: Vec<&Representation> = reps.values().collect();
    let mut out = BTreeMap::new();
    for (i, a) in items.iter().enumerate() {
        for b in &items[i + 1..] {
            out.insert((a.class_id.clone(), b.class_id.clone()), cosine(&a.vector, &b.vector));
        }
    }
    out
}
