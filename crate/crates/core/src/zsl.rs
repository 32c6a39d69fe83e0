//! Margin-ranking alignment of image features with class representations.
//!
//! An image `x` and a class vector `a` are scored by `f(x)^T M g(a)`, where
//! `f` and `g` are either identity maps or two-hidden-layer rectifier
//! networks. Training minimises the ranking hinge
//! `sum_n sum_{c != y_n} max(0, margin - s(x_n, a_{y_n}) + s(x_n, a_c))`
//! over seen classes; prediction takes the arg-max score over a candidate set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json, ClassSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Trace};
use crate::optim::{Optimizer, OptimizerKind};
use crate::repr::{doc_backward, doc_forward, ClassDoc, DocForward, ReprKind, Representation, Representations, WeightNet};
use crate::vecmath::{axpy, dot, is_finite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Identity `f` and `g`; only the bilinear matrix is learned.
    Plain,
    /// Two hidden rectifier layers on both sides.
    #[default]
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Negatives {
    All,
    Sampled(usize),
}

impl FromStr for Negatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Negatives::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Negatives::Sampled(n)),
            _ => Err(Error::Config(format!("negatives must be `all` or a positive integer, got `{s}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NegativesRepr {
    Count(usize),
    Word(String),
}

impl Serialize for Negatives {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Negatives::All => NegativesRepr::Word("all".into()),
            Negatives::Sampled(n) => NegativesRepr::Count(*n),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Negatives {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NegativesRepr::deserialize(d)? {
            NegativesRepr::Count(0) => Err(serde::de::Error::custom("negatives must be at least 1")),
            NegativesRepr::Count(n) => Ok(Negatives::Sampled(n)),
            NegativesRepr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZslTrainConfig {
    pub margin: f64,
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: Negatives,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub architecture: Architecture,
    /// Common embedding width; `None` means `min(512, image dim)`.
    pub latent: Option<usize>,
    /// Hidden width of both networks; `None` means the latent width.
    pub hidden: Option<usize>,
}

impl Default for ZslTrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            step_size: 2e-4,
            epochs: 50,
            batch_size: 64,
            negatives: Negatives::All,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            architecture: Architecture::Star,
            latent: None,
            hidden: None,
        }
    }
}

impl ZslTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviseModel {
    pub f: Mlp,
    pub g: Mlp,
    /// Row-major `rows x cols` with `rows = f` output width, `cols = g` output width.
    pub m: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub margin: f64,
}

impl DeviseModel {
    pub fn from_parts(f: Mlp, g: Mlp, m: Vec<f64>, margin: f64) -> Result<Self> {
        let (rows, cols) = (f.output_dim(), g.output_dim());
        if m.len() != rows * cols {
            return Err(Error::Shape(format!("M needs {rows}x{cols} entries, got {}", m.len())));
        }
        if !(margin >= 0.0) {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        Ok(Self { f, g, m, rows, cols, margin })
    }

    /// Seeded model for image width `image_dim` and representation width `repr_dim`.
    pub fn new(image_dim: usize, repr_dim: usize, config: &ZslTrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (f, g) = match config.architecture {
            Architecture::Plain => (Mlp::identity(image_dim)?, Mlp::identity(repr_dim)?),
            Architecture::Star => {
                let latent = config.latent.unwrap_or(image_dim.min(512));
                let hidden = config.hidden.unwrap_or(latent);
                let f = Mlp::random(&[image_dim, hidden, hidden, latent], 1.0, &mut rng)?;
                // With matching input widths g starts as a copy of f, so the
                // untrained score f(x)^T g(a) compares both sides in one
                // feature space instead of two unrelated ones.
                let g = if repr_dim == image_dim {
                    f.clone()
                } else {
                    Mlp::random(&[repr_dim, hidden, hidden, latent], 1.0, &mut rng)?
                };
                (f, g)
            }
        };
        let (rows, cols) = (f.output_dim(), g.output_dim());
        let m = if rows == cols {
            (0..rows * cols).map(|i| if i / cols == i % cols { 1.0 } else { 0.0 }).collect()
        } else {
            let std = 1.0 / (rows.max(cols) as f64).sqrt();
            (0..rows * cols).map(|_| std * (rng.random::<f64>() * 2.0 - 1.0)).collect()
        };
        Self::from_parts(f, g, m, config.margin)
    }

    pub fn image_dim(&self) -> usize {
        self.f.input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.g.input_dim()
    }

    /// `M v` for a `g`-side vector.
    fn m_times(&self, v: &[f64]) -> Vec<f64> {
        self.m.chunks_exact(self.cols).map(|row| dot(row, v)).collect()
    }

    /// `M^T u` for an `f`-side vector.
    fn mt_times(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, ui) in self.m.chunks_exact(self.cols).zip(u) {
            axpy(*ui, row, &mut out);
        }
        out
    }

    pub fn score(&self, x: &[f64], a: &[f64]) -> Result<f64> {
        if x.len() != self.image_dim() || a.len() != self.repr_dim() {
            return Err(Error::Shape(format!(
                "score expects ({}, {}) inputs, got ({}, {})",
                self.image_dim(),
                self.repr_dim(),
                x.len(),
                a.len()
            )));
        }
        Ok(dot(&self.f.forward(x), &self.m_times(&self.g.forward(a))))
    }

    pub fn save(&self, config: &ZslTrainConfig, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            path.as_ref(),
            &Checkpoint {
                model: self.clone(),
                config: config.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ZslTrainConfig)> {
        let ck: Checkpoint = read_json(path.as_ref())?;
        let model = Self::from_parts(
            Mlp::from_parts(ck.model.f.widths().to_vec(), ck.model.f.params().to_vec())?,
            Mlp::from_parts(ck.model.g.widths().to_vec(), ck.model.g.params().to_vec())?,
            ck.model.m,
            ck.model.margin,
        )?;
        Ok((model, ck.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    model: DeviseModel,
    config: ZslTrainConfig,
}

/// Gradients of the ranking loss for every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviseGrad {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub m: Vec<f64>,
    /// With respect to each class vector, indexed like the `classes` argument.
    pub classes: Vec<Vec<f64>>,
}

impl DeviseGrad {
    fn zeros(model: &DeviseModel, n_classes: usize) -> Self {
        Self {
            f: vec![0.0; model.f.params().len()],
            g: vec![0.0; model.g.params().len()],
            m: vec![0.0; model.m.len()],
            classes: vec![vec![0.0; model.cols]; n_classes],
        }
    }

    fn add(&mut self, other: &DeviseGrad) {
        axpy(1.0, &other.f, &mut self.f);
        axpy(1.0, &other.m, &mut self.m);
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            axpy(1.0, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        is_finite(&self.f) && is_finite(&self.g) && is_finite(&self.m) && self.classes.iter().all(|c| is_finite(c))
    }
}

/// One training example: features plus the index of its class.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

/// Ranking loss over `examples`, with `negatives[n]` listing the classes
/// compared against example `n`. `classes` holds the class vectors fed to `g`.
pub fn devise_loss_and_grad(
    model: &DeviseModel,
    examples: &[Example<'_>],
    classes: &[&[f64]],
    negatives: &[Vec<usize>],
) -> (f64, DeviseGrad) {
    let g_traces: Vec<Trace> = classes.par_iter().map(|a| model.g.forward_trace(a)).collect();
    let mg: Vec<Vec<f64>> = g_traces.iter().map(|t| model.m_times(t.output())).collect();
    let n_classes = classes.len();

    let partials: Vec<(f64, DeviseGrad)> = examples
        .par_chunks(16)
        .zip(negatives.par_chunks(16))
        .map(|(chunk, negs)| {
            let mut loss = 0.0;
            // `classes` here holds d loss / d g(a_c), mapped through g afterwards
            let mut grad = DeviseGrad::zeros(model, n_classes);
            for (ex, neg) in chunk.iter().zip(negs) {
                let trace = model.f.forward_trace(ex.features);
                let fx = trace.output();
                let s_true = dot(fx, &mg[ex.label]);
                let mut delta_g = vec![0.0; model.cols];
                let mut active = 0usize;
                for &c in neg {
                    debug_assert_ne!(c, ex.label);
                    let term = model.margin - s_true + dot(fx, &mg[c]);
                    if term > 0.0 {
                        loss += term;
                        active += 1;
                        axpy(1.0, g_traces[c].output(), &mut delta_g);
                        axpy(-1.0, g_traces[ex.label].output(), &mut delta_g);
                    }
                }
                if active == 0 {
                    continue;
                }
                for (i, fi) in fx.iter().enumerate() {
                    axpy(*fi, &delta_g, &mut grad.m[i * model.cols..(i + 1) * model.cols]);
                }
                let d_fx = model.m_times(&delta_g);
                model.f.backward(&trace, &d_fx, &mut grad.f);
                let mt_fx = model.mt_times(fx);
                for &c in neg {
                    let term = model.margin - s_true + dot(fx, &mg[c]);
                    if term > 0.0 {
                        axpy(1.0, &mt_fx, &mut grad.classes[c]);
                    }
                }
                axpy(-(active as f64), &mt_fx, &mut grad.classes[ex.label]);
            }
            (loss, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut total = DeviseGrad::zeros(model, n_classes);
    for (l, g) in &partials {
        loss += l;
        total.add(g);
    }
    // push d/d g(a_c) through g
    let per_class: Vec<(Vec<f64>, Vec<f64>)> = g_traces
        .par_iter()
        .zip(total.classes.par_iter())
        .map(|(trace, d_out)| {
            let mut gp = vec![0.0; model.g.params().len()];
            if d_out.iter().all(|&v| v == 0.0) {
                return (gp, vec![0.0; model.g.input_dim()]);
            }
            let d_in = model.g.backward(trace, d_out, &mut gp);
            (gp, d_in)
        })
        .collect();
    let mut class_grads = Vec::with_capacity(n_classes);
    for (gp, d_in) in per_class {
        axpy(1.0, &gp, &mut total.g);
        class_grads.push(d_in);
    }
    total.classes = class_grads;
    (loss, total)
}

/// Joint mode: representations come from a weight network that is trained
/// through the ranking loss alongside the alignment model.
pub struct JointRepr {
    pub net: WeightNet,
    /// Filtered documents of every class that may need a representation.
    pub docs: BTreeMap<String, ClassDoc>,
    pub scale_by_count: bool,
}

impl JointRepr {
    pub fn representations(&self) -> Representations {
        self.docs
            .par_iter()
            .map(|(c, doc)| {
                let fwd = doc_forward(&self.net, doc, self.scale_by_count);
                (
                    c.clone(),
                    Representation {
                        class_id: c.clone(),
                        kind: ReprKind::WeightedDirect,
                        vector: fwd.vector,
                    },
                )
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }
}

/// Loss and gradients in joint mode, including the weight-network gradient.
pub fn joint_loss_and_grad(
    model: &DeviseModel,
    joint: &JointRepr,
    vocab: &[String],
    examples: &[Example<'_>],
    negatives: &[Vec<usize>],
) -> Result<(f64, DeviseGrad, Vec<f64>)> {
    let docs: Vec<&ClassDoc> = vocab
        .iter()
        .map(|c| joint.docs.get(c).ok_or_else(|| Error::MissingClass(c.clone())))
        .collect::<Result<_>>()?;
    let forwards: Vec<DocForward> = docs.par_iter().map(|d| doc_forward(&joint.net, d, joint.scale_by_count)).collect();
    let vectors: Vec<&[f64]> = forwards.iter().map(|f| f.vector.as_slice()).collect();
    let (loss, grad) = devise_loss_and_grad(model, examples, &vectors, negatives);
    let parts: Vec<Vec<f64>> = docs
        .par_iter()
        .zip(forwards.par_iter())
        .zip(grad.classes.par_iter())
        .map(|((doc, fwd), gv)| {
            let mut g = vec![0.0; joint.net.params().len()];
            doc_backward(&joint.net, doc, fwd, gv, joint.scale_by_count, &mut g);
            g
        })
        .collect();
    let mut net_grad = vec![0.0; joint.net.params().len()];
    for p in &parts {
        axpy(1.0, p, &mut net_grad);
    }
    Ok((loss, grad, net_grad))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-example loss over each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    pub seen_classes: Vec<String>,
    pub images_used: usize,
}

fn draw_negatives(rng: &mut ChaCha8Rng, label: usize, n_classes: usize, negatives: Negatives) -> Vec<usize> {
    match negatives {
        Negatives::Sampled(k) if k < n_classes - 1 => {
            let mut picks: Vec<usize> = rand::seq::index::sample(rng, n_classes - 1, k)
                .into_iter()
                .map(|i| if i >= label { i + 1 } else { i })
                .collect();
            picks.sort_unstable();
            picks
        }
        _ => (0..n_classes).filter(|&c| c != label).collect(),
    }
}

/// Trains on seen-class images. In joint mode the weight network is updated
/// too and `representations` may be empty.
pub fn train_devise(
    model: &mut DeviseModel,
    images: &[ImageRecord],
    representations: &Representations,
    split: &ClassSplit,
    config: &ZslTrainConfig,
    mut joint: Option<&mut JointRepr>,
) -> Result<TrainLog> {
    config.validate()?;
    if split.seen.is_empty() {
        return Err(Error::Config("empty seen set".into()));
    }
    let vocab: Vec<String> = split.seen.iter().cloned().collect();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    for im in images {
        if !split.seen.contains(&im.class_id) {
            return Err(Error::Invalid(format!(
                "training image `{}` belongs to non-seen class `{}`",
                im.image_id, im.class_id
            )));
        }
        if im.features.len() != model.image_dim() {
            return Err(Error::Shape(format!("image `{}` has {} features", im.image_id, im.features.len())));
        }
    }
    if images.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    if vocab.len() < 2 {
        return Err(Error::Config("need at least two seen classes".into()));
    }
    let fixed: Vec<&[f64]> = if joint.is_some() {
        Vec::new()
    } else {
        vocab
            .iter()
            .map(|c| {
                representations
                    .get(c)
                    .map(|r| r.vector.as_slice())
                    .ok_or_else(|| Error::MissingClass(c.clone()))
            })
            .collect::<Result<_>>()?
    };
    if let Some(v) = fixed.first() {
        if v.len() != model.repr_dim() {
            return Err(Error::Shape(format!("representations are {}-dim, model expects {}", v.len(), model.repr_dim())));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt_f = Optimizer::new(config.optimizer, config.step_size, model.f.params().len());
    let mut opt_g = Optimizer::new(config.optimizer, config.step_size, model.g.params().len());
    let mut opt_m = Optimizer::new(config.optimizer, config.step_size, model.m.len());
    let mut opt_net = joint
        .as_ref()
        .map(|j| Optimizer::new(config.optimizer, config.step_size, j.net.params().len()));

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = TrainLog {
        seen_classes: vocab.clone(),
        images_used: images.len(),
        ..Default::default()
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let examples: Vec<Example<'_>> = batch
                .iter()
                .map(|&i| Example {
                    features: &images[i].features,
                    label: index[images[i].class_id.as_str()],
                })
                .collect();
            let negatives: Vec<Vec<usize>> = examples
                .iter()
                .map(|ex| draw_negatives(&mut rng, ex.label, vocab.len(), config.negatives))
                .collect();
            let (loss, grad, net_grad) = match joint.as_deref_mut() {
                Some(j) => {
                    let (l, g, ng) = joint_loss_and_grad(model, j, &vocab, &examples, &negatives)?;
                    (l, g, Some(ng))
                }
                None => {
                    let (l, g) = devise_loss_and_grad(model, &examples, &fixed, &negatives);
                    (l, g, None)
                }
            };
            if !loss.is_finite() || !grad.is_finite() || net_grad.as_deref().is_some_and(|g| !is_finite(g)) {
                return Err(Error::NonFinite {
                    stage: "alignment training",
                    detail: format!("epoch {epoch}: loss {loss}"),
                });
            }
            epoch_loss += loss;
            if loss == 0.0 {
                continue;
            }
            opt_f.step(model.f.params_mut(), &grad.f);
            opt_g.step(model.g.params_mut(), &grad.g);
            opt_m.step(&mut model.m, &grad.m);
            if let (Some(j), Some(opt), Some(ng)) = (joint.as_deref_mut(), opt_net.as_mut(), net_grad) {
                opt.step(j.net.params_mut(), &ng);
            }
        }
        let mean = epoch_loss / images.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Caches `M g(a_c)` for a fixed candidate set.
pub struct Classifier<'m> {
    model: &'m DeviseModel,
    /// Sorted by class id, so the first maximum wins ties.
    candidates: Vec<(String, Vec<f64>)>,
}

impl<'m> Classifier<'m> {
    pub fn new(model: &'m DeviseModel, candidates: &BTreeSet<String>, reps: &Representations) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Config("empty candidate set".into()));
        }
        let candidates = candidates
            .iter()
            .map(|c| {
                let r = reps.get(c).ok_or_else(|| Error::MissingClass(c.clone()))?;
                if r.vector.len() != model.repr_dim() {
                    return Err(Error::Shape(format!("representation of `{c}` has dim {}", r.vector.len())));
                }
                Ok((c.clone(), model.m_times(&model.g.forward(&r.vector))))
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, candidates })
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<(&str, f64)>> {
        if x.len() != self.model.image_dim() {
            return Err(Error::Shape(format!("image has {} features, model expects {}", x.len(), self.model.image_dim())));
        }
        let fx = self.model.f.forward(x);
        Ok(self.candidates.iter().map(|(c, mg)| (c.as_str(), dot(&fx, mg))).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        Ok(argmax(&self.scores(x)?))
    }
}

/// First maximum in class-id order.
pub fn argmax<'a>(scores: &[(&'a str, f64)]) -> &'a str {
    let mut best = scores[0];
    for &(c, s) in &scores[1..] {
        if s > best.1 || (s == best.1 && c < best.0) {
            best = (c, s);
        }
    }
    best.0
}

pub fn predict(model: &DeviseModel, x: &[f64], candidates: &BTreeSet<String>, reps: &Representations) -> Result<String> {
    Ok(Classifier::new(model, candidates, reps)?.predict(x)?.to_string())
}
