//! K-means over all sentence embeddings, plus the per-cluster summaries an
//! annotator reads when deciding which clusters carry visual content.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_json, write_json, Corpus};
use crate::error::{Error, Result};
use crate::vecmath::{norm, squared_distance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Cluster unit-normalized embeddings instead of raw ones.
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 100,
            seed: 0,
            max_iter: 300,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub model_id: String,
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<String, usize>,
    pub objective: f64,
    pub seed: u64,
    pub iterations_run: usize,
    pub normalized: bool,
    /// Objective after each assignment step, starting from the seeding.
    pub objective_history: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_of(&self, sentence_id: &str) -> Option<usize> {
        self.assignment.get(sentence_id).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignment.values() {
            sizes[c] += 1;
        }
        sizes
    }

    fn compute_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.k.to_le_bytes());
        hasher.update(self.seed.to_le_bytes());
        hasher.update([self.normalized as u8]);
        for c in &self.centroids {
            for v in c {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        for (id, c) in &self.assignment {
            hasher.update(id.as_bytes());
            hasher.update([0]);
            hasher.update(c.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    /// Checks that this model was fit on `corpus`.
    pub fn check_bound(&self, corpus: &Corpus) -> Result<()> {
        if self.dim != corpus.dim() || self.assignment.len() != corpus.num_sentences() {
            return Err(Error::Invalid(format!(
                "cluster model {} does not match the corpus",
                self.model_id
            )));
        }
        for s in corpus.sentences() {
            if !self.assignment.contains_key(&s.sentence_id) {
                return Err(Error::Invalid(format!(
                    "sentence `{}` has no cluster assignment",
                    s.sentence_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: ClusterModel = read_json(path.as_ref())?;
        if model.centroids.len() != model.k || model.assignment.values().any(|&c| c >= model.k) {
            return Err(Error::Shape("cluster model is internally inconsistent".into()));
        }
        Ok(model)
    }

    /// The space the model clusters in.
    pub fn project(&self, embedding: &[f64]) -> Vec<f64> {
        if self.normalized {
            unit(embedding)
        } else {
            embedding.to_vec()
        }
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, later centres drawn with
/// probability proportional to squared distance from the nearest chosen centre.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` past the last partial sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &points[pick]));
        }
    }
    centroids
}

#[derive(Debug, Clone)]
pub struct LloydRun {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points.par_iter().map(|p| nearest(p, centroids)).collect()
}

/// Lloyd iterations from fixed initial centroids. Empty clusters keep their
/// previous centroid so indices stay stable.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iter: usize) -> LloydRun {
    let mut centroids = init;
    let dim = centroids.first().map_or(0, Vec::len);
    let scored = assign(points, &centroids);
    let mut labels: Vec<usize> = scored.iter().map(|s| s.0).collect();
    let mut objective: f64 = scored.iter().map(|s| s.1).sum();
    let mut history = vec![objective];
    let mut iterations = 0;
    for it in 1..=max_iter {
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
            if count > 0 {
                centroids[c] = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
        let scored = assign(points, &centroids);
        let next: Vec<usize> = scored.iter().map(|s| s.0).collect();
        let next_objective: f64 = scored.iter().map(|s| s.1).sum();
        assert!(
            next_objective <= objective * (1.0 + 1e-12) + 1e-300,
            "k-means objective increased: {objective} -> {next_objective}"
        );
        objective = next_objective;
        history.push(objective);
        iterations = it;
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
    }
    LloydRun {
        centroids,
        assignment: labels,
        objective,
        iterations,
        history,
    }
}

pub fn kmeans_fit(corpus: &Corpus, config: &KMeansConfig) -> Result<ClusterModel> {
    let n = corpus.num_sentences();
    if config.k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    if config.k > n {
        return Err(Error::Config(format!("K = {} exceeds sentence count {n}", config.k)));
    }
    if config.max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    let points: Vec<Vec<f64>> = corpus
        .sentences()
        .map(|s| {
            if config.normalize {
                unit(&s.embedding)
            } else {
                s.embedding.clone()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = kmeans_plus_plus(&points, config.k, &mut rng);
    let run = lloyd(&points, init, config.max_iter);
    let assignment = corpus
        .sentences()
        .zip(&run.assignment)
        .map(|(s, &c)| (s.sentence_id.clone(), c))
        .collect();
    let mut model = ClusterModel {
        model_id: String::new(),
        k: config.k,
        dim: corpus.dim(),
        centroids: run.centroids,
        assignment,
        objective: run.objective,
        seed: config.seed,
        iterations_run: run.iterations,
        normalized: config.normalize,
        objective_history: run.history,
    };
    model.model_id = model.compute_id();
    log::info!(
        "k-means K={} converged after {} iterations, objective {:.6}",
        model.k,
        model.iterations_run,
        model.objective
    );
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub sentence_id: String,
    pub class_id: String,
    pub section: String,
    pub text: Option<String>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_index: usize,
    pub size: usize,
    /// Nearest members first.
    pub exemplars: Vec<Exemplar>,
    /// Section histogram, most frequent first.
    pub top_sections: Vec<(String, usize)>,
}

pub fn summarize_clusters(model: &ClusterModel, corpus: &Corpus, n_exemplars: usize) -> Result<Vec<ClusterSummary>> {
    if n_exemplars == 0 {
        return Err(Error::Config("n_exemplars must be positive".into()));
    }
    model.check_bound(corpus)?;
    let mut members: Vec<Vec<Exemplar>> = vec![Vec::new(); model.k];
    let mut sections: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); model.k];
    for s in corpus.sentences() {
        let c = model.assignment[&s.sentence_id];
        let distance = squared_distance(&model.project(&s.embedding), &model.centroids[c]).sqrt();
        members[c].push(Exemplar {
            sentence_id: s.sentence_id.clone(),
            class_id: s.class_id.clone(),
            section: s.section.clone(),
            text: s.text.clone(),
            distance,
        });
        *sections[c].entry(s.section.clone()).or_insert(0) += 1;
    }
    Ok(members
        .into_iter()
        .zip(sections)
        .enumerate()
        .map(|(cluster_index, (mut ex, hist))| {
            let size = ex.len();
            ex.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.sentence_id.cmp(&b.sentence_id)));
            ex.truncate(n_exemplars);
            let mut top_sections: Vec<(String, usize)> = hist.into_iter().collect();
            top_sections.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ClusterSummary {
                cluster_index,
                size,
                exemplars: ex,
                top_sections,
            }
        })
        .collect())
}
