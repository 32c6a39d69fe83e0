//! Synthetic corpora with known ground truth.
//!
//! Every class gets a latent prototype. Visual sentences and image features
//! are noisy copies of the unit-length prototype; non-visual sentences come from a
//! shared offset plus a class-specific topic that says nothing about the
//! images. Visual sentences mostly sit under visual section headers, with
//! some scattered into non-visual sections where only clustering finds them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, ClusterModel, KMeansConfig};
use crate::corpus::{export_corpus, export_images, write_json, write_split, ClassSplit, Corpus, HopTag, ImageRecord, Sentence, SUMMARY_SECTION};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::triage::{TriageLabels, Verdict};

pub const VISUAL_SECTIONS: [&str; 3] = ["Description", "Appearance", "Characteristics"];
pub const NONVISUAL_SECTIONS: [&str; 4] = ["History", "Mythology", "Etymology", "Behaviour"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub classes: usize,
    pub seen_fraction: f64,
    pub sentences_per_class: usize,
    pub visual_fraction: f64,
    /// Expected length of the noise added to visual sentences and image features.
    pub noise: f64,
    pub seed: u64,
    pub dim: usize,
    pub latent_dim: usize,
    /// Spread of non-visual sentences around their class topic.
    pub nonvisual_spread: f64,
    /// Expected length of the class-specific non-visual topic.
    pub topic_scale: f64,
    /// Fraction of visual sentences placed under non-visual headers.
    pub misplaced_visual: f64,
    pub train_images_per_class: usize,
    pub test_images_per_class: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            seen_fraction: 0.75,
            sentences_per_class: 30,
            visual_fraction: 0.4,
            noise: 0.5,
            seed: 0,
            dim: 32,
            latent_dim: 8,
            nonvisual_spread: 0.5,
            topic_scale: 1.0,
            misplaced_visual: 0.25,
            train_images_per_class: 20,
            test_images_per_class: 10,
        }
    }
}

impl FixtureSpec {
    pub fn num_seen(&self) -> usize {
        (self.classes as f64 * self.seen_fraction).round() as usize
    }

    pub fn num_visual(&self) -> usize {
        (self.sentences_per_class as f64 * self.visual_fraction).round() as usize
    }

    fn validate(&self) -> Result<()> {
        let seen = self.num_seen();
        if self.classes < 3 || seen < 2 || seen >= self.classes {
            return Err(Error::Config(format!(
                "need at least two seen and one unseen class, got {seen} of {}",
                self.classes
            )));
        }
        if self.sentences_per_class < 2 || self.num_visual() == 0 || self.num_visual() >= self.sentences_per_class {
            return Err(Error::Config("each class needs both visual and non-visual sentences".into()));
        }
        if self.dim == 0 || self.latent_dim == 0 || self.latent_dim > self.dim {
            return Err(Error::Config("latent dimension must be in 1..=dim".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.misplaced_visual) {
            return Err(Error::Config("noise must be non-negative and misplaced_visual in [0, 1]".into()));
        }
        if self.train_images_per_class == 0 || self.test_images_per_class == 0 {
            return Err(Error::Config("image counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub spec: FixtureSpec,
    pub visual_sentences: BTreeSet<String>,
    pub visual_sections: Vec<String>,
    pub nonvisual_sections: Vec<String>,
    pub train_tallies: BTreeMap<String, usize>,
    pub test_tallies: BTreeMap<String, usize>,
    pub hop_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub corpus: Corpus,
    pub train_images: Vec<ImageRecord>,
    pub test_images: Vec<ImageRecord>,
    pub split: ClassSplit,
    pub manifest: FixtureManifest,
    pub prototypes: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub corpus: PathBuf,
    pub train_images: PathBuf,
    pub test_images: PathBuf,
    pub split: PathBuf,
    pub manifest: PathBuf,
    /// Present when written with [`Fixture::write_with_labels`].
    pub cluster_model: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

/// Cluster count used for fixtures: one cluster per class is enough to
/// separate visual from non-visual sentences at the default noise level.
pub const FIXTURE_CLUSTERS: usize = 20;

impl FixturePaths {
    /// Pipeline settings that suit the synthetic data: the fixture is tiny,
    /// so the alignment model uses narrow hidden layers and a larger step.
    pub fn pipeline_config(&self, out_dir: impl Into<PathBuf>) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            corpus: self.corpus.clone(),
            train_images: self.train_images.clone(),
            test_images: self.test_images.clone(),
            split: self.split.clone(),
            labels: self.labels.clone(),
            cluster_model: self.cluster_model.clone(),
            out_dir: out_dir.into(),
            gzsl: true,
            hops: true,
            ..Default::default()
        };
        cfg.kmeans.k = FIXTURE_CLUSTERS;
        cfg.zsl.hidden = Some(128);
        cfg.zsl.epochs = 100;
        cfg.zsl.step_size = 1e-3;
        cfg
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn class_name(i: usize) -> String {
    format!("class_{i:02}")
}

const VISUAL_TEXT: [&str; 4] = [
    "The {} has a {} coat with distinct markings.",
    "Its body is {} and the tail is long.",
    "Adults of the {} are {} with pale patches.",
    "The surface is {} and slightly glossy.",
];
const NONVISUAL_TEXT: [&str; 4] = [
    "The {} was first described in {}.",
    "Legends about it date back to {}.",
    "The name {} comes from an old word recorded in {}.",
    "Trade in it expanded around {}.",
];
const COLOURS: [&str; 5] = ["red", "grey", "striped", "brown", "spotted"];

fn fill(template: &str, a: &str, b: &str) -> String {
    template.replacen("{}", a, 1).replacen("{}", b, 1)
}

pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis: Vec<Vec<f64>> = (0..spec.dim)
        .map(|_| gaussian(&mut rng, spec.latent_dim, 1.0 / (spec.latent_dim as f64).sqrt()))
        .collect();
    // vector-valued scales below are relative to the unit-norm prototypes
    let unit = 1.0 / (spec.dim as f64).sqrt();
    let offset = gaussian(&mut rng, spec.dim, unit);
    let classes: Vec<String> = (0..spec.classes).map(class_name).collect();
    let mut order = classes.clone();
    order.shuffle(&mut rng);
    let seen: BTreeSet<String> = order[..spec.num_seen()].iter().cloned().collect();
    let unseen_list: Vec<String> = order[spec.num_seen()..].to_vec();
    let unseen: BTreeSet<String> = unseen_list.iter().cloned().collect();

    // nested hop tags over the unseen classes
    let n_unseen = unseen_list.len();
    let two = n_unseen.div_ceil(3);
    let three = (2 * n_unseen).div_ceil(3);
    let hop_tags: BTreeMap<String, HopTag> = unseen_list
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let tag = if i < two {
                HopTag::TwoHop
            } else if i < three {
                HopTag::ThreeHop
            } else {
                HopTag::All
            };
            (c.clone(), tag)
        })
        .collect();

    let n_visual = spec.num_visual();
    let mut sentences = Vec::new();
    let mut visual_ids = BTreeSet::new();
    let mut prototypes = BTreeMap::new();
    let mut train_images = Vec::new();
    let mut test_images = Vec::new();
    for class in &classes {
        let z = gaussian(&mut rng, spec.latent_dim, 1.0);
        let mut proto: Vec<f64> = basis.iter().map(|row| row.iter().zip(&z).map(|(b, zi)| b * zi).sum()).collect();
        let len = crate::vecmath::norm(&proto).max(f64::MIN_POSITIVE);
        proto.iter_mut().for_each(|v| *v /= len);
        let topic = add(&offset, &gaussian(&mut rng, spec.dim, spec.topic_scale * unit));
        let readable = class.replace('_', " ");

        // first paragraph: one visual then one non-visual sentence
        let mut rest: Vec<bool> = (2..spec.sentences_per_class).map(|j| j <= n_visual).collect();
        rest.shuffle(&mut rng);
        let mut is_visual = vec![true, false];
        is_visual.extend(rest);

        for (j, &visual) in is_visual.iter().enumerate() {
            let sentence_id = format!("{class}-{j:03}");
            let section = if j < 2 {
                SUMMARY_SECTION.to_string()
            } else if visual && rng.random::<f64>() >= spec.misplaced_visual {
                VISUAL_SECTIONS[rng.random_range(0..VISUAL_SECTIONS.len())].to_string()
            } else {
                NONVISUAL_SECTIONS[rng.random_range(0..NONVISUAL_SECTIONS.len())].to_string()
            };
            let (embedding, text) = if visual {
                let colour = COLOURS[rng.random_range(0..COLOURS.len())];
                let t = VISUAL_TEXT[j % VISUAL_TEXT.len()];
                (add(&proto, &gaussian(&mut rng, spec.dim, spec.noise * unit)), fill(t, &readable, colour))
            } else {
                let year = 1600 + rng.random_range(0..400);
                let t = NONVISUAL_TEXT[j % NONVISUAL_TEXT.len()];
                (
                    add(&topic, &gaussian(&mut rng, spec.dim, spec.nonvisual_spread * unit)),
                    fill(t, &readable, &year.to_string()),
                )
            };
            if visual {
                visual_ids.insert(sentence_id.clone());
            }
            sentences.push(Sentence {
                sentence_id,
                class_id: class.clone(),
                section,
                position: j as u64,
                text: Some(text),
                embedding,
            });
        }

        let image = |split: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<ImageRecord> {
            (0..n)
                .map(|i| ImageRecord {
                    image_id: format!("{class}-{split}-{i:03}"),
                    class_id: class.clone(),
                    features: add(&proto, &gaussian(rng, spec.dim, spec.noise * unit)),
                })
                .collect()
        };
        if seen.contains(class) {
            train_images.extend(image("train", spec.train_images_per_class, &mut rng));
        }
        test_images.extend(image("test", spec.test_images_per_class, &mut rng));
        prototypes.insert(class.clone(), proto);
    }

    let corpus = Corpus::from_sentences(sentences)?;
    let mut split = ClassSplit::new(seen, unseen)?;
    split.hop_tags = Some(hop_tags.clone());
    split.validate()?;
    let mut hop_counts = BTreeMap::new();
    for task in HopTag::ALL {
        let n = hop_tags
            .values()
            .filter(|t| t.within(task))
            .count();
        hop_counts.insert(task.as_str().to_string(), n * spec.test_images_per_class);
    }
    let manifest = FixtureManifest {
        spec: spec.clone(),
        visual_sentences: visual_ids,
        visual_sections: VISUAL_SECTIONS.iter().map(|s| s.to_string()).collect(),
        nonvisual_sections: NONVISUAL_SECTIONS.iter().map(|s| s.to_string()).collect(),
        train_tallies: crate::corpus::image_tallies(&train_images),
        test_tallies: crate::corpus::image_tallies(&test_images),
        hop_counts,
    };
    Ok(Fixture {
        corpus,
        train_images,
        test_images,
        split,
        manifest,
        prototypes,
    })
}

impl Fixture {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<FixturePaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = FixturePaths {
            corpus: dir.join("corpus.jsonl"),
            train_images: dir.join("images_train.jsonl"),
            test_images: dir.join("images_test.jsonl"),
            split: dir.join("split.json"),
            manifest: dir.join("fixture_manifest.json"),
            cluster_model: None,
            labels: None,
        };
        export_corpus(&self.corpus, &paths.corpus)?;
        export_images(&self.train_images, &paths.train_images)?;
        export_images(&self.test_images, &paths.test_images)?;
        write_split(&self.split, &paths.split)?;
        write_json(&paths.manifest, &self.manifest)?;
        Ok(paths)
    }

    /// Writes the fixture plus a fitted cluster model and the labels a
    /// perfect annotator would give, so label-dependent modes run unattended.
    pub fn write_with_labels(&self, dir: impl AsRef<Path>, kmeans: &KMeansConfig) -> Result<FixturePaths> {
        let dir = dir.as_ref();
        let mut paths = self.write(dir)?;
        let model = kmeans_fit(&self.corpus, kmeans)?;
        let labels = oracle_labels(&self.corpus, &model, &self.manifest)?;
        let (model_path, labels_path) = (dir.join("cluster_model.json"), dir.join("labels.json"));
        model.save(&model_path)?;
        labels.save_atomic(&labels_path)?;
        paths.cluster_model = Some(model_path);
        paths.labels = Some(labels_path);
        Ok(paths)
    }

    pub fn unseen_test_images(&self) -> Vec<ImageRecord> {
        self.test_images
            .iter()
            .filter(|im| self.split.unseen.contains(&im.class_id))
            .cloned()
            .collect()
    }

    pub fn seen_test_images(&self) -> Vec<ImageRecord> {
        self.test_images
            .iter()
            .filter(|im| self.split.seen.contains(&im.class_id))
            .cloned()
            .collect()
    }
}

/// Labels a perfect annotator would give: sections by construction, clusters
/// by majority of visual members.
pub fn oracle_labels(corpus: &Corpus, model: &ClusterModel, manifest: &FixtureManifest) -> Result<TriageLabels> {
    let mut labels = TriageLabels::new(corpus, Some(model));
    for s in &manifest.visual_sections {
        if labels.sections.contains_key(s) {
            labels.label_section(s, Verdict::Visual)?;
        }
    }
    for s in &manifest.nonvisual_sections {
        if labels.sections.contains_key(s) {
            labels.label_section(s, Verdict::Nonvisual)?;
        }
    }
    let mut visual = vec![0usize; model.k];
    let sizes = model.sizes();
    for (id, &c) in &model.assignment {
        if manifest.visual_sentences.contains(id) {
            visual[c] += 1;
        }
    }
    for c in 0..model.k {
        let verdict = if sizes[c] > 0 && 2 * visual[c] > sizes[c] {
            Verdict::Visual
        } else {
            Verdict::Nonvisual
        };
        labels.label_cluster(c, verdict)?;
    }
    Ok(labels)
}

/// Fraction of sentences whose cluster's majority (visual vs non-visual)
/// matches their own ground truth.
pub fn visual_purity(model: &ClusterModel, manifest: &FixtureManifest) -> f64 {
    let mut visual = vec![0usize; model.k];
    let sizes = model.sizes();
    for (id, &c) in &model.assignment {
        if manifest.visual_sentences.contains(id) {
            visual[c] += 1;
        }
    }
    let agree: usize = (0..model.k).map(|c| visual[c].max(sizes[c] - visual[c])).sum();
    agree as f64 / model.assignment.len() as f64
}
