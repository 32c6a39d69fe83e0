//! End-to-end runs: ingest, cluster, filter, represent, align, evaluate.
//!
//! Every artifact is written under the output directory and recorded in
//! `manifest.json` together with the content hashes of the inputs it was
//! derived from and the seeds used. The manifest holds no timestamps or
//! absolute output paths, so identical configurations give identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{kmeans_fit, ClusterModel, KMeansConfig};
use crate::corpus::{ingest_corpus, ingest_images, read_json, read_split, write_json, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_gzsl, hop_breakdown, EvalReport};
use crate::filter::{apply_filter, filter_stats, write_filtered, FilterMode};
use crate::repr::{
    build_representations, class_docs, ingest_external_representations, train_weightnet, write_representations, ReprKind,
    ReprTrainConfig, WeightNet,
};
use crate::triage::TriageLabels;
use crate::zsl::{train_devise, DeviseModel, JointRepr, ZslTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub train_images: PathBuf,
    pub test_images: PathBuf,
    pub split: PathBuf,
    pub labels: Option<PathBuf>,
    /// Reuse a fitted cluster model instead of fitting one.
    pub cluster_model: Option<PathBuf>,
    pub external_repr: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub kmeans: KMeansConfig,
    pub mode: FilterMode,
    pub kind: ReprKind,
    pub repr: ReprTrainConfig,
    pub zsl: ZslTrainConfig,
    pub gzsl: bool,
    pub hops: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            train_images: PathBuf::from("images_train.jsonl"),
            test_images: PathBuf::from("images_test.jsonl"),
            split: PathBuf::from("split.json"),
            labels: None,
            cluster_model: None,
            external_repr: None,
            out_dir: PathBuf::from("out"),
            kmeans: KMeansConfig::default(),
            mode: FilterMode::VisSecClu,
            kind: ReprKind::Weighted,
            repr: ReprTrainConfig::default(),
            zsl: ZslTrainConfig::default(),
            gzsl: false,
            hops: false,
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML or JSON config, chosen by file extension. Relative
    /// paths inside the file are taken relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            read_json(path)?
        } else {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    /// Prefixes every relative path with `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.corpus, &mut self.train_images, &mut self.test_images, &mut self.split, &mut self.out_dir] {
            fix(p);
        }
        for p in [&mut self.labels, &mut self.cluster_model, &mut self.external_repr].into_iter().flatten() {
            fix(p);
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Names of manifest inputs or earlier outputs this stage read.
    pub reads: Vec<String>,
    /// Output file name to content hash.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub mode: FilterMode,
    pub kind: ReprKind,
    pub repr: ReprTrainConfig,
    pub zsl: ZslTrainConfig,
    pub kmeans: Option<KMeansConfig>,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub report: EvalReport,
    pub gzsl: Option<EvalReport>,
    pub hops: Option<BTreeMap<String, EvalReport>>,
    pub manifest_path: PathBuf,
}

struct Recorder<'a> {
    out_dir: &'a Path,
    stages: Vec<StageRecord>,
}

impl Recorder<'_> {
    fn record(&mut self, stage: &str, reads: &[&str], outputs: &[&str], seed: Option<u64>) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|name| Ok((name.to_string(), sha256_file(&self.out_dir.join(name))?)))
            .collect::<Result<_>>()?;
        self.stages.push(StageRecord {
            stage: stage.into(),
            reads: reads.iter().map(|s| s.to_string()).collect(),
            outputs,
            seed,
        });
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    let out = config.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if config.mode.needs_labels() && config.labels.is_none() {
        return Err(Error::Stage {
            stage: "filter",
            source: Box::new(Error::Config("triage labels required".into())),
        });
    }

    let mut inputs = BTreeMap::new();
    let mut hash_input = |name: &str, path: &Path| -> Result<()> {
        inputs.insert(name.to_string(), sha256_file(path)?);
        Ok(())
    };
    stage("ingest", (|| {
        hash_input("corpus", &config.corpus)?;
        hash_input("train_images", &config.train_images)?;
        hash_input("test_images", &config.test_images)?;
        hash_input("split", &config.split)?;
        if let Some(p) = &config.labels {
            hash_input("labels", p)?;
        }
        if let Some(p) = &config.cluster_model {
            hash_input("cluster_model", p)?;
        }
        if let Some(p) = &config.external_repr {
            hash_input("external_repr", p)?;
        }
        Ok(())
    })())?;

    let corpus = stage("ingest", ingest_corpus(&config.corpus))?;
    let split = stage("ingest", read_split(&config.split))?;
    let train_images = stage("ingest", ingest_images(&config.train_images, Some(&split)))?;
    let test_images = stage("ingest", ingest_images(&config.test_images, Some(&split)))?;
    for c in split.all_classes() {
        if corpus.document(&c).is_none() {
            return Err(Error::Stage {
                stage: "ingest",
                source: Box::new(Error::MissingClass(c)),
            });
        }
    }

    let mut rec = Recorder {
        out_dir: out,
        stages: Vec::new(),
    };
    let mut seeds = BTreeMap::new();

    let uses_clusters = matches!(config.mode, FilterMode::VisClu | FilterMode::VisSecClu);
    let model: Option<ClusterModel> = if uses_clusters {
        let model = match &config.cluster_model {
            Some(p) => stage("cluster", ClusterModel::load(p))?,
            None => {
                seeds.insert("kmeans".to_string(), config.kmeans.seed);
                stage("cluster", kmeans_fit(&corpus, &config.kmeans))?
            }
        };
        stage("cluster", model.save(out.join("cluster_model.json")))?;
        rec.record("cluster", &["corpus"], &["cluster_model.json"], Some(model.seed))?;
        Some(model)
    } else {
        None
    };

    let labels = match &config.labels {
        Some(p) if config.mode.needs_labels() => Some(stage("filter", TriageLabels::load(p))?),
        _ => None,
    };
    let filtered = stage("filter", apply_filter(&corpus, labels.as_ref(), model.as_ref(), config.mode))?;
    stage("filter", write_filtered(&filtered, out.join("filtered.jsonl")))?;
    stage("filter", write_json(&out.join("filter_stats.json"), &filter_stats(&filtered)))?;
    rec.record("filter", &["corpus", "labels", "cluster_model.json"], &["filtered.jsonl", "filter_stats.json"], None)?;

    let all_classes = split.all_classes();
    let mut joint = None;
    let mut reps = match config.kind {
        ReprKind::Average => stage("repr", build_representations(&corpus, &filtered, ReprKind::Average, None, config.repr.scale_by_count))?,
        ReprKind::Weighted => {
            seeds.insert("repr".to_string(), config.repr.seed);
            let docs = stage("repr", class_docs(&filtered, &corpus, Some(&all_classes)))?;
            let (net, log) = stage("repr", train_weightnet(&docs, corpus.dim(), &config.repr))?;
            stage("repr", net.save(out.join("weightnet.json")))?;
            stage("repr", write_json(&out.join("repr_log.json"), &log))?;
            rec.record("repr-train", &["filtered.jsonl"], &["weightnet.json", "repr_log.json"], Some(config.repr.seed))?;
            stage("repr", build_representations(&corpus, &filtered, ReprKind::Weighted, Some(&net), config.repr.scale_by_count))?
        }
        ReprKind::WeightedDirect => {
            seeds.insert("repr".to_string(), config.repr.seed);
            let docs = stage("repr", class_docs(&filtered, &corpus, Some(&all_classes)))?;
            joint = Some(JointRepr {
                net: stage("repr", WeightNet::random(corpus.dim(), &config.repr.hidden, config.repr.seed))?,
                docs: docs.into_iter().map(|d| (d.class_id.clone(), d)).collect(),
                scale_by_count: config.repr.scale_by_count,
            });
            BTreeMap::new()
        }
        ReprKind::External => {
            let path = config
                .external_repr
                .as_ref()
                .ok_or_else(|| Error::Config("external representation file required".into()))?;
            stage("repr", ingest_external_representations(path, Some(&all_classes)))?
        }
    };

    seeds.insert("zsl".to_string(), config.zsl.seed);
    let repr_dim = match (&joint, reps.values().next()) {
        (Some(_), _) => corpus.dim(),
        (None, Some(r)) => r.vector.len(),
        (None, None) => return Err(Error::Empty("no representations".into())),
    };
    let image_dim = train_images[0].features.len();
    let mut model_zsl = stage("train", DeviseModel::new(image_dim, repr_dim, &config.zsl))?;
    let train_log = stage("train", train_devise(&mut model_zsl, &train_images, &reps, &split, &config.zsl, joint.as_mut()))?;
    if let Some(j) = &joint {
        reps = j.representations();
        stage("train", j.net.save(out.join("weightnet.json")))?;
    }
    stage("repr", write_representations(&reps, out.join("representations.jsonl")))?;
    rec.record("repr", &["filtered.jsonl", "weightnet.json"], &["representations.jsonl"], None)?;
    stage("train", model_zsl.save(&config.zsl, out.join("model.json")))?;
    stage("train", write_json(&out.join("train_log.json"), &train_log))?;
    let mut train_outputs = vec!["model.json", "train_log.json"];
    if joint.is_some() {
        train_outputs.push("weightnet.json");
    }
    rec.record("train", &["representations.jsonl", "train_images"], &train_outputs, Some(config.zsl.seed))?;

    let unseen: Vec<ImageRecord> = test_images.iter().filter(|im| split.unseen.contains(&im.class_id)).cloned().collect();
    let seen_test: Vec<ImageRecord> = test_images.iter().filter(|im| split.seen.contains(&im.class_id)).cloned().collect();
    let report = stage("eval", evaluate(&model_zsl, &unseen, &reps, &split.unseen, &split, "unseen"))?;
    stage("eval", write_json(&out.join("report.json"), &report))?;
    let mut eval_outputs = vec!["report.json"];
    let gzsl = if config.gzsl {
        let r = stage("eval", evaluate_gzsl(&model_zsl, &seen_test, &unseen, &reps, &split))?;
        stage("eval", write_json(&out.join("report_gzsl.json"), &r))?;
        eval_outputs.push("report_gzsl.json");
        Some(r)
    } else {
        None
    };
    let hops = if config.hops {
        let h: BTreeMap<String, EvalReport> = stage("eval", hop_breakdown(&model_zsl, &unseen, &reps, &split))?
            .into_iter()
            .map(|(k, v)| (k.as_str().to_string(), v))
            .collect();
        stage("eval", write_json(&out.join("report_hops.json"), &h))?;
        eval_outputs.push("report_hops.json");
        Some(h)
    } else {
        None
    };
    rec.record("eval", &["model.json", "representations.jsonl", "test_images"], &eval_outputs, None)?;

    let manifest = Manifest {
        inputs,
        seeds,
        mode: config.mode,
        kind: config.kind,
        repr: config.repr.clone(),
        zsl: config.zsl.clone(),
        kmeans: uses_clusters.then_some(config.kmeans),
        stages: rec.stages,
    };
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    log::info!(
        "pipeline done: per-class top-1 {:.4} over {} unseen classes",
        report.per_class_top1,
        report.per_class.len()
    );
    Ok(PipelineOutput {
        manifest,
        report,
        gzsl,
        hops,
        manifest_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub margin: f64,
    pub per_class_top1: f64,
    pub out_dir: String,
}

/// Runs the pipeline over a grid of thresholds and margins, one
/// sub-directory per grid point, and writes `sweep.json`.
pub fn run_sweep(base: &PipelineConfig, taus: &[f64], margins: &[f64]) -> Result<Vec<SweepPoint>> {
    if taus.is_empty() || margins.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let mut points = Vec::new();
    for &tau in taus {
        for &margin in margins {
            let name = format!("tau{tau}_margin{margin}");
            let mut cfg = base.clone();
            cfg.repr.tau = tau;
            cfg.zsl.margin = margin;
            cfg.out_dir = base.out_dir.join(&name);
            let out = run_pipeline(&cfg)?;
            points.push(SweepPoint {
                tau,
                margin,
                per_class_top1: out.report.per_class_top1,
                out_dir: name,
            });
        }
    }
    write_json(&base.out_dir.join("sweep.json"), &points)?;
    Ok(points)
}
