use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use visex_client::TriageClient;
use visex_core::api::RecomputeRequest;
use visex_core::cluster::{kmeans_fit, summarize_clusters, ClusterModel};
use visex_core::corpus::{image_tallies, ingest_corpus, ingest_images, read_split};
use visex_core::error::Error;
use visex_core::eval::{evaluate, evaluate_gzsl, hop_breakdown};
use visex_core::filter::{apply_filter, filter_stats, read_filtered, write_filtered};
use visex_core::fixture::{generate_fixture, FixtureSpec, FIXTURE_CLUSTERS};
use visex_core::pipeline::{run_pipeline, run_sweep, PipelineConfig};
use visex_core::repr::{build_representations, class_docs, read_representations, train_weightnet, write_representations, ReprKind};
use visex_core::triage::TriageLabels;
use visex_core::zsl::{train_devise, DeviseModel};
use visex_server::{ServiceConfig, TriageState};

use crate::args::*;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn or_default(given: Option<PathBuf>, cfg: &PipelineConfig, name: &str) -> PathBuf {
    given.unwrap_or_else(|| cfg.out_dir.join(name))
}

fn required(given: Option<PathBuf>, fallback: Option<&PathBuf>, flag: &str) -> Result<PathBuf> {
    given
        .or_else(|| fallback.cloned())
        .ok_or_else(|| Error::Config(format!("--{flag} is required")).into())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

#[derive(Serialize)]
struct IngestSummary {
    classes: usize,
    sentences: usize,
    dim: usize,
    sections: BTreeMap<String, usize>,
    images: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn ingest(mut cfg: PipelineConfig, a: IngestArgs) -> Result<()> {
    if let Some(p) = a.corpus {
        cfg.corpus = p;
    }
    let corpus = ingest_corpus(&cfg.corpus)?;
    let split = match a.split {
        Some(p) => Some(read_split(p)?),
        None => None,
    };
    let mut images = BTreeMap::new();
    for path in &a.images {
        let records = ingest_images(path, split.as_ref())?;
        images.insert(path.display().to_string(), image_tallies(&records));
    }
    let summary = IngestSummary {
        classes: corpus.num_classes(),
        sentences: corpus.num_sentences(),
        dim: corpus.dim(),
        sections: corpus.section_counts(),
        images,
    };
    log::info!("{} classes, {} sentences, dim {}", summary.classes, summary.sentences, summary.dim);
    write_json(&or_default(a.out, &cfg, "ingest.json"), &summary)
}

pub fn cluster(mut cfg: PipelineConfig, a: ClusterArgs) -> Result<()> {
    if let Some(p) = a.corpus {
        cfg.corpus = p;
    }
    if let Some(k) = a.k {
        cfg.kmeans.k = k;
    }
    if let Some(s) = a.seed {
        cfg.kmeans.seed = s;
    }
    if let Some(m) = a.max_iter {
        cfg.kmeans.max_iter = m;
    }
    cfg.kmeans.normalize |= a.normalize;
    let corpus = ingest_corpus(&cfg.corpus)?;
    let model = kmeans_fit(&corpus, &cfg.kmeans)?;
    let out = or_default(a.out, &cfg, "cluster_model.json");
    ensure_parent(&out)?;
    model.save(&out)?;
    log::info!("wrote {} (model {})", out.display(), model.model_id);
    if let Some(path) = a.summary {
        write_json(&path, &summarize_clusters(&model, &corpus, a.exemplars)?)?;
    }
    Ok(())
}

pub fn serve(cfg: PipelineConfig, a: ServeArgs) -> Result<()> {
    let corpus = a.corpus.unwrap_or(cfg.corpus.clone());
    let model = required(a.model, cfg.cluster_model.as_ref(), "model")?;
    let labels = required(a.labels, cfg.labels.as_ref(), "labels")?;
    let config = ServiceConfig {
        out_dir: Some(a.recompute_dir.unwrap_or_else(|| cfg.out_dir.join("recompute"))),
        repr: cfg.repr.clone(),
        ..ServiceConfig::new(corpus, model, labels)
    };
    let state = Arc::new(TriageState::open(&config)?);
    runtime()?.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        visex_server::serve(listener, state, shutdown).await?;
        Ok(())
    })
}

pub fn filter(mut cfg: PipelineConfig, a: FilterArgs) -> Result<()> {
    if let Some(p) = a.corpus {
        cfg.corpus = p;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    let labels_path = a.labels.or(cfg.labels.clone());
    let model_path = a.model.or(cfg.cluster_model.clone());
    let corpus = ingest_corpus(&cfg.corpus)?;
    let labels = match (&labels_path, cfg.mode.needs_labels()) {
        (Some(p), true) => Some(TriageLabels::load(p)?),
        _ => None,
    };
    let model = match (&model_path, cfg.mode.uses_clusters()) {
        (Some(p), true) => Some(ClusterModel::load(p)?),
        _ => None,
    };
    let filtered = apply_filter(&corpus, labels.as_ref(), model.as_ref(), cfg.mode)?;
    let stats = filter_stats(&filtered);
    log::info!(
        "{}: kept {}/{} sentences ({:.1}%), {} fallback classes",
        cfg.mode,
        stats.kept,
        stats.total,
        100.0 * stats.retention,
        stats.fallback_classes.len()
    );
    let out = or_default(a.out, &cfg, "filtered.jsonl");
    ensure_parent(&out)?;
    write_filtered(&filtered, &out)?;
    write_json(&or_default(a.stats, &cfg, "filter_stats.json"), &stats)
}

pub fn repr(mut cfg: PipelineConfig, a: ReprArgs) -> Result<()> {
    if let Some(p) = a.corpus {
        cfg.corpus = p;
    }
    if let Some(k) = a.kind {
        cfg.kind = k;
    }
    let r = &mut cfg.repr;
    r.epsilon = a.epsilon.unwrap_or(r.epsilon);
    r.tau = a.tau.unwrap_or(r.tau);
    r.seed = a.seed.unwrap_or(r.seed);
    r.step_size = a.lr.unwrap_or(r.step_size);
    r.init_epochs = a.init_epochs.unwrap_or(r.init_epochs);
    r.margin_epochs = a.margin_epochs.unwrap_or(r.margin_epochs);
    r.validate()?;

    let corpus = ingest_corpus(&cfg.corpus)?;
    let filtered_path = or_default(a.filtered, &cfg, "filtered.jsonl");
    let mut filtered = read_filtered(&filtered_path, &corpus)?;
    if let Some(p) = &a.split {
        let classes = read_split(p)?.all_classes();
        filtered.retain(|c, _| classes.contains(c));
    }
    let reps = match cfg.kind {
        ReprKind::Average => build_representations(&corpus, &filtered, ReprKind::Average, None, cfg.repr.scale_by_count)?,
        ReprKind::Weighted => {
            let docs = class_docs(&filtered, &corpus, None)?;
            let (net, log) = train_weightnet(&docs, corpus.dim(), &cfg.repr)?;
            let net_path = or_default(a.weightnet, &cfg, "weightnet.json");
            ensure_parent(&net_path)?;
            net.save(&net_path)?;
            write_json(&net_path.with_file_name("repr_log.json"), &log)?;
            build_representations(&corpus, &filtered, ReprKind::Weighted, Some(&net), cfg.repr.scale_by_count)?
        }
        other => {
            return Err(Error::Config(format!("`visex repr` builds average or weighted vectors; `{other}` runs inside `visex pipeline`")).into())
        }
    };
    let out = or_default(a.out, &cfg, "representations.jsonl");
    ensure_parent(&out)?;
    write_representations(&reps, &out)?;
    log::info!("wrote {} {} representations to {}", reps.len(), cfg.kind, out.display());
    Ok(())
}

pub fn train(mut cfg: PipelineConfig, a: TrainArgs) -> Result<()> {
    let z = &mut cfg.zsl;
    z.margin = a.margin.unwrap_or(z.margin);
    z.step_size = a.lr.unwrap_or(z.step_size);
    z.epochs = a.epochs.unwrap_or(z.epochs);
    z.batch_size = a.batch_size.unwrap_or(z.batch_size);
    z.negatives = a.negatives.unwrap_or(z.negatives);
    z.architecture = a.architecture.unwrap_or(z.architecture);
    z.hidden = a.hidden.or(z.hidden);
    z.seed = a.seed.unwrap_or(z.seed);
    z.validate()?;

    let split = read_split(a.split.unwrap_or(cfg.split.clone()))?;
    let images = ingest_images(a.images.unwrap_or(cfg.train_images.clone()), Some(&split))?;
    let reps = read_representations(or_default(a.repr, &cfg, "representations.jsonl"))?;
    let repr_dim = reps.values().next().map(|r| r.vector.len()).ok_or_else(|| Error::Empty("representations".into()))?;
    let image_dim = images.first().map(|i| i.features.len()).ok_or_else(|| Error::Empty("training images".into()))?;
    let mut model = DeviseModel::new(image_dim, repr_dim, &cfg.zsl)?;
    let log = train_devise(&mut model, &images, &reps, &split, &cfg.zsl, None)?;
    let out = or_default(a.out, &cfg, "model.json");
    ensure_parent(&out)?;
    model.save(&cfg.zsl, &out)?;
    log::info!("wrote {}", out.display());
    write_json(&out.with_file_name("train_log.json"), &log)
}

pub fn eval(cfg: PipelineConfig, a: EvalArgs) -> Result<()> {
    let (model, _) = DeviseModel::load(or_default(a.model, &cfg, "model.json"))?;
    let reps = read_representations(or_default(a.repr, &cfg, "representations.jsonl"))?;
    let split = read_split(a.split.unwrap_or(cfg.split.clone()))?;
    let images = ingest_images(a.images.unwrap_or(cfg.test_images.clone()), Some(&split))?;
    let (seen, unseen): (Vec<_>, Vec<_>) = images.into_iter().partition(|im| split.seen.contains(&im.class_id));
    let report = match a.candidates {
        Candidates::Unseen => evaluate(&model, &unseen, &reps, &split.unseen, &split, "unseen")?,
        Candidates::All => evaluate_gzsl(&model, &seen, &unseen, &reps, &split)?,
    };
    match &report.gzsl {
        Some(g) => log::info!("U {:.4}  S {:.4}  H {:.4}", g.u, g.s, g.h),
        None => log::info!("per-class top-1 {:.4} over {} classes", report.per_class_top1, report.per_class.len()),
    }
    let default_name = if a.candidates == Candidates::All { "report_gzsl.json" } else { "report.json" };
    write_json(&or_default(a.out, &cfg, default_name), &report)?;
    if let Some(path) = a.hops {
        let hops: BTreeMap<&str, _> = hop_breakdown(&model, &unseen, &reps, &split)?
            .into_iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        write_json(&path, &hops)?;
    }
    Ok(())
}

pub fn pipeline(mut cfg: PipelineConfig, a: PipelineArgs) -> Result<()> {
    cfg.mode = a.mode.unwrap_or(cfg.mode);
    cfg.kind = a.kind.unwrap_or(cfg.kind);
    cfg.labels = a.labels.or(cfg.labels);
    if let Some(seed) = a.seed {
        cfg.kmeans.seed = seed;
        cfg.repr.seed = seed;
        cfg.zsl.seed = seed;
    }
    let out = run_pipeline(&cfg)?;
    log::info!("manifest: {}", out.manifest_path.display());
    Ok(())
}

pub fn fixture(cfg: PipelineConfig, a: FixtureArgs) -> Result<()> {
    let spec = FixtureSpec {
        classes: a.classes,
        seen_fraction: a.seen_fraction,
        sentences_per_class: a.sentences,
        visual_fraction: a.visual_fraction,
        noise: a.noise,
        dim: a.dim,
        seed: a.seed,
        ..Default::default()
    };
    let fx = generate_fixture(&spec)?;
    let dir = &cfg.out_dir;
    if !a.labels {
        fx.write(dir)?;
        log::info!("wrote fixture to {}", dir.display());
        return Ok(());
    }
    let mut kmeans = cfg.kmeans;
    kmeans.k = a.k.unwrap_or(FIXTURE_CLUSTERS);
    let paths = fx.write_with_labels(dir, &kmeans)?;
    // the config sits next to the data, so it names files relative to it
    let name = |p: &Path| PathBuf::from(p.file_name().expect("fixture files have names"));
    let relative = visex_core::fixture::FixturePaths {
        corpus: name(&paths.corpus),
        train_images: name(&paths.train_images),
        test_images: name(&paths.test_images),
        split: name(&paths.split),
        manifest: name(&paths.manifest),
        cluster_model: paths.cluster_model.as_deref().map(name),
        labels: paths.labels.as_deref().map(name),
    };
    let mut run = relative.pipeline_config("run");
    run.kmeans = kmeans;
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, toml::to_string_pretty(&run)?).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote fixture, oracle labels and {}", path.display());
    Ok(())
}

pub fn sweep(cfg: PipelineConfig, a: SweepArgs) -> Result<()> {
    let points = run_sweep(&cfg, &a.taus, &a.margins)?;
    for p in &points {
        log::info!("tau {} margin {}: per-class top-1 {:.4}", p.tau, p.margin, p.per_class_top1);
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn label(cmd: LabelCommand) -> Result<()> {
    runtime()?.block_on(async move {
        match cmd {
            LabelCommand::Section {
                name,
                verdict,
                expect_revision,
                service,
            } => print_json(&TriageClient::new(&service.url)?.label_section(&name, verdict, expect_revision).await?),
            LabelCommand::Cluster {
                index,
                verdict,
                expect_revision,
                service,
            } => print_json(&TriageClient::new(&service.url)?.label_cluster(index, verdict, expect_revision).await?),
            LabelCommand::Show { service } => print_json(&TriageClient::new(&service.url)?.labels().await?),
        }
    })
}

pub fn recompute(a: RecomputeArgs) -> Result<()> {
    runtime()?.block_on(async move {
        let client = TriageClient::new(&a.service.url)?;
        let summary = client
            .recompute(&RecomputeRequest {
                mode: a.mode,
                kind: a.kind,
            })
            .await?;
        print_json(&summary)
    })
}
