use std::path::Path;

use visex_core::cluster::KMeansConfig;
use visex_core::corpus::{export_corpus, ingest_corpus, ingest_images, read_split, Corpus, Sentence};
use visex_core::error::Error;
use visex_core::filter::FilterMode;
use visex_core::fixture::{generate_fixture, FixturePaths, FixtureSpec, FIXTURE_CLUSTERS};
use visex_core::pipeline::{run_pipeline, run_sweep, sha256_file, Manifest, PipelineConfig};
use visex_core::repr::{write_representations, ReprKind};

fn small_spec() -> FixtureSpec {
    FixtureSpec {
        classes: 8,
        sentences_per_class: 12,
        train_images_per_class: 6,
        test_images_per_class: 4,
        dim: 12,
        latent_dim: 4,
        ..Default::default()
    }
}

fn quick(paths: &FixturePaths, out: &Path) -> PipelineConfig {
    let mut cfg = paths.pipeline_config(out);
    cfg.kmeans.k = 8;
    cfg.zsl.hidden = Some(16);
    cfg.zsl.epochs = 5;
    cfg.repr.hidden = vec![8, 8];
    cfg.repr.init_epochs = 5;
    cfg.repr.margin_epochs = 5;
    cfg
}

fn written(spec: &FixtureSpec, dir: &Path) -> FixturePaths {
    let fx = generate_fixture(spec).unwrap();
    fx.write_with_labels(dir, &KMeansConfig { k: 8, ..Default::default() }).unwrap()
}

#[test]
fn generator_files_have_the_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec::default();
    let paths = generate_fixture(&spec).unwrap().write(dir.path()).unwrap();
    let corpus = ingest_corpus(&paths.corpus).unwrap();
    let split = read_split(&paths.split).unwrap();
    assert_eq!((corpus.num_classes(), corpus.num_sentences()), (20, 600));
    assert_eq!((split.seen.len(), split.unseen.len()), (15, 5));
    let train = ingest_images(&paths.train_images, Some(&split)).unwrap();
    let test = ingest_images(&paths.test_images, Some(&split)).unwrap();
    assert_eq!(train.len(), 15 * spec.train_images_per_class);
    assert_eq!(test.len(), 20 * spec.test_images_per_class);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&paths.manifest).unwrap()).unwrap();
    assert_eq!(manifest["visual_sentences"].as_array().unwrap().len(), 20 * 12);
    assert_eq!(manifest["hop_counts"]["all"], 5 * spec.test_images_per_class);
}

#[test]
fn hundred_image_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        classes: 10,
        seen_fraction: 0.5,
        train_images_per_class: 10,
        test_images_per_class: 10,
        ..Default::default()
    };
    let fx = generate_fixture(&spec).unwrap();
    let paths = fx.write(dir.path()).unwrap();
    let test = ingest_images(&paths.test_images, Some(&fx.split)).unwrap();
    assert_eq!(test.len(), 100);
    assert_eq!(test, fx.test_images);
}

#[test]
fn ten_by_twenty_corpus_round_trips() {
    let sentences = (0..10).flat_map(|c| {
        (0..20).map(move |j| Sentence {
            sentence_id: format!("c{c}-{j}"),
            class_id: format!("c{c}"),
            section: if j == 0 { "__summary__".into() } else { format!("sec{}", j % 3) },
            position: j,
            text: (j % 2 == 0).then(|| format!("sentence {j} of class {c}")),
            embedding: vec![c as f64 / 3.0, j as f64 * 1e-17, -0.1 * j as f64, f64::MIN_POSITIVE],
        })
    });
    let corpus = Corpus::from_sentences(sentences).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    export_corpus(&corpus, &p).unwrap();
    assert_eq!(ingest_corpus(&p).unwrap(), corpus);
    let q = dir.path().join("d.jsonl");
    export_corpus(&ingest_corpus(&p).unwrap(), &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn baseline_run_completes() {
    let dir = tempfile::tempdir().unwrap();
    let paths = written(&small_spec(), dir.path());
    let mut cfg = quick(&paths, &dir.path().join("out"));
    cfg.mode = FilterMode::No;
    cfg.kind = ReprKind::Average;
    cfg.labels = None;
    let out = run_pipeline(&cfg).unwrap();
    assert!((0.0..=1.0).contains(&out.report.per_class_top1));
    assert_eq!(out.report.per_class.len(), 2);
    assert!(out.gzsl.is_some() && out.hops.is_some());
    assert!(out.manifest.kmeans.is_none());
}

#[test]
fn label_modes_need_labels() {
    let dir = tempfile::tempdir().unwrap();
    let paths = written(&small_spec(), dir.path());
    let mut cfg = quick(&paths, &dir.path().join("out"));
    cfg.labels = None;
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("triage labels required"), "{err}");
    assert!(matches!(err, Error::Stage { stage: "filter", .. }));
}

#[test]
fn stage_errors_carry_the_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let paths = written(&small_spec(), dir.path());
    let mut cfg = quick(&paths, &dir.path().join("out"));
    cfg.corpus = dir.path().join("missing.jsonl");
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().starts_with("stage `ingest` failed"), "{err}");
    assert!(!err.is_validation());
}

#[test]
fn manifests_are_byte_identical_and_hashes_check_out() {
    let dir = tempfile::tempdir().unwrap();
    let paths = written(&small_spec(), dir.path());
    let a = run_pipeline(&quick(&paths, &dir.path().join("a"))).unwrap();
    let b = run_pipeline(&quick(&paths, &dir.path().join("b"))).unwrap();
    assert_eq!(std::fs::read(&a.manifest_path).unwrap(), std::fs::read(&b.manifest_path).unwrap());

    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&a.manifest_path).unwrap()).unwrap();
    assert_eq!(manifest.inputs["corpus"], sha256_file(&paths.corpus).unwrap());
    assert_eq!(manifest.inputs["labels"], sha256_file(paths.labels.as_ref().unwrap()).unwrap());
    let out = dir.path().join("a");
    let mut produced = 0;
    for stage in &manifest.stages {
        for (name, hash) in &stage.outputs {
            assert_eq!(&sha256_file(&out.join(name)).unwrap(), hash, "{name}");
            produced += 1;
        }
    }
    assert!(produced >= 8);
    assert!(manifest.seeds.contains_key("zsl") && manifest.seeds.contains_key("repr"));
}

#[test]
fn other_representation_kinds_run() {
    let dir = tempfile::tempdir().unwrap();
    let paths = written(&small_spec(), dir.path());
    let mut cfg = quick(&paths, &dir.path().join("direct"));
    cfg.kind = ReprKind::WeightedDirect;
    let direct = run_pipeline(&cfg).unwrap();
    assert!(direct.manifest.stages.iter().any(|s| s.outputs.contains_key("weightnet.json")));

    // feed the average representations back in as an external file
    let mut avg = quick(&paths, &dir.path().join("avg"));
    avg.kind = ReprKind::Average;
    run_pipeline(&avg).unwrap();
    let reps = visex_core::repr::read_representations(dir.path().join("avg/representations.jsonl")).unwrap();
    let ext_path = dir.path().join("external.jsonl");
    write_representations(&reps, &ext_path).unwrap();
    let mut ext = quick(&paths, &dir.path().join("ext"));
    ext.kind = ReprKind::External;
    ext.external_repr = Some(ext_path);
    let a = run_pipeline(&avg).unwrap();
    let e = run_pipeline(&ext).unwrap();
    assert_eq!(a.report.predictions, e.report.predictions);
}

#[test]
fn config_files_load_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("run.toml");
    std::fs::write(
        &toml_path,
        "corpus = \"c.jsonl\"\nmode = \"vis-sec\"\nkind = \"average\"\n[zsl]\nepochs = 3\nnegatives = 5\n[kmeans]\nk = 7\n",
    )
    .unwrap();
    let cfg = PipelineConfig::load(&toml_path).unwrap();
    assert_eq!(cfg.mode, FilterMode::VisSec);
    assert_eq!(cfg.zsl.epochs, 3);
    assert_eq!(cfg.kmeans.k, 7);
    assert_eq!(cfg.kmeans.seed, 0);

    let json_path = dir.path().join("run.json");
    std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(PipelineConfig::load(&json_path).unwrap(), cfg);

    std::fs::write(&toml_path, "mode = \"sideways\"\n").unwrap();
    assert!(PipelineConfig::load(&toml_path).unwrap_err().is_validation());
}

#[test]
fn sweep_writes_one_run_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let paths = written(&small_spec(), dir.path());
    let cfg = quick(&paths, &dir.path().join("sweep"));
    let points = run_sweep(&cfg, &[0.9, 0.95], &[0.1]).unwrap();
    assert_eq!(points.len(), 2);
    assert!(dir.path().join("sweep/sweep.json").exists());
    assert!(dir.path().join("sweep").join(&points[1].out_dir).join("manifest.json").exists());
    assert_eq!(FIXTURE_CLUSTERS, paths.pipeline_config("x").kmeans.k);
}
