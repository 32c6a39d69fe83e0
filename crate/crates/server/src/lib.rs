//! Triage service: serves section and cluster cards and records visual /
//! non-visual verdicts.
//!
//! Reads take a cheap `Arc` snapshot of the labels, so a reader never sees a
//! half-applied write. Writes are serialized behind one mutex; each write
//! builds the next labels value, persists it atomically, and only then
//! publishes it. An acknowledged write is therefore always on disk.

use std::collections::BTreeMap;
use std::future::Future;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use visex_core::api::{
    ClusterCard, ClusterDetail, ClustersResponse, ErrorBody, LabelRequest, LabelResponse, RecomputeRequest,
    RecomputeResponse, SectionCard, SectionsResponse,
};
use visex_core::cluster::{summarize_clusters, ClusterModel, ClusterSummary};
use visex_core::corpus::{ingest_corpus, Corpus};
use visex_core::error::{Error, Result};
use visex_core::filter::{apply_filter, filter_stats, write_filtered, FilterMode};
use visex_core::pipeline::sha256_file;
use visex_core::repr::{build_representations, class_docs, train_weightnet, write_representations, ReprKind, ReprTrainConfig};
use visex_core::triage::{TriageLabels, Verdict};

const SECTION_SAMPLES: usize = 3;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub corpus: PathBuf,
    pub model: PathBuf,
    pub labels: PathBuf,
    /// Where `POST /recompute` writes its outputs; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Exemplars per card in `GET /clusters`.
    pub card_exemplars: usize,
    /// Weight-net settings used when a recompute asks for weighted vectors.
    pub repr: ReprTrainConfig,
}

impl ServiceConfig {
    pub fn new(corpus: impl Into<PathBuf>, model: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            model: model.into(),
            labels: labels.into(),
            out_dir: None,
            card_exemplars: 5,
            repr: ReprTrainConfig::default(),
        }
    }
}

pub struct TriageState {
    corpus: Corpus,
    model: ClusterModel,
    clusters: Vec<ClusterSummary>,
    sections: Vec<(String, usize, Vec<String>)>,
    labels: RwLock<Arc<TriageLabels>>,
    writer: Mutex<()>,
    labels_path: PathBuf,
    out_dir: Option<PathBuf>,
    card_exemplars: usize,
    repr: ReprTrainConfig,
}

impl TriageState {
    /// Loads corpus and cluster model from disk, then opens the labels file.
    pub fn open(config: &ServiceConfig) -> Result<Self> {
        let corpus = ingest_corpus(&config.corpus)?;
        let model = ClusterModel::load(&config.model)?;
        Self::from_parts(corpus, model, config)
    }

    /// Opens (or creates) the labels file against an in-memory corpus and model.
    /// Labels bound to another cluster model have their cluster verdicts reset.
    pub fn from_parts(corpus: Corpus, model: ClusterModel, config: &ServiceConfig) -> Result<Self> {
        model.check_bound(&corpus)?;
        let existed = config.labels.exists();
        let labels = TriageLabels::load_or_init(&config.labels, &corpus, Some(&model))?;
        let on_disk = if existed { Some(TriageLabels::load(&config.labels)?) } else { None };
        if on_disk.as_ref() != Some(&labels) {
            labels.save_atomic(&config.labels)?;
        }
        let clusters = summarize_clusters(&model, &corpus, corpus.num_sentences().max(1))?;
        let sections = corpus
            .section_counts()
            .into_iter()
            .map(|(name, n)| {
                let samples = corpus
                    .sentences()
                    .filter(|s| s.section == name)
                    .take(SECTION_SAMPLES)
                    .map(|s| s.text.clone().unwrap_or_else(|| s.sentence_id.clone()))
                    .collect();
                (name, n, samples)
            })
            .collect();
        Ok(Self {
            corpus,
            model,
            clusters,
            sections,
            labels: RwLock::new(Arc::new(labels)),
            writer: Mutex::new(()),
            labels_path: config.labels.clone(),
            out_dir: config.out_dir.clone(),
            card_exemplars: config.card_exemplars.max(1),
            repr: config.repr.clone(),
        })
    }

    pub fn snapshot(&self) -> Arc<TriageLabels> {
        self.labels.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn model_id(&self) -> &str {
        &self.model.model_id
    }

    pub fn sections(&self) -> SectionsResponse {
        let labels = self.snapshot();
        let sections: Vec<SectionCard> = self
            .sections
            .iter()
            .map(|(name, frequency, samples)| SectionCard {
                name: name.clone(),
                frequency: *frequency,
                samples: samples.clone(),
                verdict: labels.section_verdict(name),
            })
            .collect();
        SectionsResponse {
            revision: labels.revision,
            labeled: sections.iter().filter(|s| s.verdict != Verdict::Unlabeled).count(),
            sections,
        }
    }

    fn card(&self, summary: &ClusterSummary, labels: &TriageLabels, exemplars: usize) -> ClusterCard {
        ClusterCard {
            index: summary.cluster_index,
            size: summary.size,
            exemplars: summary.exemplars.iter().take(exemplars).cloned().collect(),
            top_sections: summary.top_sections.clone(),
            verdict: labels.cluster_verdict(summary.cluster_index),
        }
    }

    pub fn clusters(&self) -> ClustersResponse {
        let labels = self.snapshot();
        let clusters: Vec<ClusterCard> = self.clusters.iter().map(|s| self.card(s, &labels, self.card_exemplars)).collect();
        ClustersResponse {
            revision: labels.revision,
            cluster_model_id: self.model.model_id.clone(),
            labeled: clusters.iter().filter(|c| c.verdict != Verdict::Unlabeled).count(),
            clusters,
        }
    }

    pub fn cluster(&self, index: usize) -> Result<ClusterDetail> {
        let summary = self.clusters.get(index).ok_or(Error::IndexOutOfRange { index, k: self.model.k })?;
        let labels = self.snapshot();
        Ok(ClusterDetail {
            revision: labels.revision,
            cluster_model_id: self.model.model_id.clone(),
            cluster: self.card(summary, &labels, usize::MAX),
        })
    }

    /// Applies one verdict under the writer lock: check guards, persist, publish.
    fn write(&self, request: &LabelRequest, apply: impl FnOnce(&mut TriageLabels) -> Result<()>) -> Result<LabelResponse> {
        let _writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.snapshot();
        if let Some(expected) = request.expected_revision {
            if expected != current.revision {
                return Err(Error::RevisionConflict {
                    expected,
                    current: current.revision,
                });
            }
        }
        if let Some(given) = &request.cluster_model_id {
            if given != &self.model.model_id {
                return Err(Error::StaleModel {
                    bound: self.model.model_id.clone(),
                    given: given.clone(),
                });
            }
        }
        let mut next = (*current).clone();
        apply(&mut next)?;
        next.save_atomic(&self.labels_path)?;
        let response = LabelResponse {
            revision: next.revision,
            verdict: request.verdict,
        };
        *self.labels.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(response)
    }

    pub fn label_section(&self, name: &str, request: &LabelRequest) -> Result<LabelResponse> {
        self.write(request, |l| l.label_section(name, request.verdict))
    }

    pub fn label_cluster(&self, index: usize, request: &LabelRequest) -> Result<LabelResponse> {
        self.write(request, |l| l.label_cluster(index, request.verdict))
    }

    /// Re-runs the filter against the current labels and rebuilds class vectors.
    pub fn recompute(&self, request: &RecomputeRequest) -> Result<RecomputeResponse> {
        let labels = self.snapshot();
        let mode = request.mode.unwrap_or(FilterMode::VisSecClu);
        let kind = request.kind.unwrap_or(ReprKind::Average);
        let filtered = apply_filter(&self.corpus, Some(&labels), Some(&self.model), mode)?;
        let stats = filter_stats(&filtered);
        let reps = match kind {
            ReprKind::Average => build_representations(&self.corpus, &filtered, kind, None, self.repr.scale_by_count)?,
            ReprKind::Weighted => {
                let docs = class_docs(&filtered, &self.corpus, None)?;
                let (net, _) = train_weightnet(&docs, self.corpus.dim(), &self.repr)?;
                build_representations(&self.corpus, &filtered, kind, Some(&net), self.repr.scale_by_count)?
            }
            other => return Err(Error::Config(format!("recompute cannot build `{other:?}` representations"))),
        };
        let mut outputs = BTreeMap::new();
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))?;
            let write = |name: &str, f: &dyn Fn(&FsPath) -> Result<()>| -> Result<(String, String)> {
                let path = dir.join(name);
                f(&path)?;
                Ok((name.to_string(), sha256_file(&path)?))
            };
            outputs.extend([
                write("filtered.jsonl", &|p| write_filtered(&filtered, p))?,
                write("representations.jsonl", &|p| write_representations(&reps, p))?,
                write("filter_stats.json", &|p| {
                    std::fs::write(p, serde_json::to_vec_pretty(&stats)?).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))
                })?,
            ]);
        }
        log::info!(
            "recompute at revision {}: {mode}, kept {}/{} sentences, {} fallback classes",
            labels.revision,
            stats.kept,
            stats.total,
            stats.fallback_classes.len()
        );
        Ok(RecomputeResponse {
            revision: labels.revision,
            mode,
            kind,
            representations: reps.len(),
            stats,
            outputs,
        })
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::UnknownSection(_) | Error::IndexOutOfRange { .. } => StatusCode::NOT_FOUND,
            Error::RevisionConflict { .. } | Error::StaleModel { .. } => StatusCode::CONFLICT,
            e if e.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

type Shared = Arc<TriageState>;

/// Runs blocking work (file writes, training) off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<Json<T>, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError),
        Err(e) => Err(ApiError(Error::Invalid(format!("worker failed: {e}")))),
    }
}

async fn get_sections(State(s): State<Shared>) -> Json<SectionsResponse> {
    Json(s.sections())
}

async fn post_section(
    State(s): State<Shared>,
    Path(name): Path<String>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<LabelResponse>, ApiError> {
    blocking(move || s.label_section(&name, &req)).await
}

async fn get_clusters(State(s): State<Shared>) -> Json<ClustersResponse> {
    Json(s.clusters())
}

async fn get_cluster(State(s): State<Shared>, Path(i): Path<usize>) -> Result<Json<ClusterDetail>, ApiError> {
    Ok(Json(s.cluster(i)?))
}

async fn post_cluster(
    State(s): State<Shared>,
    Path(i): Path<usize>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<LabelResponse>, ApiError> {
    blocking(move || s.label_cluster(i, &req)).await
}

async fn get_labels(State(s): State<Shared>) -> Json<TriageLabels> {
    Json((*s.snapshot()).clone())
}

async fn post_recompute(State(s): State<Shared>, body: Option<Json<RecomputeRequest>>) -> Result<Json<RecomputeResponse>, ApiError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    blocking(move || s.recompute(&req)).await
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/sections", get(get_sections))
        .route("/sections/{name}/label", post(post_section))
        .route("/clusters", get(get_clusters))
        .route("/clusters/{index}", get(get_cluster))
        .route("/clusters/{index}/label", post(post_cluster))
        .route("/labels", get(get_labels))
        .route("/recompute", post(post_recompute))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(listener: TcpListener, state: Shared, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("triage service listening on http://{addr}");
    }
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
