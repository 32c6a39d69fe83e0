//! Thin async client for the triage service.
//!
//! ```no_run
//! # async fn demo() -> Result<(), visex_client::ClientError> {
//! use visex_client::TriageClient;
//! use visex_core::triage::Verdict;
//!
//! let client = TriageClient::new("http://127.0.0.1:8080")?;
//! let ack = client.label_cluster(7, Verdict::Visual, None).await?;
//! println!("now at revision {}", ack.revision);
//! # Ok(())
//! # }
//! ```

use reqwest::{StatusCode, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;
use visex_core::api::{
    ClusterDetail, ClustersResponse, ErrorBody, LabelRequest, LabelResponse, RecomputeRequest, RecomputeResponse,
    SectionsResponse,
};
use visex_core::triage::{TriageLabels, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid service url `{0}`")]
    Url(String),
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Status { status: StatusCode, message: String },
}

impl ClientError {
    /// The write was refused because of a stale revision or cluster model.
    pub fn is_conflict(&self) -> bool {
        matches!(self, ClientError::Status { status, .. } if *status == StatusCode::CONFLICT)
    }

    pub fn is_not_found(&self) -> bool {
        matches!(self, ClientError::Status { status, .. } if *status == StatusCode::NOT_FOUND)
    }

    /// True when the request itself was wrong (4xx), as opposed to an
    /// unreachable or failing service.
    pub fn is_client_error(&self) -> bool {
        matches!(self, ClientError::Status { status, .. } if status.is_client_error())
    }
}

#[derive(Debug, Clone)]
pub struct TriageClient {
    base: Url,
    http: reqwest::Client,
}

impl TriageClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let mut base = Url::parse(base_url).map_err(|_| ClientError::Url(base_url.to_string()))?;
        if base.cannot_be_a_base() {
            return Err(ClientError::Url(base_url.to_string()));
        }
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        Ok(Self {
            base,
            http: reqwest::Client::new(),
        })
    }

    fn url(&self, segments: &[&str]) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut().expect("checked in new").pop_if_empty().extend(segments);
        url
    }

    async fn decode<T: DeserializeOwned>(response: reqwest::Response) -> Result<T, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        let text = response.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Status { status, message })
    }

    async fn get<T: DeserializeOwned>(&self, segments: &[&str]) -> Result<T, ClientError> {
        Self::decode(self.http.get(self.url(segments)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, segments: &[&str], body: &B) -> Result<T, ClientError> {
        Self::decode(self.http.post(self.url(segments)).json(body).send().await?).await
    }

    pub async fn sections(&self) -> Result<SectionsResponse, ClientError> {
        self.get(&["sections"]).await
    }

    pub async fn clusters(&self) -> Result<ClustersResponse, ClientError> {
        self.get(&["clusters"]).await
    }

    pub async fn cluster(&self, index: usize) -> Result<ClusterDetail, ClientError> {
        self.get(&["clusters", &index.to_string()]).await
    }

    pub async fn labels(&self) -> Result<TriageLabels, ClientError> {
        self.get(&["labels"]).await
    }

    pub async fn label_section(
        &self,
        name: &str,
        verdict: Verdict,
        expected_revision: Option<u64>,
    ) -> Result<LabelResponse, ClientError> {
        let body = LabelRequest {
            expected_revision,
            ..LabelRequest::new(verdict)
        };
        self.post(&["sections", name, "label"], &body).await
    }

    pub async fn label_cluster(
        &self,
        index: usize,
        verdict: Verdict,
        expected_revision: Option<u64>,
    ) -> Result<LabelResponse, ClientError> {
        let body = LabelRequest {
            expected_revision,
            ..LabelRequest::new(verdict)
        };
        self.post(&["clusters", &index.to_string(), "label"], &body).await
    }

    /// Sends a fully specified label request, including a cluster-model guard.
    pub async fn label_cluster_with(&self, index: usize, request: &LabelRequest) -> Result<LabelResponse, ClientError> {
        self.post(&["clusters", &index.to_string(), "label"], request).await
    }

    pub async fn recompute(&self, request: &RecomputeRequest) -> Result<RecomputeResponse, ClientError> {
        self.post(&["recompute"], request).await
    }
}
