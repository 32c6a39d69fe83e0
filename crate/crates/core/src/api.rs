//! Request and response bodies of the triage HTTP service, shared by the
//! server and the client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::Exemplar;
use crate::filter::{FilterMode, FilterStats};
use crate::repr::ReprKind;
use crate::triage::Verdict;

/// Body of `POST /sections/{name}/label` and `POST /clusters/{i}/label`.
///
/// `expected_revision` and `cluster_model_id` are optimistic-concurrency
/// guards: when present and stale the write is refused with 409.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_revision: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_model_id: Option<String>,
}

impl LabelRequest {
    pub fn new(verdict: Verdict) -> Self {
        Self {
            verdict,
            expected_revision: None,
            cluster_model_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub revision: u64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionCard {
    pub name: String,
    pub frequency: usize,
    pub samples: Vec<String>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionsResponse {
    pub revision: u64,
    pub labeled: usize,
    pub sections: Vec<SectionCard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCard {
    pub index: usize,
    pub size: usize,
    pub exemplars: Vec<Exemplar>,
    pub top_sections: Vec<(String, usize)>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersResponse {
    pub revision: u64,
    pub cluster_model_id: String,
    pub labeled: usize,
    pub clusters: Vec<ClusterCard>,
}

/// `GET /clusters/{i}`: the same card with every member as an exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDetail {
    pub revision: u64,
    pub cluster_model_id: String,
    pub cluster: ClusterCard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RecomputeRequest {
    pub mode: Option<FilterMode>,
    pub kind: Option<ReprKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputeResponse {
    pub revision: u64,
    pub mode: FilterMode,
    pub kind: ReprKind,
    pub stats: FilterStats,
    pub representations: usize,
    /// Output file name -> sha256, when the service has an output directory.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
