//! Annotator verdicts on section headers and sentence clusters.
//!
//! Labels live in a single JSON file that is replaced atomically on every
//! write (temp file in the same directory, then rename).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::corpus::{read_json, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Visual,
    Nonvisual,
    #[default]
    Unlabeled,
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "visual" | "v" => Ok(Verdict::Visual),
            "nonvisual" | "non-visual" | "n" => Ok(Verdict::Nonvisual),
            "unlabeled" | "u" => Ok(Verdict::Unlabeled),
            other => Err(Error::Invalid(format!("unknown verdict `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageLabels {
    pub sections: BTreeMap<String, Verdict>,
    pub clusters: BTreeMap<usize, Verdict>,
    pub cluster_model_id: Option<String>,
    pub k: usize,
    pub revision: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VerdictCounts {
    pub visual: usize,
    pub nonvisual: usize,
    pub unlabeled: usize,
}

fn count<'a>(verdicts: impl Iterator<Item = &'a Verdict>) -> VerdictCounts {
    let mut c = VerdictCounts::default();
    for v in verdicts {
        match v {
            Verdict::Visual => c.visual += 1,
            Verdict::Nonvisual => c.nonvisual += 1,
            Verdict::Unlabeled => c.unlabeled += 1,
        }
    }
    c
}

impl TriageLabels {
    /// Every corpus section and every cluster of `model`, all unlabeled.
    pub fn new(corpus: &Corpus, model: Option<&ClusterModel>) -> Self {
        let mut labels = Self {
            sections: corpus
                .section_counts()
                .into_keys()
                .map(|s| (s, Verdict::Unlabeled))
                .collect(),
            clusters: BTreeMap::new(),
            cluster_model_id: None,
            k: 0,
            revision: 0,
        };
        if let Some(model) = model {
            labels.reset_clusters(model);
        }
        labels
    }

    fn reset_clusters(&mut self, model: &ClusterModel) {
        self.clusters = (0..model.k).map(|i| (i, Verdict::Unlabeled)).collect();
        self.cluster_model_id = Some(model.model_id.clone());
        self.k = model.k;
    }

    /// Binds cluster labels to `model`. Labels made against a different
    /// model are reset to unlabeled. Returns true if a reset happened.
    pub fn bind(&mut self, model: &ClusterModel) -> bool {
        if self.cluster_model_id.as_deref() == Some(model.model_id.as_str()) && self.k == model.k {
            return false;
        }
        if self.cluster_model_id.is_some() {
            log::warn!(
                "cluster labels were bound to {:?}; resetting for model {}",
                self.cluster_model_id,
                model.model_id
            );
        }
        self.reset_clusters(model);
        self.revision += 1;
        true
    }

    /// Adds newly seen corpus sections as unlabeled without touching existing verdicts.
    pub fn sync_sections(&mut self, corpus: &Corpus) {
        for s in corpus.section_counts().into_keys() {
            self.sections.entry(s).or_default();
        }
    }

    pub fn is_bound_to(&self, model: &ClusterModel) -> bool {
        self.cluster_model_id.as_deref() == Some(model.model_id.as_str())
    }

    pub fn label_section(&mut self, section: &str, verdict: Verdict) -> Result<()> {
        let slot = self
            .sections
            .get_mut(section)
            .ok_or_else(|| Error::UnknownSection(section.to_string()))?;
        *slot = verdict;
        self.revision += 1;
        Ok(())
    }

    pub fn label_cluster(&mut self, index: usize, verdict: Verdict) -> Result<()> {
        if index >= self.k {
            return Err(Error::IndexOutOfRange { index, k: self.k });
        }
        self.clusters.insert(index, verdict);
        self.revision += 1;
        Ok(())
    }

    pub fn section_verdict(&self, section: &str) -> Verdict {
        self.sections.get(section).copied().unwrap_or_default()
    }

    pub fn cluster_verdict(&self, index: usize) -> Verdict {
        self.clusters.get(&index).copied().unwrap_or_default()
    }

    pub fn section_counts(&self) -> VerdictCounts {
        count(self.sections.values())
    }

    pub fn cluster_counts(&self) -> VerdictCounts {
        count(self.clusters.values())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let labels: TriageLabels = read_json(path.as_ref())?;
        if let Some((&i, _)) = labels.clusters.iter().find(|(&i, _)| i >= labels.k) {
            return Err(Error::IndexOutOfRange { index: i, k: labels.k });
        }
        Ok(labels)
    }

    /// Write-temp-then-rename so readers never see a partial file.
    pub fn save_atomic(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Loads `path` if it exists (re-binding to `model`), otherwise starts fresh.
    pub fn load_or_init(path: impl AsRef<Path>, corpus: &Corpus, model: Option<&ClusterModel>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Self::new(corpus, model));
        }
        let mut labels = Self::load(path)?;
        labels.sync_sections(corpus);
        if let Some(model) = model {
            labels.bind(model);
        }
        Ok(labels)
    }
}
