//! Builds each class's filtered document from triage labels.
//!
//! Sentences from visual sections and sentences in visual clusters are
//! unioned. A class left with nothing falls back to its first-paragraph
//! sentences, and failing that to the whole document, so every class keeps
//! a representation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::corpus::{write_jsonl, Corpus, Document, Sentence, SUMMARY_SECTION};
use crate::error::{Error, Result};
use crate::triage::{TriageLabels, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    No,
    VisSec,
    VisClu,
    VisSecClu,
    #[serde(rename = "par-1st")]
    Par1st,
    ClsName,
}

impl FilterMode {
    pub const ALL: [FilterMode; 6] = [
        FilterMode::No,
        FilterMode::VisSec,
        FilterMode::VisClu,
        FilterMode::VisSecClu,
        FilterMode::Par1st,
        FilterMode::ClsName,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::No => "no",
            FilterMode::VisSec => "vis-sec",
            FilterMode::VisClu => "vis-clu",
            FilterMode::VisSecClu => "vis-sec-clu",
            FilterMode::Par1st => "par-1st",
            FilterMode::ClsName => "cls-name",
        }
    }

    pub fn uses_sections(self) -> bool {
        matches!(self, FilterMode::VisSec | FilterMode::VisSecClu)
    }

    pub fn uses_clusters(self) -> bool {
        matches!(self, FilterMode::VisClu | FilterMode::VisSecClu)
    }

    pub fn needs_labels(self) -> bool {
        self.uses_sections() || self.uses_clusters()
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        FilterMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown filter mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub by_section: bool,
    pub by_cluster: bool,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptSentence {
    pub sentence_id: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredDocument {
    pub class_id: String,
    pub mode: FilterMode,
    /// Sentence count of the unfiltered document.
    pub total: usize,
    /// In document order.
    pub kept: Vec<KeptSentence>,
}

impl FilteredDocument {
    pub fn used_fallback(&self) -> bool {
        self.kept.iter().any(|k| k.provenance.fallback)
    }

    pub fn sentence_ids(&self) -> impl Iterator<Item = &str> {
        self.kept.iter().map(|k| k.sentence_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Embeddings of the kept sentences, in order.
    pub fn embeddings<'a>(&self, corpus: &'a Corpus) -> Result<Vec<&'a [f64]>> {
        let doc = corpus
            .document(&self.class_id)
            .ok_or_else(|| Error::MissingClass(self.class_id.clone()))?;
        let by_id: HashMap<&str, &Sentence> = doc.sentences.iter().map(|s| (s.sentence_id.as_str(), s)).collect();
        self.kept
            .iter()
            .map(|k| {
                by_id
                    .get(k.sentence_id.as_str())
                    .map(|s| s.embedding.as_slice())
                    .ok_or_else(|| Error::Invalid(format!("sentence `{}` not in class `{}`", k.sentence_id, self.class_id)))
            })
            .collect()
    }
}

pub type FilteredCorpus = BTreeMap<String, FilteredDocument>;

struct Selector<'a> {
    mode: FilterMode,
    labels: Option<&'a TriageLabels>,
    model: Option<&'a ClusterModel>,
}

fn class_name_pattern(class_id: &str) -> String {
    class_id.replace(['_', '-'], " ").to_lowercase()
}

impl Selector<'_> {
    fn provenance(&self, s: &Sentence, doc: &Document) -> Option<Provenance> {
        let mut p = Provenance::default();
        match self.mode {
            FilterMode::No => return Some(p),
            FilterMode::Par1st => {
                p.by_section = true;
                return (s.section == SUMMARY_SECTION).then_some(p);
            }
            FilterMode::ClsName => {
                let text = s.text.as_deref().unwrap_or_default().to_lowercase();
                return text.contains(&class_name_pattern(&doc.class_id)).then_some(p);
            }
            _ => {}
        }
        let labels = self.labels.expect("checked by apply_filter");
        if self.mode.uses_sections() {
            p.by_section = s.section == SUMMARY_SECTION || labels.section_verdict(&s.section) == Verdict::Visual;
        }
        if self.mode.uses_clusters() {
            let model = self.model.expect("checked by apply_filter");
            p.by_cluster = model
                .cluster_of(&s.sentence_id)
                .is_some_and(|c| labels.cluster_verdict(c) == Verdict::Visual);
        }
        (p.by_section || p.by_cluster).then_some(p)
    }

    fn filter(&self, doc: &Document) -> FilteredDocument {
        let mut kept: Vec<KeptSentence> = doc
            .sentences
            .iter()
            .filter_map(|s| {
                self.provenance(s, doc).map(|provenance| KeptSentence {
                    sentence_id: s.sentence_id.clone(),
                    provenance,
                })
            })
            .collect();
        if kept.is_empty() {
            let fallback = Provenance {
                fallback: true,
                ..Default::default()
            };
            let summary: Vec<&Sentence> = doc.sentences.iter().filter(|s| s.section == SUMMARY_SECTION).collect();
            let source: Vec<&Sentence> = if summary.is_empty() {
                doc.sentences.iter().collect()
            } else {
                summary
            };
            kept = source
                .into_iter()
                .map(|s| KeptSentence {
                    sentence_id: s.sentence_id.clone(),
                    provenance: fallback,
                })
                .collect();
        }
        FilteredDocument {
            class_id: doc.class_id.clone(),
            mode: self.mode,
            total: doc.len(),
            kept,
        }
    }
}

pub fn apply_filter(
    corpus: &Corpus,
    labels: Option<&TriageLabels>,
    model: Option<&ClusterModel>,
    mode: FilterMode,
) -> Result<FilteredCorpus> {
    if mode.needs_labels() {
        let labels = labels.ok_or_else(|| Error::Config("triage labels required".into()))?;
        if mode.uses_clusters() {
            let model = model.ok_or_else(|| Error::Config("cluster model required".into()))?;
            if !labels.is_bound_to(model) {
                return Err(Error::StaleModel {
                    bound: labels.cluster_model_id.clone().unwrap_or_default(),
                    given: model.model_id.clone(),
                });
            }
            model.check_bound(corpus)?;
        }
        let visual_sections = mode.uses_sections() && labels.section_counts().visual > 0;
        let visual_clusters = mode.uses_clusters() && labels.cluster_counts().visual > 0;
        if !visual_sections && !visual_clusters {
            log::warn!("no visual labels for mode {mode}; every class will fall back");
        }
    }
    if mode == FilterMode::ClsName && !corpus.has_text() {
        return Err(Error::Config("cls-name mode needs sentence text for every sentence".into()));
    }
    let selector = Selector { mode, labels, model };
    Ok(corpus
        .documents()
        .map(|d| (d.class_id.clone(), selector.filter(d)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRetention {
    pub kept: usize,
    pub total: usize,
    pub retention: f64,
    pub by_section: usize,
    pub by_cluster: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub mode: Option<FilterMode>,
    pub per_class: BTreeMap<String, ClassRetention>,
    pub kept: usize,
    pub total: usize,
    pub retention: f64,
    pub by_section: usize,
    pub by_cluster: usize,
    pub fallback_classes: Vec<String>,
}

pub fn filter_stats(filtered: &FilteredCorpus) -> FilterStats {
    let per_class: BTreeMap<String, ClassRetention> = filtered
        .iter()
        .map(|(c, f)| {
            let kept = f.len();
            (
                c.clone(),
                ClassRetention {
                    kept,
                    total: f.total,
                    retention: if f.total == 0 { 0.0 } else { kept as f64 / f.total as f64 },
                    by_section: f.kept.iter().filter(|k| k.provenance.by_section).count(),
                    by_cluster: f.kept.iter().filter(|k| k.provenance.by_cluster).count(),
                    fallback: f.used_fallback(),
                },
            )
        })
        .collect();
    let kept = per_class.values().map(|r| r.kept).sum();
    let total = per_class.values().map(|r| r.total).sum();
    let modes: BTreeSet<FilterMode> = filtered.values().map(|f| f.mode).collect();
    FilterStats {
        mode: (modes.len() == 1).then(|| *modes.first().unwrap()),
        kept,
        total,
        retention: if total == 0 { 0.0 } else { kept as f64 / total as f64 },
        by_section: per_class.values().map(|r| r.by_section).sum(),
        by_cluster: per_class.values().map(|r| r.by_cluster).sum(),
        fallback_classes: per_class.iter().filter(|(_, r)| r.fallback).map(|(c, _)| c.clone()).collect(),
        per_class,
    }
}

#[derive(Serialize, Deserialize)]
struct FilteredLine {
    class_id: String,
    sentence_id: String,
    provenance: Provenance,
    mode: FilterMode,
}

pub fn write_filtered(filtered: &FilteredCorpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        filtered.values().flat_map(|f| {
            f.kept.iter().map(|k| FilteredLine {
                class_id: f.class_id.clone(),
                sentence_id: k.sentence_id.clone(),
                provenance: k.provenance,
                mode: f.mode,
            })
        }),
    )
}

/// Reads a filtered-set file; `corpus` supplies document lengths and
/// ordering.
pub fn read_filtered(path: impl AsRef<Path>, corpus: &Corpus) -> Result<FilteredCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = FilteredCorpus::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FilteredLine = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        let doc = corpus
            .document(&rec.class_id)
            .ok_or_else(|| Error::UnknownClass(rec.class_id.clone()))?;
        let entry = out.entry(rec.class_id.clone()).or_insert_with(|| FilteredDocument {
            class_id: rec.class_id.clone(),
            mode: rec.mode,
            total: doc.len(),
            kept: Vec::new(),
        });
        if entry.kept.iter().any(|k| k.sentence_id == rec.sentence_id) {
            return Err(Error::Duplicate {
                what: "sentence_id",
                id: rec.sentence_id,
                line: i + 1,
            });
        }
        entry.kept.push(KeptSentence {
            sentence_id: rec.sentence_id,
            provenance: rec.provenance,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{} has no filtered sentences", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterModel;

    fn sentence(id: &str, class: &str, section: &str, pos: u64, text: &str) -> Sentence {
        Sentence {
            sentence_id: id.into(),
            class_id: class.into(),
            section: section.into(),
            position: pos,
            text: Some(text.into()),
            embedding: vec![pos as f64, 1.0],
        }
    }

    fn fixture() -> (Corpus, ClusterModel, TriageLabels) {
        let corpus = Corpus::from_sentences([
            sentence("s1", "tiger", "Description", 0, "A tiger has stripes."),
            sentence("s2", "tiger", "History", 1, "It hunts deer."),
            sentence("s3", "tiger", "History", 2, "Named in 1758."),
            sentence("b0", "boat", SUMMARY_SECTION, 0, "A boat floats."),
            sentence("b1", "boat", "History", 1, "Old."),
            sentence("z1", "zebu", "History", 0, "Cattle."),
        ])
        .unwrap();
        let assignment: BTreeMap<String, usize> = [("s1", 3), ("s2", 7), ("s3", 2), ("b0", 0), ("b1", 2), ("z1", 2)]
            .into_iter()
            .map(|(s, c)| (s.to_string(), c))
            .collect();
        let model = ClusterModel {
            model_id: "m1".into(),
            k: 8,
            dim: 2,
            centroids: vec![vec![0.0, 0.0]; 8],
            assignment,
            objective: 0.0,
            seed: 0,
            iterations_run: 1,
            normalized: false,
            objective_history: vec![0.0],
        };
        let mut labels = TriageLabels::new(&corpus, Some(&model));
        labels.label_section("Description", Verdict::Visual).unwrap();
        labels.label_section("History", Verdict::Nonvisual).unwrap();
        labels.label_cluster(7, Verdict::Visual).unwrap();
        for c in [0, 1, 2, 3, 4, 5, 6] {
            labels.label_cluster(c, Verdict::Nonvisual).unwrap();
        }
        (corpus, model, labels)
    }

    fn ids(f: &FilteredDocument) -> Vec<&str> {
        f.sentence_ids().collect()
    }

    #[test]
    fn union_of_section_and_cluster() {
        let (corpus, model, labels) = fixture();
        let out = apply_filter(&corpus, Some(&labels), Some(&model), FilterMode::VisSecClu).unwrap();
        let tiger = &out["tiger"];
        assert_eq!(ids(tiger), vec!["s1", "s2"]);
        assert!(tiger.kept[0].provenance.by_section && !tiger.kept[0].provenance.by_cluster);
        assert!(tiger.kept[1].provenance.by_cluster && !tiger.kept[1].provenance.by_section);
        assert!(!tiger.used_fallback());
    }

    #[test]
    fn fallback_chain() {
        let (corpus, model, labels) = fixture();
        let out = apply_filter(&corpus, Some(&labels), Some(&model), FilterMode::VisClu).unwrap();
        // boat: nothing visual, has summary
        assert_eq!(ids(&out["boat"]), vec!["b0"]);
        assert!(out["boat"].used_fallback());
        // zebu: nothing visual, no summary -> whole document
        assert_eq!(ids(&out["zebu"]), vec!["z1"]);
        assert!(out["zebu"].used_fallback());
        // summary always kept by section mode
        let sec = apply_filter(&corpus, Some(&labels), None, FilterMode::VisSec).unwrap();
        assert_eq!(ids(&sec["boat"]), vec!["b0"]);
        assert!(!sec["boat"].used_fallback());
    }

    #[test]
    fn baseline_modes() {
        let (corpus, _, _) = fixture();
        let no = apply_filter(&corpus, None, None, FilterMode::No).unwrap();
        assert_eq!(no["tiger"].len(), 3);
        let par = apply_filter(&corpus, None, None, FilterMode::Par1st).unwrap();
        assert_eq!(ids(&par["boat"]), vec!["b0"]);
        assert!(par["tiger"].used_fallback());
        let cls = apply_filter(&corpus, None, None, FilterMode::ClsName).unwrap();
        assert_eq!(ids(&cls["tiger"]), vec!["s1"]);
        assert_eq!(ids(&cls["boat"]), vec!["b0"]);
    }

    #[test]
    fn requirements_are_checked() {
        let (corpus, model, labels) = fixture();
        let err = apply_filter(&corpus, None, None, FilterMode::VisSecClu).unwrap_err();
        assert!(err.to_string().contains("triage labels required"));
        let mut other = model.clone();
        other.model_id = "m2".into();
        assert!(matches!(
            apply_filter(&corpus, Some(&labels), Some(&other), FilterMode::VisClu),
            Err(Error::StaleModel { .. })
        ));
        let textless = Corpus::from_sentences([Sentence {
            text: None,
            ..sentence("x", "c", "s", 0, "")
        }])
        .unwrap();
        assert!(apply_filter(&textless, None, None, FilterMode::ClsName).is_err());
    }

    #[test]
    fn stats_and_persistence() {
        let (corpus, model, labels) = fixture();
        let out = apply_filter(&corpus, Some(&labels), Some(&model), FilterMode::VisSecClu).unwrap();
        let stats = filter_stats(&out);
        assert_eq!(stats.per_class["tiger"].kept, 2);
        assert_eq!(stats.per_class["tiger"].total, 3);
        assert_eq!(stats.fallback_classes, vec!["zebu".to_string()]);
        assert_eq!(stats.kept, stats.per_class.values().map(|r| r.kept).sum::<usize>());
        assert_eq!(stats.mode, Some(FilterMode::VisSecClu));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        write_filtered(&out, &p).unwrap();
        assert_eq!(read_filtered(&p, &corpus).unwrap(), out);
    }

    #[test]
    fn retention_quarter() {
        let f = FilteredDocument {
            class_id: "c".into(),
            mode: FilterMode::VisSec,
            total: 40,
            kept: (0..10)
                .map(|i| KeptSentence {
                    sentence_id: format!("s{i}"),
                    provenance: Provenance::default(),
                })
                .collect(),
        };
        let stats = filter_stats(&[("c".to_string(), f)].into());
        assert_eq!(stats.per_class["c"].retention, 0.25);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in FilterMode::ALL {
            assert_eq!(m.as_str().parse::<FilterMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert_eq!("Vis_sec_clu".parse::<FilterMode>().unwrap(), FilterMode::VisSecClu);
    }
}
