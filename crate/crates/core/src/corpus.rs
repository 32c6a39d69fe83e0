//! Data model and file ingestion for embedded-sentence corpora, image
//! features and class splits.
//!
//! Embeddings are produced upstream; the recommended producer averages the
//! token embeddings of the second-to-last layer of a pretrained sentence
//! encoder. Nothing here reads the sentence text except for display and the
//! class-name filter.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath;

/// Reserved section name for sentences of a document's first paragraph.
pub const SUMMARY_SECTION: &str = "__summary__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: String,
    pub class_id: String,
    pub section: String,
    pub position: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub class_id: String,
    /// Sorted by `position`.
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: BTreeMap<String, Document>,
    dim: usize,
    pub metadata: BTreeMap<String, String>,
}

impl Corpus {
    /// Builds a corpus from loose sentences, validating every invariant.
    /// Errors carry the 1-based index of the offending sentence as the line.
    pub fn from_sentences(sentences: impl IntoIterator<Item = Sentence>) -> Result<Self> {
        let mut builder = CorpusBuilder::default();
        for (i, s) in sentences.into_iter().enumerate() {
            builder.push(s, i + 1)?;
        }
        builder.finish()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn document(&self, class_id: &str) -> Option<&Document> {
        self.documents.get(class_id)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.documents.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.documents.len()
    }

    /// All sentences, by class id then position.
    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.documents.values().flat_map(|d| d.sentences.iter())
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.values().map(Document::len).sum()
    }

    /// Section names with their sentence counts.
    pub fn section_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in self.sentences() {
            *counts.entry(s.section.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn has_text(&self) -> bool {
        self.sentences().all(|s| s.text.is_some())
    }
}

#[derive(Default)]
struct CorpusBuilder {
    documents: BTreeMap<String, Document>,
    ids: HashSet<String>,
    positions: HashSet<(String, u64)>,
    dim: Option<usize>,
}

impl CorpusBuilder {
    fn push(&mut self, s: Sentence, line: usize) -> Result<()> {
        let dim = *self.dim.get_or_insert(s.embedding.len());
        if dim == 0 {
            return Err(Error::Malformed {
                line,
                message: "embedding is empty".into(),
            });
        }
        if s.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                line,
                expected: dim,
                found: s.embedding.len(),
            });
        }
        if !vecmath::is_finite(&s.embedding) {
            return Err(Error::Malformed {
                line,
                message: "embedding contains non-finite values".into(),
            });
        }
        if !self.ids.insert(s.sentence_id.clone()) {
            return Err(Error::Duplicate {
                what: "sentence_id",
                id: s.sentence_id,
                line,
            });
        }
        if !self.positions.insert((s.class_id.clone(), s.position)) {
            return Err(Error::Duplicate {
                what: "position",
                id: format!("{}@{}", s.class_id, s.position),
                line,
            });
        }
        self.documents
            .entry(s.class_id.clone())
            .or_insert_with(|| Document {
                class_id: s.class_id.clone(),
                sentences: Vec::new(),
            })
            .sentences
            .push(s);
        Ok(())
    }

    fn finish(mut self) -> Result<Corpus> {
        let dim = self.dim.ok_or_else(|| Error::Empty("corpus has no sentences".into()))?;
        for doc in self.documents.values_mut() {
            doc.sentences.sort_by_key(|s| s.position);
        }
        Ok(Corpus {
            documents: self.documents,
            dim,
            metadata: BTreeMap::new(),
        })
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Yields `(line_number, parsed)` for every non-blank line.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let mut builder = CorpusBuilder::default();
    for (line, sentence) in read_jsonl::<Sentence>(path)? {
        builder.push(sentence, line)?;
    }
    builder.finish()
}

pub fn export_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), corpus.sentences())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HopTag {
    #[serde(rename = "2-hop")]
    TwoHop,
    #[serde(rename = "3-hop")]
    ThreeHop,
    #[serde(rename = "all")]
    All,
}

impl HopTag {
    pub const ALL: [HopTag; 3] = [HopTag::TwoHop, HopTag::ThreeHop, HopTag::All];

    /// Hop sets are nested: a 2-hop class also belongs to the 3-hop and ALL tasks.
    pub fn within(self, task: HopTag) -> bool {
        self <= task
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HopTag::TwoHop => "2-hop",
            HopTag::ThreeHop => "3-hop",
            HopTag::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
    #[serde(default, rename = "hops", skip_serializing_if = "Option::is_none")]
    pub hop_tags: Option<BTreeMap<String, HopTag>>,
}

impl ClassSplit {
    pub fn new(seen: BTreeSet<String>, unseen: BTreeSet<String>) -> Result<Self> {
        let split = Self {
            seen,
            unseen,
            hop_tags: None,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.seen.intersection(&self.unseen).next() {
            return Err(Error::Invalid(format!("class `{c}` is both seen and unseen")));
        }
        if let Some(tags) = &self.hop_tags {
            for c in tags.keys() {
                if !self.contains(c) {
                    return Err(Error::UnknownClass(c.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, class_id: &str) -> bool {
        self.seen.contains(class_id) || self.unseen.contains(class_id)
    }

    pub fn all_classes(&self) -> BTreeSet<String> {
        self.seen.union(&self.unseen).cloned().collect()
    }
}

pub fn read_split(path: impl AsRef<Path>) -> Result<ClassSplit> {
    let split: ClassSplit = read_json(path.as_ref())?;
    split.validate()?;
    Ok(split)
}

pub fn write_split(split: &ClassSplit, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub class_id: String,
    pub features: Vec<f64>,
}

pub fn ingest_images(path: impl AsRef<Path>, split: Option<&ClassSplit>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let mut ids = HashSet::new();
    let mut dim = None;
    let mut out = Vec::new();
    for (line, record) in read_jsonl::<ImageRecord>(path)? {
        let expected = *dim.get_or_insert(record.features.len());
        if expected == 0 {
            return Err(Error::Malformed {
                line,
                message: "features are empty".into(),
            });
        }
        if record.features.len() != expected {
            return Err(Error::DimensionMismatch {
                line,
                expected,
                found: record.features.len(),
            });
        }
        if !vecmath::is_finite(&record.features) {
            return Err(Error::Malformed {
                line,
                message: "features contain non-finite values".into(),
            });
        }
        if let Some(split) = split {
            if !split.contains(&record.class_id) {
                return Err(Error::UnknownClass(record.class_id));
            }
        }
        if !ids.insert(record.image_id.clone()) {
            return Err(Error::Duplicate {
                what: "image_id",
                id: record.image_id,
                line,
            });
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{} has no image records", path.display())));
    }
    Ok(out)
}

pub fn export_images(images: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), images)
}

/// Per-class image counts.
pub fn image_tallies(images: &[ImageRecord]) -> BTreeMap<String, usize> {
    let mut tallies = BTreeMap::new();
    for im in images {
        *tallies.entry(im.class_id.clone()).or_insert(0) += 1;
    }
    tallies
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_sentences_one_document() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            concat!(
                r#"{"sentence_id":"a","class_id":"tiger","section":"Description","position":0,"embedding":[1,0,0,0]}"#,
                "\n",
                r#"{"sentence_id":"b","class_id":"tiger","section":"History","position":1,"text":"x","embedding":[0,1,0,0]}"#,
                "\n"
            ),
        );
        let c = ingest_corpus(&p).unwrap();
        assert_eq!(c.num_classes(), 1);
        assert_eq!(c.dim(), 4);
        assert_eq!(c.document("tiger").unwrap().len(), 2);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = [
            r#"{"sentence_id":"a","class_id":"t","section":"s","position":0,"embedding":[1,0,0,0]}"#,
            r#"{"sentence_id":"b","class_id":"t","section":"s","position":1,"embedding":[1,0,0,0]}"#,
            r#"{"sentence_id":"c","class_id":"t","section":"s","position":2,"embedding":[1,0,0,0,5]}"#,
        ]
        .join("\n");
        let p = write(dir.path(), "c.jsonl", &body);
        let err = ingest_corpus(&p).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch at line 3"), "{err}");
    }

    #[test]
    fn rejects_duplicates_malformed_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let dup = [
            r#"{"sentence_id":"a","class_id":"t","section":"s","position":0,"embedding":[1]}"#,
            r#"{"sentence_id":"a","class_id":"t","section":"s","position":1,"embedding":[1]}"#,
        ]
        .join("\n");
        let err = ingest_corpus(write(dir.path(), "d.jsonl", &dup)).unwrap_err();
        assert!(matches!(err, Error::Duplicate { line: 2, .. }));

        let pos = [
            r#"{"sentence_id":"a","class_id":"t","section":"s","position":0,"embedding":[1]}"#,
            r#"{"sentence_id":"b","class_id":"t","section":"s","position":0,"embedding":[1]}"#,
        ]
        .join("\n");
        assert!(ingest_corpus(write(dir.path(), "p.jsonl", &pos)).is_err());

        let bad = "{\"sentence_id\":\"a\"}\n";
        let err = ingest_corpus(write(dir.path(), "m.jsonl", bad)).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 1, .. }));

        let err = ingest_corpus(write(dir.path(), "e.jsonl", "")).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn images_with_unknown_class_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = [
            r#"{"image_id":"i1","class_id":"a","features":[1,2,3,4,5,6,7,8]}"#,
            r#"{"image_id":"i2","class_id":"b","features":[1,2,3,4,5,6,7,8]}"#,
            r#"{"image_id":"i3","class_id":"zebra","features":[1,2,3,4,5,6,7,8]}"#,
        ]
        .join("\n");
        let p = write(dir.path(), "i.jsonl", &body);
        assert_eq!(ingest_images(&p, None).unwrap().len(), 3);
        let split = ClassSplit::new(["a".into()].into(), ["b".into()].into()).unwrap();
        let err = ingest_images(&p, Some(&split)).unwrap_err();
        assert!(err.to_string().contains("zebra"));
    }

    #[test]
    fn split_validation() {
        let s = ClassSplit::new(["a".into()].into(), ["a".into()].into());
        assert!(s.is_err());
        let mut ok = ClassSplit::new(["a".into()].into(), ["b".into()].into()).unwrap();
        ok.hop_tags = Some([("c".to_string(), HopTag::All)].into());
        assert!(ok.validate().is_err());
        assert!(HopTag::TwoHop.within(HopTag::ThreeHop));
        assert!(!HopTag::All.within(HopTag::TwoHop));
    }
}
