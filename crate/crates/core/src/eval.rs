//! Per-class Top-1 accuracy, generalized (seen + unseen candidates) scores
//! and hop-restricted breakdowns.
//!
//! Per-class Top-1 averages accuracy within each test class first and then
//! across classes, so heavily populated classes do not dominate.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassSplit, HopTag, ImageRecord};
use crate::error::{Error, Result};
use crate::repr::Representations;
use crate::zsl::{Classifier, DeviseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub class_id: String,
    pub predicted: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GzslScores {
    /// Per-class accuracy over unseen test classes.
    pub u: f64,
    /// Per-class accuracy over seen test classes.
    pub s: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub per_class: BTreeMap<String, f64>,
    pub per_class_top1: f64,
    pub per_sample_top1: f64,
    pub n_images: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gzsl: Option<GzslScores>,
    pub predictions: Vec<Prediction>,
}

pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s > 0.0 {
        2.0 * u * s / (u + s)
    } else {
        0.0
    }
}

/// Builds a report from a prediction log.
pub fn report_from_predictions(split: impl Into<String>, predictions: Vec<Prediction>) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let mut tallies: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0;
    for p in &predictions {
        let t = tallies.entry(p.class_id.as_str()).or_default();
        t.1 += 1;
        if p.predicted == p.class_id {
            t.0 += 1;
            correct_total += 1;
        }
    }
    let per_class: BTreeMap<String, f64> = tallies
        .into_iter()
        .map(|(c, (ok, n))| (c.to_string(), ok as f64 / n as f64))
        .collect();
    let per_class_top1 = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        split: split.into(),
        per_class_top1,
        per_sample_top1: correct_total as f64 / predictions.len() as f64,
        n_images: predictions.len(),
        per_class,
        gzsl: None,
        predictions,
    })
}

fn predict_all(classifier: &Classifier<'_>, images: &[&ImageRecord]) -> Result<Vec<Prediction>> {
    images
        .par_iter()
        .map(|im| {
            Ok(Prediction {
                image_id: im.image_id.clone(),
                class_id: im.class_id.clone(),
                predicted: classifier.predict(&im.features)?.to_string(),
            })
        })
        .collect()
}

fn warn_missing(candidates: &BTreeSet<String>, images: &[&ImageRecord], restrict: &BTreeSet<String>) {
    let present: BTreeSet<&str> = images.iter().map(|im| im.class_id.as_str()).collect();
    for c in candidates.intersection(restrict) {
        if !present.contains(c.as_str()) {
            log::warn!("class `{c}` has no test images; excluded from the per-class mean");
        }
    }
}

/// Classifies every image against `candidates`.
pub fn evaluate(
    model: &DeviseModel,
    images: &[ImageRecord],
    reps: &Representations,
    candidates: &BTreeSet<String>,
    split: &ClassSplit,
    name: &str,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    for im in images {
        if !split.contains(&im.class_id) {
            return Err(Error::UnknownClass(im.class_id.clone()));
        }
    }
    let refs: Vec<&ImageRecord> = images.iter().collect();
    warn_missing(candidates, &refs, candidates);
    let classifier = Classifier::new(model, candidates, reps)?;
    report_from_predictions(name, predict_all(&classifier, &refs)?)
}

/// Seen and unseen test images both ranked against all seen and unseen classes.
pub fn evaluate_gzsl(
    model: &DeviseModel,
    seen_images: &[ImageRecord],
    unseen_images: &[ImageRecord],
    reps: &Representations,
    split: &ClassSplit,
) -> Result<EvalReport> {
    if seen_images.is_empty() || unseen_images.is_empty() {
        return Err(Error::Empty("generalized evaluation needs seen and unseen test images".into()));
    }
    for im in seen_images {
        if !split.seen.contains(&im.class_id) {
            return Err(Error::Invalid(format!("image `{}` is not from a seen class", im.image_id)));
        }
    }
    for im in unseen_images {
        if !split.unseen.contains(&im.class_id) {
            return Err(Error::Invalid(format!("image `{}` is not from an unseen class", im.image_id)));
        }
    }
    let candidates = split.all_classes();
    let classifier = Classifier::new(model, &candidates, reps)?;
    let seen_refs: Vec<&ImageRecord> = seen_images.iter().collect();
    let unseen_refs: Vec<&ImageRecord> = unseen_images.iter().collect();
    let s_report = report_from_predictions("gzsl-seen", predict_all(&classifier, &seen_refs)?)?;
    let u_report = report_from_predictions("gzsl-unseen", predict_all(&classifier, &unseen_refs)?)?;
    let (u, s) = (u_report.per_class_top1, s_report.per_class_top1);
    let mut all = u_report.predictions;
    all.extend(s_report.predictions);
    let mut report = report_from_predictions("gzsl", all)?;
    report.gzsl = Some(GzslScores {
        u,
        s,
        h: harmonic_mean(u, s),
    });
    Ok(report)
}

/// One report per hop task; each restricts both the candidates and the test
/// images to the task's unseen classes. Tasks without classes are skipped.
pub fn hop_breakdown(
    model: &DeviseModel,
    unseen_images: &[ImageRecord],
    reps: &Representations,
    split: &ClassSplit,
) -> Result<BTreeMap<HopTag, EvalReport>> {
    let tags = split
        .hop_tags
        .as_ref()
        .ok_or_else(|| Error::Config("split has no hop tags".into()))?;
    let mut class_tag = BTreeMap::new();
    for c in &split.unseen {
        let tag = tags
            .get(c)
            .ok_or_else(|| Error::Invalid(format!("unseen class `{c}` has no hop tag")))?;
        class_tag.insert(c.clone(), *tag);
    }
    let mut out = BTreeMap::new();
    for task in HopTag::ALL {
        let candidates: BTreeSet<String> = class_tag
            .iter()
            .filter(|(_, t)| t.within(task))
            .map(|(c, _)| c.clone())
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let images: Vec<ImageRecord> = unseen_images
            .iter()
            .filter(|im| candidates.contains(&im.class_id))
            .cloned()
            .collect();
        if images.is_empty() {
            log::warn!("hop task {} has no test images", task.as_str());
            continue;
        }
        out.insert(task, evaluate(model, &images, reps, &candidates, split, task.as_str())?);
    }
    Ok(out)
}
