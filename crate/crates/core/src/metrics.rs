//! Evaluation metrics: box IoU, training-label assignment, Frame AP and
//! scene-graph Recall@K.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BBox;
use crate::heads::{canonical_pairs, SceneGraphPrediction};
use crate::numgrad::{sigmoid, softmax};
use crate::scalar::Scalar;

pub const FRAME_AP_IOU: f64 = 0.5;
pub const LABEL_ASSIGN_IOU: f64 = 0.75;

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Labels for each predicted box: those of the highest-IoU ground-truth box
/// when that IoU reaches `threshold`, otherwise empty (negative for every
/// class). Ties go to the earlier ground-truth box.
pub fn assign_labels(preds: &[BBox], gt: &[(BBox, Vec<usize>)], threshold: f64) -> Vec<Vec<usize>> {
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(f64, &Vec<usize>)> = None;
            for (g, labels) in gt {
                let v = iou(p, g);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, labels));
                }
            }
            match best {
                Some((v, labels)) if v >= threshold => labels.clone(),
                _ => Vec::new(),
            }
        })
        .collect()
}

/// Ground-truth boxes as positives followed by the predicted boxes with
/// their assigned labels.
pub fn training_samples(
    preds: &[BBox],
    gt: &[(BBox, Vec<usize>)],
    threshold: f64,
) -> Vec<(BBox, Vec<usize>)> {
    let assigned = assign_labels(preds, gt, threshold);
    gt.iter()
        .cloned()
        .chain(preds.iter().copied().zip(assigned))
        .collect()
}

/// One scored detection of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub clip_id: String,
    pub keyframe_id: i64,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub clip_id: String,
    pub keyframe_id: i64,
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean_ap: f64,
}

/// All-point interpolated AP from per-rank hit flags.
fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class Frame AP: predictions sorted by descending score (stable), each
/// greedily matched to the unmatched same-keyframe ground-truth box of its
/// class with the highest IoU at or above `iou_threshold`.
pub fn frame_ap(
    preds: &[DetectionRecord],
    gts: &[GroundTruthBox],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<ApReport> {
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let class_gts: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.class == class).collect();
        if class_gts.is_empty() {
            per_class.push(None);
            continue;
        }
        let mut class_preds: Vec<&DetectionRecord> =
            preds.iter().filter(|p| p.class == class).collect();
        if class_preds.iter().any(|p| !p.score.is_finite()) {
            return Err(Error::Validation("detection scores must be finite".into()));
        }
        class_preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut matched = vec![false; class_gts.len()];
        let hits: Vec<bool> = class_preds
            .iter()
            .map(|p| {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in class_gts.iter().enumerate() {
                    if matched[gi] || g.clip_id != p.clip_id || g.keyframe_id != p.keyframe_id {
                        continue;
                    }
                    let v = iou(&p.bbox, &g.bbox);
                    if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((gi, v));
                    }
                }
                match best {
                    Some((gi, _)) => {
                        matched[gi] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push(Some(average_precision(&hits, class_gts.len())));
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMeanAp);
    }
    Ok(ApReport {
        mean_ap: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
    })
}

/// Subject-predicate-object triplet over foreground node indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject_index: usize,
    pub object_index: usize,
    pub subject_class: usize,
    pub object_class: usize,
    pub predicate_class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallMode {
    /// Object classes come from the classifier.
    SgCls,
    /// Object classes are given.
    PredCls,
}

/// What a keyframe with no ground-truth triplets contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyRecall {
    #[default]
    One,
    Skip,
}

pub fn triplet_score(subject_prob: f64, predicate_prob: f64, object_prob: f64) -> f64 {
    subject_prob * predicate_prob * object_prob
}

/// Class and probability per node: argmax of the object softmax (SGCls) or
/// the given class with probability 1 (PredCls).
fn node_classes<T: Scalar>(
    pred: &SceneGraphPrediction<T>,
    gt_objects: &[usize],
    mode: RecallMode,
) -> Result<Vec<(usize, f64)>> {
    let n = pred.num_objects();
    match mode {
        RecallMode::PredCls => {
            if gt_objects.len() != n {
                return Err(Error::Validation(format!(
                    "PredCls needs {n} object classes, got {}",
                    gt_objects.len()
                )));
            }
            Ok(gt_objects.iter().map(|&c| (c, 1.0)).collect())
        }
        RecallMode::SgCls => Ok((0..n)
            .map(|i| {
                let p = softmax(pred.object_logits.row(i));
                let mut best = 0;
                for (c, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = c;
                    }
                }
                (best, p[best].to_f64_lossy())
            })
            .collect()),
    }
}

/// Every (pair, predicate) candidate scored with [`triplet_score`], pairs in
/// canonical order with the higher index as subject.
pub fn candidate_triplets<T: Scalar>(
    pred: &SceneGraphPrediction<T>,
    gt_objects: &[usize],
    mode: RecallMode,
) -> Result<Vec<Triplet>> {
    let classes = node_classes(pred, gt_objects, mode)?;
    let mut out = Vec::new();
    for (p, (i, j)) in canonical_pairs(pred.num_objects()).into_iter().enumerate() {
        for (r, &logit) in pred.relation_logits.row(p).iter().enumerate() {
            out.push(Triplet {
                subject_index: i,
                object_index: j,
                subject_class: classes[i].0,
                object_class: classes[j].0,
                predicate_class: r,
                score: triplet_score(classes[i].1, sigmoid(logit).to_f64_lossy(), classes[j].1),
            });
        }
    }
    Ok(out)
}

/// Fraction of `gt` triplets recovered by the top-`k` candidates. A ground
/// truth triplet is recovered when a top-`k` candidate covers the same node
/// pair and predicate and the predicted classes of its subject and object
/// equal the ground-truth ones. Returns `None` only for an empty `gt` under
/// [`EmptyRecall::Skip`].
pub fn recall_at_k<T: Scalar>(
    pred: &SceneGraphPrediction<T>,
    gt_objects: &[usize],
    gt: &[Triplet],
    k: usize,
    mode: RecallMode,
    empty: EmptyRecall,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Config("Recall@K needs K >= 1".into()));
    }
    let n = pred.num_objects();
    for g in gt {
        if g.subject_index == g.object_index || g.subject_index >= n || g.object_index >= n {
            return Err(Error::Validation(format!(
                "ground-truth triplet ({}, {}) invalid for {n} objects",
                g.subject_index, g.object_index
            )));
        }
    }
    if gt.is_empty() {
        return Ok(match empty {
            EmptyRecall::One => Some(1.0),
            EmptyRecall::Skip => None,
        });
    }
    let classes = node_classes(pred, gt_objects, mode)?;
    let mut candidates = candidate_triplets(pred, gt_objects, mode)?;
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    candidates.truncate(k);
    let hit = |g: &Triplet| {
        let same_pair = |c: &Triplet| {
            (c.subject_index, c.object_index) == (g.subject_index, g.object_index)
                || (c.subject_index, c.object_index) == (g.object_index, g.subject_index)
        };
        classes[g.subject_index].0 == g.subject_class
            && classes[g.object_index].0 == g.object_class
            && candidates
                .iter()
                .any(|c| same_pair(c) && c.predicate_class == g.predicate_class)
    };
    let matched = gt.iter().filter(|g| hit(g)).count();
    Ok(Some(matched as f64 / gt.len() as f64))
}

/// Mean over keyframes that produced a value.
pub fn mean_recall(per_keyframe: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = per_keyframe.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
