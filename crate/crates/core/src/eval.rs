//! Instance-segmentation evaluation: IoU, Recall@k, mAP, per-group reports
//! with harmonic means, and the copy-paste prediction expansion.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::pipeline::RleRecord;

/// IoU threshold at which average precision is computed.
pub const AP_IOU: f64 = 0.5;

/// Intersection over union of two same-shape masks; 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = a.overlap_counts(b)?;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Tight axis-aligned bounds of the set pixels as (x_min, y_min, x_max, y_max).
pub fn bbox_from_mask(mask: &BinaryMask) -> Result<(usize, usize, usize, usize)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut x_min, mut y_min) = (usize::MAX, usize::MAX);
    let (mut x_max, mut y_max) = (0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == 1 {
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x);
                y_max = y_max.max(y);
            }
        }
    }
    Ok((x_min, y_min, x_max, y_max))
}

/// 2ab/(a+b), or 0 when both inputs are 0.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if a < 0.0 || b < 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(Error::Parameter(format!(
            "harmonic mean needs finite non-negative inputs, got ({a}, {b})"
        )));
    }
    Ok(if a + b == 0.0 { 0.0 } else { 2.0 * a * b / (a + b) })
}

/// One scored instance mask.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub image_id: u64,
    pub class_name: String,
    pub confidence: f64,
    pub mask: BinaryMask,
}

impl InstancePrediction {
    pub fn new(image_id: u64, class_name: &str, confidence: f64, mask: BinaryMask) -> Result<Self> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidScore(format!(
                "confidence must lie in [0,1], got {confidence}"
            )));
        }
        Ok(Self {
            image_id,
            class_name: class_name.to_string(),
            confidence,
            mask,
        })
    }
}

/// One ground-truth instance mask.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_name: String,
    pub mask: BinaryMask,
}

/// An instance that carries both group score vectors, ready for copy-paste.
#[derive(Debug, Clone)]
pub struct ScoredInstance {
    pub image_id: u64,
    pub mask: BinaryMask,
    /// Distribution over [background, seen classes...].
    pub seen_scores: Vec<f64>,
    /// Distribution over unseen classes.
    pub unseen_scores: Vec<f64>,
}

/// Duplicate every instance with its best seen label and its best unseen
/// label; seen copies whose argmax is background are dropped.
pub fn copy_paste_expand(
    instances: &[ScoredInstance],
    seen_names: &[String],
    unseen_names: &[String],
) -> Result<Vec<InstancePrediction>> {
    let mut out = Vec::with_capacity(2 * instances.len());
    for inst in instances {
        if inst.seen_scores.len() != 1 + seen_names.len()
            || inst.unseen_scores.len() != unseen_names.len()
        {
            return Err(Error::Shape(format!(
                "instance scores sized {} / {} for {} seen and {} unseen classes",
                inst.seen_scores.len(),
                inst.unseen_scores.len(),
                seen_names.len(),
                unseen_names.len()
            )));
        }
        let seen_arg = argmax(&inst.seen_scores)?;
        if seen_arg > 0 {
            out.push(InstancePrediction::new(
                inst.image_id,
                &seen_names[seen_arg - 1],
                inst.seen_scores[seen_arg],
                inst.mask.clone(),
            )?);
        }
        let unseen_arg = argmax(&inst.unseen_scores)?;
        out.push(InstancePrediction::new(
            inst.image_id,
            &unseen_names[unseen_arg],
            inst.unseen_scores[unseen_arg],
            inst.mask.clone(),
        )?);
    }
    Ok(out)
}

fn argmax(values: &[f64]) -> Result<usize> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidScore("empty or non-finite score vector".into()));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Raw matching outcome for one class.
#[derive(Debug, Clone, Default)]
pub struct ClassOutcome {
    pub gt_count: usize,
    /// Predictions surviving the per-image top-k cut.
    pub pred_count: usize,
    /// Matched ground-truth instances per recall threshold.
    pub true_positives: Vec<usize>,
    /// True positives at the AP threshold.
    pub true_positives_ap: usize,
    /// Average precision at IoU 0.5; `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

/// Per-class matching results over a dataset.
#[derive(Debug, Clone)]
pub struct DetectionMetrics {
    pub thresholds: Vec<f64>,
    pub per_class: BTreeMap<String, ClassOutcome>,
    pub images: usize,
}

struct ImageOutcome {
    /// class -> true positives per threshold.
    tp: BTreeMap<String, Vec<usize>>,
    /// class -> kept prediction count.
    kept: BTreeMap<String, usize>,
    /// class -> (confidence, global index, is TP at AP_IOU).
    ap_flags: BTreeMap<String, Vec<(f64, usize, bool)>>,
}

fn match_one_image(
    preds: &[(usize, &InstancePrediction)],
    gts: &[&GroundTruth],
    thresholds: &[f64],
    top_k: usize,
) -> Result<ImageOutcome> {
    // Stable ranking: confidence descending, then input order.
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .1
            .confidence
            .partial_cmp(&preds[a].1.confidence)
            .expect("finite confidence")
            .then(preds[a].0.cmp(&preds[b].0))
    });
    order.truncate(top_k);

    let mut iou = Array2::<f64>::zeros((order.len(), gts.len()));
    for (r, &p) in order.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            iou[(r, g)] = mask_iou(&preds[p].1.mask, &gt.mask)?;
        }
    }

    let mut outcome = ImageOutcome {
        tp: BTreeMap::new(),
        kept: BTreeMap::new(),
        ap_flags: BTreeMap::new(),
    };
    for &p in &order {
        *outcome
            .kept
            .entry(preds[p].1.class_name.clone())
            .or_default() += 1;
    }

    let greedy = |threshold: f64| -> BTreeMap<String, Vec<(usize, bool)>> {
        // class -> list of (rank, matched) in rank order.
        let mut used = vec![false; gts.len()];
        let mut flags: BTreeMap<String, Vec<(usize, bool)>> = BTreeMap::new();
        for (r, &p) in order.iter().enumerate() {
            let class = &preds[p].1.class_name;
            let mut best: Option<usize> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.class_name != *class || iou[(r, g)] < threshold {
                    continue;
                }
                if best.is_none_or(|b| iou[(r, g)] > iou[(r, b)]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                used[g] = true;
            }
            flags.entry(class.clone()).or_default().push((p, best.is_some()));
        }
        flags
    };

    for (t_idx, &t) in thresholds.iter().enumerate() {
        for (class, flags) in greedy(t) {
            let tp = flags.iter().filter(|(_, hit)| *hit).count();
            let row = outcome
                .tp
                .entry(class)
                .or_insert_with(|| vec![0; thresholds.len()]);
            row[t_idx] = tp;
        }
    }
    for (class, flags) in greedy(AP_IOU) {
        let entry = outcome.ap_flags.entry(class).or_default();
        for (p, hit) in flags {
            entry.push((preds[p].1.confidence, preds[p].0, hit));
        }
    }
    Ok(outcome)
}

/// All-points interpolated area under the precision-recall curve.
fn all_points_ap(flags: &[(f64, usize, bool)], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut sorted: Vec<&(f64, usize, bool)> = flags.iter().collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    let mut precisions = Vec::with_capacity(sorted.len());
    let mut recalls = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (rank, (_, _, hit)) in sorted.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / gt_count as f64);
    }
    // Precision envelope from the right, then sum recall increments.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        ap += (recalls[i] - prev_recall) * precisions[i];
        prev_recall = recalls[i];
    }
    ap
}

/// Score predictions against ground truth.
///
/// Per image the top-k predictions by confidence are kept; greedy matching in
/// confidence order pairs each prediction with the highest-IoU unmatched
/// ground truth of the same class at or above the threshold.  Images are
/// scored in parallel and reduced in a fixed order.
pub fn evaluate_detections(
    predictions: &[InstancePrediction],
    ground_truth: &[GroundTruth],
    classes: &[String],
    thresholds: &[f64],
    top_k: usize,
) -> Result<DetectionMetrics> {
    if top_k == 0 {
        return Err(Error::Parameter("top_k must be at least 1".into()));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Parameter(
            "recall thresholds must be a non-empty list within [0,1]".into(),
        ));
    }
    for p in predictions {
        if !classes.contains(&p.class_name) {
            return Err(Error::UnknownClass(p.class_name.clone()));
        }
        if !p.confidence.is_finite() || !(0.0..=1.0).contains(&p.confidence) {
            return Err(Error::InvalidScore(format!(
                "confidence {} on image {}",
                p.confidence, p.image_id
            )));
        }
    }
    for g in ground_truth {
        if !classes.contains(&g.class_name) {
            return Err(Error::UnknownClass(g.class_name.clone()));
        }
    }

    let mut images: BTreeMap<u64, (Vec<(usize, &InstancePrediction)>, Vec<&GroundTruth>)> =
        BTreeMap::new();
    for (i, p) in predictions.iter().enumerate() {
        images.entry(p.image_id).or_default().0.push((i, p));
    }
    for g in ground_truth {
        images.entry(g.image_id).or_default().1.push(g);
    }
    let image_count = images.len();

    let per_image: Result<Vec<ImageOutcome>> = images
        .par_iter()
        .map(|(_, (preds, gts))| match_one_image(preds, gts, thresholds, top_k))
        .collect();
    let per_image = per_image?;

    let mut per_class: BTreeMap<String, ClassOutcome> = classes
        .iter()
        .map(|c| {
            (
                c.clone(),
                ClassOutcome {
                    true_positives: vec![0; thresholds.len()],
                    ..ClassOutcome::default()
                },
            )
        })
        .collect();
    for g in ground_truth {
        per_class.get_mut(&g.class_name).expect("validated").gt_count += 1;
    }
    let mut ap_flags: BTreeMap<String, Vec<(f64, usize, bool)>> = BTreeMap::new();
    for outcome in per_image {
        for (class, tps) in outcome.tp {
            let entry = per_class.get_mut(&class).expect("validated");
            for (i, tp) in tps.into_iter().enumerate() {
                entry.true_positives[i] += tp;
            }
        }
        for (class, kept) in outcome.kept {
            per_class.get_mut(&class).expect("validated").pred_count += kept;
        }
        for (class, flags) in outcome.ap_flags {
            ap_flags.entry(class).or_default().extend(flags);
        }
    }
    for (class, outcome) in per_class.iter_mut() {
        let flags = ap_flags.remove(class).unwrap_or_default();
        outcome.true_positives_ap = flags.iter().filter(|(_, _, hit)| *hit).count();
        outcome.ap = if outcome.gt_count > 0 {
            Some(all_points_ap(&flags, outcome.gt_count))
        } else {
            None
        };
    }
    Ok(DetectionMetrics {
        thresholds: thresholds.to_vec(),
        per_class,
        images: image_count,
    })
}

/// Aggregated metrics for one class group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub map: f64,
    /// Recall@k per threshold, aligned with the report's threshold list.
    pub recall: Vec<f64>,
    /// Micro-averaged precision at IoU 0.5.
    pub precision: f64,
    pub gt_instances: usize,
    pub predictions: usize,
}

/// Per-group evaluation summary; `seen` is absent in unseen-only mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub images: usize,
    pub seen: Option<GroupMetrics>,
    pub unseen: GroupMetrics,
}

fn group_metrics(metrics: &DetectionMetrics, names: &[String]) -> Result<GroupMetrics> {
    let mut aps = Vec::new();
    let mut tp = vec![0usize; metrics.thresholds.len()];
    let mut tp_ap = 0usize;
    let mut gt_total = 0usize;
    let mut pred_total = 0usize;
    for name in names {
        let outcome = metrics
            .per_class
            .get(name)
            .ok_or_else(|| Error::UnknownClass(name.clone()))?;
        if let Some(ap) = outcome.ap {
            aps.push(ap);
        }
        for (i, t) in outcome.true_positives.iter().enumerate() {
            tp[i] += t;
        }
        tp_ap += outcome.true_positives_ap;
        gt_total += outcome.gt_count;
        pred_total += outcome.pred_count;
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let recall = tp
        .iter()
        .map(|&t| {
            if gt_total == 0 {
                0.0
            } else {
                t as f64 / gt_total as f64
            }
        })
        .collect();
    let precision = if pred_total == 0 {
        0.0
    } else {
        tp_ap as f64 / pred_total as f64
    };
    Ok(GroupMetrics {
        map,
        recall,
        precision,
        gt_instances: gt_total,
        predictions: pred_total,
    })
}

/// Collapse per-class metrics into a seen/unseen report.
///
/// Pass an empty seen list for unseen-only (ZSIS) evaluation.
pub fn build_report(
    metrics: &DetectionMetrics,
    seen_names: &[String],
    unseen_names: &[String],
) -> Result<EvalReport> {
    let seen = if seen_names.is_empty() {
        None
    } else {
        Some(group_metrics(metrics, seen_names)?)
    };
    Ok(EvalReport {
        thresholds: metrics.thresholds.clone(),
        images: metrics.images,
        seen,
        unseen: group_metrics(metrics, unseen_names)?,
    })
}

impl EvalReport {
    /// Harmonic mean of the seen and unseen mAP cells; `None` in unseen-only
    /// mode.
    pub fn hm_map(&self) -> Result<Option<f64>> {
        match &self.seen {
            Some(seen) => Ok(Some(harmonic_mean(seen.map, self.unseen.map)?)),
            None => Ok(None),
        }
    }

    /// Harmonic mean of the recall cells per threshold.
    pub fn hm_recall(&self) -> Result<Option<Vec<f64>>> {
        match &self.seen {
            Some(seen) => {
                let mut out = Vec::with_capacity(self.thresholds.len());
                for (a, b) in seen.recall.iter().zip(&self.unseen.recall) {
                    out.push(harmonic_mean(*a, *b)?);
                }
                Ok(Some(out))
            }
            None => Ok(None),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut header = String::from("group,map@0.5");
        for t in &self.thresholds {
            header.push_str(&format!(",recall@100@{t}"));
        }
        header.push_str(",precision@0.5,gt_instances,predictions\n");
        let mut body = String::new();
        let row = |name: &str, g: &GroupMetrics| {
            let mut line = format!("{name},{:.6}", g.map);
            for r in &g.recall {
                line.push_str(&format!(",{r:.6}"));
            }
            line.push_str(&format!(
                ",{:.6},{},{}\n",
                g.precision, g.gt_instances, g.predictions
            ));
            line
        };
        if let Some(seen) = &self.seen {
            body.push_str(&row("seen", seen));
        }
        body.push_str(&row("unseen", &self.unseen));
        if self.seen.is_some() {
            let mut line = format!("hm,{:.6}", self.hm_map()?.expect("seen present"));
            for r in self.hm_recall()?.expect("seen present") {
                line.push_str(&format!(",{r:.6}"));
            }
            line.push_str(",,,\n");
            body.push_str(&line);
        }
        Ok(format!("{header}{body}"))
    }

    pub fn to_markdown(&self) -> Result<String> {
        let mut out = String::from("| group | mAP@0.5 |");
        for t in &self.thresholds {
            out.push_str(&format!(" R@100@{t} |"));
        }
        out.push_str(" precision@0.5 |\n|---|---|");
        for _ in &self.thresholds {
            out.push_str("---|");
        }
        out.push_str("---|\n");
        let row = |name: &str, g: &GroupMetrics| {
            let mut line = format!("| {name} | {:.4} |", g.map);
            for r in &g.recall {
                line.push_str(&format!(" {r:.4} |"));
            }
            line.push_str(&format!(" {:.4} |\n", g.precision));
            line
        };
        if let Some(seen) = &self.seen {
            out.push_str(&row("seen", seen));
        }
        out.push_str(&row("unseen", &self.unseen));
        if self.seen.is_some() {
            let mut line = format!("| HM | {:.4} |", self.hm_map()?.expect("seen present"));
            for r in self.hm_recall()?.expect("seen present") {
                line.push_str(&format!(" {r:.4} |"));
            }
            line.push_str(" — |\n");
            out.push_str(&line);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    image_id: u64,
    class_name: String,
    confidence: f64,
    rle: RleRecord,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthLine {
    image_id: u64,
    class_name: String,
    rle: RleRecord,
}

/// Write predictions as newline-delimited JSON records.
pub fn write_predictions(path: &Path, predictions: &[InstancePrediction]) -> Result<()> {
    let mut out = String::new();
    for p in predictions {
        let line = PredictionLine {
            image_id: p.image_id,
            class_name: p.class_name.clone(),
            confidence: p.confidence,
            rle: RleRecord::from_mask(&p.mask),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<InstancePrediction>> {
    let mut out = Vec::new();
    for line in fs::read_to_string(path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
        out.push(InstancePrediction::new(
            parsed.image_id,
            &parsed.class_name,
            parsed.confidence,
            parsed.rle.to_mask()?,
        )?);
    }
    Ok(out)
}

/// Write ground truth as newline-delimited JSON records.
pub fn write_ground_truth(path: &Path, ground_truth: &[GroundTruth]) -> Result<()> {
    let mut out = String::new();
    for g in ground_truth {
        let line = GroundTruthLine {
            image_id: g.image_id,
            class_name: g.class_name.clone(),
            rle: RleRecord::from_mask(&g.mask),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for line in fs::read_to_string(path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GroundTruthLine =
            serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
        out.push(GroundTruth {
            image_id: parsed.image_id,
            class_name: parsed.class_name,
            mask: parsed.rle.to_mask()?,
        });
    }
    Ok(out)
}
