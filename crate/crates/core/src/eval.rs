//! Scoring: IoU matching, COCO mAP, ring-count accuracy, pixel metrics,
//! per-frame loss and top-loss ranking.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::annot::{EllipseAnnotation, FrameRecord};
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::segmap::RingMap;

/// Ring-count tolerances reported by every accuracy table.
pub const TOLERANCES: [f64; 5] = [0.5, 0.7, 1.0, 1.5, 2.0];
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub rings: f64,
}

impl From<&EllipseAnnotation> for GroundTruth {
    fn from(e: &EllipseAnnotation) -> Self {
        GroundTruth {
            bbox: e.bbox(),
            rings: e.rings,
        }
    }
}

pub fn truths_of(frame: &FrameRecord) -> Vec<GroundTruth> {
    frame.annotations.iter().map(GroundTruth::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Prediction indices by descending score, ties by index.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].score.total_cmp(&preds[i].score).then(i.cmp(&j)));
    order
}

/// Greedy matching: each prediction, in score order, claims the unclaimed
/// truth of highest IoU if that IoU reaches `iou_thresh`.
pub fn match_detections(preds: &[Detection], truths: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let mut claimed = vec![false; truths.len()];
    let mut out = MatchResult::default();
    for i in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if claimed[j] {
                continue;
            }
            let v = preds[i].bbox.iou(&t.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) => {
                claimed[j] = true;
                out.pairs.push(MatchedPair {
                    pred: i,
                    truth: j,
                    iou: v,
                });
            }
            None => out.false_positives.push(i),
        }
    }
    out.false_negatives = (0..truths.len()).filter(|&j| !claimed[j]).collect();
    out
}

/// COCO IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Single-class average precision at one IoU threshold, 101-point
/// interpolated over the precision envelope.
pub fn average_precision(frames: &[(Vec<Detection>, Vec<GroundTruth>)], iou_thresh: f64) -> Result<f64> {
    let npos: usize = frames.iter().map(|(_, t)| t.len()).sum();
    if npos == 0 {
        return Err(Error::Undefined("no ground truth in any frame".into()));
    }
    // (score, frame, rank within frame, true positive)
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (f, (preds, truths)) in frames.iter().enumerate() {
        let m = match_detections(preds, truths, iou_thresh);
        let mut tp = vec![false; preds.len()];
        for p in &m.pairs {
            tp[p.pred] = true;
        }
        for (rank, i) in score_order(preds).into_iter().enumerate() {
            scored.push((preds[i].score, f, rank, tp[i]));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, _, _, hit) in &scored {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Ok(sum / 101.0)
}

/// Mean of [`average_precision`] over the COCO thresholds.
pub fn coco_map(frames: &[(Vec<Detection>, Vec<GroundTruth>)]) -> Result<f64> {
    let mut total = 0.0;
    for t in coco_thresholds() {
        total += average_precision(frames, t)?;
    }
    Ok(total / 10.0)
}

/// Fraction of absolute errors within each tolerance, keyed by the
/// tolerance printed as in the table header.
pub type Accuracy = BTreeMap<String, f64>;

pub fn tolerance_key(t: f64) -> String {
    format!("{t}")
}

fn accuracy_of(errors: &[f64]) -> Accuracy {
    TOLERANCES
        .iter()
        .map(|&t| {
            let hits = errors.iter().filter(|&&e| e <= t + 1e-12).count();
            (tolerance_key(t), hits as f64 / errors.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingScores {
    pub n: usize,
    pub mae: f64,
    pub acc: Accuracy,
}

/// MAE and tolerance accuracies of `(predicted, true)` pairs; `None` when
/// there are no pairs.
pub fn ring_scores(pairs: &[(f64, f64)]) -> Option<RingScores> {
    if pairs.is_empty() {
        return None;
    }
    let errors: Vec<f64> = pairs.iter().map(|(p, t)| (p - t).abs()).collect();
    Some(RingScores {
        n: errors.len(),
        mae: errors.iter().sum::<f64>() / errors.len() as f64,
        acc: accuracy_of(&errors),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelEvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<Accuracy>,
    pub support_px: usize,
}

impl PixelEvalReport {
    fn from_errors(errors: &[f64]) -> Self {
        match ring_scores(&errors.iter().map(|&e| (e, 0.0)).collect::<Vec<_>>()) {
            Some(s) => PixelEvalReport {
                mae: Some(s.mae),
                acc: Some(s.acc),
                support_px: s.n,
            },
            None => PixelEvalReport {
                mae: None,
                acc: None,
                support_px: 0,
            },
        }
    }

    /// Pool several frames' pixel errors into one report.
    pub fn pooled(maps: &[(&RingMap, &RingMap)]) -> Result<Self> {
        let mut errors = Vec::new();
        for (pred, target) in maps {
            errors.extend(pixel_errors(pred, target)?);
        }
        Ok(Self::from_errors(&errors))
    }
}

fn pixel_errors(pred: &RingMap, target: &RingMap) -> Result<Vec<f64>> {
    if (pred.width(), pred.height()) != (target.width(), target.height()) {
        return Err(Error::invalid(format!(
            "map sizes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            target.width(),
            target.height()
        )));
    }
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .filter(|(p, t)| **p > 0.0 || **t > 0.0)
        .map(|(p, t)| (p - t).abs())
        .collect())
}

/// Pixel metrics over the union of both maps' nonzero support.
pub fn pixel_scores(pred: &RingMap, target: &RingMap) -> Result<PixelEvalReport> {
    Ok(PixelEvalReport::from_errors(&pixel_errors(pred, target)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cardinality: f64,
    pub iou: f64,
    pub rings: f64,
    pub match_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cardinality: 1.0,
            iou: 1.0,
            rings: 0.5,
            match_iou: DEFAULT_MATCH_IOU,
        }
    }
}

/// `w_c (FP + FN) + sum over matches of [w_i (1 - IoU) + w_r |rings error|]`.
pub fn frame_loss(preds: &[Detection], truths: &[GroundTruth], w: &LossWeights) -> f64 {
    let m = match_detections(preds, truths, w.match_iou);
    let mut loss = w.cardinality * (m.false_positives.len() + m.false_negatives.len()) as f64;
    for p in &m.pairs {
        loss += w.iou * (1.0 - p.iou) + w.rings * (preds[p.pred].rings() - truths[p.truth].rings).abs();
    }
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub frame_id: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRanking {
    pub entries: Vec<LossEntry>,
}

impl LossRanking {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,frame_id,loss\n");
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, e.frame_id, e.loss));
        }
        out
    }
}

/// Per-frame losses, highest first; ties by frame id. Frames without
/// predictions count as having none.
pub fn rank_by_loss(
    truths: &[FrameRecord],
    preds: &HashMap<String, Vec<Detection>>,
    w: &LossWeights,
) -> LossRanking {
    let mut entries: Vec<LossEntry> = truths
        .iter()
        .map(|f| {
            let p = preds.get(&f.frame_id).map(Vec::as_slice).unwrap_or(&[]);
            LossEntry {
                frame_id: f.frame_id.clone(),
                loss: frame_loss(p, &truths_of(f), w),
            }
        })
        .collect();
    entries.sort_by(|a, b| b.loss.total_cmp(&a.loss).then_with(|| a.frame_id.cmp(&b.frame_id)));
    LossRanking { entries }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when the dataset holds no ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_coco: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<Accuracy>,
    pub n_matched: usize,
    pub n_fp: usize,
    pub n_fn: usize,
}

/// Box mAP plus ring scores on pairs matched at `iou_thresh`.
pub fn evaluate(frames: &[(Vec<Detection>, Vec<GroundTruth>)], iou_thresh: f64) -> EvalReport {
    let mut pairs = Vec::new();
    let (mut n_fp, mut n_fn) = (0, 0);
    for (preds, truths) in frames {
        let m = match_detections(preds, truths, iou_thresh);
        n_fp += m.false_positives.len();
        n_fn += m.false_negatives.len();
        pairs.extend(m.pairs.iter().map(|p| (preds[p.pred].rings(), truths[p.truth].rings)));
    }
    let rs = ring_scores(&pairs);
    EvalReport {
        map_coco: coco_map(frames).ok(),
        mae: rs.as_ref().map(|r| r.mae),
        acc: rs.map(|r| r.acc),
        n_matched: pairs.len(),
        n_fp,
        n_fn,
    }
}

/// Header of the Table-1 style CSV.
pub const TABLE_HEADER: &str = "dataset,mAP,MAE,acc0.5,acc0.7,acc1,acc1.5,acc2";

/// Three significant digits with trailing zeros trimmed.
pub fn fmt_sig3(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.2e}").parse().expect("float formatting round-trips");
    format!("{rounded}")
}

fn table_row(dataset: &str, map: Option<f64>, mae: Option<f64>, acc: Option<&Accuracy>) -> String {
    let cell = |v: Option<f64>| v.map(fmt_sig3).unwrap_or_default();
    let mut cells = vec![dataset.to_string(), cell(map), cell(mae)];
    for t in TOLERANCES {
        cells.push(cell(acc.and_then(|a| a.get(&tolerance_key(t)).copied())));
    }
    cells.join(",")
}

impl EvalReport {
    pub fn table_row(&self, dataset: &str) -> String {
        table_row(dataset, self.map_coco, self.mae, self.acc.as_ref())
    }

    pub fn acc_at(&self, t: f64) -> Option<f64> {
        self.acc.as_ref()?.get(&tolerance_key(t)).copied()
    }
}

impl PixelEvalReport {
    pub fn table_row(&self, dataset: &str) -> String {
        table_row(dataset, None, self.mae, self.acc.as_ref())
    }

    pub fn acc_at(&self, t: f64) -> Option<f64> {
        self.acc.as_ref()?.get(&tolerance_key(t)).copied()
    }
}
