//! COCO-style average precision: greedy score-ordered matching at each IoU
//! threshold and 101-point interpolated precision.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::inference::Detection;
use crate::scene::GtScene;

pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_thresholds: Vec<f64>,
    /// Mean over classes with ground truth, per threshold.
    pub ap_per_iou: Vec<f64>,
    /// Mean of `ap_per_iou`.
    pub ap: f64,
    /// Mean over thresholds per class; `None` for classes absent from the ground truth.
    pub per_class_ap: Vec<Option<f64>>,
}

impl EvalResult {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.ap_per_iou[i])
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// True/false-positive flags for one class at one threshold, in score order.
fn match_class(gts: &[GtScene], dets: &[Vec<Detection>], class_id: usize, thr: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().enumerate().filter(|(_, x)| x.class_id == class_id).map(move |(j, _)| (img, j)))
        .collect();
    order.sort_by(|a, b| {
        dets[b.0][b.1]
            .score
            .partial_cmp(&dets[a.0][a.1].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.objects.len()]).collect();
    let npos = gts.iter().flat_map(|g| &g.objects).filter(|o| o.class_id == class_id).count();
    let flags = order
        .into_iter()
        .map(|(img, j)| {
            let d = &dets[img][j];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[img].objects.iter().enumerate() {
                if g.class_id != class_id || taken[img][gi] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[img][gi] = true;
            }
            best.is_some()
        })
        .collect();
    (flags, npos)
}

/// 101-point interpolated AP from score-ordered TP flags.
pub fn interpolated_ap(tp: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / npos as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Scores `dets[i]` against `gts[i]` for every image.
pub fn evaluate_detections(gts: &[GtScene], dets: &[Vec<Detection>], thresholds: &[f64]) -> Result<EvalResult> {
    if gts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if gts.len() != dets.len() {
        return Err(Error::invalid(format!("{} scenes but {} detection lists", gts.len(), dets.len())));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("IoU thresholds must be a non-empty list within [0, 1]"));
    }
    let num_classes = gts[0].num_classes;
    let mut table: Vec<Vec<Option<f64>>> = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        table.push(
            (0..num_classes)
                .map(|c| {
                    let (tp, npos) = match_class(gts, dets, c, t);
                    (npos > 0).then(|| interpolated_ap(&tp, npos))
                })
                .collect(),
        );
    }
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let ap_per_iou: Vec<f64> = table.iter().map(|row| mean(&mut row.iter().flatten().copied())).collect();
    let per_class_ap = (0..num_classes)
        .map(|c| {
            table
                .iter()
                .map(|row| row[c])
                .collect::<Option<Vec<f64>>>()
                .map(|v| mean(&mut v.into_iter()))
        })
        .collect();
    Ok(EvalResult {
        iou_thresholds: thresholds.to_vec(),
        ap: mean(&mut ap_per_iou.iter().copied()),
        ap_per_iou,
        per_class_ap,
    })
}
