//! Corner candidate decoding, joint-inference corner refinement, class-wise
//! NMS and the end-to-end decoding pipeline.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convert, BoxXYXY, ConversionMode, Point2, PointSet};
use crate::targets::{CornerKind, LevelSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerCandidate {
    pub kind: CornerKind,
    /// Sub-pixel position in image pixels.
    pub position: Point2,
    pub score: f64,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxXYXY,
    pub class_id: usize,
    pub score: f64,
    /// Whether the top-left / bottom-right corner was snapped to a candidate.
    pub refined: [bool; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Neighbourhood radius in cells of the candidate's level.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_score_floor")]
    pub score_floor: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_radius() -> f64 {
    1.0
}
fn default_score_floor() -> f64 {
    0.1
}
fn default_top_k() -> usize {
    100
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            radius: default_radius(),
            score_floor: default_score_floor(),
            top_k: default_top_k(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0) {
            return Err(Error::invalid("refine radius must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::invalid("refine score floor must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Cells scoring at least the floor, best `top_k` per corner type, as sub-pixel candidates.
///
/// `heat` is `[2, H, W]`, `offsets` is `[4, H, W]` (`dx, dy` per type).
pub fn decode_candidates(
    heat: &Tensor,
    offsets: &Tensor,
    level: LevelSpec,
    cfg: &RefineConfig,
) -> Result<Vec<CornerCandidate>> {
    let (h, w) = (level.height, level.width);
    heat.check_shape("corner heatmap", &[2, h, w])?;
    offsets.check_shape("corner offsets", &[4, h, w])?;
    let s = level.stride as f64;
    let mut out = Vec::new();
    for kind in CornerKind::ALL {
        let plane = &heat.data()[kind.index() * h * w..(kind.index() + 1) * h * w];
        let mut cells: Vec<(usize, f64)> = plane
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v >= cfg.score_floor && v > 0.0)
            .collect();
        cells.sort_by(|a, b| by_score_desc(a.1, b.1).then(a.0.cmp(&b.0)));
        cells.truncate(cfg.top_k);
        for (k, score) in cells {
            let (row, col) = (k / w, k % w);
            let dx = offsets.at(&[2 * kind.index(), row, col]);
            let dy = offsets.at(&[2 * kind.index() + 1, row, col]);
            out.push(CornerCandidate {
                kind,
                position: Point2::new((col as f64 + dx) * s, (row as f64 + dy) * s),
                score,
                stride: level.stride,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerRefinement {
    pub kind: CornerKind,
    pub before: Point2,
    pub after: Point2,
    /// Score of the winning candidate, `None` when the corner was kept.
    pub candidate_score: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub bbox: BoxXYXY,
    pub corners: [CornerRefinement; 2],
}

fn refine_corner(p: Point2, kind: CornerKind, cands: &[CornerCandidate], radius: f64) -> CornerRefinement {
    let mut best: Option<&CornerCandidate> = None;
    for c in cands.iter().filter(|c| c.kind == kind) {
        if c.position.distance(&p) / c.stride as f64 > radius {
            continue;
        }
        if best.is_none_or(|b| c.score > b.score) {
            best = Some(c);
        }
    }
    CornerRefinement {
        kind,
        before: p,
        after: best.map_or(p, |c| c.position),
        candidate_score: best.map(|c| c.score),
    }
}

/// Snaps each corner to the best-scoring candidate of its type within the
/// radius; corners without a qualifying candidate stay put. An inverted
/// result is reordered.
pub fn joint_refine(
    bbox: &BoxXYXY,
    cands_tl: &[CornerCandidate],
    cands_br: &[CornerCandidate],
    cfg: &RefineConfig,
) -> Refinement {
    let tl = refine_corner(bbox.top_left(), CornerKind::TopLeft, cands_tl, cfg.radius);
    let br = refine_corner(bbox.bottom_right(), CornerKind::BottomRight, cands_br, cfg.radius);
    Refinement {
        bbox: BoxXYXY::spanning(tl.after, br.after),
        corners: [tl, br],
    }
}

/// Greedy class-wise suppression: a detection is dropped iff it overlaps an
/// already kept detection of the same class with IoU above `iou_thresh`.
/// Output is ordered by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        by_score_desc(dets[a].score, dets[b].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && crate::geometry::iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Decoded network outputs for one image at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs {
    pub level: LevelSpec,
    /// Class probabilities `[C, H, W]`.
    pub cls: Tensor,
    /// Refined points in pixels `[2n, H, W]`, `(x, y)` interleaved.
    pub points: Tensor,
    /// Corner probabilities `[2, H, W]`, when the corner branch exists.
    pub corner_heat: Option<Tensor>,
    /// Corner offsets `[4, H, W]`, when the corner branch exists.
    pub corner_offsets: Option<Tensor>,
}

impl LevelOutputs {
    pub fn point_set(&self, row: usize, col: usize) -> PointSet {
        let n = self.points.shape()[0] / 2;
        PointSet::new(
            (0..n)
                .map(|k| Point2::new(self.points.at(&[2 * k, row, col]), self.points.at(&[2 * k + 1, row, col])))
                .collect(),
        )
    }
}

/// Which pyramid levels supply corner candidates to a box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateLevels {
    /// Every level, pooled.
    All,
    /// Only the level that produced the box.
    Own,
    /// Only the highest-resolution level, whose offsets are the most precise.
    #[default]
    Finest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Set from the head configuration when loaded from a run config.
    #[serde(skip, default = "default_true")]
    pub joint_inference: bool,
    #[serde(default)]
    pub candidate_levels: CandidateLevels,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_pre_nms")]
    pub pre_nms_per_level: usize,
    #[serde(default = "default_max_dets")]
    pub max_detections: usize,
    #[serde(default)]
    pub refine: RefineConfig,
}

fn default_true() -> bool {
    true
}
fn default_nms_iou() -> f64 {
    0.6
}
fn default_score_threshold() -> f64 {
    0.05
}
fn default_pre_nms() -> usize {
    100
}
fn default_max_dets() -> usize {
    100
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            joint_inference: true,
            candidate_levels: CandidateLevels::default(),
            nms_iou: default_nms_iou(),
            score_threshold: default_score_threshold(),
            pre_nms_per_level: default_pre_nms(),
            max_detections: default_max_dets(),
            refine: RefineConfig::default(),
        }
    }
}

/// Per-detection refinement trace, in output order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub regressed: BoxXYXY,
    pub refinement: Option<Refinement>,
}

/// decode -> convert -> joint refinement (optional) -> NMS.
pub fn run_inference(
    levels: &[LevelOutputs],
    mode: ConversionMode,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    Ok(run_inference_traced(levels, mode, cfg)?.into_iter().map(|(d, _)| d).collect())
}

pub fn run_inference_traced(
    levels: &[LevelOutputs],
    mode: ConversionMode,
    cfg: &InferenceConfig,
) -> Result<Vec<(Detection, InferenceTrace)>> {
    cfg.refine.validate()?;
    let per_level: Vec<Vec<CornerCandidate>> = if cfg.joint_inference {
        levels
            .iter()
            .map(|l| match (&l.corner_heat, &l.corner_offsets) {
                (Some(h), Some(o)) => decode_candidates(h, o, l.level, &cfg.refine),
                _ => Ok(Vec::new()),
            })
            .collect::<Result<_>>()?
    } else {
        vec![Vec::new(); levels.len()]
    };
    let pooled: Vec<CornerCandidate> = per_level.iter().flatten().copied().collect();
    let finest = (0..levels.len()).min_by_key(|&i| levels[i].level.stride).unwrap_or(0);

    let mut dets = Vec::new();
    let mut traces = Vec::new();
    for (li, l) in levels.iter().enumerate() {
        let c = l.cls.shape()[0];
        let (h, w) = (l.level.height, l.level.width);
        l.cls.check_shape("class scores", &[c, h, w])?;
        let mut picks: Vec<(usize, f64)> = l
            .cls
            .data()
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, s)| s >= cfg.score_threshold)
            .collect();
        picks.sort_by(|a, b| by_score_desc(a.1, b.1).then(a.0.cmp(&b.0)));
        picks.truncate(cfg.pre_nms_per_level);
        let cands = match cfg.candidate_levels {
            CandidateLevels::All => &pooled,
            CandidateLevels::Own => &per_level[li],
            CandidateLevels::Finest => &per_level[finest],
        };
        let (tl, br): (Vec<_>, Vec<_>) = cands.iter().partition(|c| c.kind == CornerKind::TopLeft);
        for (k, score) in picks {
            let class_id = k / (h * w);
            let (row, col) = ((k % (h * w)) / w, k % w);
            let regressed = convert(&l.point_set(row, col), mode)?;
            let (bbox, refinement) = if cfg.joint_inference {
                let r = joint_refine(&regressed, &tl, &br, &cfg.refine);
                (r.bbox, Some(r))
            } else {
                (regressed, None)
            };
            let refined = refinement.map_or([false; 2], |r| r.corners.map(|c| c.candidate_score.is_some()));
            dets.push(Detection {
                bbox,
                class_id,
                score,
                refined,
            });
            traces.push(InferenceTrace { regressed, refinement });
        }
    }

    // NMS on detections, keeping traces aligned through an index tag
    let kept = nms(&dets, cfg.nms_iou);
    let mut used = vec![false; dets.len()];
    let mut out = Vec::with_capacity(kept.len().min(cfg.max_detections));
    for k in kept.into_iter().take(cfg.max_detections) {
        let idx = (0..dets.len()).find(|&i| !used[i] && dets[i] == k).expect("kept detection comes from input");
        used[idx] = true;
        out.push((k, traces[idx].clone()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionDump {
    pub image_id: String,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionDump {
    /// Orders by descending score, then class.
    pub fn new(image_id: impl Into<String>, dets: &[Detection]) -> Self {
        let mut sorted = dets.to_vec();
        sorted.sort_by(|a, b| by_score_desc(a.score, b.score).then(a.class_id.cmp(&b.class_id)));
        Self {
            image_id: image_id.into(),
            detections: sorted
                .iter()
                .map(|d| DetectionRecord {
                    class: d.class_id,
                    score: d.score,
                    bbox: d.bbox.to_array(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("detection dump serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: [f64; 4], class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BoxXYXY::from_array(b),
            class_id,
            score,
            refined: [false; 2],
        }
    }

    fn cand(kind: CornerKind, x: f64, y: f64, score: f64, stride: usize) -> CornerCandidate {
        CornerCandidate {
            kind,
            position: Point2::new(x, y),
            score,
            stride,
        }
    }

    #[test]
    fn decode_worked_example() {
        let level = LevelSpec {
            stride: 8,
            height: 2,
            width: 3,
        };
        let mut heat = Tensor::zeros(&[2, 2, 3]);
        let mut off = Tensor::zeros(&[4, 2, 3]);
        assert!(decode_candidates(&heat, &off, level, &RefineConfig::default()).unwrap().is_empty());
        *heat.at_mut(&[0, 0, 1]) = 0.9;
        *off.at_mut(&[0, 0, 1]) = 0.625;
        *off.at_mut(&[1, 0, 1]) = 0.875;
        let c = decode_candidates(&heat, &off, level, &RefineConfig::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].position, Point2::new(13.0, 7.0));
        assert_eq!(c[0].score, 0.9);
    }

    #[test]
    fn decode_top_k_drops_lowest() {
        let level = LevelSpec {
            stride: 4,
            height: 1,
            width: 4,
        };
        let heat = Tensor::from_vec(&[2, 1, 4], vec![0.5, 0.9, 0.3, 0.7, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let cfg = RefineConfig {
            top_k: 3,
            ..Default::default()
        };
        let c = decode_candidates(&heat, &Tensor::zeros(&[4, 1, 4]), level, &cfg).unwrap();
        let scores: Vec<f64> = c.iter().map(|c| c.score).collect();
        assert_eq!(scores, vec![0.9, 0.7, 0.5]);
    }

    #[test]
    fn refine_examples() {
        let b = BoxXYXY::new(41.6, 30.4, 60.0, 50.0);
        let cfg = RefineConfig::default();
        assert_eq!(joint_refine(&b, &[], &[], &cfg).bbox, b);
        let far = cand(CornerKind::TopLeft, 10.0, 10.0, 0.99, 8);
        assert_eq!(joint_refine(&b, &[far], &[], &cfg).bbox, b);

        let c = cand(CornerKind::TopLeft, 40.0, 30.0, 0.8, 8);
        let d = (1.6f64.powi(2) + 0.4f64.powi(2)).sqrt() / 8.0;
        assert!((d - 0.206).abs() < 1e-3);
        let r = joint_refine(&b, &[c], &[], &cfg);
        assert_eq!(r.bbox.top_left(), Point2::new(40.0, 30.0));
        assert_eq!(r.corners[0].candidate_score, Some(0.8));
        assert_eq!(r.corners[1].candidate_score, None);

        let near = cand(CornerKind::TopLeft, 41.5, 30.4, 0.6, 8);
        let better = cand(CornerKind::TopLeft, 46.0, 32.0, 0.9, 8);
        let r = joint_refine(&b, &[near, better], &[], &cfg);
        assert_eq!(r.bbox.top_left(), Point2::new(46.0, 32.0));
    }

    #[test]
    fn refine_reorders_inverted_box() {
        let b = BoxXYXY::new(10.0, 10.0, 12.0, 12.0);
        let tl = cand(CornerKind::TopLeft, 12.5, 12.5, 0.9, 4);
        let r = joint_refine(&b, &[tl], &[], &RefineConfig::default());
        assert_eq!(r.bbox, BoxXYXY::new(12.0, 12.0, 12.5, 12.5));
    }

    #[test]
    fn nms_examples() {
        let a = det([0.0, 0.0, 10.0, 10.0], 0, 0.9);
        assert_eq!(nms(&[a], 0.6), vec![a]);
        let b = det([0.0, 0.0, 10.0, 10.0], 0, 0.8);
        assert_eq!(nms(&[b, a], 0.6), vec![a]);
        let c = det([0.0, 0.0, 10.0, 10.0], 1, 0.8);
        assert_eq!(nms(&[a, c], 0.6), vec![a, c]);
    }

    #[test]
    fn dump_ordering_and_fields() {
        let dets = [det([0.0, 0.0, 1.0, 1.0], 2, 0.5), det([1.0, 1.0, 2.0, 2.0], 1, 0.5), det([0.0, 0.0, 3.0, 3.0], 0, 0.9)];
        let dump = DetectionDump::new("img_0001", &dets);
        let classes: Vec<usize> = dump.detections.iter().map(|d| d.class).collect();
        assert_eq!(classes, vec![0, 1, 2]);
        let v: serde_json::Value = serde_json::from_str(&dump.to_json()).unwrap();
        assert_eq!(v["image_id"], "img_0001");
        assert_eq!(v["detections"][0]["box"], serde_json::json!([0.0, 0.0, 3.0, 3.0]));
    }

    fn level_fixture(points: Tensor, heat: Option<Tensor>) -> LevelOutputs {
        let level = LevelSpec {
            stride: 8,
            height: 2,
            width: 2,
        };
        let mut cls = Tensor::zeros(&[1, 2, 2]);
        *cls.at_mut(&[0, 1, 1]) = 0.8;
        LevelOutputs {
            level,
            cls,
            points,
            corner_offsets: heat.as_ref().map(|_| Tensor::zeros(&[4, 2, 2])),
            corner_heat: heat,
        }
    }

    fn box_points(b: [f64; 4]) -> Tensor {
        let mut p = Tensor::zeros(&[4, 2, 2]);
        for (ch, v) in b.iter().enumerate() {
            for r in 0..2 {
                for c in 0..2 {
                    *p.at_mut(&[ch, r, c]) = *v;
                }
            }
        }
        p
    }

    #[test]
    fn refinement_bypass_and_empty_candidates() {
        let pts = box_points([1.0, 2.0, 9.5, 10.0]);
        let off = InferenceConfig {
            joint_inference: false,
            ..Default::default()
        };
        let on = InferenceConfig::default();
        let plain = run_inference(&[level_fixture(pts.clone(), None)], ConversionMode::ExplicitCorners, &off).unwrap();
        assert_eq!(plain.len(), 1);
        assert_eq!(plain[0].bbox, BoxXYXY::new(1.0, 2.0, 9.5, 10.0));
        let empty = level_fixture(pts.clone(), Some(Tensor::zeros(&[2, 2, 2])));
        assert_eq!(run_inference(&[empty], ConversionMode::ExplicitCorners, &on).unwrap(), plain);
    }

    #[test]
    fn perfect_heatmap_pulls_corners_to_ground_truth() {
        // ground truth (0.5, 1.5)-(9.0, 8.75) on an 8px grid; regressed box is off by a few pixels
        let mut heat = Tensor::zeros(&[2, 2, 2]);
        *heat.at_mut(&[0, 0, 0]) = 0.95;
        *heat.at_mut(&[1, 1, 1]) = 0.95;
        let mut l = level_fixture(box_points([3.0, 4.0, 12.0, 6.0]), Some(heat));
        let off = l.corner_offsets.as_mut().unwrap();
        *off.at_mut(&[0, 0, 0]) = 0.5 / 8.0;
        *off.at_mut(&[1, 0, 0]) = 1.5 / 8.0;
        *off.at_mut(&[2, 1, 1]) = 1.0 / 8.0;
        *off.at_mut(&[3, 1, 1]) = 0.75 / 8.0;
        let d = run_inference(&[l], ConversionMode::ExplicitCorners, &InferenceConfig::default()).unwrap();
        let gt = [0.5, 1.5, 9.0, 8.75];
        for (a, b) in d[0].bbox.to_array().iter().zip(gt) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(d[0].refined, [true, true]);
    }

    #[test]
    fn candidate_level_sources() {
        let mut coarse_heat = Tensor::zeros(&[2, 2, 2]);
        *coarse_heat.at_mut(&[0, 0, 0]) = 0.9;
        let coarse = level_fixture(box_points([3.0, 4.0, 12.0, 6.0]), Some(coarse_heat));
        let mut fine_heat = Tensor::zeros(&[2, 4, 4]);
        *fine_heat.at_mut(&[0, 0, 0]) = 0.5;
        let mut fine_off = Tensor::zeros(&[4, 4, 4]);
        *fine_off.at_mut(&[0, 0, 0]) = 0.5;
        *fine_off.at_mut(&[1, 0, 0]) = 0.5;
        let fine = LevelOutputs {
            level: LevelSpec {
                stride: 4,
                height: 4,
                width: 4,
            },
            cls: Tensor::zeros(&[1, 4, 4]),
            points: Tensor::zeros(&[4, 4, 4]),
            corner_heat: Some(fine_heat),
            corner_offsets: Some(fine_off),
        };
        let levels = [fine, coarse];
        let top_left = |src| {
            let cfg = InferenceConfig {
                candidate_levels: src,
                ..Default::default()
            };
            run_inference(&levels, ConversionMode::ExplicitCorners, &cfg).unwrap()[0].bbox.top_left()
        };
        assert_eq!(top_left(CandidateLevels::Finest), Point2::new(2.0, 2.0));
        assert_eq!(top_left(CandidateLevels::Own), Point2::new(0.0, 0.0));
        assert_eq!(top_left(CandidateLevels::All), Point2::new(0.0, 0.0));
    }

    fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        // a detection survives iff no higher-ranked survivor of its class overlaps it
        let mut ranked: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap()
                .then(a.1.class_id.cmp(&b.1.class_id))
                .then(a.0.cmp(&b.0))
        });
        let mut alive = vec![true; ranked.len()];
        for i in 0..ranked.len() {
            for j in 0..i {
                if alive[j]
                    && ranked[j].1.class_id == ranked[i].1.class_id
                    && crate::geometry::iou(&ranked[j].1.bbox, &ranked[i].1.bbox) > thr
                {
                    alive[i] = false;
                }
            }
        }
        ranked.into_iter().zip(alive).filter(|(_, a)| *a).map(|((_, d), _)| d).collect()
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((0.0..20.0f64, 0.0..20.0f64, 1.0..10.0f64, 1.0..10.0f64, 0usize..2, 0.0..1.0f64), 0..12)
            .prop_map(|v| v.into_iter().map(|(x, y, w, h, c, s)| det([x, y, x + w, y + h], c, s)).collect())
    }

    proptest! {
        #[test]
        fn nms_matches_brute_force(dets in arb_dets(), thr in 0.1..0.9f64) {
            let out = nms(&dets, thr);
            prop_assert_eq!(&out, &brute_nms(&dets, thr));
            for (i, a) in out.iter().enumerate() {
                for b in &out[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || crate::geometry::iou(&a.bbox, &b.bbox) <= thr);
                }
            }
        }

        #[test]
        fn refine_moves_at_most_radius(
            cands in prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 0.1..1.0f64, prop::sample::select(vec![4usize, 8])), 0..10),
            b in (5.0..20.0f64, 5.0..20.0f64, 5.0..20.0f64, 5.0..20.0f64),
            radius in 0.0..2.0f64,
        ) {
            let bbox = BoxXYXY::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
            let tl: Vec<_> = cands.iter().map(|&(x, y, s, st)| cand(CornerKind::TopLeft, x, y, s, st)).collect();
            let br: Vec<_> = cands.iter().map(|&(x, y, s, st)| cand(CornerKind::BottomRight, x, y, s, st)).collect();
            let cfg = RefineConfig { radius, ..Default::default() };
            let r = joint_refine(&bbox, &tl, &br, &cfg);
            for c in r.corners {
                let stride = cands.iter().map(|c| c.3).max().unwrap_or(8) as f64;
                prop_assert!(c.before.distance(&c.after) <= radius * stride + 1e-9);
            }
        }

        #[test]
        fn zero_radius_refine_is_idempotent(x in 0.0..30.0f64, y in 0.0..30.0f64, w in 1.0..20.0f64, h in 1.0..20.0f64) {
            let bbox = BoxXYXY::new(x, y, x + w, y + h);
            let tl = [cand(CornerKind::TopLeft, x, y, 0.7, 8)];
            let br = [cand(CornerKind::BottomRight, x + w, y + h, 0.7, 8)];
            let cfg = RefineConfig { radius: 0.0, ..Default::default() };
            let once = joint_refine(&bbox, &tl, &br, &cfg).bbox;
            prop_assert_eq!(once, bbox);
            prop_assert_eq!(joint_refine(&once, &tl, &br, &cfg).bbox, once);
        }
    }
}
