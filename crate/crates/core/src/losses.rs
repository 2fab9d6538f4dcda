//! Training losses with analytic gradients.
//!
//! Every loss returns its scalar value together with the gradient with
//! respect to its prediction argument. Probabilities are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before taking logs; the gradient is zero where
//! the clamp is active.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convert, convert_backward, giou, BoxXYXY, ConversionMode, PointSet};
use crate::targets::{CornerHeatmapTarget, ForegroundTarget, OffsetTarget};
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-6;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the corner verification loss.
    #[serde(default = "default_corner_weight")]
    pub corner: f64,
    /// Weight of the foreground verification loss.
    #[serde(default = "default_foreground_weight")]
    pub foreground: f64,
}

fn default_corner_weight() -> f64 {
    0.25
}

fn default_foreground_weight() -> f64 {
    0.1
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            corner: default_corner_weight(),
            foreground: default_foreground_weight(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    /// Focusing exponent of the corner heatmap loss.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Gaussian-penalty exponent of the corner heatmap loss.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Positive/negative balance of the foreground loss.
    #[serde(default = "default_alpha_fg")]
    pub alpha_fg: f64,
    /// Focusing exponent of the foreground loss.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_alpha() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    4.0
}
fn default_alpha_fg() -> f64 {
    0.25
}
fn default_gamma() -> f64 {
    2.0
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            alpha_fg: default_alpha_fg(),
            gamma: default_gamma(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub gradient: Tensor,
}

impl LossOutput {
    pub fn zero(shape: &[usize]) -> Self {
        Self {
            value: 0.0,
            gradient: Tensor::zeros(shape),
        }
    }

    fn scaled(mut self, factor: f64) -> Self {
        self.value *= factor;
        self.gradient.scale(factor);
        self
    }
}

/// Clamped probability and the derivative of the clamp.
fn clamp_prob(p: f64) -> (f64, f64) {
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

/// `-(1-p)^a log p` and its derivative.
fn pos_focal(p: f64, a: f64) -> (f64, f64) {
    let q = 1.0 - p;
    let lp = p.ln();
    let v = -q.powf(a) * lp;
    let d = a * q.powf(a - 1.0) * lp - q.powf(a) / p;
    (v, d)
}

/// `-p^a log(1-p)` and its derivative.
fn neg_focal(p: f64, a: f64) -> (f64, f64) {
    let l1 = (1.0 - p).ln();
    let v = -p.powf(a) * l1;
    let d = -(a * p.powf(a - 1.0) * l1 - p.powf(a) / (1.0 - p));
    (v, d)
}

/// Penalty-reduced focal loss on the two corner heatmaps, scaled by `1/max(N,1)`.
///
/// `pred` holds probabilities of shape `[2, H, W]` (top-left, bottom-right).
pub fn corner_heatmap_loss(
    pred: &Tensor,
    target: &CornerHeatmapTarget,
    num_objects: usize,
    params: &FocalParams,
) -> Result<LossOutput> {
    pred.check_shape("corner heatmap prediction", target.heat.shape())?;
    let norm = 1.0 / num_objects.max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    for (k, ((&p_raw, &y), &pos)) in pred
        .data()
        .iter()
        .zip(target.heat.data())
        .zip(&target.positive)
        .enumerate()
    {
        let (p, dclamp) = clamp_prob(p_raw);
        let (v, d) = if pos {
            pos_focal(p, params.alpha)
        } else {
            let w = (1.0 - y).powf(params.beta);
            let (v, d) = neg_focal(p, params.alpha);
            (w * v, w * d)
        };
        value += v;
        grad.data_mut()[k] = d * dclamp * norm;
    }
    Ok(LossOutput {
        value: value * norm,
        gradient: grad,
    })
}

/// Smooth-L1 and its derivative.
pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Smooth-L1 on the sub-pixel offsets of supervised corner cells, averaged over corners.
///
/// `pred` has shape `[4, H, W]`: `(dx, dy)` for top-left then bottom-right.
pub fn offset_loss(pred: &Tensor, target: &OffsetTarget) -> Result<LossOutput> {
    let shape = pred.shape();
    if shape.len() != 3 || shape[0] != 4 {
        return Err(Error::invalid(format!("offset prediction must be [4, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut grad = Tensor::zeros(shape);
    if target.entries.is_empty() {
        return Ok(LossOutput { value: 0.0, gradient: grad });
    }
    let norm = 1.0 / target.entries.len() as f64;
    let mut value = 0.0;
    for e in &target.entries {
        if e.row >= h || e.col >= w {
            return Err(Error::invalid(format!(
                "no offset prediction for supervised cell ({}, {}) in a {h}x{w} map",
                e.row, e.col
            )));
        }
        for (axis, t) in [e.target.0, e.target.1].into_iter().enumerate() {
            let ch = 2 * e.kind.index() + axis;
            let p = pred.at(&[ch, e.row, e.col]);
            let (v, d) = smooth_l1(p - t, SMOOTH_L1_BETA);
            value += v;
            *grad.at_mut(&[ch, e.row, e.col]) += d * norm;
        }
    }
    Ok(LossOutput {
        value: value * norm,
        gradient: grad,
    })
}

/// Heatmap loss plus offset loss. The gradient is `[6, H, W]`: the two
/// heatmap channels followed by the four offset channels.
pub fn corner_loss(
    heat_pred: &Tensor,
    offset_pred: &Tensor,
    target: &CornerHeatmapTarget,
    offsets: &OffsetTarget,
    num_objects: usize,
    params: &FocalParams,
) -> Result<LossOutput> {
    let heat = corner_heatmap_loss(heat_pred, target, num_objects, params)?;
    let off = offset_loss(offset_pred, offsets)?;
    if heat.gradient.shape()[1..] != off.gradient.shape()[1..] {
        return Err(Error::ShapeMismatch {
            context: "corner loss",
            expected: heat.gradient.shape().to_vec(),
            got: off.gradient.shape().to_vec(),
        });
    }
    let mut data = heat.gradient.into_data();
    data.extend_from_slice(off.gradient.data());
    let s = off.gradient.shape();
    Ok(LossOutput {
        value: heat.value + off.value,
        gradient: Tensor::from_vec(&[6, s[1], s[2]], data)?,
    })
}

/// Focal loss whose positives are weighted by the reciprocal of their
/// object's positive-cell count and normalized by the weight sum, so every
/// object contributes equally regardless of size. Negatives are normalized
/// by the positive count. Zero when there are no positives.
pub fn normalized_focal_loss(pred: &Tensor, target: &ForegroundTarget, params: &FocalParams) -> Result<LossOutput> {
    pred.check_shape("foreground prediction", target.labels.shape())?;
    if target.num_positive == 0 {
        return Ok(LossOutput::zero(pred.shape()));
    }
    let a = params.alpha_fg;
    let inv_nw = 1.0 / target.weight_sum;
    let inv_n = 1.0 / target.num_positive as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    for (k, ((&p_raw, &y), &w)) in pred
        .data()
        .iter()
        .zip(target.labels.data())
        .zip(target.weights.data())
        .enumerate()
    {
        let (p, dclamp) = clamp_prob(p_raw);
        let (v, d) = if y == 1.0 {
            let (v, d) = pos_focal(p, params.gamma);
            let c = inv_nw * w * a;
            (c * v, c * d)
        } else {
            let (v, d) = neg_focal(p, params.gamma);
            let c = inv_n * (1.0 - a);
            (c * v, c * d)
        };
        value += v;
        grad.data_mut()[k] = d * dclamp;
    }
    Ok(LossOutput { value, gradient: grad })
}

/// Standard sigmoid focal loss for classification, normalized by `max(num_pos, 1)`.
///
/// `labels` holds 0/1 targets of the same shape as `pred`.
pub fn focal_loss(pred: &Tensor, labels: &Tensor, alpha: f64, gamma: f64) -> Result<LossOutput> {
    pred.check_shape("classification prediction", labels.shape())?;
    let num_pos = labels.data().iter().filter(|&&v| v == 1.0).count();
    let norm = 1.0 / num_pos.max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    for (k, (&p_raw, &y)) in pred.data().iter().zip(labels.data()).enumerate() {
        let (p, dclamp) = clamp_prob(p_raw);
        let (v, d) = if y == 1.0 {
            let (v, d) = pos_focal(p, gamma);
            (alpha * v, alpha * d)
        } else {
            let (v, d) = neg_focal(p, gamma);
            ((1.0 - alpha) * v, (1.0 - alpha) * d)
        };
        value += v;
        grad.data_mut()[k] = d * dclamp * norm;
    }
    Ok(LossOutput {
        value: value * norm,
        gradient: grad,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLossKind {
    SmoothL1,
    #[default]
    Giou,
}

/// `1 - giou(a, b)` and its gradient with respect to `a`.
pub fn giou_loss(a: &BoxXYXY, b: &BoxXYXY) -> (f64, [f64; 4]) {
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let area_a = aw * ah;
    let area_b = b.area();
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let (iw, ih) = (ix2 - ix1, iy2 - iy1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = area_a + area_b - inter;
    let hx1 = a.x1.min(b.x1);
    let hy1 = a.y1.min(b.y1);
    let hx2 = a.x2.max(b.x2);
    let hy2 = a.y2.max(b.y2);
    let (hw, hh) = (hx2 - hx1, hy2 - hy1);
    let hull = hw * hh;

    // d/d(x1, y1, x2, y2) of each area term
    let d_area_a = [-ah, -aw, ah, aw];
    let mut d_inter = [0.0; 4];
    if overlapping {
        if a.x1 > b.x1 {
            d_inter[0] = -ih;
        }
        if a.y1 > b.y1 {
            d_inter[1] = -iw;
        }
        if a.x2 < b.x2 {
            d_inter[2] = ih;
        }
        if a.y2 < b.y2 {
            d_inter[3] = iw;
        }
    }
    let mut d_hull = [0.0; 4];
    if a.x1 <= b.x1 {
        d_hull[0] = -hh;
    }
    if a.y1 <= b.y1 {
        d_hull[1] = -hw;
    }
    if a.x2 >= b.x2 {
        d_hull[2] = hh;
    }
    if a.y2 >= b.y2 {
        d_hull[3] = hw;
    }

    let mut g = [0.0; 4];
    let mut value = 1.0;
    if union > 0.0 {
        value -= inter / union;
        for k in 0..4 {
            let du = d_area_a[k] - d_inter[k];
            g[k] -= d_inter[k] / union - inter * du / (union * union);
        }
    }
    if hull > 0.0 {
        // giou = iou - 1 + union / hull
        value -= union / hull - 1.0;
        for k in 0..4 {
            let du = d_area_a[k] - d_inter[k];
            g[k] -= du / hull - union * d_hull[k] / (hull * hull);
        }
    }
    debug_assert!((value - (1.0 - giou(a, b))).abs() < 1e-9);
    (value, g)
}

/// Mean per-pair box loss and its gradient `[n, 4]` with respect to `pred`.
///
/// In smooth-L1 mode each coordinate difference is divided by the pair's
/// `scale` (1 when `scales` is `None`) and the four terms are averaged.
pub fn box_regression_loss(
    pred: &[BoxXYXY],
    gt: &[BoxXYXY],
    kind: RegressionLossKind,
    scales: Option<&[f64]>,
) -> Result<LossOutput> {
    if pred.len() != gt.len() || scales.is_some_and(|s| s.len() != pred.len()) {
        return Err(Error::invalid(format!(
            "regression pairs disagree: {} predictions, {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    let mut grad = Tensor::zeros(&[n, 4]);
    if n == 0 {
        log::debug!("regression loss called with no matched pairs");
        return Ok(LossOutput { value: 0.0, gradient: grad });
    }
    let norm = 1.0 / n as f64;
    let mut value = 0.0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        match kind {
            RegressionLossKind::Giou => {
                let (v, d) = giou_loss(p, g);
                value += v;
                for k in 0..4 {
                    grad.data_mut()[i * 4 + k] = d[k] * norm;
                }
            }
            RegressionLossKind::SmoothL1 => {
                let s = scales.map_or(1.0, |s| s[i]);
                let (pa, ga) = (p.to_array(), g.to_array());
                for k in 0..4 {
                    let (v, d) = smooth_l1((pa[k] - ga[k]) / s, SMOOTH_L1_BETA);
                    value += 0.25 * v;
                    grad.data_mut()[i * 4 + k] = 0.25 * d / s * norm;
                }
            }
        }
    }
    Ok(LossOutput {
        value: value * norm,
        gradient: grad,
    })
}

/// Point-set regression loss over both refinement stages.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRegressionLoss {
    pub value: f64,
    /// `[pairs, points, 2]` gradient for the first stage.
    pub grad_initial: Tensor,
    /// `[pairs, points, 2]` gradient for the refined stage.
    pub grad_refined: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub initial: f64,
    pub refined: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        Self {
            initial: 0.5,
            refined: 1.0,
        }
    }
}

fn stage_loss(
    sets: &[PointSet],
    gt: &[BoxXYXY],
    mode: ConversionMode,
    kind: RegressionLossKind,
    scales: Option<&[f64]>,
) -> Result<(f64, Tensor)> {
    let boxes = sets.iter().map(|s| convert(s, mode)).collect::<Result<Vec<_>>>()?;
    let out = box_regression_loss(&boxes, gt, kind, scales)?;
    let npts = sets.first().map_or(0, |s| s.len());
    let mut grad = Tensor::zeros(&[sets.len(), npts, 2]);
    for (i, s) in sets.iter().enumerate() {
        if s.len() != npts {
            return Err(Error::invalid("point sets of differing length"));
        }
        let d = &out.gradient.data()[i * 4..i * 4 + 4];
        let gp = convert_backward(s, mode, [d[0], d[1], d[2], d[3]])?;
        for (j, p) in gp.iter().enumerate() {
            grad.data_mut()[(i * npts + j) * 2] = p.x;
            grad.data_mut()[(i * npts + j) * 2 + 1] = p.y;
        }
    }
    Ok((out.value, grad))
}

/// Weighted sum of the initial- and refined-stage box losses, with
/// gradients chained through the conversion function onto the points.
pub fn reppoints_regression_loss(
    initial: &[PointSet],
    refined: &[PointSet],
    gt: &[BoxXYXY],
    mode: ConversionMode,
    kind: RegressionLossKind,
    scales: Option<&[f64]>,
    weights: StageWeights,
) -> Result<PointRegressionLoss> {
    let (v1, mut g1) = stage_loss(initial, gt, mode, kind, scales)?;
    let (v2, mut g2) = stage_loss(refined, gt, mode, kind, scales)?;
    g1.scale(weights.initial);
    g2.scale(weights.refined);
    Ok(PointRegressionLoss {
        value: weights.initial * v1 + weights.refined * v2,
        grad_initial: g1,
        grad_refined: g2,
    })
}

/// The three components of the multi-task objective, each pre-scaled by its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedLoss {
    pub value: f64,
    pub reppoints: LossOutput,
    pub corner: LossOutput,
    pub foreground: LossOutput,
}

/// `L = L_reppoints + w_corner * L_corner + w_fg * L_fg`; each component's
/// gradient is scaled by its weight.
pub fn total_loss(reppoints: LossOutput, corner: LossOutput, foreground: LossOutput, w: &LossWeights) -> WeightedLoss {
    let corner = corner.scaled(w.corner);
    let foreground = foreground.scaled(w.foreground);
    WeightedLoss {
        value: reppoints.value + corner.value + foreground.value,
        reppoints,
        corner,
        foreground,
    }
}
