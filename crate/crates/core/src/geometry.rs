//! Boxes, point sets, point-set-to-box conversion, and overlap measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned box by its top-left and bottom-right corners, in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from two arbitrary corners, ordering each axis.
    pub fn spanning(a: Point2, b: Point2) -> Self {
        Self {
            x1: a.x.min(b.x),
            y1: a.y.min(b.y),
            x2: a.x.max(b.x),
            y2: a.y.max(b.y),
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn top_left(&self) -> Point2 {
        Point2::new(self.x1, self.y1)
    }

    pub fn bottom_right(&self) -> Point2 {
        Point2::new(self.x2, self.y2)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Closed containment test.
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_cwh(&self) -> BoxCWH {
        BoxCWH {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

/// Center/size box parameterization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCWH {
    pub fn to_xyxy(&self) -> BoxXYXY {
        BoxXYXY::new(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }
}

/// Ordered representative points of one object hypothesis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point2>,
}

impl PointSet {
    pub fn new(points: Vec<Point2>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| Point2::new(p.x + dx, p.y + dy))
                .collect(),
        }
    }
}

pub const DEFAULT_NUM_POINTS: usize = 9;
pub const DEFAULT_PARTIAL_K: usize = 4;
pub const DEFAULT_MOMENT_MULTIPLIER: f64 = 2.0;

/// How a point set is turned into a box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConversionMode {
    MinMax,
    PartialMinMax { k: usize },
    Moment { multiplier: f64 },
    ExplicitCorners,
}

impl Default for ConversionMode {
    fn default() -> Self {
        ConversionMode::ExplicitCorners
    }
}

impl ConversionMode {
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            ConversionMode::PartialMinMax { k } if k < 2 || k > n => Err(Error::invalid(format!(
                "partial min-max subset size {k} must lie in [2, {n}]"
            ))),
            ConversionMode::Moment { multiplier } if !(multiplier > 0.0 && multiplier.is_finite()) => {
                Err(Error::invalid(format!(
                    "moment multiplier must be positive, got {multiplier}"
                )))
            }
            ConversionMode::ExplicitCorners if n < 2 => Err(Error::invalid(
                "explicit-corners conversion needs at least two points",
            )),
            _ => Ok(()),
        }
    }
}

fn argmin_argmax(values: impl Iterator<Item = f64>) -> (usize, usize) {
    let mut lo = (0, f64::INFINITY);
    let mut hi = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v < lo.1 {
            lo = (i, v);
        }
        if v > hi.1 {
            hi = (i, v);
        }
    }
    (lo.0, hi.0)
}

fn hull(points: &[Point2]) -> BoxXYXY {
    let (ix1, ix2) = argmin_argmax(points.iter().map(|p| p.x));
    let (iy1, iy2) = argmin_argmax(points.iter().map(|p| p.y));
    BoxXYXY::new(points[ix1].x, points[iy1].y, points[ix2].x, points[iy2].y)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Converts a point set into a box under `mode`.
pub fn convert(ps: &PointSet, mode: ConversionMode) -> Result<BoxXYXY> {
    if ps.is_empty() {
        return Err(Error::invalid("cannot convert an empty point set"));
    }
    mode.validate(ps.len())?;
    let pts = &ps.points;
    Ok(match mode {
        ConversionMode::MinMax => hull(pts),
        ConversionMode::PartialMinMax { k } => hull(&pts[..k]),
        ConversionMode::Moment { multiplier } => {
            let (mx, sx) = mean_std(pts.iter().map(|p| p.x));
            let (my, sy) = mean_std(pts.iter().map(|p| p.y));
            BoxXYXY::new(
                mx - multiplier * sx,
                my - multiplier * sy,
                mx + multiplier * sx,
                my + multiplier * sy,
            )
        }
        ConversionMode::ExplicitCorners => BoxXYXY::spanning(pts[0], pts[1]),
    })
}

/// Center/size form of the explicit-corners conversion.
pub fn explicit_corners_cwh(ps: &PointSet) -> Result<BoxCWH> {
    Ok(convert(ps, ConversionMode::ExplicitCorners)?.to_cwh())
}

/// Pulls a gradient on `(x1, y1, x2, y2)` back onto the points.
///
/// Min/max selections route to the first extremal point, matching `convert`.
pub fn convert_backward(ps: &PointSet, mode: ConversionMode, dbox: [f64; 4]) -> Result<Vec<Point2>> {
    if ps.is_empty() {
        return Err(Error::invalid("cannot convert an empty point set"));
    }
    mode.validate(ps.len())?;
    let pts = &ps.points;
    let mut grad = vec![Point2::default(); pts.len()];
    let route_hull = |upto: usize, grad: &mut [Point2]| {
        let (ix1, ix2) = argmin_argmax(pts[..upto].iter().map(|p| p.x));
        let (iy1, iy2) = argmin_argmax(pts[..upto].iter().map(|p| p.y));
        grad[ix1].x += dbox[0];
        grad[iy1].y += dbox[1];
        grad[ix2].x += dbox[2];
        grad[iy2].y += dbox[3];
    };
    match mode {
        ConversionMode::MinMax => route_hull(pts.len(), &mut grad),
        ConversionMode::PartialMinMax { k } => route_hull(k, &mut grad),
        ConversionMode::ExplicitCorners => route_hull(2, &mut grad),
        ConversionMode::Moment { multiplier } => {
            let n = pts.len() as f64;
            let (mx, sx) = mean_std(pts.iter().map(|p| p.x));
            let (my, sy) = mean_std(pts.iter().map(|p| p.y));
            // box = mean -/+ m*std; d mean/dv = 1/n, d std/dv = (v - mean)/(n std)
            let dmx = dbox[0] + dbox[2];
            let dsx = multiplier * (dbox[2] - dbox[0]);
            let dmy = dbox[1] + dbox[3];
            let dsy = multiplier * (dbox[3] - dbox[1]);
            for (g, p) in grad.iter_mut().zip(pts) {
                g.x = dmx / n;
                g.y = dmy / n;
                if sx > 0.0 {
                    g.x += dsx * (p.x - mx) / (n * sx);
                }
                if sy > 0.0 {
                    g.y += dsy * (p.y - my) / (n * sy);
                }
            }
        }
    }
    Ok(grad)
}

fn intersection(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered by the union.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = BoxXYXY::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2)).area();
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        iou
    } else {
        iou - (hull - union) / hull
    }
}
