//! Per-level supervision for corner verification, sub-pixel offsets and
//! within-box foreground verification.
//!
//! Every ground-truth corner and box is materialized on every pyramid level;
//! there is no size-based level selection.

use serde::{Deserialize, Serialize};

use crate::geometry::Point2;
use crate::scene::GtScene;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelSpec {
    /// The smallest grid at `stride` covering a `w x h` image.
    pub fn for_image(stride: usize, image_w: usize, image_h: usize) -> Self {
        Self {
            stride,
            height: image_h.div_ceil(stride),
            width: image_w.div_ceil(stride),
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Pixel coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        let s = self.stride as f64;
        Point2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CornerKind {
    TopLeft,
    BottomRight,
}

impl CornerKind {
    pub const ALL: [CornerKind; 2] = [CornerKind::TopLeft, CornerKind::BottomRight];

    pub fn index(self) -> usize {
        match self {
            CornerKind::TopLeft => 0,
            CornerKind::BottomRight => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetParams {
    /// IoU a corner-jittered box must keep with the original to bound the penalty radius.
    pub iou_floor: f64,
    /// Lower clamp on the Gaussian standard deviation, in cells.
    pub sigma_floor: f64,
}

impl Default for TargetParams {
    fn default() -> Self {
        Self {
            iou_floor: 0.3,
            sigma_floor: 0.1,
        }
    }
}

/// Integer cell `(col, row)` holding pixel `p` at `stride`.
pub fn quantize(p: Point2, stride: usize) -> (usize, usize) {
    let s = stride as f64;
    ((p.x / s).floor() as usize, (p.y / s).floor() as usize)
}

/// Fractional-cell residual of `p` at `stride`, each component in `[0, 1)`.
pub fn offset_target(p: Point2, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    let (fx, fy) = (p.x / s, p.y / s);
    (fx - fx.floor(), fy - fy.floor())
}

/// Largest corner displacement (pixels) keeping IoU >= `iou_floor`, the
/// minimum over a translated, a shrunk and a grown box.
pub fn corner_radius(box_w: f64, box_h: f64, iou_floor: f64) -> f64 {
    let (w, h, f) = (box_w, box_h, iou_floor);
    let sum = w + h;
    // translate by (r, r): (w-r)(h-r) = wh * 2f/(1+f)
    let c1 = w * h * (1.0 - f) / (1.0 + f);
    let r1 = 0.5 * (sum - (sum * sum - 4.0 * c1).max(0.0).sqrt());
    // shrink both corners inward: (w-2r)(h-2r) = f wh
    let r2 = (2.0 * sum - (4.0 * sum * sum - 16.0 * w * h * (1.0 - f)).max(0.0).sqrt()) / 8.0;
    // grow both corners outward: wh = f (w+2r)(h+2r)
    let r3 = (-2.0 * sum + (4.0 * sum * sum + 16.0 * w * h * (1.0 / f - 1.0)).sqrt()) / 8.0;
    r1.min(r2).min(r3).max(0.0)
}

/// Size-adaptive Gaussian standard deviation in cells: a third of the corner radius.
pub fn gaussian_sigma(box_w: f64, box_h: f64, stride: usize, params: &TargetParams) -> f64 {
    let r_cells = corner_radius(box_w, box_h, params.iou_floor) / stride as f64;
    (r_cells / 3.0).max(params.sigma_floor)
}

/// Heatmaps `[2, H, W]` (top-left, bottom-right) with their positive cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerHeatmapTarget {
    pub heat: Tensor,
    pub positive: Vec<bool>,
}

impl CornerHeatmapTarget {
    pub fn is_positive(&self, kind: CornerKind, row: usize, col: usize) -> bool {
        let [_, h, w] = self.shape();
        self.positive[(kind.index() * h + row) * w + col]
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.heat.shape();
        [s[0], s[1], s[2]]
    }

    pub fn num_positive(&self, kind: CornerKind) -> usize {
        let [_, h, w] = self.shape();
        let base = kind.index() * h * w;
        self.positive[base..base + h * w].iter().filter(|&&p| p).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetEntry {
    pub row: usize,
    pub col: usize,
    pub kind: CornerKind,
    pub target: (f64, f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OffsetTarget {
    pub entries: Vec<OffsetEntry>,
}

/// Category-aware within-box labels `[C, H, W]` with normalizing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundTarget {
    pub labels: Tensor,
    pub weights: Tensor,
    pub num_positive: usize,
    pub weight_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub level: LevelSpec,
    pub corners: CornerHeatmapTarget,
    pub offsets: OffsetTarget,
    pub foreground: ForegroundTarget,
}

fn corner_point(bbox: &crate::geometry::BoxXYXY, kind: CornerKind) -> Point2 {
    match kind {
        CornerKind::TopLeft => bbox.top_left(),
        CornerKind::BottomRight => bbox.bottom_right(),
    }
}

pub fn build_corner_target(
    scene: &GtScene,
    level: LevelSpec,
    params: &TargetParams,
) -> (CornerHeatmapTarget, OffsetTarget) {
    let (h, w) = (level.height, level.width);
    let mut heat = Tensor::zeros(&[2, h, w]);
    let mut positive = vec![false; 2 * h * w];
    let mut entries = Vec::with_capacity(2 * scene.objects.len());

    for obj in &scene.objects {
        let sigma = gaussian_sigma(obj.bbox.width(), obj.bbox.height(), level.stride, params);
        let denom = 2.0 * sigma * sigma;
        for kind in CornerKind::ALL {
            let p = corner_point(&obj.bbox, kind);
            let (cx, cy) = quantize(p, level.stride);
            let (cx, cy) = (cx.min(w - 1), cy.min(h - 1));
            let plane = &mut heat.data_mut()[kind.index() * h * w..(kind.index() + 1) * h * w];
            for row in 0..h {
                let dy = row as f64 - cy as f64;
                for col in 0..w {
                    let dx = col as f64 - cx as f64;
                    let g = (-(dx * dx + dy * dy) / denom).exp();
                    let v = &mut plane[row * w + col];
                    if g > *v {
                        *v = g;
                    }
                }
            }
            plane[cy * w + cx] = 1.0;
            positive[(kind.index() * h + cy) * w + cx] = true;
            entries.push(OffsetEntry {
                row: cy,
                col: cx,
                kind,
                target: offset_target(p, level.stride),
            });
        }
    }
    (CornerHeatmapTarget { heat, positive }, OffsetTarget { entries })
}

/// Cells of `level` whose centers fall inside `bbox` (closed).
pub fn cells_inside(bbox: &crate::geometry::BoxXYXY, level: LevelSpec) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for row in 0..level.height {
        for col in 0..level.width {
            if bbox.contains(level.cell_center(row, col)) {
                out.push((row, col));
            }
        }
    }
    out
}

pub fn build_foreground_target(scene: &GtScene, level: LevelSpec, num_classes: usize) -> ForegroundTarget {
    let (h, w) = (level.height, level.width);
    let mut labels = Tensor::zeros(&[num_classes, h, w]);
    // smallest covering object's positive-cell count per (c, i, j)
    let mut smallest = vec![usize::MAX; num_classes * h * w];

    for (idx, obj) in scene.objects.iter().enumerate() {
        let cells = cells_inside(&obj.bbox, level);
        if cells.is_empty() {
            log::debug!("object {idx} covers no cell center at stride {}", level.stride);
            continue;
        }
        let s = cells.len();
        for (row, col) in cells {
            let k = (obj.class_id * h + row) * w + col;
            labels.data_mut()[k] = 1.0;
            smallest[k] = smallest[k].min(s);
        }
    }

    let weights = Tensor::from_vec(
        &[num_classes, h, w],
        smallest
            .iter()
            .map(|&s| if s == usize::MAX { 0.0 } else { 1.0 / s as f64 })
            .collect(),
    )
    .expect("shape matches buffer");
    let num_positive = labels.data().iter().filter(|&&v| v == 1.0).count();
    let weight_sum = weights.sum();
    ForegroundTarget {
        labels,
        weights,
        num_positive,
        weight_sum,
    }
}

pub fn build_level_targets(scene: &GtScene, level: LevelSpec, params: &TargetParams) -> LevelTargets {
    let (corners, offsets) = build_corner_target(scene, level, params);
    let foreground = build_foreground_target(scene, level, scene.num_classes);
    LevelTargets {
        level,
        corners,
        offsets,
        foreground,
    }
}

pub fn assign_all_levels(scene: &GtScene, levels: &[LevelSpec], params: &TargetParams) -> Vec<LevelTargets> {
    levels
        .iter()
        .map(|&level| build_level_targets(scene, level, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou, BoxXYXY};
    use crate::scene::GtObject;
    use proptest::prelude::*;

    fn scene(objs: &[(usize, [f64; 4])]) -> GtScene {
        GtScene::new(
            64,
            64,
            3,
            objs.iter()
                .map(|&(c, b)| GtObject {
                    bbox: BoxXYXY::from_array(b),
                    class_id: c,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(Point2::new(13.0, 7.0), 8), (1, 0));
        assert_eq!(quantize(Point2::new(0.0, 0.0), 4), (0, 0));
        assert_eq!(quantize(Point2::new(16.0, 8.0), 8), (2, 1));
    }

    #[test]
    fn offset_examples() {
        assert_eq!(offset_target(Point2::new(13.0, 7.0), 8), (0.625, 0.875));
        assert_eq!(offset_target(Point2::new(24.0, 16.0), 8), (0.0, 0.0));
        assert_eq!(offset_target(Point2::new(3.0, 5.0), 4), (0.75, 0.25));
    }

    /// Largest integer shift keeping every jitter pattern at IoU >= floor.
    fn brute_force_radius(w: f64, h: f64, floor: f64) -> usize {
        let orig = BoxXYXY::new(0.0, 0.0, w, h);
        let ok = |r: f64| {
            let moved = orig.translate(r, r);
            let shrunk = BoxXYXY::new(r, r, w - r, h - r);
            let grown = BoxXYXY::new(-r, -r, w + r, h + r);
            [moved, shrunk, grown].iter().all(|b| iou(&orig, b) >= floor)
        };
        let mut r = 0;
        while ok((r + 1) as f64) {
            r += 1;
        }
        r
    }

    #[test]
    fn radius_matches_brute_force_scan() {
        for size in [4.0, 7.0, 10.0, 13.0, 20.0, 33.0, 50.0] {
            for floor in [0.3, 0.5, 0.7] {
                let exact = corner_radius(size, size, floor);
                assert_eq!(exact.floor() as usize, brute_force_radius(size, size, floor), "size {size} floor {floor}");
            }
        }
        // rectangles too
        assert_eq!(corner_radius(12.0, 30.0, 0.3).floor() as usize, brute_force_radius(12.0, 30.0, 0.3));
    }

    #[test]
    fn sigma_scales_with_box_and_clamps_at_zero_tolerance() {
        let p = TargetParams::default();
        let a = gaussian_sigma(10.0, 14.0, 1, &p);
        let b = gaussian_sigma(20.0, 28.0, 1, &p);
        assert!((b - 2.0 * a).abs() < 1e-12);
        let strict = TargetParams {
            iou_floor: 1.0 - 1e-12,
            ..p
        };
        assert_eq!(gaussian_sigma(10.0, 10.0, 1, &strict), p.sigma_floor);
    }

    #[test]
    fn gaussian_penalty_value_and_positive() {
        // a single corner whose sigma we then read back: check value at distance 2
        let s = scene(&[(0, [16.0, 16.0, 40.0, 40.0])]);
        let level = LevelSpec::for_image(4, 64, 64);
        let (t, off) = build_corner_target(&s, level, &TargetParams::default());
        let sigma = gaussian_sigma(24.0, 24.0, 4, &TargetParams::default());
        assert_eq!(t.heat.at(&[0, 4, 4]), 1.0);
        assert!(t.is_positive(CornerKind::TopLeft, 4, 4));
        let expect = (-4.0 / (2.0 * sigma * sigma)).exp();
        assert!((t.heat.at(&[0, 4, 6]) - expect).abs() < 1e-15);
        assert_eq!(off.entries.len(), 2);
        // sigma=2 evaluated at distance 2
        assert!(((-4.0f64 / 8.0).exp() - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn foreground_six_cells_weights_sum_to_one() {
        // stride 8: centers at 4, 12, 20, ...; box covers x centers {4,12,20}, y {4,12}
        let s = scene(&[(1, [2.0, 2.0, 22.0, 14.0])]);
        let level = LevelSpec::for_image(8, 64, 64);
        let fg = build_foreground_target(&s, level, 3);
        assert_eq!(fg.num_positive, 6);
        assert!((fg.weight_sum - 1.0).abs() < 1e-12);
        assert!((fg.weights.at(&[1, 0, 0]) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(fg.weights.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn foreground_empty_scene() {
        let fg = build_foreground_target(&scene(&[]), LevelSpec::for_image(8, 64, 64), 3);
        assert_eq!(fg.num_positive, 0);
        assert_eq!(fg.weight_sum, 0.0);
        assert_eq!(fg.labels.sum(), 0.0);
    }

    #[test]
    fn foreground_nested_same_class_uses_smallest() {
        // stride 8: big covers 4x4 centers, small covers 2x2 inside it
        let s = scene(&[(0, [0.0, 0.0, 30.0, 30.0]), (0, [2.0, 2.0, 14.0, 14.0])]);
        let fg = build_foreground_target(&s, LevelSpec::for_image(8, 64, 64), 3);
        assert_eq!(fg.num_positive, 16);
        assert_eq!(fg.weights.at(&[0, 0, 0]), 0.25);
        assert_eq!(fg.weights.at(&[0, 1, 1]), 0.25);
        assert_eq!(fg.weights.at(&[0, 3, 3]), 1.0 / 16.0);
    }

    #[test]
    fn foreground_edge_cell_center_counts_as_inside() {
        // cell center at x=12 lies exactly on the edge
        let s = scene(&[(0, [4.0, 4.0, 12.0, 4.0])]);
        let fg = build_foreground_target(&s, LevelSpec::for_image(8, 64, 64), 3);
        assert_eq!(fg.num_positive, 2);
    }

    #[test]
    fn tiny_object_still_has_corner_positives() {
        let s = scene(&[(0, [9.0, 9.0, 10.0, 10.0])]);
        let t = assign_all_levels(&s, &[LevelSpec::for_image(8, 64, 64)], &TargetParams::default());
        assert_eq!(t[0].foreground.num_positive, 0);
        assert_eq!(t[0].corners.num_positive(CornerKind::TopLeft), 1);
        assert_eq!(t[0].corners.num_positive(CornerKind::BottomRight), 1);
    }

    #[test]
    fn multi_level_assignment() {
        let s = scene(&[(0, [13.0, 7.0, 30.0, 29.0])]);
        let levels = [LevelSpec::for_image(4, 64, 64), LevelSpec::for_image(8, 64, 64)];
        let t = assign_all_levels(&s, &levels, &TargetParams::default());
        let total_tl: usize = t.iter().map(|l| l.corners.num_positive(CornerKind::TopLeft)).sum();
        let total_br: usize = t.iter().map(|l| l.corners.num_positive(CornerKind::BottomRight)).sum();
        assert_eq!((total_tl, total_br), (2, 2));
        // (col, row) = (3, 1) at stride 4 and (1, 0) at stride 8
        assert!(t[0].corners.is_positive(CornerKind::TopLeft, 1, 3));
        assert!(t[1].corners.is_positive(CornerKind::TopLeft, 0, 1));
        let tl = |l: &LevelTargets| l.offsets.entries.iter().find(|e| e.kind == CornerKind::TopLeft).unwrap().target;
        assert_eq!(tl(&t[0]), (0.25, 0.75));
        assert_eq!(tl(&t[1]), (0.625, 0.875));
    }

    fn brute_heatmap(scene: &GtScene, level: LevelSpec, p: &TargetParams) -> Vec<f64> {
        let (h, w) = (level.height, level.width);
        let mut out = vec![0.0; 2 * h * w];
        for kind in CornerKind::ALL {
            for row in 0..h {
                for col in 0..w {
                    let mut best = 0.0f64;
                    for o in &scene.objects {
                        let c = corner_point(&o.bbox, kind);
                        let px = (c.x / level.stride as f64).floor();
                        let py = (c.y / level.stride as f64).floor();
                        let sg = gaussian_sigma(o.bbox.width(), o.bbox.height(), level.stride, p);
                        let d2 = (col as f64 - px).powi(2) + (row as f64 - py).powi(2);
                        best = best.max((-d2 / (2.0 * sg * sg)).exp());
                    }
                    out[(kind.index() * h + row) * w + col] = best;
                }
            }
        }
        out
    }

    fn arb_scene() -> impl Strategy<Value = GtScene> {
        prop::collection::vec((0usize..3, 0.0..50.0f64, 0.0..50.0f64, 1.0..13.0f64, 1.0..13.0f64), 0..5).prop_map(|v| {
            GtScene::new(
                64,
                64,
                3,
                v.into_iter()
                    .map(|(c, x, y, w, h)| GtObject {
                        bbox: BoxXYXY::new(x, y, x + w, y + h),
                        class_id: c,
                    })
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn heatmap_equals_brute_force_max(s in arb_scene(), stride in prop::sample::select(vec![4usize, 8])) {
            let level = LevelSpec::for_image(stride, 64, 64);
            let p = TargetParams::default();
            let (t, _) = build_corner_target(&s, level, &p);
            let reference = brute_heatmap(&s, level, &p);
            for (a, b) in t.heat.data().iter().zip(&reference) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
            for (v, pos) in t.heat.data().iter().zip(&t.positive) {
                if *pos { prop_assert_eq!(*v, 1.0); }
            }
        }

        #[test]
        fn offsets_reconstruct_corners(s in arb_scene(), stride in prop::sample::select(vec![4usize, 8])) {
            let level = LevelSpec::for_image(stride, 64, 64);
            let (_, off) = build_corner_target(&s, level, &TargetParams::default());
            prop_assert_eq!(off.entries.len(), 2 * s.objects.len());
            for (e, (o, kind)) in off.entries.iter().zip(s.objects.iter().flat_map(|o| CornerKind::ALL.map(|k| (o, k)))) {
                prop_assert!((0.0..1.0).contains(&e.target.0) && (0.0..1.0).contains(&e.target.1));
                let c = corner_point(&o.bbox, kind);
                let st = stride as f64;
                prop_assert!(((e.col as f64 + e.target.0) * st - c.x).abs() < 1e-9);
                prop_assert!(((e.row as f64 + e.target.1) * st - c.y).abs() < 1e-9);
            }
        }

        #[test]
        fn level_independence(s in arb_scene()) {
            let levels = [LevelSpec::for_image(4, 64, 64), LevelSpec::for_image(8, 64, 64)];
            let p = TargetParams::default();
            let all = assign_all_levels(&s, &levels, &p);
            for (t, &l) in all.iter().zip(&levels) {
                prop_assert_eq!(t, &build_level_targets(&s, l, &p));
            }
        }

        #[test]
        fn disjoint_objects_have_unit_weight_mass(
            cells in prop::collection::btree_set((0usize..4, 0usize..4), 1..5),
            cls in 0usize..3,
        ) {
            // objects on a 16px lattice never overlap
            let objects: Vec<_> = cells.iter().map(|&(r, c)| GtObject {
                bbox: BoxXYXY::new(c as f64 * 16.0 + 1.0, r as f64 * 16.0 + 1.0, c as f64 * 16.0 + 14.0, r as f64 * 16.0 + 14.0),
                class_id: cls,
            }).collect();
            let s = GtScene::new(64, 64, 3, objects.clone()).unwrap();
            let level = LevelSpec::for_image(4, 64, 64);
            let fg = build_foreground_target(&s, level, 3);
            prop_assert!((fg.weight_sum - objects.len() as f64).abs() < 1e-9);
            for o in &objects {
                let mass: f64 = cells_inside(&o.bbox, level).iter().map(|&(r, c)| fg.weights.at(&[cls, r, c])).sum();
                prop_assert!((mass - 1.0).abs() < 1e-12);
            }
        }
    }
}
