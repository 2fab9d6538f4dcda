//! Central finite-difference checks for every loss and differentiable primitive.
//!
//! Each suite draws random instances from a seeded RNG, evaluates the
//! analytic gradient, and compares it with central differences of the
//! scalar objective. The error of one instance is
//! `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{convert, BoxXYXY, ConversionMode, Point2, PointSet};
use crate::kernels::{bilinear_sample, bilinear_sample_backward, fuse_features, fuse_features_backward, FusionEmbed};
use crate::losses::{
    box_regression_loss, corner_heatmap_loss, focal_loss, normalized_focal_loss, offset_loss,
    reppoints_regression_loss, FocalParams, RegressionLossKind, StageWeights,
};
use crate::pipeline::autodiff::{Graph, Var};
use crate::scene::{GtObject, GtScene};
use crate::targets::{build_corner_target, build_foreground_target, CornerKind, LevelSpec, OffsetEntry, OffsetTarget, TargetParams};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 100;

/// Loss suites, in report order.
pub const LOSS_SUITES: &[&str] = &[
    "corner_heatmap_focal",
    "offset_smooth_l1",
    "normalized_focal",
    "classification_focal",
    "giou_regression",
    "smooth_l1_regression",
    "point_set_regression",
];

/// Autodiff and kernel primitive suites, in report order.
pub const PRIMITIVE_SUITES: &[&str] = &[
    "conv3x3",
    "conv3x3_stride2",
    "conv1x1",
    "relu",
    "sigmoid",
    "add",
    "stop_gradient",
    "concat",
    "corner_pool",
    "bilinear_sample",
    "sample_points",
    "fuse_features",
];

pub fn suite_names() -> impl Iterator<Item = &'static str> {
    LOSS_SUITES.iter().chain(PRIMITIVE_SUITES).copied()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Suite whose analytic gradient is deliberately scaled by 1.01, to prove
    /// the checker catches a wrong derivative.
    pub inject_bug: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: DEFAULT_CASES,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            inject_bug: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Relative error of one instance.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).expect("shape matches generated data")
}

/// One random instance: `(analytic, numeric)` gradients of a scalar objective.
type Instance = (Vec<f64>, Vec<f64>);

fn random_scene(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> GtScene {
    let n = rng.gen_range(1..=3);
    let objects = (0..n)
        .map(|_| {
            let w = rng.gen_range(2.0..size as f64 * 0.6);
            let h = rng.gen_range(2.0..size as f64 * 0.6);
            let x = rng.gen_range(0.0..size as f64 - w - 0.01);
            let y = rng.gen_range(0.0..size as f64 - h - 0.01);
            GtObject {
                bbox: BoxXYXY::new(x, y, x + w, y + h),
                class_id: rng.gen_range(0..classes),
            }
        })
        .collect();
    GtScene::new(size, size, classes, objects).expect("generated boxes lie inside the image")
}

fn loss_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let params = FocalParams::default();
    let level = LevelSpec::for_image(4, 24, 24);
    Ok(match name {
        "corner_heatmap_focal" => {
            let scene = random_scene(rng, 24, 2);
            let (target, _) = build_corner_target(&scene, level, &TargetParams::default());
            let shape = [2, level.height, level.width];
            let x = uniform(rng, 2 * level.cells(), 0.02, 0.98);
            let n = scene.objects.len();
            let f = |v: &[f64]| corner_heatmap_loss(&tensor(&shape, v.to_vec()), &target, n, &params).unwrap().value;
            let a = corner_heatmap_loss(&tensor(&shape, x.clone()), &target, n, &params)?.gradient;
            (a.into_data(), numeric_gradient(f, &x))
        }
        "offset_smooth_l1" => {
            let (h, w) = (4, 5);
            let entries: Vec<OffsetEntry> = (0..rng.gen_range(1..6))
                .map(|_| OffsetEntry {
                    row: rng.gen_range(0..h),
                    col: rng.gen_range(0..w),
                    kind: if rng.gen_bool(0.5) { CornerKind::TopLeft } else { CornerKind::BottomRight },
                    target: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                })
                .collect();
            let target = OffsetTarget { entries };
            let x = uniform(rng, 4 * h * w, -1.5, 2.5);
            let f = |v: &[f64]| offset_loss(&tensor(&[4, h, w], v.to_vec()), &target).unwrap().value;
            let a = offset_loss(&tensor(&[4, h, w], x.clone()), &target)?.gradient;
            (a.into_data(), numeric_gradient(f, &x))
        }
        "normalized_focal" => {
            let scene = random_scene(rng, 24, 2);
            let target = build_foreground_target(&scene, level, 2);
            let shape = target.labels.shape().to_vec();
            let x = uniform(rng, target.labels.len(), 0.02, 0.98);
            let f = |v: &[f64]| normalized_focal_loss(&tensor(&shape, v.to_vec()), &target, &params).unwrap().value;
            let a = normalized_focal_loss(&tensor(&shape, x.clone()), &target, &params)?.gradient;
            (a.into_data(), numeric_gradient(f, &x))
        }
        "classification_focal" => {
            let n = 24;
            let labels = tensor(&[n], (0..n).map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 }).collect());
            let x = uniform(rng, n, 0.02, 0.98);
            let f = |v: &[f64]| focal_loss(&tensor(&[n], v.to_vec()), &labels, 0.25, 2.0).unwrap().value;
            let a = focal_loss(&tensor(&[n], x.clone()), &labels, 0.25, 2.0)?.gradient;
            (a.into_data(), numeric_gradient(f, &x))
        }
        "giou_regression" | "smooth_l1_regression" => {
            let kind = if name == "giou_regression" {
                RegressionLossKind::Giou
            } else {
                RegressionLossKind::SmoothL1
            };
            let pairs = rng.gen_range(1..4);
            let rand_box = |rng: &mut ChaCha8Rng| {
                let (x, y) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
                BoxXYXY::new(x, y, x + rng.gen_range(1.0..8.0), y + rng.gen_range(1.0..8.0))
            };
            let gt: Vec<BoxXYXY> = (0..pairs).map(|_| rand_box(rng)).collect();
            let x: Vec<f64> = (0..pairs).flat_map(|_| rand_box(rng).to_array()).collect();
            let scales: Vec<f64> = uniform(rng, pairs, 0.5, 4.0);
            let boxes = |v: &[f64]| -> Vec<BoxXYXY> { v.chunks(4).map(|c| BoxXYXY::new(c[0], c[1], c[2], c[3])).collect() };
            let f = |v: &[f64]| box_regression_loss(&boxes(v), &gt, kind, Some(&scales)).unwrap().value;
            let a = box_regression_loss(&boxes(&x), &gt, kind, Some(&scales))?.gradient;
            (a.into_data(), numeric_gradient(f, &x))
        }
        "point_set_regression" => {
            let modes = [
                ConversionMode::ExplicitCorners,
                ConversionMode::MinMax,
                ConversionMode::PartialMinMax { k: 4 },
                ConversionMode::Moment { multiplier: 2.0 },
            ];
            let mode = modes[rng.gen_range(0..modes.len())];
            let kind = if rng.gen_bool(0.5) {
                RegressionLossKind::Giou
            } else {
                RegressionLossKind::SmoothL1
            };
            let (pairs, npts) = (rng.gen_range(1..3), 9);
            let gt: Vec<BoxXYXY> = (0..pairs)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0));
                    BoxXYXY::new(x, y, x + rng.gen_range(2.0..8.0), y + rng.gen_range(2.0..8.0))
                })
                .collect();
            // explicit corners need p0 above-left of p1 for a positive-area box
            let mut x = Vec::new();
            for _ in 0..2 * pairs {
                let mut pts = uniform(rng, 2 * npts, 0.0, 12.0);
                pts[0] = rng.gen_range(0.0..5.0);
                pts[1] = rng.gen_range(0.0..5.0);
                pts[2] = rng.gen_range(7.0..12.0);
                pts[3] = rng.gen_range(7.0..12.0);
                x.extend(pts);
            }
            let sets = |v: &[f64]| -> Vec<PointSet> {
                v.chunks(2 * npts)
                    .map(|c| PointSet::new(c.chunks(2).map(|p| Point2::new(p[0], p[1])).collect()))
                    .collect()
            };
            let w = StageWeights::default();
            let eval = |v: &[f64]| {
                let s = sets(v);
                reppoints_regression_loss(&s[..pairs], &s[pairs..], &gt, mode, kind, None, w).unwrap()
            };
            let out = eval(&x);
            let mut a = out.grad_initial.into_data();
            a.extend(out.grad_refined.into_data());
            // sanity: the box conversion must be well-defined on every perturbed input
            debug_assert!(sets(&x).iter().all(|s| convert(s, mode).is_ok()));
            (a, numeric_gradient(|v| eval(v).value, &x))
        }
        other => unreachable!("not a loss suite: {other}"),
    })
}

/// Builds a graph from leaf tensors and returns the output var.
type GraphFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Objective `sum(upstream * output)`, gradient with respect to every
/// leaf (all flattened into one vector).
fn graph_instance(leaves: &[Tensor], build: &GraphFn<'_>, upstream_seed: &mut ChaCha8Rng) -> Result<Instance> {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t.clone())).collect();
    let y = build(&mut g, &vars);
    let up = tensor(g.value(y).shape(), uniform(upstream_seed, g.value(y).len(), -1.0, 1.0));
    let grads = g.backward(&[(y, up.clone())])?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(leaves) {
        match grads.of(*v) {
            Some(d) => analytic.extend_from_slice(d.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let flat: Vec<f64> = leaves.iter().flat_map(|t| t.data().iter().copied()).collect();
    let f = |v: &[f64]| {
        let mut g = Graph::new();
        let mut start = 0;
        let vars: Vec<Var> = leaves
            .iter()
            .map(|t| {
                let part = tensor(t.shape(), v[start..start + t.len()].to_vec());
                start += t.len();
                g.variable(part)
            })
            .collect();
        let y = build(&mut g, &vars);
        g.value(y).data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    Ok((analytic, numeric_gradient(f, &flat)))
}

fn primitive_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut up_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        tensor(shape, uniform(rng, n, lo, hi))
    };
    match name {
        "conv3x3" | "conv3x3_stride2" | "conv1x1" => {
            let k = if name == "conv1x1" { 1 } else { 3 };
            let stride = if name == "conv3x3_stride2" { 2 } else { 1 };
            let leaves = [t(&[2, 2, h, w], -1.0, 1.0), t(&[3, 2, k, k], -1.0, 1.0), t(&[3], -1.0, 1.0)];
            graph_instance(
                &leaves,
                &|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride).expect("conv shapes agree"),
                &mut up_rng,
            )
        }
        "relu" => graph_instance(&[t(&[1, 3, h, w], -1.0, 1.0)], &|g, v| g.relu(v[0]), &mut up_rng),
        "sigmoid" => graph_instance(&[t(&[1, 3, h, w], -4.0, 4.0)], &|g, v| g.sigmoid(v[0]), &mut up_rng),
        "add" => graph_instance(
            &[t(&[2, 2, h, w], -1.0, 1.0), t(&[2, 2, h, w], -1.0, 1.0)],
            &|g, v| g.add(v[0], v[1]).expect("same shapes"),
            &mut up_rng,
        ),
        "stop_gradient" => {
            // y = relu(x) + sg(sigmoid(x)); the detached branch is frozen in the numeric objective
            let x = t(&[1, 2, h, w], -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let frozen = x.map(|a| 1.0 / (1.0 + (-a).exp()));
            let r = g.relu(xv);
            let s = g.sigmoid(xv);
            let sg = g.stop_gradient(s);
            let y = g.add(r, sg)?;
            let up = tensor(g.value(y).shape(), uniform(&mut up_rng, x.len(), -1.0, 1.0));
            let grads = g.backward(&[(y, up.clone())])?;
            let analytic = grads.of(xv).map_or(vec![0.0; x.len()], |d| d.data().to_vec());
            let f = |v: &[f64]| {
                v.iter()
                    .zip(frozen.data())
                    .zip(up.data())
                    .map(|((a, fz), u)| u * (a.max(0.0) + fz))
                    .sum()
            };
            Ok((analytic, numeric_gradient(f, x.data())))
        }
        "concat" => graph_instance(
            &[t(&[2, 1, h, w], -1.0, 1.0), t(&[2, 3, h, w], -1.0, 1.0)],
            &|g, v| g.concat(&[v[0], v[1]]).expect("same spatial dims"),
            &mut up_rng,
        ),
        "corner_pool" => {
            let kind = if rng.gen_bool(0.5) { CornerKind::TopLeft } else { CornerKind::BottomRight };
            let leaves = [tensor(&[1, 2, h, w], uniform(rng, 2 * h * w, -1.0, 1.0))];
            graph_instance(&leaves, &|g, v| g.corner_pool(v[0], kind), &mut up_rng)
        }
        "sample_points" => {
            let p = 2;
            // keep points strictly inside so the clamp never engages
            let feat = t(&[1, 2, h, w], -1.0, 1.0);
            let mut offsets = Tensor::zeros(&[1, 2 * p, h, w]);
            for k in 0..p {
                for r in 0..h {
                    for c in 0..w {
                        *offsets.at_mut(&[0, 2 * k, r, c]) = rng.gen_range(0.05..(w - 1) as f64 - 0.05) - c as f64;
                        *offsets.at_mut(&[0, 2 * k + 1, r, c]) = rng.gen_range(0.05..(h - 1) as f64 - 0.05) - r as f64;
                    }
                }
            }
            graph_instance(
                &[feat, offsets],
                &|g, v| g.sample_points(v[0], v[1]).expect("shapes agree"),
                &mut up_rng,
            )
        }
        "bilinear_sample" => {
            let grid = t(&[3, h, w], -1.0, 1.0);
            let p = Point2::new(rng.gen_range(0.05..(w - 1) as f64 - 0.05), rng.gen_range(0.05..(h - 1) as f64 - 0.05));
            let up = uniform(&mut up_rng, 3, -1.0, 1.0);
            let (dg, dp) = bilinear_sample_backward(&grid, p, &up);
            let mut analytic = dg.into_data();
            analytic.extend([dp.x, dp.y]);
            let mut x = grid.data().to_vec();
            x.extend([p.x, p.y]);
            let n = grid.len();
            let f = |v: &[f64]| {
                let g = tensor(grid.shape(), v[..n].to_vec());
                let s = bilinear_sample(&g, Point2::new(v[n], v[n + 1]));
                s.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            Ok((analytic, numeric_gradient(f, &x)))
        }
        "fuse_features" => {
            let feat = t(&[3, h, w], -1.0, 1.0);
            let outputs = vec![t(&[2, h, w], 0.0, 1.0), t(&[1, h, w], 0.0, 1.0)];
            let embeds: Vec<FusionEmbed> = outputs
                .iter()
                .map(|o| FusionEmbed {
                    weight: tensor(&[3, o.shape()[0]], uniform(&mut up_rng, 3 * o.shape()[0], -1.0, 1.0)),
                })
                .collect();
            let up = tensor(&[3, h, w], uniform(&mut up_rng, feat.len(), -1.0, 1.0));
            let g = fuse_features_backward(&up, &outputs, &embeds)?;
            let mut analytic = g.feature.into_data();
            for e in g.embeds {
                analytic.extend(e.into_data());
            }
            let mut x = feat.data().to_vec();
            for e in &embeds {
                x.extend_from_slice(e.weight.data());
            }
            let f = |v: &[f64]| {
                let fv = tensor(feat.shape(), v[..feat.len()].to_vec());
                let mut start = feat.len();
                let es: Vec<FusionEmbed> = embeds
                    .iter()
                    .map(|e| {
                        let n = e.weight.len();
                        let out = FusionEmbed {
                            weight: tensor(e.weight.shape(), v[start..start + n].to_vec()),
                        };
                        start += n;
                        out
                    })
                    .collect();
                let y = fuse_features(&fv, &outputs, &es).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            Ok((analytic, numeric_gradient(f, &x)))
        }
        other => unreachable!("not a primitive suite: {other}"),
    }
}

/// Runs one named suite.
pub fn run_suite(name: &str, cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let is_loss = LOSS_SUITES.contains(&name);
    if !is_loss && !PRIMITIVE_SUITES.contains(&name) {
        return Err(crate::error::Error::invalid(format!("unknown gradcheck suite `{name}`")));
    }
    let seed = cfg.seed ^ name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inject = cfg.inject_bug.as_deref() == Some(name);
    let mut max_err: f64 = 0.0;
    for _ in 0..cfg.cases {
        let (mut analytic, numeric) = if is_loss {
            loss_instance(name, &mut rng)?
        } else {
            primitive_instance(name, &mut rng)?
        };
        if inject {
            analytic.iter_mut().for_each(|a| *a *= 1.01);
        }
        max_err = max_err.max(relative_error(&analytic, &numeric));
    }
    Ok(SuiteReport {
        name: name.to_string(),
        cases: cfg.cases,
        max_rel_err: max_err,
        passed: max_err < cfg.tolerance,
    })
}

/// Runs every suite, losses first.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<SuiteReport>> {
    suite_names().map(|s| run_suite(s, cfg)).collect()
}
