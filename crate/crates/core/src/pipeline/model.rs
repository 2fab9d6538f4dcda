//! Tiny conv backbone with a two-level pyramid and the point-set head with
//! corner / foreground verification branches and feature fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConversionMode, DEFAULT_NUM_POINTS};
use crate::inference::LevelOutputs;
use crate::losses::{LossWeights, RegressionLossKind, StageWeights};
use crate::pipeline::autodiff::{Graph, ParamStore, Var};
use crate::targets::{CornerKind, LevelSpec};
use crate::tensor::Tensor;

pub const STRIDES: [usize; 2] = [4, 8];

/// Prior probability encoded in the bias of every sigmoid output.
const CLS_PRIOR: f64 = 0.01;
const VERIFY_PRIOR: f64 = 0.1;

/// Named switch sets mirroring the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Point-set regression only.
    Baseline,
    /// Corner and foreground heads trained alongside.
    Multitask,
    /// Verification outputs fused back into the head features.
    Fusion,
    /// Fusion plus joint-inference corner refinement.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Multitask, Ablation::Fusion, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Multitask => "multitask",
            Ablation::Fusion => "fusion",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Sets the verification, fusion and joint-inference switches.
    pub fn apply(self, cfg: &mut HeadConfig) {
        let heads = self != Ablation::Baseline;
        cfg.corner_head = heads;
        cfg.foreground_head = heads;
        cfg.fusion = matches!(self, Ablation::Fusion | Ablation::Full);
        cfg.joint_inference = self == Ablation::Full;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "default_num_points")]
    pub num_points: usize,
    #[serde(default)]
    pub conversion: ConversionMode,
    #[serde(default = "default_true")]
    pub corner_head: bool,
    #[serde(default = "default_true")]
    pub foreground_head: bool,
    #[serde(default = "default_true")]
    pub fusion: bool,
    #[serde(default = "default_true")]
    pub joint_inference: bool,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub regression: RegressionLossKind,
    #[serde(default)]
    pub stage_weights: StageWeights,
    /// Width of every head feature map.
    #[serde(default = "default_feature_channels")]
    pub feature_channels: usize,
    /// Output widths of the first two backbone convolutions.
    #[serde(default = "default_backbone_channels")]
    pub backbone_channels: [usize; 2],
    /// Half-size, in cells, of the box the first-stage points start from.
    #[serde(default = "default_box_prior")]
    pub box_prior: f64,
}

fn default_num_points() -> usize {
    DEFAULT_NUM_POINTS
}
fn default_true() -> bool {
    true
}
fn default_feature_channels() -> usize {
    24
}
fn default_backbone_channels() -> [usize; 2] {
    [8, 16]
}
fn default_box_prior() -> f64 {
    1.0
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_points: default_num_points(),
            conversion: ConversionMode::default(),
            corner_head: true,
            foreground_head: true,
            fusion: true,
            joint_inference: true,
            loss_weights: LossWeights::default(),
            regression: RegressionLossKind::default(),
            stage_weights: StageWeights::default(),
            feature_channels: default_feature_channels(),
            backbone_channels: default_backbone_channels(),
            box_prior: default_box_prior(),
        }
    }
}

impl HeadConfig {
    pub fn for_ablation(a: Ablation) -> Self {
        let mut cfg = Self::default();
        a.apply(&mut cfg);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("head.{field}"),
                message: message.to_string(),
            })
        };
        if self.num_points < 2 {
            return bad("num_points", "at least two points are required");
        }
        if let Err(e) = self.conversion.validate(self.num_points) {
            return bad("conversion", &e.to_string());
        }
        if (self.corner_head || self.joint_inference) && self.conversion != ConversionMode::ExplicitCorners {
            return bad("conversion", "corner supervision and joint inference need explicit_corners");
        }
        if self.fusion && !self.corner_head && !self.foreground_head {
            return bad("fusion", "fusion needs at least one verification head");
        }
        if self.joint_inference && !self.corner_head {
            return bad("joint_inference", "joint inference needs the corner head");
        }
        if self.feature_channels == 0 || self.backbone_channels.contains(&0) {
            return bad("feature_channels", "channel widths must be positive");
        }
        if !(self.box_prior >= 0.0 && self.box_prior.is_finite()) {
            return bad("box_prior", "must be finite and non-negative");
        }
        let w = &self.loss_weights;
        if !(w.corner >= 0.0 && w.foreground >= 0.0) {
            return bad("loss_weights", "weights must be non-negative");
        }
        Ok(())
    }

    fn verification_channels(&self, num_classes: usize) -> usize {
        let mut c = 0;
        if self.corner_head {
            c += 6;
        }
        if self.foreground_head {
            c += num_classes;
        }
        c
    }
}

fn fnv1a(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

enum Init {
    /// Uniform He initialization from the fan-in.
    He,
    Uniform(f64),
    Zeros,
    Const(f64),
}

/// Parameters plus the resolved architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: HeadConfig,
    pub num_classes: usize,
    pub params: ParamStore,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Model {
    /// Every parameter is drawn from an RNG keyed by `(seed, name)`, so
    /// parameters shared between configurations start identical.
    pub fn new(cfg: HeadConfig, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config {
                field: "data.num_classes".into(),
                message: "must be positive".into(),
            });
        }
        let mut params = ParamStore::new();
        let mut add = |name: &str, shape: &[usize], init: Init| -> Result<()> {
            let n: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, name));
            let data = match init {
                Init::He => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..b)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Const(v) => vec![v; n],
            };
            params.insert(name, Tensor::from_vec(shape, data)?)?;
            Ok(())
        };
        let f = cfg.feature_channels;
        let [b1, b2] = cfg.backbone_channels;
        let n = cfg.num_points;
        let mut conv = |name: &str, co: usize, ci: usize, k: usize, w: Init, b: Option<Init>| -> Result<()> {
            add(&format!("{name}.weight"), &[co, ci, k, k], w)?;
            if let Some(b) = b {
                add(&format!("{name}.bias"), &[co], b)?;
            }
            Ok(())
        };
        conv("backbone.conv1", b1, 3, 3, Init::He, Some(Init::Zeros))?;
        conv("backbone.conv2", b2, b1, 3, Init::He, Some(Init::Zeros))?;
        conv("backbone.conv3", f, b2, 3, Init::He, Some(Init::Zeros))?;
        conv("backbone.conv4", f, f, 3, Init::He, Some(Init::Zeros))?;
        conv("head.cls_conv", f, f, 3, Init::He, Some(Init::Zeros))?;
        for i in 1..=3 {
            conv(&format!("head.loc_conv{i}"), f, f, 3, Init::He, Some(Init::Zeros))?;
        }
        conv("head.pts_init", 2 * n, f, 1, Init::Zeros, None)?;
        conv("head.pts_refine", 2 * n, n * f, 1, Init::Zeros, Some(Init::Zeros))?;
        conv("head.cls_out", num_classes, n * f, 1, Init::Uniform(0.01), Some(Init::Const(logit(CLS_PRIOR))))?;
        if cfg.corner_head || cfg.foreground_head {
            conv("head.verify_conv", f, f, 3, Init::He, Some(Init::Zeros))?;
        }
        if cfg.corner_head {
            for kind in ["tl", "br"] {
                conv(&format!("head.corner_{kind}_heat"), 1, f, 1, Init::Uniform(0.01), Some(Init::Const(logit(VERIFY_PRIOR))))?;
                conv(&format!("head.corner_{kind}_offset"), 2, f, 1, Init::Uniform(0.01), Some(Init::Const(0.5)))?;
            }
        }
        if cfg.foreground_head {
            conv("head.fg", num_classes, f, 1, Init::Uniform(0.01), Some(Init::Const(logit(VERIFY_PRIOR))))?;
        }
        if cfg.fusion {
            let cv = cfg.verification_channels(num_classes);
            conv("head.fuse_loc", f, cv, 1, Init::Zeros, None)?;
            conv("head.fuse_cls", f, cv, 1, Init::Zeros, None)?;
        }
        // identity-box prior: points 0 and 1 at (-r, -r) and (r, r), the rest on a 3x3 grid
        let mut bias = vec![0.0; 2 * n];
        let r = cfg.box_prior;
        let grid = [(-1.0, -1.0), (1.0, 1.0), (0.0, 0.0), (-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0), (-1.0, 1.0), (1.0, -1.0)];
        for k in 0..n {
            let (dx, dy) = grid[k % grid.len()];
            bias[2 * k] = dx * r;
            bias[2 * k + 1] = dy * r;
        }
        params.insert("head.pts_init.bias", Tensor::from_vec(&[2 * n], bias)?)?;
        Ok(Self { cfg, num_classes, params })
    }

    pub fn levels(image_w: usize, image_h: usize) -> [LevelSpec; 2] {
        STRIDES.map(|s| LevelSpec::for_image(s, image_w, image_h))
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("model has no parameter `{name}`"));
        g.param(&self.params, id)
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize, bias: bool) -> Result<Var> {
        let w = self.p(g, &format!("{name}.weight"));
        let b = bias.then(|| self.p(g, &format!("{name}.bias")));
        g.conv2d(x, w, b, stride)
    }

    fn conv_relu(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(g, name, x, stride, true)?;
        Ok(g.relu(y))
    }

    /// Runs the network on `images [N, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Vec<LevelVars>> {
        let c1 = self.conv_relu(g, "backbone.conv1", images, 2)?;
        let c2 = self.conv_relu(g, "backbone.conv2", c1, 2)?;
        let p4 = self.conv_relu(g, "backbone.conv3", c2, 1)?;
        let p8 = self.conv_relu(g, "backbone.conv4", p4, 2)?;
        [p4, p8]
            .into_iter()
            .zip(STRIDES)
            .map(|(feat, stride)| self.head(g, feat, stride))
            .collect()
    }

    fn head(&self, g: &mut Graph, feat: Var, stride: usize) -> Result<LevelVars> {
        let cfg = &self.cfg;
        let mut cls_feat = self.conv_relu(g, "head.cls_conv", feat, 1)?;
        let mut loc = feat;
        for i in 1..=3 {
            loc = self.conv_relu(g, &format!("head.loc_conv{i}"), loc, 1)?;
        }

        let mut out = LevelVars {
            stride,
            cls: loc,
            pts_init: loc,
            pts_refine: loc,
            corner_heat: None,
            corner_offset: None,
            foreground: None,
        };
        if cfg.corner_head || cfg.foreground_head {
            let v = self.conv_relu(g, "head.verify_conv", loc, 1)?;
            if cfg.corner_head {
                let mut heats = Vec::new();
                let mut offs = Vec::new();
                for (kind, tag) in [(CornerKind::TopLeft, "tl"), (CornerKind::BottomRight, "br")] {
                    let pooled = g.corner_pool(v, kind);
                    let h = self.conv(g, &format!("head.corner_{tag}_heat"), pooled, 1, true)?;
                    heats.push(g.sigmoid(h));
                    offs.push(self.conv(g, &format!("head.corner_{tag}_offset"), pooled, 1, true)?);
                }
                out.corner_heat = Some(g.concat(&heats)?);
                out.corner_offset = Some(g.concat(&offs)?);
            }
            if cfg.foreground_head {
                let fg = self.conv(g, "head.fg", v, 1, true)?;
                out.foreground = Some(g.sigmoid(fg));
            }
            if cfg.fusion {
                let parts: Vec<Var> = [out.corner_heat, out.corner_offset, out.foreground].into_iter().flatten().collect();
                let cat = g.concat(&parts)?;
                let detached = g.stop_gradient(cat);
                let e_loc = self.conv(g, "head.fuse_loc", detached, 1, false)?;
                let e_cls = self.conv(g, "head.fuse_cls", detached, 1, false)?;
                loc = g.add(loc, e_loc)?;
                cls_feat = g.add(cls_feat, e_cls)?;
            }
        }

        let d1 = self.conv(g, "head.pts_init", loc, 1, true)?;
        let d1_fixed = g.stop_gradient(d1);
        let sampled_loc = g.sample_points(loc, d1_fixed)?;
        let d2 = self.conv(g, "head.pts_refine", sampled_loc, 1, true)?;
        let sampled_cls = g.sample_points(cls_feat, d1_fixed)?;
        let cls_logit = self.conv(g, "head.cls_out", sampled_cls, 1, true)?;
        out.cls = g.sigmoid(cls_logit);
        out.pts_init = d1;
        out.pts_refine = g.add(d1_fixed, d2)?;
        Ok(out)
    }
}

/// Graph handles for one pyramid level of a batch.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub stride: usize,
    /// Class probabilities `[N, C, H, W]`.
    pub cls: Var,
    /// First-stage offsets `[N, 2n, H, W]` in cells from the cell center.
    pub pts_init: Var,
    /// Refined offsets, same layout.
    pub pts_refine: Var,
    /// Corner probabilities `[N, 2, H, W]`.
    pub corner_heat: Option<Var>,
    /// Corner sub-cell offsets `[N, 4, H, W]`.
    pub corner_offset: Option<Var>,
    /// Foreground probabilities `[N, C, H, W]`.
    pub foreground: Option<Var>,
}

/// Image `img` of a batched `[N, ...]` tensor.
pub fn slice_image(t: &Tensor, img: usize) -> Tensor {
    let per = t.len() / t.shape()[0];
    Tensor::from_vec(&t.shape()[1..], t.data()[img * per..(img + 1) * per].to_vec()).expect("per-image slice")
}

/// Converts offsets in cells to pixel coordinates: `(col + 0.5 + dx) * stride`.
pub fn offsets_to_pixels(offsets: &Tensor, stride: usize) -> Tensor {
    let s = offsets.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = offsets.clone();
    let data = out.data_mut();
    for ch in 0..s[0] {
        let is_y = ch % 2 == 1;
        for r in 0..h {
            for c in 0..w {
                let base = if is_y { r } else { c } as f64 + 0.5;
                let v = &mut data[(ch * h + r) * w + c];
                *v = (base + *v) * stride as f64;
            }
        }
    }
    out
}

/// Inference inputs for image `img` of the batch.
pub fn level_outputs(g: &Graph, levels: &[LevelVars], img: usize, image_w: usize, image_h: usize) -> Vec<LevelOutputs> {
    levels
        .iter()
        .map(|l| {
            let spec = LevelSpec::for_image(l.stride, image_w, image_h);
            LevelOutputs {
                level: spec,
                cls: slice_image(g.value(l.cls), img),
                points: offsets_to_pixels(&slice_image(g.value(l.pts_refine), img), l.stride),
                corner_heat: l.corner_heat.map(|v| slice_image(g.value(v), img)),
                corner_offsets: l.corner_offset.map(|v| slice_image(g.value(v), img)),
            }
        })
        .collect()
}
