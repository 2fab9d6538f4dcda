//! Batched loss assembly, SGD with momentum, and the training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, PointSet};
use crate::inference::{run_inference, run_inference_traced, Detection, InferenceConfig, InferenceTrace};
use crate::losses::{corner_loss, focal_loss, normalized_focal_loss, reppoints_regression_loss, FocalParams};
use crate::pipeline::assign::{assign_training_samples, Assignment};
use crate::pipeline::autodiff::{Graph, Var};
use crate::pipeline::checkpoint::{self, TrainState};
use crate::pipeline::data::Sample;
use crate::pipeline::eval::{evaluate_detections, EvalResult};
use crate::pipeline::model::{level_outputs, slice_image, LevelVars, Model};
use crate::scene::GtScene;
use crate::targets::{assign_all_levels, LevelTargets, TargetParams};
use crate::tensor::Tensor;

/// Classification focal-loss constants of the main branch.
pub const CLS_ALPHA: f64 = 0.25;
pub const CLS_GAMMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Linear warmup from `warmup_ratio * lr` over this many iterations.
    #[serde(default = "default_warmup")]
    pub warmup_iters: usize,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Fractions of the schedule after which the rate drops 10x.
    #[serde(default = "default_decay")]
    pub decay_at: Vec<f64>,
}

fn default_epochs() -> usize {
    24
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_warmup() -> usize {
    100
}
fn default_warmup_ratio() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    35.0
}
fn default_decay() -> Vec<f64> {
    vec![2.0 / 3.0, 8.0 / 9.0]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            warmup_iters: default_warmup(),
            warmup_ratio: default_warmup_ratio(),
            grad_clip: default_clip(),
            decay_at: default_decay(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("train.{field}"),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay", "weight decay and clipping must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio", "must lie in [0, 1]");
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("decay_at", "fractions must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn learning_rate(&self, iteration: usize, total: usize) -> f64 {
        let mut lr = self.lr;
        for f in &self.decay_at {
            if iteration as f64 >= f * total as f64 {
                lr *= 0.1;
            }
        }
        if iteration < self.warmup_iters {
            let t = iteration as f64 / self.warmup_iters as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * t;
        }
        lr
    }
}

/// A sample with its image tensor and every training target precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: Tensor,
    pub scene: GtScene,
    pub assignments: Vec<Assignment>,
    pub targets: Vec<LevelTargets>,
}

pub fn prepare(samples: &[Sample], target_params: &TargetParams) -> Vec<Prepared> {
    samples
        .par_iter()
        .map(|s| {
            let levels = Model::levels(s.scene.image_w, s.scene.image_h);
            Prepared {
                image: s.image.to_tensor(),
                scene: s.scene.clone(),
                assignments: assign_training_samples(&s.scene, &levels),
                targets: assign_all_levels(&s.scene, &levels, target_params),
            }
        })
        .collect()
}

pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let shape = images.first().ok_or(Error::EmptyDataset)?.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for t in images {
        t.check_shape("batched image", &shape)?;
        data.extend_from_slice(t.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

/// Per-iteration loss components, averaged over the batch. Component values
/// are unweighted; `total` applies the loss weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    /// Classification plus point regression.
    pub reppoints: f64,
    pub classification: f64,
    pub regression: f64,
    pub corner: f64,
    pub foreground: f64,
}

impl LossRecord {
    fn is_finite(&self) -> bool {
        [self.total, self.reppoints, self.corner, self.foreground].iter().all(|v| v.is_finite())
    }
}

/// Forward graph plus gradient seeds of the batch objective.
pub struct BatchObjective {
    pub graph: Graph,
    pub levels: Vec<LevelVars>,
    pub seeds: Vec<(Var, Tensor)>,
    pub record: LossRecord,
}

fn add_at(t: &mut Tensor, img: usize, chunk: &[f64], scale: f64, offset: usize) {
    let per = t.len() / t.shape()[0];
    let dst = &mut t.data_mut()[img * per + offset..img * per + offset + chunk.len()];
    for (d, s) in dst.iter_mut().zip(chunk) {
        *d += s * scale;
    }
}

fn point_set(offsets: &Tensor, img: usize, row: usize, col: usize, stride: usize) -> PointSet {
    let [_, c2, h, w] = [offsets.shape()[0], offsets.shape()[1], offsets.shape()[2], offsets.shape()[3]];
    let at = |ch: usize| offsets.data()[((img * c2 + ch) * h + row) * w + col];
    let s = stride as f64;
    PointSet::new(
        (0..c2 / 2)
            .map(|k| Point2::new((col as f64 + 0.5 + at(2 * k)) * s, (row as f64 + 0.5 + at(2 * k + 1)) * s))
            .collect(),
    )
}

/// Builds the forward graph for a batch and the seeds of
/// `mean_i [L_cls + L_reg + w_corner * L_corner + w_fg * L_fg]`.
pub fn batch_objective(model: &Model, batch: &[&Prepared], focal: &FocalParams) -> Result<BatchObjective> {
    let mut g = Graph::new();
    let images = stack_images(&batch.iter().map(|p| &p.image).collect::<Vec<_>>())?;
    let x = g.input(images);
    let levels = model.forward(&mut g, x)?;
    let cfg = &model.cfg;
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let zeros = |g: &Graph, v: Var| Tensor::zeros(g.value(v).shape());
    let mut d_cls: Vec<Tensor> = levels.iter().map(|l| zeros(&g, l.cls)).collect();
    let mut d_init: Vec<Tensor> = levels.iter().map(|l| zeros(&g, l.pts_init)).collect();
    let mut d_refine: Vec<Tensor> = levels.iter().map(|l| zeros(&g, l.pts_refine)).collect();
    let mut d_heat: Vec<Option<Tensor>> = levels.iter().map(|l| l.corner_heat.map(|v| zeros(&g, v))).collect();
    let mut d_off: Vec<Option<Tensor>> = levels.iter().map(|l| l.corner_offset.map(|v| zeros(&g, v))).collect();
    let mut d_fg: Vec<Option<Tensor>> = levels.iter().map(|l| l.foreground.map(|v| zeros(&g, v))).collect();
    let mut rec = LossRecord::default();
    let w = cfg.loss_weights;

    for (i, p) in batch.iter().enumerate() {
        // classification over both levels at once, so the positive count spans the pyramid
        let mut pred = Vec::new();
        let mut labels = Vec::new();
        let mut spans = Vec::new();
        for (li, l) in levels.iter().enumerate() {
            let s = slice_image(g.value(l.cls), i);
            let (h, wd) = (s.shape()[1], s.shape()[2]);
            let mut lab = vec![0.0; s.len()];
            for a in p.assignments.iter().filter(|a| a.level == li) {
                let c = p.scene.objects[a.object].class_id;
                lab[(c * h + a.row) * wd + a.col] = 1.0;
            }
            spans.push((pred.len(), s.len()));
            pred.extend_from_slice(s.data());
            labels.extend(lab);
        }
        let n = pred.len();
        let cls = focal_loss(&Tensor::from_vec(&[n], pred)?, &Tensor::from_vec(&[n], labels)?, CLS_ALPHA, CLS_GAMMA)?;
        for (li, &(start, len)) in spans.iter().enumerate() {
            add_at(&mut d_cls[li], i, &cls.gradient.data()[start..start + len], inv_b, 0);
        }
        rec.classification += cls.value * inv_b;

        if !p.assignments.is_empty() {
            let mut init = Vec::new();
            let mut refine = Vec::new();
            let mut gt = Vec::new();
            for a in &p.assignments {
                let stride = levels[a.level].stride;
                init.push(point_set(g.value(levels[a.level].pts_init), i, a.row, a.col, stride));
                refine.push(point_set(g.value(levels[a.level].pts_refine), i, a.row, a.col, stride));
                gt.push(p.scene.objects[a.object].bbox);
            }
            let reg = reppoints_regression_loss(&init, &refine, &gt, cfg.conversion, cfg.regression, None, cfg.stage_weights)?;
            let npts = cfg.num_points;
            for (k, a) in p.assignments.iter().enumerate() {
                let l = &levels[a.level];
                let s = l.stride as f64;
                for (grad, dst) in [(&reg.grad_initial, &mut d_init[a.level]), (&reg.grad_refined, &mut d_refine[a.level])] {
                    let [_, c2, h, wd] = [dst.shape()[0], dst.shape()[1], dst.shape()[2], dst.shape()[3]];
                    for ch in 0..2 * npts {
                        let gv = grad.data()[k * npts * 2 + ch];
                        dst.data_mut()[((i * c2 + ch) * h + a.row) * wd + a.col] += gv * s * inv_b;
                    }
                }
            }
            rec.regression += reg.value * inv_b;
        }

        for (li, l) in levels.iter().enumerate() {
            let t = &p.targets[li];
            if let (Some(hv), Some(ov)) = (l.corner_heat, l.corner_offset) {
                let heat = slice_image(g.value(hv), i);
                let off = slice_image(g.value(ov), i);
                let c = corner_loss(&heat, &off, &t.corners, &t.offsets, p.scene.objects.len(), focal)?;
                rec.corner += c.value * inv_b;
                if w.corner > 0.0 {
                    let split = heat.len();
                    let scale = w.corner * inv_b;
                    add_at(d_heat[li].as_mut().expect("heat seed"), i, &c.gradient.data()[..split], scale, 0);
                    add_at(d_off[li].as_mut().expect("offset seed"), i, &c.gradient.data()[split..], scale, 0);
                }
            }
            if let Some(fv) = l.foreground {
                let fg = normalized_focal_loss(&slice_image(g.value(fv), i), &t.foreground, focal)?;
                rec.foreground += fg.value * inv_b;
                if w.foreground > 0.0 {
                    add_at(d_fg[li].as_mut().expect("fg seed"), i, fg.gradient.data(), w.foreground * inv_b, 0);
                }
            }
        }
    }
    rec.reppoints = rec.classification + rec.regression;
    rec.total = rec.reppoints + w.corner * rec.corner + w.foreground * rec.foreground;

    let mut seeds = Vec::new();
    for (li, l) in levels.iter().enumerate() {
        seeds.push((l.cls, std::mem::replace(&mut d_cls[li], Tensor::zeros(&[0]))));
        seeds.push((l.pts_init, std::mem::replace(&mut d_init[li], Tensor::zeros(&[0]))));
        seeds.push((l.pts_refine, std::mem::replace(&mut d_refine[li], Tensor::zeros(&[0]))));
        let corner_on = w.corner > 0.0;
        let fg_on = w.foreground > 0.0;
        for (v, d, on) in [
            (l.corner_heat, &mut d_heat[li], corner_on),
            (l.corner_offset, &mut d_off[li], corner_on),
            (l.foreground, &mut d_fg[li], fg_on),
        ] {
            if let (true, Some(v), Some(d)) = (on, v, d.take()) {
                seeds.push((v, d));
            }
        }
    }
    Ok(BatchObjective {
        graph: g,
        levels,
        seeds,
        record: rec,
    })
}

/// One SGD step: weight decay, global-norm clipping, momentum. Parameters
/// without a gradient are left untouched.
pub fn sgd_step(state: &mut TrainState, mut grads: Vec<Option<Tensor>>, lr: f64, cfg: &TrainConfig) {
    for (id, g) in grads.iter_mut().enumerate() {
        if let Some(g) = g {
            for (d, w) in g.data_mut().iter_mut().zip(state.model.params.get(id).data()) {
                *d += cfg.weight_decay * w;
            }
        }
    }
    if cfg.grad_clip > 0.0 {
        let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grads.iter_mut().flatten().for_each(|g| g.scale(s));
        }
    }
    for (id, g) in grads.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let m = &mut state.momentum[id];
        for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = cfg.momentum * *mv + gv;
        }
        let p = state.model.params.get_mut(id);
        for (pv, mv) in p.data_mut().iter_mut().zip(state.momentum[id].data()) {
            *pv -= lr * mv;
        }
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives one JSON line per iteration.
    pub log: Option<&'a mut dyn Write>,
    /// Saved at the end of every epoch and when stopping early.
    pub checkpoint: Option<&'a Path>,
    /// Stop once this many iterations have completed.
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.total)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Trains from `state` (fresh or resumed) to the end of the schedule.
pub fn train(
    data: &[Prepared],
    mut state: TrainState,
    cfg: &TrainConfig,
    focal: &FocalParams,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ipe = cfg.iters_per_epoch(data.len());
    let total = cfg.epochs * ipe;
    let mut history = Vec::new();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.iteration < total {
        let it = state.iteration;
        let epoch = it / ipe;
        if epoch != order_epoch {
            order = epoch_order(data.len(), state.seed, epoch);
            order_epoch = epoch;
        }
        let start = (it % ipe) * cfg.batch_size;
        let batch: Vec<&Prepared> = order[start..(start + cfg.batch_size).min(data.len())].iter().map(|&k| &data[k]).collect();
        let obj = batch_objective(&state.model, &batch, focal)?;
        let lr = cfg.learning_rate(it, total);
        let mut record = obj.record;
        record.iteration = it;
        record.lr = lr;
        if !record.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: serde_json::to_string(&record).expect("record serializes"),
            });
        }
        let grads = obj.graph.backward(&obj.seeds)?.params(state.model.params.len());
        sgd_step(&mut state, grads, lr, cfg);
        state.iteration += 1;
        if let Some(w) = opts.log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("writing loss log", e))?;
        }
        if it % 50 == 0 {
            log::info!("iter {it}/{total} lr {lr:.5} loss {:.4}", record.total);
        }
        history.push(record);
        let epoch_done = state.iteration % ipe == 0;
        let stopping = opts.stop_after.is_some_and(|s| state.iteration >= s);
        if let Some(path) = opts.checkpoint {
            if epoch_done || stopping {
                checkpoint::save(&state, path)?;
            }
        }
        if stopping {
            break;
        }
    }
    Ok(TrainOutcome { state, history })
}

/// Detections for each image, batched and fanned out across workers.
pub fn predict(model: &Model, images: &[&Tensor], inference: &InferenceConfig, batch_size: usize) -> Result<Vec<Vec<Detection>>> {
    let chunks: Vec<Result<Vec<Vec<Detection>>>> = images
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let mut g = Graph::new();
            let x = g.input(stack_images(chunk)?);
            let levels = model.forward(&mut g, x)?;
            let (h, w) = (chunk[0].shape()[1], chunk[0].shape()[2]);
            (0..chunk.len())
                .map(|i| run_inference(&level_outputs(&g, &levels, i, w, h), model.cfg.conversion, inference))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Detections of one image with their refinement traces.
pub fn predict_traced(model: &Model, image: &Tensor, inference: &InferenceConfig) -> Result<Vec<(Detection, InferenceTrace)>> {
    let mut g = Graph::new();
    let x = g.input(stack_images(&[image])?);
    let levels = model.forward(&mut g, x)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    run_inference_traced(&level_outputs(&g, &levels, 0, w, h), model.cfg.conversion, inference)
}

/// Runs the model over `data` and scores it.
pub fn evaluate_model(model: &Model, data: &[Prepared], inference: &InferenceConfig, thresholds: &[f64]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<&Tensor> = data.iter().map(|p| &p.image).collect();
    let dets = predict(model, &images, inference, 16)?;
    let gts: Vec<GtScene> = data.iter().map(|p| p.scene.clone()).collect();
    evaluate_detections(&gts, &dets, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::{generate_split, Split, SyntheticDatasetSpec};
    use crate::pipeline::model::{Ablation, HeadConfig};

    fn tiny_data(n: usize) -> Vec<Prepared> {
        let spec = SyntheticDatasetSpec {
            image_w: 32,
            image_h: 32,
            min_size: 8.0,
            max_size: 16.0,
            train_size: n,
            ..Default::default()
        };
        prepare(&generate_split(&spec, Split::Train).unwrap(), &TargetParams::default())
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            warmup_iters: 2,
            ..Default::default()
        }
    }

    fn small_head(a: Ablation) -> HeadConfig {
        HeadConfig {
            feature_channels: 8,
            backbone_channels: [4, 8],
            ..HeadConfig::for_ablation(a)
        }
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig {
            warmup_iters: 0,
            ..Default::default()
        };
        assert_eq!(c.learning_rate(0, 90), 0.01);
        assert!((c.learning_rate(60, 90) - 0.001).abs() < 1e-15);
        assert!((c.learning_rate(80, 90) - 0.0001).abs() < 1e-15);
        let w = TrainConfig::default();
        assert!((w.learning_rate(0, 1000) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn objective_gradient_matches_finite_difference_on_a_bias() {
        let data = tiny_data(2);
        let model = Model::new(small_head(Ablation::Full), 3, 1).unwrap();
        let batch: Vec<&Prepared> = data.iter().collect();
        let focal = FocalParams::default();
        let obj = batch_objective(&model, &batch, &focal).unwrap();
        let grads = obj.graph.backward(&obj.seeds).unwrap().params(model.params.len());
        for name in ["head.cls_out.bias", "head.corner_tl_heat.bias", "head.fg.bias", "head.pts_refine.bias"] {
            let id = model.params.id(name).unwrap();
            let analytic = grads[id].as_ref().unwrap().data()[0];
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(id).data_mut()[0] += delta;
                batch_objective(&m, &batch, &focal).unwrap().record.total
            };
            let h = 1e-6;
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((analytic - numeric).abs() <= 1e-5 * numeric.abs().max(1e-3), "{name}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn zero_verification_weights_leave_heads_untouched() {
        let data = tiny_data(8);
        let mut head = small_head(Ablation::Full);
        head.loss_weights.corner = 0.0;
        head.loss_weights.foreground = 0.0;
        let model = Model::new(head, 3, 2).unwrap();
        let before = model.params.clone();
        let out = train(&data, TrainState::fresh(model, 2), &tiny_cfg(1), &FocalParams::default(), TrainOptions::default()).unwrap();
        for (name, t) in out.state.model.params.iter() {
            let verification = name.starts_with("head.corner") || name.starts_with("head.fg") || name.starts_with("head.verify");
            if verification {
                assert_eq!(before.by_name(name), Some(t), "{name} moved");
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data(8);
        let fresh = || TrainState::fresh(Model::new(small_head(Ablation::Fusion), 3, 3).unwrap(), 3);
        let cfg = tiny_cfg(2);
        let focal = FocalParams::default();
        let full = train(&data, fresh(), &cfg, &focal, TrainOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.bin");
        let opts = TrainOptions {
            checkpoint: Some(&ckpt),
            stop_after: Some(3),
            ..Default::default()
        };
        let partial = train(&data, fresh(), &cfg, &focal, opts).unwrap();
        assert_eq!(partial.state.iteration, 3);
        let resumed = train(&data, checkpoint::load(&ckpt).unwrap(), &cfg, &focal, TrainOptions::default()).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.final_loss(), full.final_loss());
    }

    #[test]
    fn loss_log_is_json_lines() {
        let data = tiny_data(4);
        let mut buf = Vec::new();
        let opts = TrainOptions {
            log: Some(&mut buf),
            ..Default::default()
        };
        let model = Model::new(small_head(Ablation::Multitask), 3, 0).unwrap();
        train(&data, TrainState::fresh(model, 0), &tiny_cfg(1), &FocalParams::default(), opts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for k in ["reppoints", "corner", "foreground", "total", "iteration"] {
            assert!(first.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn empty_inputs_error() {
        let model = Model::new(small_head(Ablation::Baseline), 3, 0).unwrap();
        let r = train(&[], TrainState::fresh(model.clone(), 0), &tiny_cfg(1), &FocalParams::default(), TrainOptions::default());
        assert!(matches!(r, Err(Error::EmptyDataset)));
        assert!(matches!(evaluate_model(&model, &[], &InferenceConfig::default(), &[0.5]), Err(Error::EmptyDataset)));
    }
}
