//! Two-stage training orchestration and evaluation.
//!
//! Pre-training renders projected attribute fields along supervision rays
//! and optimizes the temporal 2D rendering loss; fine-tuning decodes
//! occupancy logits and optimizes the 3D loss (optionally joint with the
//! trajectory loss). Stage isolation is structural: pre-training loads
//! scenes without GT grids, fine-tuning without baked 2D labels.

use crate::autodiff::Graph;
use crate::ego::EgoState;
use crate::error::{Error, Result};
use crate::grid::SemanticGrid;
use crate::losses::{
    self, focal_loss, lovasz_softmax_loss, occupancy_3d_loss, rgb_l1_loss,
    scene_class_affinity_losses, semantic_ce_loss, silog_depth_loss, temporal_2d_loss,
    trajectory_l2_loss, LossWeights, FOCAL_GAMMA,
};
use crate::metrics::{
    collision_rates, confusion, miou_from_confusion, planning_l2, ray_iou, spherical_query_rays,
    trajectory_collisions, CollisionReport, ConfusionCounts, EgoBox, PlanningL2Report,
    RayIoUReport, DEFAULT_RAYIOU_THRESHOLDS,
};
use crate::nets::{
    load_checkpoint, predict_grid, save_checkpoint, FeatureGrid, Model, ModelConfig,
};
use crate::ray::{build_supervision_bundle, pixel_rays, sample_along, BundleOptions, RayBundle};
use crate::render::{render_bundle, render_bundle_graph, AttributeFields, RenderedPixel};
use crate::scene::{load_scene_parts, LoadParts, Scene};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Rays dimmer than this carry no depth/semantic supervision and are
/// considered background for extraction purposes.
pub const OPACITY_FLOOR: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Joint,
}

/// The training recipe; the CLI config JSON mirrors this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Past frames k (ego-state history length).
    pub past_frames: usize,
    /// Future frames f forecast and supervised.
    pub future_frames: usize,
    /// Adjacent label frames n on each side for ray supervision.
    pub adjacent_frames: usize,
    /// Samples per ray M.
    pub samples_per_ray: usize,
    pub ray_stride: u32,
    pub epochs: usize,
    pub learning_rate: f32,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub deterministic: bool,
    /// Density threshold tau for self-supervised occupancy extraction.
    pub density_threshold: f32,
    pub use_ego_state: bool,
    pub residual_forecast: bool,
    pub model: ModelConfig,
    #[serde(default = "default_rayiou_az")]
    pub rayiou_azimuths: usize,
    #[serde(default = "default_rayiou_el")]
    pub rayiou_elevations: usize,
    #[serde(default = "default_eval_stride")]
    pub eval_frame_stride: usize,
    #[serde(default)]
    pub val_fraction: Option<f64>,
}

fn default_rayiou_az() -> usize {
    360
}

fn default_rayiou_el() -> usize {
    20
}

fn default_eval_stride() -> usize {
    2
}

impl TrainConfig {
    pub fn desk_default() -> TrainConfig {
        TrainConfig {
            stage: Stage::Pretrain,
            past_frames: 2,
            future_frames: 3,
            adjacent_frames: 1,
            samples_per_ray: 48,
            ray_stride: 4,
            epochs: 2,
            learning_rate: 1e-3,
            loss_weights: LossWeights::default(),
            seed: 0,
            deterministic: true,
            density_threshold: 0.5,
            use_ego_state: true,
            residual_forecast: true,
            model: ModelConfig::desk_default(),
            rayiou_azimuths: default_rayiou_az(),
            rayiou_elevations: default_rayiou_el(),
            eval_frame_stride: default_eval_stride(),
            val_fraction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 1 {
            return Err(Error::Data("samples_per_ray must be >= 1".into()));
        }
        if self.ray_stride < 1 {
            return Err(Error::Data("ray_stride must be >= 1".into()));
        }
        if self.density_threshold <= 0.0 {
            return Err(Error::Data("density_threshold must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Data("learning_rate must be positive".into()));
        }
        self.loss_weights.validate()?;
        Ok(())
    }

    /// Applies the config's architecture switches to the model config.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.use_ego_state = self.use_ego_state;
        m.residual_forecast = self.residual_forecast;
        m.ego_history = self.past_frames;
        m.future_horizon = self.future_frames.max(1);
        m
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One optimization step's result.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f32,
    pub components: Vec<(&'static str, f32)>,
}

/// Conditioning for rollout step i (frame t+i to t+i+1): the destination
/// frame's state, whose backward-difference kinematics describe exactly
/// the interval being forecast.
fn ego_states_for_rollout(scene: &Scene, frame_t: usize, horizon: usize) -> Vec<Option<EgoState>> {
    (0..horizon)
        .map(|i| {
            scene
                .frames
                .get(frame_t + i + 1)
                .map(|f| f.ego_state.clone())
        })
        .collect()
}

fn check_finite(loss: f32, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("{what} loss is not finite: {loss}")));
    }
    Ok(())
}

/// Renders one frame's supervision bundle against projected fields and
/// assembles the three rendering losses.
fn rendering_losses(
    model: &Model,
    bound: &crate::nets::BoundParams,
    fields: &AttributeFields,
    bundle: &RayBundle,
) -> Result<(crate::autodiff::Tensor, crate::autodiff::Tensor, crate::autodiff::Tensor)> {
    let labels = bundle
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("supervision bundle has no labels".into()))?;
    let rendered = render_bundle_graph(fields, bundle, true);
    let n = bundle.len();
    let ds = model.config.num_semantic();

    let packed = rendered.packed.value();
    let cols = 1 + ds + 3 + 1;
    let opacity: Vec<f32> = (0..n).map(|r| packed[r * cols + cols - 1]).collect();

    let mut depth_gt = vec![0.0f32; n];
    let mut depth_mask = vec![false; n];
    let mut sem_gt = vec![0usize; n];
    let mut sem_mask = vec![false; n];
    let mut rgb_gt = Vec::with_capacity(n * 3);
    for (r, label) in labels.iter().enumerate() {
        let lit = opacity[r] >= OPACITY_FLOOR;
        if let Some(d) = label.depth {
            depth_gt[r] = d;
            depth_mask[r] = lit;
        }
        if let Some(s) = label.semantic {
            sem_gt[r] = s as usize;
            sem_mask[r] = lit;
        }
        rgb_gt.extend_from_slice(&label.rgb);
    }
    let depth = silog_depth_loss(&rendered.depth().reshape(&[n]), &depth_gt, &depth_mask)?;
    let sem = semantic_ce_loss(&rendered.semantics(), &sem_gt, &sem_mask)?;
    let rgb = rgb_l1_loss(&rendered.color(), &rgb_gt);
    Ok((depth, sem, rgb))
}

/// One pre-training step on frame T of a scene: encode, roll out, project,
/// render, 2D loss, Adam. The occupancy head never joins the graph.
pub fn pretrain_step(
    model: &mut Model,
    scene: &Scene,
    frame_t: usize,
    cfg: &TrainConfig,
    step_index: u64,
) -> Result<StepOutput> {
    let graph = Graph::new();
    let bound = model.bind(&graph);
    let frame = &scene.frames[frame_t];
    let fg = model.encode_scene(&graph, &bound, &frame.images, &scene.rig)?;

    let f = cfg.future_frames.min(scene.frames.len() - 1 - frame_t);
    let mut feature_grids = vec![fg.clone()];
    if f >= 1 {
        let egos = ego_states_for_rollout(scene, frame_t, f);
        feature_grids.extend(model.rollout(&graph, &bound, &fg, &egos, f));
    }

    let mut per_frame = Vec::with_capacity(feature_grids.len());
    for (i, fgi) in feature_grids.iter().enumerate() {
        let fields = model.project_attributes(&bound, fgi);
        let opts = BundleOptions {
            adjacent: cfg.adjacent_frames,
            stride: cfg.ray_stride,
            samples_per_ray: cfg.samples_per_ray,
            jitter: true,
            seed: cfg.seed ^ step_index.wrapping_mul(0x2545f4914f6cdd1d) ^ (i as u64) << 48,
        };
        let bundle = build_supervision_bundle(scene, frame_t + i, &opts, &fgi.geometry)?;
        per_frame.push(rendering_losses(model, &bound, &fields, &bundle)?);
    }
    let total = temporal_2d_loss(&per_frame, &cfg.loss_weights);
    let loss = total.scalar();
    check_finite(loss, "pretrain")?;

    let bp = graph.backward(&total);
    let grads = bound.collect_grads(&bp);
    model.store.adam_step(&grads, cfg.learning_rate);

    let mut components = Vec::new();
    for (i, (d, s, r)) in per_frame.iter().enumerate() {
        if i == 0 {
            components.push(("depth", d.scalar()));
            components.push(("semantic", s.scalar()));
            components.push(("rgb", r.scalar()));
        }
    }
    Ok(StepOutput { loss, components })
}

/// One fine-tuning step: encode, roll out, decode occupancy, 3D loss over
/// frames T..T+f (plus the trajectory loss in joint mode). The projection
/// head never joins the graph.
pub fn finetune_step(
    model: &mut Model,
    scene: &Scene,
    frame_t: usize,
    cfg: &TrainConfig,
    joint: bool,
) -> Result<StepOutput> {
    let graph = Graph::new();
    let bound = model.bind(&graph);
    let frame = &scene.frames[frame_t];
    let fg = model.encode_scene(&graph, &bound, &frame.images, &scene.rig)?;

    let f = cfg.future_frames.min(scene.frames.len() - 1 - frame_t);
    let mut feature_grids = vec![fg.clone()];
    if f >= 1 {
        let egos = ego_states_for_rollout(scene, frame_t, f);
        feature_grids.extend(model.rollout(&graph, &bound, &fg, &egos, f));
    }

    let free_cat = scene.taxonomy.free_category() as usize;
    let mut frame_losses = Vec::new();
    let mut components = Vec::new();
    for (i, fgi) in feature_grids.iter().enumerate() {
        let gt = scene.gt_grid(frame_t + i)?;
        let logits = model.occupancy_logits(&bound, fgi);
        let focal = focal_loss(&logits, gt.raw(), FOCAL_GAMMA);
        let probs = logits.softmax_rows();
        let lovasz = lovasz_softmax_loss(&probs, gt.raw());
        let (scal_sem, scal_geo) = scene_class_affinity_losses(&probs, gt.raw(), free_cat);
        let frame_loss = occupancy_3d_loss(&focal, &lovasz, &scal_sem, &scal_geo, &cfg.loss_weights);
        if i == 0 {
            components.push(("focal", focal.scalar()));
            components.push(("lovasz", lovasz.scalar()));
            components.push(("scal_sem", scal_sem.scalar()));
            components.push(("scal_geo", scal_geo.scalar()));
        }
        frame_losses.push(frame_loss);
    }
    let mut parts: Vec<(&crate::autodiff::Tensor, f32)> =
        frame_losses.iter().map(|t| (t, 1.0)).collect();

    let traj_loss;
    if joint && cfg.loss_weights.lambda_traj > 0.0 && f >= 1 {
        let wp = model.trajectory(&graph, &bound, &fg, Some(&frame.ego_state));
        let gt_wp: Vec<[f64; 2]> = frame.future_waypoints.iter().take(f).copied().collect();
        if gt_wp.len() < model.config.future_horizon {
            return Err(Error::Data(format!(
                "frame {frame_t}: trajectory continuation shorter than horizon"
            )));
        }
        let wp_used = wp; // [future_horizon, 2]
        let gt_full: Vec<[f64; 2]> = frame
            .future_waypoints
            .iter()
            .take(model.config.future_horizon)
            .copied()
            .collect();
        traj_loss = Some(trajectory_l2_loss(&wp_used, &gt_full)?);
        components.push(("trajectory", traj_loss.as_ref().unwrap().scalar()));
    } else {
        traj_loss = None;
    }
    if let Some(t) = traj_loss.as_ref() {
        parts.push((t, cfg.loss_weights.lambda_traj));
    }

    let total = crate::autodiff::Tensor::weighted_sum(&parts);
    let loss = total.scalar();
    check_finite(loss, "finetune")?;

    let bp = graph.backward(&total);
    let grads = bound.collect_grads(&bp);
    model.store.adam_step(&grads, cfg.learning_rate);
    Ok(StepOutput { loss, components })
}

/// Density-threshold occupancy extraction: a voxel is occupied with the
/// argmax semantic category iff its density reaches tau.
pub fn extract_occupancy_selfsup(fields: &AttributeFields, tau: f32) -> SemanticGrid {
    let geometry = fields.geometry;
    let v = geometry.voxel_count();
    let ds = fields.num_semantic();
    let num_categories = ds + 1;
    let density = fields.density.value();
    let semantics = fields.semantics.value();
    let mut cats = vec![(num_categories - 1) as u8; v];
    for vox in 0..v {
        if density[vox] >= tau {
            let row = &semantics[vox * ds..(vox + 1) * ds];
            let mut best = 0usize;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            cats[vox] = best as u8;
        }
    }
    SemanticGrid::from_raw(geometry, num_categories, cats)
}

// ---------------------------------------------------------------------------
// Stage driver
// ---------------------------------------------------------------------------

/// Frames usable as training anchors: the full future horizon must exist.
fn anchor_frames(scene: &Scene, f: usize) -> Vec<usize> {
    if scene.frames.len() <= f {
        return Vec::new();
    }
    (0..scene.frames.len() - f).collect()
}

/// Runs the configured number of epochs of one stage over the scenes.
/// Sample order is shuffled deterministically per epoch.
pub fn train_stage(
    model: &mut Model,
    stage: Stage,
    scenes: &[Scene],
    cfg: &TrainConfig,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for t in anchor_frames(scene, cfg.future_frames) {
            samples.push((si, t));
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(
            "no trainable frames: scenes shorter than the future horizon".into(),
        ));
    }
    let stage_name = match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
        Stage::Joint => "joint",
    };
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order = samples.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe19u64 ^ (epoch as u64) << 32);
        order.shuffle(&mut rng);
        for (si, t) in order {
            let out = match stage {
                Stage::Pretrain => pretrain_step(model, &scenes[si], t, cfg, step)?,
                Stage::Finetune => finetune_step(model, &scenes[si], t, cfg, false)?,
                Stage::Joint => finetune_step(model, &scenes[si], t, cfg, true)?,
            };
            if let Some(csv) = loss_csv {
                losses::append_loss_csv(csv, step, stage_name, "total", out.loss)?;
                for (name, value) in &out.components {
                    losses::append_loss_csv(csv, step, stage_name, name, *value)?;
                }
            }
            step += 1;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct HorizonMiou {
    pub horizon: usize,
    pub miou: f64,
    pub iou_geo: f64,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, Serialize)]
pub struct EvalBundle {
    /// Current-frame (horizon 0) voxel metrics.
    pub current: HorizonMiou,
    /// Forecast metrics per step horizon 1..=f.
    pub forecast: Vec<HorizonMiou>,
    /// Copy&Paste baseline per step horizon 1..=f.
    pub copy_paste: Vec<HorizonMiou>,
    pub rayiou: RayIoUReport,
    pub l2: PlanningL2Report,
    pub collision: CollisionReport,
    /// Number of (scene, frame) samples evaluated.
    pub samples: usize,
}

impl EvalBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("EvalBundle serializes")
    }

    /// Flat CSV form: metric,value rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("miou,{}\n", self.current.miou));
        out.push_str(&format!("iou_geo,{}\n", self.current.iou_geo));
        for h in &self.forecast {
            out.push_str(&format!("forecast_miou_{},{}\n", h.horizon, h.miou));
            out.push_str(&format!("forecast_iou_geo_{},{}\n", h.horizon, h.iou_geo));
        }
        for h in &self.copy_paste {
            out.push_str(&format!("copy_paste_miou_{},{}\n", h.horizon, h.miou));
        }
        for t in &self.rayiou.per_threshold {
            out.push_str(&format!("rayiou_{}m,{}\n", t.threshold, t.ray_iou));
        }
        out.push_str(&format!("rayiou_mean,{}\n", self.rayiou.mean));
        for (h, v) in &self.l2.per_horizon {
            out.push_str(&format!("l2_{h},{v}\n"));
        }
        out.push_str(&format!("l2_avg,{}\n", self.l2.average));
        for (h, v) in &self.collision.per_horizon {
            out.push_str(&format!("collision_{h},{v}\n"));
        }
        out.push_str(&format!("collision_avg,{}\n", self.collision.average));
        out.push_str(&format!("samples,{}\n", self.samples));
        out
    }

    pub fn forecast_miou_avg(&self) -> f64 {
        self.forecast.iter().map(|h| h.miou).sum::<f64>() / self.forecast.len().max(1) as f64
    }

    pub fn copy_paste_miou_avg(&self) -> f64 {
        self.copy_paste.iter().map(|h| h.miou).sum::<f64>() / self.copy_paste.len().max(1) as f64
    }
}

/// How predictions are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Occupancy head logits, argmax.
    Head,
    /// Density-threshold extraction from the projected attribute fields.
    SelfSupervised,
}

struct SampleEval {
    current: ConfusionCounts,
    forecast: Vec<ConfusionCounts>,
    copy_paste: Vec<ConfusionCounts>,
    rayiou: Option<RayIoUReport>,
    l2: Option<PlanningL2Report>,
    collisions: Option<Vec<bool>>,
}

fn predict_frames(
    model: &Model,
    scene: &Scene,
    frame_t: usize,
    f: usize,
    mode: EvalMode,
    tau: f32,
) -> Result<(Vec<SemanticGrid>, Vec<[f64; 2]>)> {
    let graph = Graph::new();
    let bound = model.bind(&graph);
    let frame = &scene.frames[frame_t];
    let fg = model.encode_scene(&graph, &bound, &frame.images, &scene.rig)?;
    let mut grids_pred = Vec::with_capacity(f + 1);
    let mut feature_grids: Vec<FeatureGrid> = vec![fg.clone()];
    if f >= 1 {
        let egos = ego_states_for_rollout(scene, frame_t, f);
        feature_grids.extend(model.rollout(&graph, &bound, &fg, &egos, f));
    }
    for fgi in &feature_grids {
        let grid = match mode {
            EvalMode::Head => {
                let logits = model.occupancy_logits(&bound, fgi);
                predict_grid(&logits.value(), fgi.geometry, model.config.num_categories)
            }
            EvalMode::SelfSupervised => {
                let fields = model.project_attributes(&bound, fgi);
                extract_occupancy_selfsup(&fields, tau)
            }
        };
        grids_pred.push(grid);
    }
    let wp = model.trajectory(&graph, &bound, &fg, Some(&frame.ego_state));
    let wp_values = wp.value();
    let waypoints: Vec<[f64; 2]> = (0..model.config.future_horizon)
        .map(|i| [wp_values[i * 2] as f64, wp_values[i * 2 + 1] as f64])
        .collect();
    Ok((grids_pred, waypoints))
}

/// Evaluates a model over validation scenes: current and per-horizon
/// forecast mIoU, the Copy&Paste baseline, RayIoU on the current frame,
/// trajectory L2 and collision rate. Deterministic for a fixed model and
/// scene set.
pub fn evaluate(model: &Model, scenes: &[Scene], cfg: &TrainConfig, mode: EvalMode) -> Result<EvalBundle> {
    let f = cfg.future_frames;
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (idx, t) in anchor_frames(scene, f).into_iter().enumerate() {
            if idx % cfg.eval_frame_stride.max(1) == 0 {
                samples.push((si, t));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("evaluate: no usable frames".into()));
    }
    let query_rays = spherical_query_rays(
        [0.0, 0.0, 0.0],
        cfg.rayiou_azimuths,
        cfg.rayiou_elevations,
        (-0.55, 0.35),
        model.config.geometry.diagonal(),
    );
    let horizons: Vec<usize> = (1..=f).collect();

    let evals: Vec<Result<SampleEval>> = samples
        .par_iter()
        .map(|&(si, t)| {
            let scene = &scenes[si];
            let (preds, waypoints) = predict_frames(model, scene, t, f, mode, cfg.density_threshold)?;
            let gt0 = scene.gt_grid(t)?;
            let current = confusion(&preds[0], gt0, None)?;
            let mut forecast = Vec::with_capacity(f);
            let mut copy_paste = Vec::with_capacity(f);
            for h in 1..=f {
                let gth = scene.gt_grid(t + h)?;
                forecast.push(confusion(&preds[h], gth, None)?);
                copy_paste.push(confusion(&preds[0], gth, None)?);
            }
            let rayiou = ray_iou(&preds[0], gt0, &query_rays, &DEFAULT_RAYIOU_THRESHOLDS)?;
            // Planning metrics against the recorded continuation.
            let gt_wp: Vec<[f64; 2]> = scene.frames[t]
                .future_waypoints
                .iter()
                .take(f)
                .copied()
                .collect();
            let (l2, collisions) = if gt_wp.len() == f && f >= 1 {
                let pred_wp: Vec<[f64; 2]> = waypoints.iter().take(f).copied().collect();
                let l2 = planning_l2(&pred_wp, &gt_wp, &horizons)?;
                let future_grids: Vec<&SemanticGrid> = (1..=f)
                    .map(|h| scene.gt_grid(t + h))
                    .collect::<Result<_>>()?;
                let rel_poses: Vec<_> = (1..=f)
                    .map(|h| scene.frames[t + h].ego_pose.inverse().compose(&scene.frames[t].ego_pose))
                    .collect();
                let coll = trajectory_collisions(
                    &pred_wp,
                    &future_grids,
                    &rel_poses,
                    &EgoBox::default(),
                    &scene.taxonomy.dynamic,
                )?;
                (Some(l2), Some(coll))
            } else {
                (None, None)
            };
            Ok(SampleEval {
                current,
                forecast,
                copy_paste,
                rayiou: Some(rayiou),
                l2,
                collisions,
            })
        })
        .collect();

    // Sequential merge in sample order keeps results bit-stable.
    let num_categories = model.config.num_categories;
    let free = num_categories - 1;
    let mut current = ConfusionCounts {
        num_categories,
        tp: vec![0; num_categories],
        fp: vec![0; num_categories],
        fn_: vec![0; num_categories],
    };
    let mut forecast: Vec<ConfusionCounts> = (0..f).map(|_| current.clone()).collect();
    let mut copy_paste: Vec<ConfusionCounts> = (0..f).map(|_| current.clone()).collect();
    let mut ray_tp = vec![vec![0u64; num_categories]; DEFAULT_RAYIOU_THRESHOLDS.len()];
    let mut ray_fp = ray_tp.clone();
    let mut ray_fn = ray_tp.clone();
    let mut l2_sums: Vec<f64> = vec![0.0; f];
    let mut l2_count = 0usize;
    let mut collision_samples: Vec<Vec<bool>> = Vec::new();
    let mut count = 0usize;
    for e in evals {
        let e = e?;
        current.merge(&e.current);
        for (dst, src) in forecast.iter_mut().zip(&e.forecast) {
            dst.merge(src);
        }
        for (dst, src) in copy_paste.iter_mut().zip(&e.copy_paste) {
            dst.merge(src);
        }
        if let Some(r) = &e.rayiou {
            for (ti, t) in r.per_threshold.iter().enumerate() {
                for c in 0..num_categories {
                    ray_tp[ti][c] += t.tp[c];
                    ray_fp[ti][c] += t.fp[c];
                    ray_fn[ti][c] += t.fn_[c];
                }
            }
        }
        if let Some(l2) = &e.l2 {
            for (i, (_, v)) in l2.per_horizon.iter().enumerate() {
                l2_sums[i] += v;
            }
            l2_count += 1;
        }
        if let Some(c) = e.collisions {
            collision_samples.push(c);
        }
        count += 1;
    }

    let finalize = |counts: &ConfusionCounts| {
        let r = miou_from_confusion(counts, free);
        (r.miou, r.iou_geo)
    };
    let (cm, cg) = finalize(&current);
    let mut rayiou_thresholds = Vec::new();
    for (ti, &tau) in DEFAULT_RAYIOU_THRESHOLDS.iter().enumerate() {
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..num_categories {
            let d = ray_tp[ti][c] + ray_fp[ti][c] + ray_fn[ti][c];
            if d > 0 {
                sum += ray_tp[ti][c] as f64 / d as f64;
                present += 1;
            }
        }
        rayiou_thresholds.push(crate::metrics::RayIoUThreshold {
            threshold: tau,
            tp: ray_tp[ti].clone(),
            fp: ray_fp[ti].clone(),
            fn_: ray_fn[ti].clone(),
            ray_iou: if present > 0 { sum / present as f64 } else { 1.0 },
        });
    }
    let rayiou_mean = rayiou_thresholds.iter().map(|t| t.ray_iou).sum::<f64>()
        / rayiou_thresholds.len() as f64;

    let l2 = if l2_count > 0 {
        let per: Vec<(usize, f64)> = (0..f)
            .map(|i| (i + 1, l2_sums[i] / l2_count as f64))
            .collect();
        let average = per.iter().map(|(_, v)| v).sum::<f64>() / per.len().max(1) as f64;
        PlanningL2Report {
            per_horizon: per,
            average,
        }
    } else {
        PlanningL2Report {
            per_horizon: Vec::new(),
            average: 0.0,
        }
    };
    let collision = if !collision_samples.is_empty() && f >= 1 {
        collision_rates(&collision_samples, &horizons)?
    } else {
        CollisionReport {
            per_horizon: Vec::new(),
            average: 0.0,
        }
    };

    Ok(EvalBundle {
        current: HorizonMiou {
            horizon: 0,
            miou: cm,
            iou_geo: cg,
        },
        forecast: forecast
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let (m, g) = finalize(c);
                HorizonMiou {
                    horizon: i + 1,
                    miou: m,
                    iou_geo: g,
                }
            })
            .collect(),
        copy_paste: copy_paste
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let (m, g) = finalize(c);
                HorizonMiou {
                    horizon: i + 1,
                    miou: m,
                    iou_geo: g,
                }
            })
            .collect(),
        rayiou: RayIoUReport {
            per_threshold: rayiou_thresholds,
            mean: rayiou_mean,
        },
        l2,
        collision,
        samples: count,
    })
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

/// Deterministic train/val split of scene directories by config seed.
pub fn split_scene_dirs(dirs: &[PathBuf], seed: u64, val_fraction: f64) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let mut sorted: Vec<PathBuf> = dirs.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_517);
    sorted.shuffle(&mut rng);
    let n_val = ((dirs.len() as f64 * val_fraction).round() as usize)
        .max(1)
        .min(dirs.len().saturating_sub(1).max(1));
    let val = sorted.split_off(sorted.len() - n_val);
    (sorted, val)
}

pub fn stage_load_parts(stage: Stage) -> LoadParts {
    match stage {
        Stage::Pretrain => LoadParts::for_pretrain(),
        Stage::Finetune | Stage::Joint => LoadParts::for_finetune(),
    }
}

pub fn load_scenes(dirs: &[PathBuf], parts: LoadParts) -> Result<Vec<Scene>> {
    dirs.iter().map(|d| load_scene_parts(d, parts)).collect()
}

/// Trains the configured stage over the train split (optionally from a
/// warm-start checkpoint), evaluates on the val split, and writes the
/// checkpoint plus JSON/CSV reports. On failure the checkpoint written so
/// far is still flushed.
pub fn run_experiment(
    cfg: &TrainConfig,
    scene_dirs: &[PathBuf],
    out_dir: &Path,
    init_checkpoint: Option<&Path>,
) -> Result<EvalBundle> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train_dirs, val_dirs) = split_scene_dirs(scene_dirs, cfg.seed, cfg.val_fraction.unwrap_or(0.25));

    let mut model = match init_checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.config != cfg.model_config() {
                return Err(Error::Data(
                    "checkpoint model config does not match the experiment config".into(),
                ));
            }
            m
        }
        None => Model::new(cfg.model_config(), cfg.seed),
    };

    let train_scenes = load_scenes(&train_dirs, stage_load_parts(cfg.stage))?;
    let csv = out_dir.join("loss.csv");
    let train_result = train_stage(&mut model, cfg.stage, &train_scenes, cfg, Some(&csv));
    // Flush whatever state exists before propagating a failure.
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &model)?;
    train_result?;

    let val_scenes = load_scenes(&val_dirs, LoadParts::all())?;
    let bundle = evaluate(&model, &val_scenes, cfg, EvalMode::Head)?;
    std::fs::write(out_dir.join("report.json"), bundle.to_json())
        .map_err(|e| Error::io(out_dir.join("report.json"), e))?;
    std::fs::write(out_dir.join("report.csv"), bundle.to_csv())
        .map_err(|e| Error::io(out_dir.join("report.csv"), e))?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Render/forecast dumps (PGM/PPM/CSV)
// ---------------------------------------------------------------------------

fn write_pgm(path: &Path, width: u32, height: u32, data: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_ppm(path: &Path, width: u32, height: u32, data: &[u8]) -> Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Renders one camera of one frame with the model's attribute fields and
/// dumps depth/semantic/RGB rasters plus a per-ray CSV.
pub fn dump_render(
    model: &Model,
    scene: &Scene,
    frame_t: usize,
    camera: usize,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<()> {
    if frame_t >= scene.frames.len() {
        return Err(Error::Data(format!("frame {frame_t} out of range")));
    }
    if camera >= scene.rig.len() {
        return Err(Error::Data(format!("camera {camera} out of range")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let graph = Graph::new();
    let bound = model.bind(&graph);
    let frame = &scene.frames[frame_t];
    let fg = model.encode_scene(&graph, &bound, &frame.images, &scene.rig)?;
    let fields = model.project_attributes(&bound, &fg);

    let cam = &scene.rig[camera];
    let t_far = model.config.geometry.diagonal();
    let rays = pixel_rays(cam, 1, frame_t, camera, t_far);
    let bundle = RayBundle {
        rays: rays
            .iter()
            .enumerate()
            .map(|(i, r)| sample_along(r, cfg.samples_per_ray, false, i as u64))
            .collect(),
        labels: None,
    };
    let pixels: Vec<RenderedPixel> = render_bundle(&fields, &bundle, true);

    let (w, h) = (cam.width, cam.height);
    let n = (w * h) as usize;
    let mut depth_img = vec![0u8; n];
    let mut sem_img = vec![0u8; n];
    let mut rgb_img = vec![0u8; n * 3];
    let ds = model.config.num_semantic();
    let mut csv = String::from("u,v,depth,opacity,category,r,g,b\n");
    for (ray, px) in rays.iter().zip(&pixels) {
        let u = ray.source.pixel[0] as u32;
        let v = ray.source.pixel[1] as u32;
        let i = (v * w + u) as usize;
        depth_img[i] = ((px.depth as f64 / t_far).clamp(0.0, 1.0) * 255.0) as u8;
        let mut best = 0usize;
        for (c, &x) in px.semantics.iter().enumerate() {
            if x > px.semantics[best] {
                best = c;
            }
        }
        let cat = if px.opacity >= OPACITY_FLOOR { best } else { ds };
        sem_img[i] = ((cat * 255) / ds) as u8;
        for ch in 0..3 {
            rgb_img[i * 3 + ch] = (px.color[ch].clamp(0.0, 1.0) * 255.0) as u8;
        }
        csv.push_str(&format!(
            "{u},{v},{},{},{},{},{},{}\n",
            px.depth, px.opacity, cat, px.color[0], px.color[1], px.color[2]
        ));
    }
    write_pgm(&out_dir.join(format!("frame_{frame_t:04}_cam{camera}.depth.pgm")), w, h, &depth_img)?;
    write_pgm(&out_dir.join(format!("frame_{frame_t:04}_cam{camera}.sem.pgm")), w, h, &sem_img)?;
    write_ppm(&out_dir.join(format!("frame_{frame_t:04}_cam{camera}.rgb.ppm")), w, h, &rgb_img)?;
    let csv_path = out_dir.join(format!("frame_{frame_t:04}_cam{camera}.rays.csv"));
    let mut fcsv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    fcsv.write_all(csv.as_bytes()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

/// Forecasts future occupancy from frame T and writes per-horizon OCCG
/// grids plus optional bird's-eye-view PPM dumps.
pub fn dump_forecast(
    model: &Model,
    scene: &Scene,
    frame_t: usize,
    horizon: usize,
    dump_ppm: bool,
    out_dir: &Path,
) -> Result<()> {
    if frame_t >= scene.frames.len() {
        return Err(Error::Data(format!("frame {frame_t} out of range")));
    }
    if horizon < 1 {
        return Err(Error::Data("forecast horizon must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let graph = Graph::new();
    let bound = model.bind(&graph);
    let frame = &scene.frames[frame_t];
    let fg = model.encode_scene(&graph, &bound, &frame.images, &scene.rig)?;
    let egos = ego_states_for_rollout(scene, frame_t, horizon);
    let mut grids = vec![{
        let logits = model.occupancy_logits(&bound, &fg);
        predict_grid(&logits.value(), fg.geometry, model.config.num_categories)
    }];
    for fgi in model.rollout(&graph, &bound, &fg, &egos, horizon) {
        let logits = model.occupancy_logits(&bound, &fgi);
        grids.push(predict_grid(&logits.value(), fgi.geometry, model.config.num_categories));
    }
    for (h, grid) in grids.iter().enumerate() {
        let path = out_dir.join(format!("forecast_t{frame_t:04}_h{h}.occg"));
        crate::occg::save_semantic(&path, grid, model.config.num_categories)?;
        if dump_ppm {
            let ppm = bev_ppm(grid);
            let path = out_dir.join(format!("forecast_t{frame_t:04}_h{h}.bev.ppm"));
            write_ppm(&path, grid.geometry.dims[0], grid.geometry.dims[1], &ppm)?;
        }
    }
    Ok(())
}

/// Top-down view: the highest occupied voxel's category color per column.
fn bev_ppm(grid: &SemanticGrid) -> Vec<u8> {
    let g = grid.geometry;
    let free = grid.free_category();
    let mut out = vec![0u8; (g.dims[0] * g.dims[1] * 3) as usize];
    for j in 0..g.dims[1] {
        for i in 0..g.dims[0] {
            let mut color = [0u8; 3];
            for k in (0..g.dims[2]).rev() {
                let cat = grid.get(i, j, k);
                if cat != free {
                    let a = crate::scenegen::ALBEDO[cat as usize];
                    color = [
                        (a[0] * 255.0) as u8,
                        (a[1] * 255.0) as u8,
                        (a[2] * 255.0) as u8,
                    ];
                    break;
                }
            }
            // Image rows run top to bottom; flip y so +y points up.
            let row = (g.dims[1] - 1 - j) as usize;
            let idx = (row * g.dims[0] as usize + i as usize) * 3;
            out[idx..idx + 3].copy_from_slice(&color);
        }
    }
    out
}
