//! Training objectives: scale-invariant log depth, semantic cross-entropy
//! and L1 color for the rendering-supervised stage; focal, Lovasz-softmax
//! and scene-class affinity for the occupancy-supervised stage; squared-L2
//! for trajectories. Each loss is a fused graph op with a hand-written
//! backward rule; reductions run in f64.

use crate::autodiff::{Grads, Op, Tensor, TensorId, Values};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const SILOG_BETA: f64 = 0.85;
pub const SILOG_DEPTH_CLAMP: f64 = 1e-3;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Weights of every objective term; all default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dep: f32,
    pub lambda_sem: f32,
    pub lambda_rgb: f32,
    pub lambda_f: f32,
    pub lambda_l: f32,
    pub lambda_scal_sem: f32,
    pub lambda_scal_geo: f32,
    pub lambda_traj: f32,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_dep: 1.0,
            lambda_sem: 1.0,
            lambda_rgb: 1.0,
            lambda_f: 1.0,
            lambda_l: 1.0,
            lambda_scal_sem: 1.0,
            lambda_scal_geo: 1.0,
            lambda_traj: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_dep,
            self.lambda_sem,
            self.lambda_rgb,
            self.lambda_f,
            self.lambda_l,
            self.lambda_scal_sem,
            self.lambda_scal_geo,
            self.lambda_traj,
        ];
        if all.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Data("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn mask_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

// ---------------------------------------------------------------------------
// SILog depth
// ---------------------------------------------------------------------------

struct SilogOp {
    pred: TensorId,
    rows: Vec<usize>,
    // forward state
    g: Vec<f64>,
    mean_g: f64,
    loss: f64,
    clamped: Vec<bool>,
}

impl Op for SilogOp {
    fn name(&self) -> &'static str {
        "silog_depth_loss"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.pred]
    }
    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads) {
        if self.loss < 1e-12 {
            return; // flat at the perfect-prediction minimum
        }
        let n = self.rows.len() as f64;
        let pred = values.value(self.pred).to_vec();
        if let Some(buf) = grads.buf_mut(self.pred) {
            for (j, &row) in self.rows.iter().enumerate() {
                if self.clamped[j] {
                    continue;
                }
                let dg = (self.g[j] - SILOG_BETA * self.mean_g) / (n * self.loss);
                buf[row] += (upstream[0] as f64 * dg / pred[row] as f64) as f32;
            }
        }
    }
}

/// sqrt(mean(g^2) - beta * mean(g)^2) with g = ln(pred) - ln(gt) over the
/// mask; predictions are clamped to 1e-3 before the log.
pub fn silog_depth_loss(pred: &Tensor, gt: &[f32], mask: &[bool]) -> Result<Tensor> {
    let n = pred.numel();
    assert_eq!(gt.len(), n, "silog: gt length");
    assert_eq!(mask.len(), n, "silog: mask length");
    let rows = mask_rows(mask);
    if rows.is_empty() {
        return Err(Error::Data("silog_depth_loss: empty mask".into()));
    }
    let pv = pred.value();
    let mut g = Vec::with_capacity(rows.len());
    let mut clamped = Vec::with_capacity(rows.len());
    for &r in &rows {
        assert!(gt[r] > 0.0, "silog: gt depth must be positive on the mask");
        let p = pv[r] as f64;
        clamped.push(p < SILOG_DEPTH_CLAMP);
        g.push(p.max(SILOG_DEPTH_CLAMP).ln() - (gt[r] as f64).ln());
    }
    let n_m = rows.len() as f64;
    let mean_sq = g.iter().map(|x| x * x).sum::<f64>() / n_m;
    let mean_g = g.iter().sum::<f64>() / n_m;
    let loss = (mean_sq - SILOG_BETA * mean_g * mean_g).max(0.0).sqrt();
    Ok(pred.graph().custom(
        vec![1],
        vec![loss as f32],
        Box::new(SilogOp {
            pred: pred.id(),
            rows,
            g,
            mean_g,
            loss,
            clamped,
        }),
    ))
}

// ---------------------------------------------------------------------------
// Semantic cross-entropy over accumulated logits
// ---------------------------------------------------------------------------

struct CeRowsOp {
    logits: TensorId,
    labels: Vec<usize>,
    rows: Vec<usize>,
    cols: usize,
    softmax: Vec<f64>, // per masked row
}

impl Op for CeRowsOp {
    fn name(&self) -> &'static str {
        "semantic_ce_loss"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.logits]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let n = self.rows.len() as f64;
        let c = self.cols;
        if let Some(buf) = grads.buf_mut(self.logits) {
            for (j, &row) in self.rows.iter().enumerate() {
                let sm = &self.softmax[j * c..(j + 1) * c];
                for k in 0..c {
                    let onehot = if k == self.labels[row] { 1.0 } else { 0.0 };
                    buf[row * c + k] += (upstream[0] as f64 * (sm[k] - onehot) / n) as f32;
                }
            }
        }
    }
}

/// Mean cross-entropy of softmaxed accumulated logits against per-ray
/// categories over the mask.
pub fn semantic_ce_loss(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<Tensor> {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2, "semantic_ce_loss expects [rays, classes]");
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "ce: label length");
    assert_eq!(mask.len(), n, "ce: mask length");
    let rows = mask_rows(mask);
    if rows.is_empty() {
        return Err(Error::Data("semantic_ce_loss: empty mask".into()));
    }
    for &r in &rows {
        assert!(labels[r] < c, "ce: label {} out of {c} classes", labels[r]);
    }
    let lv = logits.value();
    let mut softmax = Vec::with_capacity(rows.len() * c);
    let mut total = 0.0f64;
    for &r in &rows {
        let row = &lv[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&x| ((x as f64) - mx).exp()).sum();
        for &x in row {
            softmax.push(((x as f64) - mx).exp() / denom);
        }
        let lse = denom.ln() + mx;
        total += lse - row[labels[r]] as f64;
    }
    let loss = total / rows.len() as f64;
    Ok(logits.graph().custom(
        vec![1],
        vec![loss as f32],
        Box::new(CeRowsOp {
            logits: logits.id(),
            labels: labels.to_vec(),
            rows,
            cols: c,
            softmax,
        }),
    ))
}

// ---------------------------------------------------------------------------
// RGB L1
// ---------------------------------------------------------------------------

struct L1Op {
    pred: TensorId,
    gt: Vec<f32>,
}

impl Op for L1Op {
    fn name(&self) -> &'static str {
        "rgb_l1_loss"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.pred]
    }
    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads) {
        let pred = values.value(self.pred).to_vec();
        let n = pred.len() as f64;
        if let Some(buf) = grads.buf_mut(self.pred) {
            for i in 0..pred.len() {
                let d = pred[i] - self.gt[i];
                // Subgradient at zero is zero.
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                buf[i] += (upstream[0] as f64 * s / n) as f32;
            }
        }
    }
}

/// Mean absolute error over all elements.
pub fn rgb_l1_loss(pred: &Tensor, gt: &[f32]) -> Tensor {
    assert_eq!(pred.numel(), gt.len(), "l1: gt length");
    assert!(!gt.is_empty(), "l1: empty input");
    let pv = pred.value();
    let loss = pv
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum::<f64>()
        / gt.len() as f64;
    pred.graph().custom(
        vec![1],
        vec![loss as f32],
        Box::new(L1Op {
            pred: pred.id(),
            gt: gt.to_vec(),
        }),
    )
}

/// Weighted per-frame sum of the three rendering terms.
pub fn temporal_2d_loss(per_frame: &[(Tensor, Tensor, Tensor)], weights: &LossWeights) -> Tensor {
    assert!(!per_frame.is_empty(), "temporal_2d_loss: no frames");
    let mut parts: Vec<(&Tensor, f32)> = Vec::new();
    for (dep, sem, rgb) in per_frame {
        parts.push((dep, weights.lambda_dep));
        parts.push((sem, weights.lambda_sem));
        parts.push((rgb, weights.lambda_rgb));
    }
    Tensor::weighted_sum(&parts)
}

// ---------------------------------------------------------------------------
// Focal loss over voxel logits
// ---------------------------------------------------------------------------

struct FocalOp {
    logits: TensorId,
    labels: Vec<usize>,
    gamma: f64,
    cols: usize,
    softmax: Vec<f64>,
}

impl Op for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.logits]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let c = self.cols;
        let n = self.labels.len() as f64;
        if let Some(buf) = grads.buf_mut(self.logits) {
            for (r, &label) in self.labels.iter().enumerate() {
                let sm = &self.softmax[r * c..(r + 1) * c];
                let pt = sm[label].max(1e-12);
                let q = 1.0 - pt;
                // d/dpt of -(1-pt)^gamma ln(pt)
                let dfdpt = if self.gamma == 0.0 {
                    -1.0 / pt
                } else {
                    self.gamma * q.powf(self.gamma - 1.0) * pt.ln() - q.powf(self.gamma) / pt
                };
                for k in 0..c {
                    let onehot = if k == label { 1.0 } else { 0.0 };
                    let dpt_dz = pt * (onehot - sm[k]);
                    buf[r * c + k] += (upstream[0] as f64 * dfdpt * dpt_dz / n) as f32;
                }
            }
        }
    }
}

/// Mean over voxels of -(1 - p_gt)^gamma ln(p_gt) with softmax
/// probabilities; gamma = 0 reduces to plain cross-entropy.
pub fn focal_loss(logits: &Tensor, labels: &[u8], gamma: f64) -> Tensor {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2, "focal_loss expects [voxels, classes]");
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "focal: label length");
    let lv = logits.value();
    let mut softmax = Vec::with_capacity(n * c);
    let mut total = 0.0f64;
    for r in 0..n {
        let row = &lv[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&x| ((x as f64) - mx).exp()).sum();
        for &x in row {
            softmax.push(((x as f64) - mx).exp() / denom);
        }
        let label = labels[r] as usize;
        assert!(label < c, "focal: label out of range");
        let pt = softmax[r * c + label].max(1e-12);
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    let loss = total / n as f64;
    logits.graph().custom(
        vec![1],
        vec![loss as f32],
        Box::new(FocalOp {
            logits: logits.id(),
            labels: labels.iter().map(|&l| l as usize).collect(),
            gamma,
            cols: c,
            softmax,
        }),
    )
}

// ---------------------------------------------------------------------------
// Lovasz-softmax
// ---------------------------------------------------------------------------

/// Jaccard-gradient coefficients for a descending-sorted error vector whose
/// ground-truth indicator (in the same order) is `sorted_gt`.
fn lovasz_grad(sorted_gt: &[bool]) -> Vec<f64> {
    let p = sorted_gt.iter().filter(|&&b| b).count() as f64;
    let mut jaccard = Vec::with_capacity(sorted_gt.len());
    let mut cum_pos = 0.0f64;
    let mut cum_neg = 0.0f64;
    for &is_pos in sorted_gt {
        if is_pos {
            cum_pos += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let intersection = p - cum_pos;
        let union = p + cum_neg;
        jaccard.push(1.0 - intersection / union);
    }
    let mut grad = jaccard.clone();
    for k in (1..grad.len()).rev() {
        grad[k] -= jaccard[k - 1];
    }
    grad
}

struct LovaszOp {
    probs: TensorId,
    labels: Vec<usize>,
    cols: usize,
    /// Per present category: (category, per-voxel coefficient on m_i).
    coeffs: Vec<(usize, Vec<f64>)>,
}

impl Op for LovaszOp {
    fn name(&self) -> &'static str {
        "lovasz_softmax_loss"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.probs]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let c = self.cols;
        let scale = upstream[0] as f64 / self.coeffs.len() as f64;
        if let Some(buf) = grads.buf_mut(self.probs) {
            for (cat, coeff) in &self.coeffs {
                for (i, &w) in coeff.iter().enumerate() {
                    // m_i = 1 - p_i(cat) when gt = cat, else p_i(cat)
                    let sign = if self.labels[i] == *cat { -1.0 } else { 1.0 };
                    buf[i * c + *cat] += (scale * w * sign) as f32;
                }
            }
        }
    }
}

/// Lovasz extension of the per-category Jaccard loss on probabilities,
/// averaged over categories present in the ground truth.
pub fn lovasz_softmax_loss(probs: &Tensor, labels: &[u8]) -> Tensor {
    let shape = probs.shape().to_vec();
    assert_eq!(shape.len(), 2, "lovasz expects [voxels, classes]");
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "lovasz: label length");
    let pv = probs.value();
    let mut present: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    present.sort_unstable();
    present.dedup();

    let mut total = 0.0f64;
    let mut coeffs = Vec::new();
    for &cat in &present {
        let mut errors: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let p = pv[i * c + cat] as f64;
                let m = if labels[i] as usize == cat { 1.0 - p } else { p };
                (m, i)
            })
            .collect();
        // Descending by error, index-stable for determinism.
        errors.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let sorted_gt: Vec<bool> = errors.iter().map(|&(_, i)| labels[i] as usize == cat).collect();
        let grad = lovasz_grad(&sorted_gt);
        let mut per_voxel = vec![0.0f64; n];
        let mut loss_c = 0.0f64;
        for (k, &(m, i)) in errors.iter().enumerate() {
            loss_c += grad[k] * m;
            per_voxel[i] = grad[k];
        }
        total += loss_c;
        coeffs.push((cat, per_voxel));
    }
    let loss = total / present.len() as f64;
    probs.graph().custom(
        vec![1],
        vec![loss as f32],
        Box::new(LovaszOp {
            probs: probs.id(),
            labels: labels.iter().map(|&l| l as usize).collect(),
            cols: c,
            coeffs,
        }),
    )
}

// ---------------------------------------------------------------------------
// Scene-class affinity
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum AffinityMode {
    /// Per-category probabilities.
    Semantic,
    /// Binary occupied-vs-free where p_occ = 1 - p_free.
    Geometric { free_cat: usize },
}

struct AffinityOp {
    probs: TensorId,
    labels: Vec<usize>,
    cols: usize,
    mode: AffinityMode,
    /// (category, sum_p, sum_p_target, n_target, sum_comp_nontarget, n_nontarget)
    stats: Vec<(usize, f64, f64, f64, f64, f64)>,
}

/// Affinity statistics for one binary view: probabilities q_i against the
/// indicator t_i.
fn affinity_stats(q: &[f64], t: &[bool]) -> (f64, f64, f64, f64, f64) {
    let mut sum_q = 0.0;
    let mut sum_qt = 0.0;
    let mut n_t = 0.0;
    let mut sum_comp = 0.0;
    let mut n_nt = 0.0;
    for (&qi, &ti) in q.iter().zip(t) {
        sum_q += qi;
        if ti {
            sum_qt += qi;
            n_t += 1.0;
        } else {
            sum_comp += 1.0 - qi;
            n_nt += 1.0;
        }
    }
    (sum_q, sum_qt, n_t, sum_comp, n_nt)
}

/// -(ln P + ln R + ln S) with empty-denominator terms skipped.
fn affinity_value(sum_q: f64, sum_qt: f64, n_t: f64, sum_comp: f64, n_nt: f64) -> f64 {
    let mut v = 0.0;
    if n_t > 0.0 {
        if sum_q > 0.0 {
            v -= (sum_qt.max(1e-12) / sum_q).ln(); // precision
        }
        v -= (sum_qt.max(1e-12) / n_t).ln(); // recall
    }
    if n_nt > 0.0 {
        v -= (sum_comp.max(1e-12) / n_nt).ln(); // specificity
    }
    v
}

impl Op for AffinityOp {
    fn name(&self) -> &'static str {
        "scene_class_affinity_loss"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.probs]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        let c = self.cols;
        let scale = upstream[0] as f64 / self.stats.len() as f64;
        if let Some(buf) = grads.buf_mut(self.probs) {
            for &(cat, sum_q, sum_qt, n_t, sum_comp, n_nt) in &self.stats {
                for (i, &label) in self.labels.iter().enumerate() {
                    let is_target = match self.mode {
                        AffinityMode::Semantic => label == cat,
                        AffinityMode::Geometric { free_cat } => label != free_cat,
                    };
                    // d loss / d q_i for q_i the binary-view probability.
                    let mut d = 0.0f64;
                    if n_t > 0.0 {
                        if sum_q > 0.0 {
                            // -ln(sum_qt/sum_q)
                            if is_target {
                                d += -1.0 / sum_qt.max(1e-12) + 1.0 / sum_q;
                            } else {
                                d += 1.0 / sum_q;
                            }
                            // -ln(sum_qt/n_t)
                        }
                        if is_target {
                            d += -1.0 / sum_qt.max(1e-12);
                        }
                    }
                    if n_nt > 0.0 && !is_target {
                        // -ln(sum_comp/n_nt), d sum_comp/d q_i = -1
                        d += 1.0 / sum_comp.max(1e-12);
                    }
                    match self.mode {
                        AffinityMode::Semantic => {
                            buf[i * c + cat] += (scale * d) as f32;
                        }
                        AffinityMode::Geometric { free_cat } => {
                            // q_i = 1 - p_i(free)
                            buf[i * c + free_cat] += (-scale * d) as f32;
                        }
                    }
                }
            }
        }
    }
}

fn affinity_loss(probs: &Tensor, labels: &[u8], mode: AffinityMode) -> Tensor {
    let shape = probs.shape().to_vec();
    assert_eq!(shape.len(), 2, "affinity expects [voxels, classes]");
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "affinity: label length");
    let pv = probs.value();
    let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();

    let categories: Vec<usize> = match mode {
        AffinityMode::Semantic => {
            let mut present = labels_usize.clone();
            present.sort_unstable();
            present.dedup();
            present
        }
        AffinityMode::Geometric { .. } => vec![usize::MAX], // single binary view
    };

    let mut stats = Vec::new();
    let mut total = 0.0f64;
    for &cat in &categories {
        let (q, t): (Vec<f64>, Vec<bool>) = match mode {
            AffinityMode::Semantic => (
                (0..n).map(|i| pv[i * c + cat] as f64).collect(),
                labels_usize.iter().map(|&l| l == cat).collect(),
            ),
            AffinityMode::Geometric { free_cat } => (
                (0..n).map(|i| 1.0 - pv[i * c + free_cat] as f64).collect(),
                labels_usize.iter().map(|&l| l != free_cat).collect(),
            ),
        };
        let (sum_q, sum_qt, n_t, sum_comp, n_nt) = affinity_stats(&q, &t);
        total += affinity_value(sum_q, sum_qt, n_t, sum_comp, n_nt);
        stats.push((cat, sum_q, sum_qt, n_t, sum_comp, n_nt));
    }
    let loss = total / categories.len() as f64;
    probs.graph().custom(
        vec![1],
        vec![loss as f32],
        Box::new(AffinityOp {
            probs: probs.id(),
            labels: labels_usize,
            cols: c,
            mode,
            stats,
        }),
    )
}

/// Semantic and geometric scene-class affinity losses. `free_cat` is the
/// free-category index defining occupancy.
pub fn scene_class_affinity_losses(
    probs: &Tensor,
    labels: &[u8],
    free_cat: usize,
) -> (Tensor, Tensor) {
    let sem = affinity_loss(probs, labels, AffinityMode::Semantic);
    let geo = affinity_loss(probs, labels, AffinityMode::Geometric { free_cat });
    (sem, geo)
}

/// Weighted sum of the four 3D-supervision components.
pub fn occupancy_3d_loss(
    focal: &Tensor,
    lovasz: &Tensor,
    scal_sem: &Tensor,
    scal_geo: &Tensor,
    weights: &LossWeights,
) -> Tensor {
    Tensor::weighted_sum(&[
        (focal, weights.lambda_f),
        (lovasz, weights.lambda_l),
        (scal_sem, weights.lambda_scal_sem),
        (scal_geo, weights.lambda_scal_geo),
    ])
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

struct TrajL2Op {
    pred: TensorId,
    gt: Vec<f32>,
}

impl Op for TrajL2Op {
    fn name(&self) -> &'static str {
        "trajectory_l2_loss"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.pred]
    }
    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads) {
        let pred = values.value(self.pred).to_vec();
        let steps = (pred.len() / 2) as f64;
        if let Some(buf) = grads.buf_mut(self.pred) {
            for i in 0..pred.len() {
                buf[i] += (upstream[0] as f64 * 2.0 * (pred[i] as f64 - self.gt[i] as f64) / steps)
                    as f32;
            }
        }
    }
}

/// Mean squared Euclidean distance over horizon steps; pred is [f, 2].
pub fn trajectory_l2_loss(pred: &Tensor, gt: &[[f64; 2]]) -> Result<Tensor> {
    let shape = pred.shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != gt.len() {
        return Err(Error::Data(format!(
            "trajectory_l2_loss: prediction {:?} does not match {} ground-truth steps",
            shape,
            gt.len()
        )));
    }
    let pv = pred.value();
    let mut total = 0.0f64;
    let mut gt_flat = Vec::with_capacity(gt.len() * 2);
    for (t, wp) in gt.iter().enumerate() {
        let dx = pv[t * 2] as f64 - wp[0];
        let dy = pv[t * 2 + 1] as f64 - wp[1];
        total += dx * dx + dy * dy;
        gt_flat.push(wp[0] as f32);
        gt_flat.push(wp[1] as f32);
    }
    let loss = total / gt.len() as f64;
    Ok(pred.graph().custom(
        vec![1],
        vec![loss as f32],
        Box::new(TrajL2Op {
            pred: pred.id(),
            gt: gt_flat,
        }),
    ))
}

/// Appends one row of the loss-curve CSV: step, stage, component, value.
pub fn append_loss_csv(path: &Path, step: u64, stage: &str, component: &str, value: f32) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if new {
        writeln!(f, "step,stage,component,value").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{step},{stage},{component},{value}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{assert_close, fd_grad_f64};
    use crate::autodiff::Graph;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn softmax64(row: &[f64]) -> Vec<f64> {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        row.iter().map(|x| (x - mx).exp() / denom).collect()
    }

    // ----- SILog -----

    fn silog_oracle(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
        let mut g = Vec::new();
        for i in 0..pred.len() {
            if mask[i] {
                g.push(pred[i].max(1e-3).ln() - gt[i].ln());
            }
        }
        let n = g.len() as f64;
        let ms = g.iter().map(|x| x * x).sum::<f64>() / n;
        let m = g.iter().sum::<f64>() / n;
        (ms - 0.85 * m * m).max(0.0).sqrt()
    }

    #[test]
    fn silog_zero_at_perfect() {
        let g = Graph::new();
        let gt = vec![1.0f32, 2.5, 7.0];
        let pred = g.leaf(&[3], gt.clone());
        let loss = silog_depth_loss(&pred, &gt, &[true; 3]).unwrap();
        assert!(loss.scalar().abs() < 1e-7);
    }

    #[test]
    fn silog_doubled_prediction_closed_form() {
        let g = Graph::new();
        let gt = vec![1.0f32, 2.0, 5.0, 0.5];
        let pred: Vec<f32> = gt.iter().map(|x| 2.0 * x).collect();
        let t = g.leaf(&[4], pred);
        let loss = silog_depth_loss(&t, &gt, &[true; 4]).unwrap();
        let expect = std::f64::consts::LN_2 * 0.15f64.sqrt();
        assert!(
            (loss.scalar() as f64 - expect).abs() < 1e-6,
            "{} vs {expect}",
            loss.scalar()
        );
    }

    #[test]
    fn silog_empty_mask_is_error() {
        let g = Graph::new();
        let pred = g.leaf(&[2], vec![1.0, 2.0]);
        assert!(silog_depth_loss(&pred, &[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn silog_gradcheck() {
        let mut rng = StdRng::seed_from_u64(1);
        let n = 8;
        let gt: Vec<f32> = (0..n).map(|_| rng.gen_range(0.5..8.0)).collect();
        let pred: Vec<f32> = (0..n).map(|_| rng.gen_range(0.5..8.0)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i != 3).collect();
        let g = Graph::new();
        let t = g.leaf(&[n], pred.clone());
        let loss = silog_depth_loss(&t, &gt, &mask).unwrap();
        let bp = g.backward(&loss);
        let analytic = bp.grad_or_zero(&t);
        let gt64: Vec<f64> = gt.iter().map(|&x| x as f64).collect();
        let reference = |x: &[f64]| silog_oracle(x, &gt64, &mask);
        let x64: Vec<f64> = pred.iter().map(|&x| x as f64).collect();
        let fd = fd_grad_f64(&reference, &x64, 1e-5);
        assert_close(&analytic, &fd, 1e-4, 1e-6, "silog");
    }

    // ----- CE -----

    #[test]
    fn ce_one_hot_goes_to_zero() {
        let g = Graph::new();
        let t = g.leaf(&[1, 3], vec![50.0, 0.0, 0.0]);
        let loss = semantic_ce_loss(&t, &[0], &[true]).unwrap();
        assert!(loss.scalar() < 1e-6);
    }

    #[test]
    fn ce_uniform_is_log_classes() {
        let g = Graph::new();
        let t = g.leaf(&[2, 5], vec![0.3; 10]);
        let loss = semantic_ce_loss(&t, &[1, 4], &[true, true]).unwrap();
        assert!((loss.scalar() as f64 - 5.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_gradcheck() {
        let mut rng = StdRng::seed_from_u64(2);
        let (n, c) = (6, 4);
        let logits: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
        let g = Graph::new();
        let t = g.leaf(&[n, c], logits.clone());
        let loss = semantic_ce_loss(&t, &labels, &mask).unwrap();
        let bp = g.backward(&loss);
        let analytic = bp.grad_or_zero(&t);
        let reference = |x: &[f64]| {
            let mut total = 0.0;
            let mut count = 0.0;
            for r in 0..n {
                if !mask[r] {
                    continue;
                }
                let sm = softmax64(&x[r * c..(r + 1) * c]);
                total += -sm[labels[r]].ln();
                count += 1.0;
            }
            total / count
        };
        let x64: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        let fd = fd_grad_f64(&reference, &x64, 1e-5);
        assert_close(&analytic, &fd, 1e-4, 1e-6, "ce");
    }

    // ----- L1 -----

    #[test]
    fn l1_fixtures_and_gradcheck() {
        let g = Graph::new();
        let gt = vec![0.2f32, 0.5, 0.9];
        let t = g.leaf(&[3], gt.clone());
        assert_eq!(rgb_l1_loss(&t, &gt).scalar(), 0.0);
        let t2 = g.leaf(&[3], gt.iter().map(|x| x + 0.1).collect());
        assert!((rgb_l1_loss(&t2, &gt).scalar() - 0.1).abs() < 1e-6);

        let mut rng = StdRng::seed_from_u64(3);
        let pred: Vec<f32> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gt2: Vec<f32> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t3 = g.leaf(&[2, 3], pred.clone());
        let loss = rgb_l1_loss(&t3, &gt2);
        let bp = g.backward(&loss);
        let analytic = bp.grad_or_zero(&t3);
        let gt64: Vec<f64> = gt2.iter().map(|&x| x as f64).collect();
        let reference =
            |x: &[f64]| x.iter().zip(&gt64).map(|(a, b)| (a - b).abs()).sum::<f64>() / 6.0;
        let x64: Vec<f64> = pred.iter().map(|&x| x as f64).collect();
        let fd = fd_grad_f64(&reference, &x64, 1e-6);
        assert_close(&analytic, &fd, 1e-4, 1e-6, "l1");
    }

    // ----- temporal combinator -----

    #[test]
    fn temporal_sum_matches_componentwise_and_is_linear_in_weights() {
        let g = Graph::new();
        let mk = |v: f32| g.leaf(&[1], vec![v]);
        let frames = vec![(mk(0.3), mk(0.7), mk(0.1)), (mk(0.2), mk(0.4), mk(0.9))];
        let w = LossWeights::default();
        let total = temporal_2d_loss(&frames, &w);
        assert!((total.scalar() - (0.3 + 0.7 + 0.1 + 0.2 + 0.4 + 0.9)).abs() < 1e-6);
        let mut w2 = w;
        w2.lambda_dep = 0.0;
        w2.lambda_sem = 0.0;
        let rgb_only = temporal_2d_loss(&frames, &w2);
        assert!((rgb_only.scalar() - (0.1 + 0.9)).abs() < 1e-6);
        let mut w3 = w2;
        w3.lambda_rgb = 2.0;
        let doubled = temporal_2d_loss(&frames, &w3);
        assert!((doubled.scalar() - 2.0 * rgb_only.scalar()).abs() < 1e-6);
        let mut zero = w;
        zero.lambda_dep = 0.0;
        zero.lambda_sem = 0.0;
        zero.lambda_rgb = 0.0;
        assert_eq!(temporal_2d_loss(&frames, &zero).scalar(), 0.0);
    }

    // ----- focal -----

    #[test]
    fn focal_vanishes_when_confident() {
        let g = Graph::new();
        let t = g.leaf(&[1, 3], vec![60.0, 0.0, 0.0]);
        assert!(focal_loss(&t, &[0], 2.0).scalar() < 1e-9);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut rng = StdRng::seed_from_u64(4);
        let (n, c) = (5, 4);
        let logits: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
        let g = Graph::new();
        let t = g.leaf(&[n, c], logits.clone());
        let focal = focal_loss(&t, &labels, 0.0);
        let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let t2 = g.leaf(&[n, c], logits);
        let ce = semantic_ce_loss(&t2, &labels_usize, &vec![true; n]).unwrap();
        assert!((focal.scalar() - ce.scalar()).abs() < 1e-6);
        // Gradients agree as well.
        let bpf = g.backward(&focal);
        let bpc = g.backward(&ce);
        let gf = bpf.grad_or_zero(&t);
        let gc = bpc.grad_or_zero(&t2);
        for (a, b) in gf.iter().zip(&gc) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn focal_gradcheck() {
        let mut rng = StdRng::seed_from_u64(5);
        let (n, c) = (6, 3);
        let logits: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
        let g = Graph::new();
        let t = g.leaf(&[n, c], logits.clone());
        let loss = focal_loss(&t, &labels, 2.0);
        let bp = g.backward(&loss);
        let analytic = bp.grad_or_zero(&t);
        let reference = |x: &[f64]| {
            let mut total = 0.0;
            for r in 0..n {
                let sm = softmax64(&x[r * c..(r + 1) * c]);
                let pt = sm[labels[r] as usize];
                total += -(1.0 - pt).powf(2.0) * pt.ln();
            }
            total / n as f64
        };
        let x64: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        let fd = fd_grad_f64(&reference, &x64, 1e-5);
        assert_close(&analytic, &fd, 1e-4, 1e-6, "focal");
    }

    // ----- lovasz -----

    /// Literal transcription of the sorted-Jaccard-gradient definition.
    fn lovasz_oracle(probs: &[f64], labels: &[usize], n: usize, c: usize) -> f64 {
        let mut present: Vec<usize> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        let mut total = 0.0;
        for &cat in &present {
            let mut errs: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let p = probs[i * c + cat];
                    (if labels[i] == cat { 1.0 - p } else { p }, i)
                })
                .collect();
            errs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let gt_sorted: Vec<bool> = errs.iter().map(|&(_, i)| labels[i] == cat).collect();
            let grad = lovasz_grad(&gt_sorted);
            total += errs.iter().zip(&grad).map(|(&(m, _), &g)| m * g).sum::<f64>();
        }
        total / present.len() as f64
    }

    #[test]
    fn lovasz_zero_on_perfect_hard_predictions() {
        let g = Graph::new();
        let probs = vec![1.0f32, 0.0, 0.0, 1.0, 0.0, 1.0];
        let t = g.leaf(&[3, 2], probs);
        let loss = lovasz_softmax_loss(&t, &[0, 1, 1]);
        assert!(loss.scalar().abs() < 1e-7);
    }

    #[test]
    fn lovasz_two_voxel_hand_fixture() {
        // p = [[0.6, 0.4], [0.6, 0.4]], gt = [0, 1]:
        // category 0 contributes 0.5, category 1 contributes 0.6.
        let g = Graph::new();
        let t = g.leaf(&[2, 2], vec![0.6, 0.4, 0.6, 0.4]);
        let loss = lovasz_softmax_loss(&t, &[0, 1]);
        assert!((loss.scalar() - 0.55).abs() < 1e-6, "{}", loss.scalar());
        let oracle = lovasz_oracle(&[0.6, 0.4, 0.6, 0.4], &[0, 1], 2, 2);
        assert!((loss.scalar() as f64 - oracle).abs() < 1e-7);
    }

    #[test]
    fn lovasz_matches_oracle_and_decreases_on_improvement() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..20 {
            let (n, c) = (7, 3);
            let mut probs = vec![0.0f32; n * c];
            for r in 0..n {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for k in 0..c {
                    probs[r * c + k] = (raw[k] / s) as f32;
                }
            }
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
            let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            let g = Graph::new();
            let t = g.leaf(&[n, c], probs.clone());
            let loss = lovasz_softmax_loss(&t, &labels);
            let p64: Vec<f64> = probs.iter().map(|&x| x as f64).collect();
            let oracle = lovasz_oracle(&p64, &labels_usize, n, c);
            assert!(
                (loss.scalar() as f64 - oracle).abs() < 1e-6,
                "{} vs {oracle}",
                loss.scalar()
            );

            // Raising the probability of the true class at one voxel (holding
            // others fixed) must not increase the loss.
            let i = rng.gen_range(0..n);
            let cat = labels[i] as usize;
            let mut bumped = probs.clone();
            bumped[i * c + cat] = (bumped[i * c + cat] + 0.05).min(1.0);
            let t2 = g.leaf(&[n, c], bumped);
            let loss2 = lovasz_softmax_loss(&t2, &labels);
            assert!(loss2.scalar() <= loss.scalar() + 1e-6);
        }
    }

    #[test]
    fn lovasz_hard_inputs_equal_one_minus_jaccard() {
        let mut rng = StdRng::seed_from_u64(7);
        let (n, c) = (12, 4);
        let pred_cats: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
        let mut probs = vec![0.0f32; n * c];
        for (i, &p) in pred_cats.iter().enumerate() {
            probs[i * c + p] = 1.0;
        }
        let g = Graph::new();
        let t = g.leaf(&[n, c], probs);
        let loss = lovasz_softmax_loss(&t, &labels) .scalar() as f64;
        // Brute-force Jaccard per present category.
        let mut present: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        present.sort_unstable();
        present.dedup();
        let mut total = 0.0;
        for &cat in &present {
            let mut inter = 0.0;
            let mut union = 0.0;
            for i in 0..n {
                let in_pred = pred_cats[i] == cat;
                let in_gt = labels[i] as usize == cat;
                if in_pred && in_gt {
                    inter += 1.0;
                }
                if in_pred || in_gt {
                    union += 1.0;
                }
            }
            total += 1.0 - if union > 0.0 { inter / union } else { 1.0 };
        }
        let expect = total / present.len() as f64;
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
    }

    #[test]
    fn lovasz_gradcheck_at_generic_point() {
        let mut rng = StdRng::seed_from_u64(8);
        let (n, c) = (5, 3);
        let mut probs = vec![0.0f32; n * c];
        for r in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..c {
                probs[r * c + k] = (raw[k] / s) as f32;
            }
        }
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
        let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let g = Graph::new();
        let t = g.leaf(&[n, c], probs.clone());
        let loss = lovasz_softmax_loss(&t, &labels);
        let bp = g.backward(&loss);
        let analytic = bp.grad_or_zero(&t);
        let reference = |x: &[f64]| lovasz_oracle(x, &labels_usize, n, c);
        let x64: Vec<f64> = probs.iter().map(|&x| x as f64).collect();
        // Small step keeps the sort order fixed at a generic point.
        let fd = fd_grad_f64(&reference, &x64, 1e-7);
        assert_close(&analytic, &fd, 1e-3, 1e-5, "lovasz");
    }

    // ----- affinity -----

    /// Independent transcription of the affinity definition.
    fn affinity_oracle_sem(probs: &[f64], labels: &[usize], n: usize, c: usize) -> f64 {
        let mut present: Vec<usize> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        let mut total = 0.0;
        for &cat in &present {
            let sum_p: f64 = (0..n).map(|i| probs[i * c + cat]).sum();
            let sum_pt: f64 = (0..n)
                .filter(|&i| labels[i] == cat)
                .map(|i| probs[i * c + cat])
                .sum();
            let n_t = labels.iter().filter(|&&l| l == cat).count() as f64;
            let n_nt = n as f64 - n_t;
            let sum_comp: f64 = (0..n)
                .filter(|&i| labels[i] != cat)
                .map(|i| 1.0 - probs[i * c + cat])
                .sum();
            if sum_p > 0.0 {
                total -= (sum_pt.max(1e-12) / sum_p).ln();
            }
            total -= (sum_pt.max(1e-12) / n_t).ln();
            if n_nt > 0.0 {
                total -= (sum_comp.max(1e-12) / n_nt).ln();
            }
        }
        total / present.len() as f64
    }

    fn affinity_oracle_geo(probs: &[f64], labels: &[usize], n: usize, c: usize, free: usize) -> f64 {
        let q: Vec<f64> = (0..n).map(|i| 1.0 - probs[i * c + free]).collect();
        let t: Vec<bool> = labels.iter().map(|&l| l != free).collect();
        let sum_q: f64 = q.iter().sum();
        let sum_qt: f64 = q.iter().zip(&t).filter(|(_, &ti)| ti).map(|(&qi, _)| qi).sum();
        let n_t = t.iter().filter(|&&x| x).count() as f64;
        let n_nt = n as f64 - n_t;
        let sum_comp: f64 = q
            .iter()
            .zip(&t)
            .filter(|(_, &ti)| !ti)
            .map(|(&qi, _)| 1.0 - qi)
            .sum();
        let mut total = 0.0;
        if n_t > 0.0 {
            if sum_q > 0.0 {
                total -= (sum_qt.max(1e-12) / sum_q).ln();
            }
            total -= (sum_qt.max(1e-12) / n_t).ln();
        }
        if n_nt > 0.0 {
            total -= (sum_comp.max(1e-12) / n_nt).ln();
        }
        total
    }

    #[test]
    fn affinity_zero_on_perfect_one_hot() {
        let g = Graph::new();
        // 3 voxels, 3 categories (2 = free), perfect prediction.
        let probs = vec![1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = g.leaf(&[3, 3], probs);
        let (sem, geo) = scene_class_affinity_losses(&t, &[0, 1, 2], 2);
        assert!(sem.scalar().abs() < 1e-6, "sem {}", sem.scalar());
        assert!(geo.scalar().abs() < 1e-6, "geo {}", geo.scalar());
    }

    #[test]
    fn affinity_geo_degenerate_all_free() {
        let g = Graph::new();
        // Everything free and predicted free: precision/recall skipped,
        // specificity is exactly 1.
        let probs = vec![0.0f32, 1.0, 0.0, 1.0];
        let t = g.leaf(&[2, 2], probs);
        let (_, geo) = scene_class_affinity_losses(&t, &[1, 1], 1);
        assert_eq!(geo.scalar(), 0.0);
    }

    #[test]
    fn affinity_matches_transcription_oracle_and_gradchecks() {
        let mut rng = StdRng::seed_from_u64(9);
        let (n, c) = (27, 4); // a 3x3x3 grid's worth of voxels
        let free = c - 1;
        let mut probs = vec![0.0f32; n * c];
        for r in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..c {
                probs[r * c + k] = (raw[k] / s) as f32;
            }
        }
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
        let labels_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let g = Graph::new();
        let t = g.leaf(&[n, c], probs.clone());
        let (sem, geo) = scene_class_affinity_losses(&t, &labels, free);
        let p64: Vec<f64> = probs.iter().map(|&x| x as f64).collect();
        let sem_oracle = affinity_oracle_sem(&p64, &labels_usize, n, c);
        let geo_oracle = affinity_oracle_geo(&p64, &labels_usize, n, c, free);
        assert!(
            (sem.scalar() as f64 - sem_oracle).abs() < 1e-5,
            "{} vs {sem_oracle}",
            sem.scalar()
        );
        assert!(
            (geo.scalar() as f64 - geo_oracle).abs() < 1e-5,
            "{} vs {geo_oracle}",
            geo.scalar()
        );

        let bp = g.backward(&sem);
        let analytic = bp.grad_or_zero(&t);
        let reference = |x: &[f64]| affinity_oracle_sem(x, &labels_usize, n, c);
        let fd = fd_grad_f64(&reference, &p64, 1e-6);
        assert_close(&analytic, &fd, 1e-4, 1e-6, "affinity-sem");

        let bp2 = g.backward(&geo);
        let analytic2 = bp2.grad_or_zero(&t);
        let reference2 = |x: &[f64]| affinity_oracle_geo(x, &labels_usize, n, c, free);
        let fd2 = fd_grad_f64(&reference2, &p64, 1e-6);
        assert_close(&analytic2, &fd2, 1e-4, 1e-6, "affinity-geo");
    }

    // ----- 3D combinator -----

    #[test]
    fn occupancy_3d_combinator() {
        let g = Graph::new();
        let mk = |v: f32| g.leaf(&[1], vec![v]);
        let (f, l, s, ge) = (mk(0.5), mk(0.25), mk(0.125), mk(1.0));
        let w = LossWeights::default();
        let total = occupancy_3d_loss(&f, &l, &s, &ge, &w);
        assert!((total.scalar() - 1.875).abs() < 1e-6);
        let mut zero = w;
        zero.lambda_f = 0.0;
        zero.lambda_l = 0.0;
        zero.lambda_scal_sem = 0.0;
        zero.lambda_scal_geo = 0.0;
        assert_eq!(occupancy_3d_loss(&f, &l, &s, &ge, &zero).scalar(), 0.0);
        let mut weighted = w;
        weighted.lambda_f = 2.0;
        weighted.lambda_scal_geo = 0.5;
        let got = occupancy_3d_loss(&f, &l, &s, &ge, &weighted).scalar();
        assert!((got - (2.0 * 0.5 + 0.25 + 0.125 + 0.5)).abs() < 1e-6);
    }

    // ----- trajectory -----

    #[test]
    fn trajectory_fixtures_and_gradcheck() {
        let g = Graph::new();
        let gt = [[1.0, 0.0], [2.0, 0.5], [3.0, 1.0]];
        let flat: Vec<f32> = gt.iter().flat_map(|w| [w[0] as f32, w[1] as f32]).collect();
        let t = g.leaf(&[3, 2], flat);
        assert_eq!(trajectory_l2_loss(&t, &gt).unwrap().scalar(), 0.0);

        // Uniform 1 m offset along x.
        let off: Vec<f32> = gt.iter().flat_map(|w| [w[0] as f32 + 1.0, w[1] as f32]).collect();
        let t2 = g.leaf(&[3, 2], off.clone());
        assert!((trajectory_l2_loss(&t2, &gt).unwrap().scalar() - 1.0).abs() < 1e-6);

        // Horizon mismatch is an error.
        assert!(trajectory_l2_loss(&t2, &gt[..2]).is_err());

        let loss = trajectory_l2_loss(&t2, &gt).unwrap();
        let bp = g.backward(&loss);
        let analytic = bp.grad_or_zero(&t2);
        let reference = |x: &[f64]| {
            (0..3)
                .map(|i| {
                    let dx = x[i * 2] - gt[i][0];
                    let dy = x[i * 2 + 1] - gt[i][1];
                    dx * dx + dy * dy
                })
                .sum::<f64>()
                / 3.0
        };
        let x64: Vec<f64> = off.iter().map(|&x| x as f64).collect();
        let fd = fd_grad_f64(&reference, &x64, 1e-5);
        assert_close(&analytic, &fd, 1e-4, 1e-6, "trajectory");
    }

    #[test]
    fn loss_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        append_loss_csv(&p, 1, "pretrain", "depth", 0.5).unwrap();
        append_loss_csv(&p, 2, "pretrain", "rgb", 0.25).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,stage,component,value\n"));
        assert!(text.contains("1,pretrain,depth,0.5"));
        assert!(text.contains("2,pretrain,rgb,0.25"));
    }
}
