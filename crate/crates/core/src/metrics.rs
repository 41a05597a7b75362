//! Evaluation: voxel mIoU/IoU with optional visibility masking, ray-based
//! RayIoU at distance thresholds, trajectory L2, collision rate, and the
//! Copy&Paste forecasting baseline.

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, SemanticGrid};
use crate::math::{self, Vec3};
use crate::pose::Pose;
use crate::ray::{Ray, RaySource};
use serde::Serialize;
use std::ops::ControlFlow;

// ---------------------------------------------------------------------------
// Voxel mIoU
// ---------------------------------------------------------------------------

/// Per-category true-positive / false-positive / false-negative tallies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub num_categories: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    fn new(num_categories: usize) -> ConfusionCounts {
        ConfusionCounts {
            num_categories,
            tp: vec![0; num_categories],
            fp: vec![0; num_categories],
            fn_: vec![0; num_categories],
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.num_categories, other.num_categories);
        for c in 0..self.num_categories {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    pub fn iou(&self, c: usize) -> Option<f64> {
        let denom = self.tp[c] + self.fp[c] + self.fn_[c];
        (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MiouReport {
    /// Mean IoU over non-free categories present in gt or pred.
    pub miou: f64,
    /// Per-category IoU; None for categories absent from both.
    pub per_category_iou: Vec<Option<f64>>,
    /// Binary occupied-vs-free IoU.
    pub iou_geo: f64,
}

/// Accumulates a confusion matrix over (optionally masked) voxels.
pub fn confusion(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    mask: Option<&[bool]>,
) -> Result<ConfusionCounts> {
    if pred.geometry != gt.geometry {
        return Err(Error::Data(format!(
            "confusion: geometry mismatch {:?} vs {:?}",
            pred.geometry, gt.geometry
        )));
    }
    if pred.num_categories != gt.num_categories {
        return Err(Error::Data("confusion: taxonomy size mismatch".into()));
    }
    if let Some(m) = mask {
        if m.len() != pred.geometry.voxel_count() {
            return Err(Error::Data("confusion: mask length mismatch".into()));
        }
    }
    let mut counts = ConfusionCounts::new(pred.num_categories);
    for (i, (&p, &g)) in pred.raw().iter().zip(gt.raw()).enumerate() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        if p == g {
            counts.tp[p as usize] += 1;
        } else {
            counts.fp[p as usize] += 1;
            counts.fn_[g as usize] += 1;
        }
    }
    Ok(counts)
}

pub fn miou_from_confusion(counts: &ConfusionCounts, free_category: usize) -> MiouReport {
    let mut per = Vec::with_capacity(counts.num_categories);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..counts.num_categories {
        let iou = counts.iou(c);
        if c != free_category {
            if let Some(v) = iou {
                sum += v;
                present += 1;
            }
        }
        per.push(iou);
    }
    let miou = if present > 0 { sum / present as f64 } else { 1.0 };

    // Geometric: everything non-free is one occupied class.
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for c in 0..counts.num_categories {
        if c == free_category {
            continue;
        }
        tp += counts.tp[c];
    }
    // Misclassifications between two occupied categories are geometric TPs;
    // only confusion against free costs. fp[free]/fn_[free] count voxels
    // predicted/labeled free while the other side is occupied.
    fp += counts.fn_[free_category];
    fn_ += counts.fp[free_category];
    // Occupied-vs-occupied mistakes: fp[c] for occupied c includes both
    // (gt occupied, wrong class) and (gt free). Subtract the free part.
    let occupied_fp: u64 = (0..counts.num_categories)
        .filter(|&c| c != free_category)
        .map(|c| counts.fp[c])
        .sum();
    let occ_to_occ = occupied_fp - counts.fn_[free_category];
    tp += occ_to_occ;
    let denom = tp + fp + fn_;
    let iou_geo = if denom > 0 {
        tp as f64 / denom as f64
    } else {
        1.0
    };
    MiouReport {
        miou,
        per_category_iou: per,
        iou_geo,
    }
}

/// Per-category IoU over masked voxels, free excluded from the mean, plus
/// the binary occupied IoU.
pub fn miou(pred: &SemanticGrid, gt: &SemanticGrid, mask: Option<&[bool]>) -> Result<MiouReport> {
    let counts = confusion(pred, gt, mask)?;
    Ok(miou_from_confusion(&counts, gt.free_category() as usize))
}

// ---------------------------------------------------------------------------
// DDA traversal and RayIoU
// ---------------------------------------------------------------------------

/// Walks the voxels pierced by a ray in order, calling `visit` with the
/// lattice index and the distance at which the ray enters each voxel.
/// Traversal starts at the ray origin (clamped to the grid) and ends when
/// the ray leaves the grid or `visit` breaks.
pub fn dda_traverse(
    geometry: &GridGeometry,
    ray: &Ray,
    mut visit: impl FnMut([u32; 3], f64) -> ControlFlow<()>,
) {
    let (lo, hi) = geometry.bounds();
    let o = ray.origin;
    let d = ray.direction;
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] >= hi[a] {
                return;
            }
        } else {
            let ta = (lo[a] - o[a]) / d[a];
            let tb = (hi[a] - o[a]) / d[a];
            let (tmin, tmax) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(tmin);
            t1 = t1.min(tmax);
        }
    }
    if t0 > t1 {
        return;
    }

    let res = geometry.res();
    // Entry voxel: nudge inward to dodge exact-face ambiguity.
    let p = ray.point_at(t0 + 1e-9 * (1.0 + t0));
    let mut vox = [0i64; 3];
    for a in 0..3 {
        vox[a] = (((p[a] - lo[a]) / res).floor() as i64).clamp(0, geometry.dims[a] as i64 - 1);
    }
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if d[a] > 1e-12 {
            step[a] = 1;
            t_max[a] = (lo[a] + (vox[a] + 1) as f64 * res - o[a]) / d[a];
            t_delta[a] = res / d[a];
        } else if d[a] < -1e-12 {
            step[a] = -1;
            t_max[a] = (lo[a] + vox[a] as f64 * res - o[a]) / d[a];
            t_delta[a] = res / -d[a];
        }
    }

    let mut entry_t = t0;
    loop {
        let idx = [vox[0] as u32, vox[1] as u32, vox[2] as u32];
        if visit(idx, entry_t).is_break() {
            return;
        }
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        entry_t = t_max[axis];
        vox[axis] += step[axis];
        if vox[axis] < 0 || vox[axis] >= geometry.dims[axis] as i64 {
            return;
        }
        t_max[axis] += t_delta[axis];
    }
}

/// First non-free voxel along the ray: (entry depth in meters, category),
/// or None when the ray exits the grid unoccluded.
pub fn ray_cast_first_hit(grid: &SemanticGrid, ray: &Ray) -> Option<(f64, u8)> {
    let free = grid.free_category();
    let mut hit = None;
    dda_traverse(&grid.geometry, ray, |idx, t| {
        let cat = grid.get(idx[0], idx[1], idx[2]);
        if cat != free {
            hit = Some((t.max(0.0), cat));
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    hit
}

/// Marks every voxel some camera ray passes through before (and including)
/// its first hit. Ray casting runs at full pixel resolution.
pub fn visibility_mask(grid: &SemanticGrid, rig: &[crate::camera::CameraModel]) -> Vec<bool> {
    let mut mask = vec![false; grid.geometry.voxel_count()];
    let free = grid.free_category();
    let t_far = grid.geometry.diagonal();
    for (ci, cam) in rig.iter().enumerate() {
        for ray in crate::ray::pixel_rays(cam, 1, 0, ci, t_far) {
            dda_traverse(&grid.geometry, &ray, |idx, _| {
                let lin = grid.geometry.linear_index(idx[0], idx[1], idx[2]);
                mask[lin] = true;
                if grid.get(idx[0], idx[1], idx[2]) != free {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            });
        }
    }
    mask
}

#[derive(Debug, Clone, Serialize)]
pub struct RayIoUThreshold {
    pub threshold: f64,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub ray_iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RayIoUReport {
    pub per_threshold: Vec<RayIoUThreshold>,
    pub mean: f64,
}

/// Ray-based IoU: a ray is a true positive for category c at threshold tau
/// iff both grids hit, the categories match, and the first-hit depths
/// differ by less than tau. An unmatched pred hit is a false positive for
/// its category; an unmatched gt hit a false negative for its category.
pub fn ray_iou(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    rays: &[Ray],
    thresholds: &[f64],
) -> Result<RayIoUReport> {
    if pred.geometry != gt.geometry {
        return Err(Error::Data("ray_iou: geometry mismatch".into()));
    }
    if pred.num_categories != gt.num_categories {
        return Err(Error::Data("ray_iou: taxonomy size mismatch".into()));
    }
    let c = pred.num_categories;
    let hits: Vec<(Option<(f64, u8)>, Option<(f64, u8)>)> = rays
        .iter()
        .map(|r| (ray_cast_first_hit(pred, r), ray_cast_first_hit(gt, r)))
        .collect();

    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut tp = vec![0u64; c];
        let mut fp = vec![0u64; c];
        let mut fn_ = vec![0u64; c];
        for (ph, gh) in &hits {
            match (ph, gh) {
                (None, None) => {}
                (Some((_, cp)), None) => fp[*cp as usize] += 1,
                (None, Some((_, cg))) => fn_[*cg as usize] += 1,
                (Some((dp, cp)), Some((dg, cg))) => {
                    if cp == cg && (dp - dg).abs() < tau {
                        tp[*cp as usize] += 1;
                    } else {
                        fp[*cp as usize] += 1;
                        fn_[*cg as usize] += 1;
                    }
                }
            }
        }
        let mut sum = 0.0;
        let mut present = 0usize;
        for cat in 0..c {
            let denom = tp[cat] + fp[cat] + fn_[cat];
            if denom > 0 {
                sum += tp[cat] as f64 / denom as f64;
                present += 1;
            }
        }
        let value = if present > 0 { sum / present as f64 } else { 1.0 };
        per_threshold.push(RayIoUThreshold {
            threshold: tau,
            tp,
            fp,
            fn_,
            ray_iou: value,
        });
    }
    let mean = per_threshold.iter().map(|t| t.ray_iou).sum::<f64>() / per_threshold.len() as f64;
    Ok(RayIoUReport {
        per_threshold,
        mean,
    })
}

/// Deterministic spherical query-ray lattice from an origin: `az_count`
/// uniform azimuths times `el_count` uniform elevations over `el_range`
/// (radians).
pub fn spherical_query_rays(
    origin: Vec3,
    az_count: usize,
    el_count: usize,
    el_range: (f64, f64),
    t_far: f64,
) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(az_count * el_count);
    for ei in 0..el_count {
        let el = if el_count == 1 {
            (el_range.0 + el_range.1) / 2.0
        } else {
            el_range.0 + (el_range.1 - el_range.0) * ei as f64 / (el_count - 1) as f64
        };
        for ai in 0..az_count {
            let az = 2.0 * std::f64::consts::PI * ai as f64 / az_count as f64;
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            rays.push(Ray::new(
                origin,
                math::normalize(dir),
                RaySource {
                    frame: 0,
                    camera: usize::MAX,
                    pixel: [ai as f64, ei as f64],
                },
                (1e-3, t_far),
            ));
        }
    }
    rays
}

pub const DEFAULT_RAYIOU_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];

// ---------------------------------------------------------------------------
// Planning metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PlanningL2Report {
    /// (horizon step, L2 meters) pairs.
    pub per_horizon: Vec<(usize, f64)>,
    pub average: f64,
}

/// Euclidean waypoint error at 1-based horizon steps, plus their mean.
pub fn planning_l2(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    horizons: &[usize],
) -> Result<PlanningL2Report> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "planning_l2: {} predicted vs {} ground-truth waypoints",
            pred.len(),
            gt.len()
        )));
    }
    let mut per = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 || h > pred.len() {
            return Err(Error::Data(format!(
                "planning_l2: horizon {h} outside trajectory of length {}",
                pred.len()
            )));
        }
        let dx = pred[h - 1][0] - gt[h - 1][0];
        let dy = pred[h - 1][1] - gt[h - 1][1];
        per.push((h, (dx * dx + dy * dy).sqrt()));
    }
    let average = per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64;
    Ok(PlanningL2Report {
        per_horizon: per,
        average,
    })
}

/// Ego footprint, meters. Defaults to the standard ego vehicle rectangle.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EgoBox {
    pub length: f64,
    pub width: f64,
}

impl Default for EgoBox {
    fn default() -> EgoBox {
        EgoBox {
            length: 4.08,
            width: 1.85,
        }
    }
}

/// XY voxel columns whose centers fall inside a rectangle centered at
/// `center` with the given heading.
pub fn footprint_columns(
    geometry: &GridGeometry,
    center: [f64; 2],
    heading: f64,
    ego_box: &EgoBox,
) -> Vec<(u32, u32)> {
    let (c, s) = (heading.cos(), heading.sin());
    let half_l = ego_box.length / 2.0;
    let half_w = ego_box.width / 2.0;
    let o = geometry.origin_f64();
    let res = geometry.res();
    // Conservative AABB of the rotated rectangle.
    let radius = (half_l * half_l + half_w * half_w).sqrt();
    let i0 = (((center[0] - radius) - o[0]) / res).floor().max(0.0) as i64;
    let j0 = (((center[1] - radius) - o[1]) / res).floor().max(0.0) as i64;
    let i1 = ((((center[0] + radius) - o[0]) / res).ceil() as i64).min(geometry.dims[0] as i64);
    let j1 = ((((center[1] + radius) - o[1]) / res).ceil() as i64).min(geometry.dims[1] as i64);
    let mut out = Vec::new();
    for j in j0..j1 {
        for i in i0..i1 {
            let x = o[0] + res * (i as f64 + 0.5) - center[0];
            let y = o[1] + res * (j as f64 + 0.5) - center[1];
            // Rotate into the box frame.
            let fx = c * x + s * y;
            let fy = -s * x + c * y;
            if fx.abs() <= half_l && fy.abs() <= half_w {
                out.push((i as u32, j as u32));
            }
        }
    }
    out
}

/// True when the footprint at one waypoint overlaps any dynamic-category
/// voxel of the frame's grid.
pub fn footprint_collides(
    grid: &SemanticGrid,
    center: [f64; 2],
    heading: f64,
    ego_box: &EgoBox,
    dynamic: &[u8],
) -> bool {
    for (i, j) in footprint_columns(&grid.geometry, center, heading, ego_box) {
        for k in 0..grid.geometry.dims[2] {
            if dynamic.contains(&grid.get(i, j, k)) {
                return true;
            }
        }
    }
    false
}

/// Per-horizon collision flags for one trajectory. Waypoints are given in
/// the current (frame T) ego frame; `rel_poses[h]` maps frame-T ego
/// coordinates into the frame-(T+h+1) ego frame whose grid is
/// `future_grids[h]`.
pub fn trajectory_collisions(
    waypoints: &[[f64; 2]],
    future_grids: &[&SemanticGrid],
    rel_poses: &[Pose],
    ego_box: &EgoBox,
    dynamic: &[u8],
) -> Result<Vec<bool>> {
    if future_grids.len() < waypoints.len() || rel_poses.len() < waypoints.len() {
        return Err(Error::Data(format!(
            "trajectory_collisions: {} waypoints but {} grids / {} poses",
            waypoints.len(),
            future_grids.len(),
            rel_poses.len()
        )));
    }
    let mut out = Vec::with_capacity(waypoints.len());
    for (h, wp) in waypoints.iter().enumerate() {
        let prev = if h == 0 { [0.0, 0.0] } else { waypoints[h - 1] };
        let delta = [wp[0] - prev[0], wp[1] - prev[1]];
        let heading_t = if delta[0].abs() + delta[1].abs() < 1e-9 {
            0.0
        } else {
            delta[1].atan2(delta[0])
        };
        let rel = &rel_poses[h];
        let center = rel.transform_point([wp[0], wp[1], 0.0]);
        let hd = rel.transform_dir([heading_t.cos(), heading_t.sin(), 0.0]);
        let heading = hd[1].atan2(hd[0]);
        out.push(footprint_collides(
            future_grids[h],
            [center[0], center[1]],
            heading,
            ego_box,
            dynamic,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CollisionReport {
    /// (horizon step, collision rate) pairs.
    pub per_horizon: Vec<(usize, f64)>,
    pub average: f64,
}

/// Aggregates per-sample collision flags into per-horizon rates.
pub fn collision_rates(samples: &[Vec<bool>], horizons: &[usize]) -> Result<CollisionReport> {
    if samples.is_empty() {
        return Err(Error::Data("collision_rates: no samples".into()));
    }
    let mut per = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut hits = 0usize;
        for s in samples {
            if h == 0 || h > s.len() {
                return Err(Error::Data(format!(
                    "collision_rates: horizon {h} outside sample of length {}",
                    s.len()
                )));
            }
            if s[h - 1] {
                hits += 1;
            }
        }
        per.push((h, hits as f64 / samples.len() as f64));
    }
    let average = per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64;
    Ok(CollisionReport {
        per_horizon: per,
        average,
    })
}

/// Forecasting baseline: the current prediction repeated for f future
/// frames.
pub fn copy_paste_baseline(current: &SemanticGrid, f: usize) -> Vec<SemanticGrid> {
    assert!(f >= 1, "copy_paste_baseline: horizon must be >= 1");
    vec![current.clone(); f]
}
