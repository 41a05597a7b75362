//! Ray generation: per-pixel rays from camera rigs, transport of rays
//! between ego frames via pose composition, and stratified depth sampling.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::grid::GridGeometry;
use crate::math::{self, Vec3};
use crate::pose::Pose;
use crate::scene::Scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default near bound for ray marching, meters.
pub const DEFAULT_T_NEAR: f64 = 0.1;

/// Where a ray came from: frame timestamp index, camera index, pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySource {
    pub frame: usize,
    pub camera: usize,
    pub pixel: [f64; 2],
}

/// A ray in the current ego frame with its marching range.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub source: RaySource,
    /// (t_near, t_far), meters along the direction.
    pub t_range: (f64, f64),
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, source: RaySource, t_range: (f64, f64)) -> Ray {
        assert!(
            (math::norm(direction) - 1.0).abs() < 1e-6,
            "ray direction must be unit length"
        );
        assert!(t_range.0 >= 0.0 && t_range.1 > t_range.0, "bad t_range {t_range:?}");
        Ray {
            origin,
            direction,
            source,
            t_range,
        }
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        math::add(self.origin, math::scale(self.direction, t))
    }
}

/// Depths and intervals of the points sampled along one ray.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub ray: Ray,
    /// Strictly increasing depths, meters.
    pub depths: Vec<f64>,
    /// deltas[m] = depths[m+1] - depths[m]; the last interval repeats the
    /// previous one (or spans to t_far when there is a single sample).
    pub deltas: Vec<f64>,
}

/// One ray per sampled pixel center. Origins sit at the camera center in
/// the ego frame; `t_far` defaults to the grid diagonal.
pub fn pixel_rays(camera: &CameraModel, stride: u32, frame: usize, camera_idx: usize, t_far: f64) -> Vec<Ray> {
    assert!(stride >= 1, "stride must be >= 1");
    let origin = camera.center();
    let mut rays = Vec::new();
    let mut v = 0;
    while v < camera.height {
        let mut u = 0;
        while u < camera.width {
            let (pu, pv) = (u as f64 + 0.5, v as f64 + 0.5);
            let dir = camera.pixel_dir(pu, pv);
            rays.push(Ray::new(
                origin,
                dir,
                RaySource {
                    frame,
                    camera: camera_idx,
                    pixel: [pu, pv],
                },
                (DEFAULT_T_NEAR, t_far),
            ));
            u += stride;
        }
        v += stride;
    }
    rays
}

/// Re-expresses rays from the `from` ego frame in the `to` ego frame. Both
/// poses are ego-to-world.
pub fn transport_rays(rays: &[Ray], from_pose: &Pose, to_pose: &Pose) -> Vec<Ray> {
    let rel = to_pose.inverse().compose(from_pose);
    rays.iter()
        .map(|r| Ray {
            origin: rel.transform_point(r.origin),
            direction: rel.transform_dir(r.direction),
            source: r.source,
            t_range: r.t_range,
        })
        .collect()
}

/// Uniform stratified sampling of M depths in the ray's range. Without
/// jitter each stratum contributes its midpoint; with jitter, a uniform
/// draw inside the stratum, deterministic in the seed.
pub fn sample_along(ray: &Ray, m: usize, jitter: bool, seed: u64) -> RaySamples {
    assert!(m >= 1, "need at least one sample");
    let (t0, t1) = ray.t_range;
    let width = (t1 - t0) / m as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depths = Vec::with_capacity(m);
    for i in 0..m {
        let frac = if jitter { rng.gen::<f64>() } else { 0.5 };
        depths.push(t0 + width * (i as f64 + frac));
    }
    let mut deltas = Vec::with_capacity(m);
    for i in 0..m {
        if i + 1 < m {
            deltas.push(depths[i + 1] - depths[i]);
        } else if m >= 2 {
            deltas.push(deltas[m - 2]);
        } else {
            deltas.push(t1 - depths[0]);
        }
    }
    RaySamples {
        ray: *ray,
        depths,
        deltas,
    }
}

/// Ground-truth labels a supervision ray carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelLabel {
    /// First-hit depth along the ray, meters; None where nothing was hit.
    pub depth: Option<f32>,
    /// First-hit category; None where nothing was hit.
    pub semantic: Option<u8>,
    /// Shaded albedo color in [0,1]; black where nothing was hit.
    pub rgb: [f32; 3],
}

/// Rays plus (optionally) per-ray ground-truth labels, all expressed in one
/// ego frame.
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub rays: Vec<RaySamples>,
    pub labels: Option<Vec<PixelLabel>>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Options for building a supervision bundle around a frame.
#[derive(Debug, Clone, Copy)]
pub struct BundleOptions {
    /// Adjacent frames on each side to transport in.
    pub adjacent: usize,
    /// Pixel stride.
    pub stride: u32,
    /// Samples per ray.
    pub samples_per_ray: usize,
    pub jitter: bool,
    pub seed: u64,
}

/// Collects per-pixel rays of frames `i-n ..= i+n` (clamped to the scene),
/// transports them into frame `i`'s ego frame, attaches each ray's baked
/// labels from its own source frame, and samples depths.
pub fn build_supervision_bundle(
    scene: &Scene,
    frame: usize,
    opts: &BundleOptions,
    geometry: &GridGeometry,
) -> Result<RayBundle> {
    assert!(frame < scene.frames.len(), "frame index out of range");
    let t_far = geometry.diagonal();
    let lo = frame.saturating_sub(opts.adjacent);
    let hi = (frame + opts.adjacent).min(scene.frames.len() - 1);
    let to_pose = &scene.frames[frame].ego_pose;

    let mut rays = Vec::new();
    let mut labels = Vec::new();
    for j in lo..=hi {
        let from_pose = &scene.frames[j].ego_pose;
        for (ci, cam) in scene.rig.iter().enumerate() {
            let baked = scene.frames[j].labels.get(ci).ok_or_else(|| {
                Error::Data(format!("missing baked labels for frame {j} camera {ci}"))
            })?;
            let own = pixel_rays(cam, opts.stride, j, ci, t_far);
            let transported = if j == frame {
                own
            } else {
                transport_rays(&own, from_pose, to_pose)
            };
            for ray in transported {
                let u = ray.source.pixel[0] as u32;
                let v = ray.source.pixel[1] as u32;
                labels.push(baked.label_at(u, v));
                let seed = opts
                    .seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add(rays.len() as u64);
                rays.push(sample_along(&ray, opts.samples_per_ray, opts.jitter, seed));
            }
        }
    }
    Ok(RayBundle {
        rays,
        labels: Some(labels),
    })
}
