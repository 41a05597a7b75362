//! Procedural synthetic driving scenes: a ground slab, grid-spanning
//! barriers, buildings, poles, parked and moving boxes, and pedestrians,
//! all placed in a world frame and re-voxelized per frame into the ego
//! frame; plus label baking (depth/semantic/RGB per camera via ray
//! casting against the GT grids).

use crate::camera::{extrinsic_facing_pitched, CameraModel};
use crate::ego::EgoState;
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, SemanticGrid};
use crate::math::Vec3;
use crate::metrics::ray_cast_first_hit;
use crate::pose::Pose;
use crate::ray::pixel_rays;
use crate::scene::{BakedView, Frame, RgbImage, Scene, Taxonomy, INVALID_DEPTH, INVALID_SEMANTIC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const CAT_OTHERS: u8 = 0;
pub const CAT_GROUND: u8 = 1;
pub const CAT_BUILDING: u8 = 2;
pub const CAT_POLE: u8 = 3;
pub const CAT_CAR: u8 = 4;
pub const CAT_PEDESTRIAN: u8 = 5;
pub const CAT_BARRIER: u8 = 6;
pub const CAT_VEGETATION: u8 = 7;
pub const CAT_FREE: u8 = 8;

pub fn default_taxonomy() -> Taxonomy {
    Taxonomy {
        names: vec![
            "others".into(),
            "ground".into(),
            "building".into(),
            "pole".into(),
            "car".into(),
            "pedestrian".into(),
            "barrier".into(),
            "vegetation".into(),
            "free".into(),
        ],
        dynamic: vec![CAT_CAR, CAT_PEDESTRIAN],
    }
}

/// Per-category base colors used by the shaded-albedo photometric model.
pub const ALBEDO: [[f32; 3]; 9] = [
    [0.55, 0.35, 0.55], // others
    [0.35, 0.33, 0.30], // ground
    [0.75, 0.66, 0.55], // building
    [0.85, 0.85, 0.20], // pole
    [0.20, 0.40, 0.90], // car
    [0.95, 0.45, 0.15], // pedestrian
    [0.80, 0.20, 0.20], // barrier
    [0.15, 0.70, 0.25], // vegetation
    [0.00, 0.00, 0.00], // free (never shaded)
];

/// Depth attenuation constant of the shading model, meters.
pub const SHADING_FALLOFF: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum EgoMotion {
    Straight { speed: f64 },
    Arc { speed: f64, yaw_rate: f64 },
    StopAndGo { speed: f64, period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub buildings: usize,
    pub barriers: usize,
    pub poles: usize,
    pub parked: usize,
    pub moving_cars: usize,
    pub pedestrians: usize,
    pub vegetation: usize,
    /// Cross traffic occupying the junction ahead exactly while the ego is
    /// stopped (stop-and-go profiles only). Nonzero enables one blocker
    /// per stopped interval.
    #[serde(default)]
    pub crossers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRigSpec {
    /// 1 = front only, 2 = front and back.
    pub count: usize,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Downward tilt; level cameras waste most rows on the horizon.
    #[serde(default = "default_pitch")]
    pub pitch_deg: f64,
}

fn default_pitch() -> f64 {
    12.0
}

/// Deterministic recipe for a scene: same spec, bit-identical scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub geometry: GridGeometry,
    pub num_frames: usize,
    pub dt: f64,
    /// Past-waypoint history length k carried by each EgoState.
    pub ego_history: usize,
    pub ego_motion: EgoMotion,
    pub objects: ObjectCounts,
    pub cameras: CameraRigSpec,
}

impl SceneSpec {
    /// Desk-scale default: dynamic scene with moving traffic.
    pub fn desk_dynamic(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            geometry: GridGeometry::desk_config(),
            num_frames: 20,
            dt: 0.5,
            ego_history: 2,
            ego_motion: EgoMotion::Straight { speed: 2.0 },
            objects: ObjectCounts {
                buildings: 2,
                barriers: 2,
                poles: 2,
                parked: 2,
                moving_cars: 2,
                pedestrians: 1,
                vegetation: 1,
                crossers: 0,
            },
            cameras: CameraRigSpec {
                count: 2,
                fov_deg: 90.0,
                width: 64,
                height: 48,
                pitch_deg: default_pitch(),
            },
        }
    }

    /// Ground only; useful for smoke tests.
    pub fn ground_only(seed: u64) -> SceneSpec {
        let mut spec = SceneSpec::desk_dynamic(seed);
        spec.objects = ObjectCounts {
            buildings: 0,
            barriers: 0,
            poles: 0,
            parked: 0,
            moving_cars: 0,
            pedestrians: 0,
            vegetation: 0,
            crossers: 0,
        };
        spec
    }
}

/// Axis-aligned box in the world frame, possibly drifting at constant
/// planar velocity.
#[derive(Debug, Clone)]
struct WorldBox {
    min: Vec3,
    max: Vec3,
    velocity: [f64; 2],
    category: u8,
}

impl WorldBox {
    fn contains(&self, p: Vec3, t: f64) -> bool {
        let dx = self.velocity[0] * t;
        let dy = self.velocity[1] * t;
        p[0] >= self.min[0] + dx
            && p[0] < self.max[0] + dx
            && p[1] >= self.min[1] + dy
            && p[1] < self.max[1] + dy
            && p[2] >= self.min[2]
            && p[2] < self.max[2]
    }
}

/// A box that exists only on selected frames (cross traffic dwelling in
/// the junction while the ego waits).
#[derive(Debug, Clone)]
struct KeyframedBox {
    min: Vec3,
    max: Vec3,
    category: u8,
    present: Vec<bool>,
}

impl KeyframedBox {
    fn contains(&self, p: Vec3, frame: usize) -> bool {
        self.present.get(frame).copied().unwrap_or(false)
            && p[0] >= self.min[0]
            && p[0] < self.max[0]
            && p[1] >= self.min[1]
            && p[1] < self.max[1]
            && p[2] >= self.min[2]
            && p[2] < self.max[2]
    }
}

fn ego_pose_at(motion: &EgoMotion, dt: f64, frame: usize) -> Pose {
    let t = frame as f64 * dt;
    match motion {
        EgoMotion::Straight { speed } => Pose::from_xy_yaw(speed * t, 0.0, 0.0),
        EgoMotion::Arc { speed, yaw_rate } => {
            if yaw_rate.abs() < 1e-9 {
                return Pose::from_xy_yaw(speed * t, 0.0, 0.0);
            }
            let yaw = yaw_rate * t;
            let r = speed / yaw_rate;
            Pose::from_xy_yaw(r * yaw.sin(), r * (1.0 - yaw.cos()), yaw)
        }
        EgoMotion::StopAndGo { speed, period } => {
            // Alternates `period` moving frames with `period` stopped ones.
            let p = (*period).max(1);
            let mut x = 0.0;
            for f in 0..frame {
                if (f / p) % 2 == 0 {
                    x += speed * dt;
                }
            }
            Pose::from_xy_yaw(x, 0.0, 0.0)
        }
    }
}

fn build_rig(spec: &CameraRigSpec) -> Vec<CameraModel> {
    assert!(
        spec.count == 1 || spec.count == 2,
        "camera rig supports 1 (front) or 2 (front+back) cameras"
    );
    let fov = spec.fov_deg.to_radians();
    let pitch = spec.pitch_deg.to_radians();
    let mut rig = vec![CameraModel::from_fov(
        spec.width,
        spec.height,
        fov,
        extrinsic_facing_pitched([0.5, 0.0, 1.0], 0.0, pitch),
    )];
    if spec.count == 2 {
        rig.push(CameraModel::from_fov(
            spec.width,
            spec.height,
            fov,
            extrinsic_facing_pitched([-0.5, 0.0, 1.0], std::f64::consts::PI, pitch),
        ));
    }
    rig
}

/// Clearance kept between static content and every ego position; shrinks
/// on very small grids so placement stays feasible.
fn ego_clearance(geometry: &GridGeometry) -> f64 {
    let e = geometry.extent();
    (0.25 * e[0].min(e[1])).min(2.2)
}

/// Objects must fit the grid footprint; they may poke out of the top.
fn fits_grid(extent: Vec3, size: [f64; 3], archetype: &str) -> Result<()> {
    if size[0] > extent[0] || size[1] > extent[1] {
        return Err(Error::Data(format!(
            "{archetype} of size {size:?} does not fit the grid extent {extent:?}"
        )));
    }
    Ok(())
}

/// Places static objects near the trajectory but clear of it, so content
/// stays in view as the ego moves.
fn place_static(
    rng: &mut ChaCha8Rng,
    ego_positions: &[Vec3],
    geometry: &GridGeometry,
    size: [f64; 3],
    z0: f64,
    category: u8,
    archetype: &str,
) -> Result<WorldBox> {
    fits_grid(geometry.extent(), size, archetype)?;
    let half_x = geometry.extent()[0] / 2.0;
    let half_y = geometry.extent()[1] / 2.0;
    let clearance = ego_clearance(geometry);
    for _ in 0..256 {
        let anchor = &ego_positions[rng.gen_range(0..ego_positions.len())];
        let cx = anchor[0] + rng.gen_range(-half_x * 0.8..half_x * 0.8);
        let cy = anchor[1] + rng.gen_range(-half_y * 0.8..half_y * 0.8);
        let clear = ego_positions
            .iter()
            .all(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt() > clearance + size[1] / 2.0);
        if clear {
            return Ok(WorldBox {
                min: [cx - size[0] / 2.0, cy - size[1] / 2.0, z0],
                max: [cx + size[0] / 2.0, cy + size[1] / 2.0, z0 + size[2]],
                velocity: [0.0, 0.0],
                category,
            });
        }
    }
    Err(Error::Data(format!(
        "could not place {archetype} clear of the ego trajectory"
    )))
}

/// Generates the unbaked scene: GT grids, poses, ego states, trajectories.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    if spec.num_frames < 2 {
        return Err(Error::Data("a scene needs at least two frames".into()));
    }
    if spec.dt <= 0.0 {
        return Err(Error::Data("frame interval dt must be positive".into()));
    }
    let taxonomy = default_taxonomy();
    let geometry = spec.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let poses: Vec<Pose> = (0..spec.num_frames)
        .map(|f| ego_pose_at(&spec.ego_motion, spec.dt, f))
        .collect();
    let ego_positions: Vec<Vec3> = poses.iter().map(|p| p.translation).collect();
    let res = geometry.res();

    // World content. Later entries win where boxes overlap.
    let mut boxes: Vec<WorldBox> = Vec::new();
    let x_lo = ego_positions.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - geometry.extent()[0];
    let x_hi = ego_positions.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + geometry.extent()[0];

    for b in 0..spec.objects.barriers {
        // Grid-spanning walls flanking the road at alternating sides.
        let side = if b % 2 == 0 { 1.0 } else { -1.0 };
        let offset = rng.gen_range(4.5..7.0) * side;
        let height = rng.gen_range(1.0..2.0);
        boxes.push(WorldBox {
            min: [x_lo, offset - 0.3, 0.0],
            max: [x_hi, offset + 0.3, height],
            velocity: [0.0, 0.0],
            category: CAT_BARRIER,
        });
    }
    for _ in 0..spec.objects.vegetation {
        let size = [rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0), rng.gen_range(1.0..2.0)];
        boxes.push(place_static(&mut rng, &ego_positions, &geometry, size, 0.0, CAT_VEGETATION, "vegetation blob")?);
    }
    for _ in 0..spec.objects.buildings {
        let size = [rng.gen_range(2.0..4.5), rng.gen_range(2.0..4.5), rng.gen_range(2.0..3.5)];
        boxes.push(place_static(&mut rng, &ego_positions, &geometry, size, 0.0, CAT_BUILDING, "building")?);
    }
    for _ in 0..spec.objects.parked {
        let size = [4.0, 1.8, 1.5];
        boxes.push(place_static(&mut rng, &ego_positions, &geometry, size, 0.0, CAT_CAR, "parked box")?);
    }
    for _ in 0..spec.objects.poles {
        let size = [res.max(0.3), res.max(0.3), 3.0];
        boxes.push(place_static(&mut rng, &ego_positions, &geometry, size, 0.0, CAT_POLE, "pole")?);
    }
    for m in 0..spec.objects.moving_cars {
        // Traffic in lanes beside the corridor, moving along x.
        fits_grid(geometry.extent(), [4.0, 1.8, 1.5], "moving box")?;
        let side = if m % 2 == 0 { 1.0 } else { -1.0 };
        let lane_y = side * rng.gen_range(2.4..3.4);
        let speed = rng.gen_range(1.5..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let anchor = &ego_positions[rng.gen_range(0..ego_positions.len())];
        let cx = anchor[0] + rng.gen_range(-4.0..4.0);
        boxes.push(WorldBox {
            min: [cx - 2.0, lane_y - 0.9, 0.0],
            max: [cx + 2.0, lane_y + 0.9, 1.5],
            velocity: [speed, 0.0],
            category: CAT_CAR,
        });
    }
    for _ in 0..spec.objects.pedestrians {
        fits_grid(geometry.extent(), [0.5, 0.5, 1.7], "pedestrian box")?;
        let anchor = &ego_positions[rng.gen_range(0..ego_positions.len())];
        let cx = anchor[0] + rng.gen_range(-5.0..5.0);
        let cy = rng.gen_range(3.5..6.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let vel = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.4..0.4)];
        boxes.push(WorldBox {
            min: [cx - 0.25, cy - 0.25, 0.0],
            max: [cx + 0.25, cy + 0.25, 1.7],
            velocity: vel,
            category: CAT_PEDESTRIAN,
        });
    }

    // Cross traffic: a vehicle dwells in the junction ahead during each
    // fully stopped interval and is gone while the ego moves.
    let mut keyframed: Vec<KeyframedBox> = Vec::new();
    if spec.objects.crossers > 0 {
        fits_grid(geometry.extent(), [1.8, 4.0, 1.5], "crossing box")?;
        let stopped: Vec<bool> = (0..spec.num_frames)
            .map(|f| {
                f > 0
                    && crate::math::norm(crate::math::sub(ego_positions[f], ego_positions[f - 1]))
                        / spec.dt
                        < 1e-9
            })
            .collect();
        let mut f = 0;
        while f < spec.num_frames {
            if stopped[f] {
                let mut end = f;
                while end + 1 < spec.num_frames && stopped[end + 1] {
                    end += 1;
                }
                let stop_pos = ego_positions[f];
                let heading = {
                    let r = poses[f].rotation;
                    r[1][0].atan2(r[0][0])
                };
                let ahead = rng.gen_range(3.4..4.6);
                let cx = stop_pos[0] + heading.cos() * ahead;
                let cy = stop_pos[1] + heading.sin() * ahead + rng.gen_range(-0.3..0.3);
                let mut present = vec![false; spec.num_frames];
                for (p, s) in present[f..=end].iter_mut().zip(&stopped[f..=end]) {
                    *p = *s;
                }
                keyframed.push(KeyframedBox {
                    min: [cx - 0.9, cy - 2.0, 0.0],
                    max: [cx + 0.9, cy + 2.0, 1.5],
                    category: CAT_CAR,
                    present,
                });
                f = end + 1;
            } else {
                f += 1;
            }
        }
    }

    // Voxelize every frame in its own ego frame.
    let frames: Vec<Frame> = (0..spec.num_frames)
        .map(|fi| {
            let t = fi as f64 * spec.dt;
            let pose = poses[fi];
            let mut grid = SemanticGrid::new_free(geometry, taxonomy.num_categories());
            for k in 0..geometry.dims[2] {
                for j in 0..geometry.dims[1] {
                    for i in 0..geometry.dims[0] {
                        let world = pose.transform_point(geometry.voxel_center(i, j, k));
                        // Ground slab: one voxel thick below z = 0.
                        let mut cat = if world[2] >= -res && world[2] < 0.0 {
                            Some(CAT_GROUND)
                        } else {
                            None
                        };
                        for b in &boxes {
                            if b.contains(world, t) {
                                cat = Some(b.category);
                            }
                        }
                        for b in &keyframed {
                            if b.contains(world, fi) {
                                cat = Some(b.category);
                            }
                        }
                        if let Some(c) = cat {
                            grid.set(i, j, k, c);
                        }
                    }
                }
            }

            // Kinematic state from pose differences.
            let speed_at = |f: usize| -> f64 {
                if f == 0 {
                    crate::math::norm(crate::math::sub(ego_positions[1], ego_positions[0])) / spec.dt
                } else {
                    crate::math::norm(crate::math::sub(ego_positions[f], ego_positions[f - 1]))
                        / spec.dt
                }
            };
            let speed = speed_at(fi);
            let acceleration = if fi == 0 {
                0.0
            } else {
                (speed_at(fi) - speed_at(fi - 1)) / spec.dt
            };
            let yaw_at = |f: usize| -> f64 {
                let r = poses[f].rotation;
                r[1][0].atan2(r[0][0])
            };
            let yaw_rate = if fi == 0 {
                0.0
            } else {
                let mut dy = yaw_at(fi) - yaw_at(fi - 1);
                while dy > std::f64::consts::PI {
                    dy -= 2.0 * std::f64::consts::PI;
                }
                while dy < -std::f64::consts::PI {
                    dy += 2.0 * std::f64::consts::PI;
                }
                dy / spec.dt
            };
            let inv = pose.inverse();
            let mut history = Vec::with_capacity(spec.ego_history);
            let mut history_valid = Vec::with_capacity(spec.ego_history);
            for back in 1..=spec.ego_history {
                if fi >= back {
                    let p = inv.transform_point(ego_positions[fi - back]);
                    history.push([p[0], p[1]]);
                    history_valid.push(true);
                } else {
                    history.push([0.0, 0.0]);
                    history_valid.push(false);
                }
            }
            let future_waypoints: Vec<[f64; 2]> = (fi + 1..spec.num_frames)
                .map(|f| {
                    let p = inv.transform_point(ego_positions[f]);
                    [p[0], p[1]]
                })
                .collect();

            Frame {
                timestamp: t,
                ego_pose: pose,
                ego_state: EgoState::new(speed, acceleration, yaw_rate, history, history_valid),
                grid: Some(grid),
                labels: Vec::new(),
                images: Vec::new(),
                future_waypoints,
            }
        })
        .collect();

    Ok(Scene {
        rig: build_rig(&spec.cameras),
        taxonomy,
        geometry,
        dt: spec.dt,
        frames,
    })
}

/// Shaded albedo of a first hit.
pub fn shade(category: u8, depth: f64) -> [f32; 3] {
    let a = ALBEDO[category as usize];
    let s = (-depth / SHADING_FALLOFF).exp() as f32;
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Casts every camera pixel against one GT grid.
fn bake_view(grid: &SemanticGrid, cam: &CameraModel, cam_idx: usize) -> BakedView {
    let (w, h) = (cam.width, cam.height);
    let n = (w * h) as usize;
    let mut depth = vec![INVALID_DEPTH; n];
    let mut semantic = vec![INVALID_SEMANTIC; n];
    let mut rgb = vec![0u8; n * 3];
    let t_far = grid.geometry.diagonal();
    for ray in pixel_rays(cam, 1, 0, cam_idx, t_far) {
        let px = ray.source.pixel[0] as usize;
        let py = ray.source.pixel[1] as usize;
        let i = py * w as usize + px;
        if let Some((d, cat)) = ray_cast_first_hit(grid, &ray) {
            depth[i] = d as f32;
            semantic[i] = cat;
            let c = shade(cat, d);
            for ch in 0..3 {
                rgb[i * 3 + ch] = (c[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    BakedView {
        width: w,
        height: h,
        depth,
        semantic,
        rgb,
    }
}

/// Bakes labels and input images for every frame and camera. Input images
/// are the same shaded-albedo rendering written separately so supervision
/// files can be withheld without removing the model input.
pub fn bake_labels(scene: &mut Scene) -> Result<()> {
    let rig = scene.rig.clone();
    let baked: Vec<(usize, Vec<BakedView>)> = scene
        .frames
        .par_iter()
        .enumerate()
        .map(|(fi, frame)| {
            let grid = frame
                .grid
                .as_ref()
                .ok_or_else(|| Error::Data(format!("bake_labels: frame {fi} has no GT grid")))?;
            let views = rig
                .iter()
                .enumerate()
                .map(|(ci, cam)| bake_view(grid, cam, ci))
                .collect();
            Ok((fi, views))
        })
        .collect::<Result<_>>()?;
    for (fi, views) in baked {
        scene.frames[fi].images = views
            .iter()
            .map(|v| RgbImage {
                width: v.width,
                height: v.height,
                data: v.rgb.clone(),
            })
            .collect();
        scene.frames[fi].labels = views;
    }
    Ok(())
}
