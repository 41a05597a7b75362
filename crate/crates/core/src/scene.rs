//! Timestamped scenes: ego poses and states, per-frame ground-truth grids,
//! camera rigs, input images, and baked 2D supervision labels.
//!
//! On disk a scene is a directory:
//!   scene.json                          rig, poses (3x4 row-major), ego
//!                                       states, taxonomy, trajectories
//!   grids/frame_%04d.occg               per-frame GT semantic grid
//!   labels/frame_%04d_cam%d.depth.f32   baked depth, -1 where invalid
//!   labels/frame_%04d_cam%d.sem.u8      baked category, 0xFF where invalid
//!   labels/frame_%04d_cam%d.rgb.u8      baked RGB target
//!   images/frame_%04d_cam%d.rgb.u8      model input RGB
//!
//! Raster files are raw little-endian arrays behind a 16-byte header
//! (4-byte magic, u32 width, u32 height, u32 reserved). Grids and labels
//! load independently so each training stage can run with the other's
//! supervision withheld.

use crate::camera::CameraModel;
use crate::ego::EgoState;
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, SemanticGrid};
use crate::occg;
use crate::pose::Pose;
use crate::ray::PixelLabel;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const INVALID_SEMANTIC: u8 = 0xFF;
pub const INVALID_DEPTH: f32 = -1.0;

const MAGIC_DEPTH: &[u8; 4] = b"OCLD";
const MAGIC_SEM: &[u8; 4] = b"OCLS";
const MAGIC_RGB: &[u8; 4] = b"OCLC";

/// Category names; the last entry is always the free category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub names: Vec<String>,
    /// Categories treated as dynamic obstacles by the collision metric.
    pub dynamic: Vec<u8>,
}

impl Taxonomy {
    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    pub fn free_category(&self) -> u8 {
        (self.names.len() - 1) as u8
    }
}

/// Raw 8-bit RGB raster, row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, u: u32, v: u32) -> [f32; 3] {
        let i = ((v * self.width + u) * 3) as usize;
        [
            self.data[i] as f32 / 255.0,
            self.data[i + 1] as f32 / 255.0,
            self.data[i + 2] as f32 / 255.0,
        ]
    }
}

/// Baked supervision rasters for one camera of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BakedView {
    pub width: u32,
    pub height: u32,
    /// First-hit depth along each pixel ray; INVALID_DEPTH where no hit.
    pub depth: Vec<f32>,
    /// First-hit category; INVALID_SEMANTIC where no hit.
    pub semantic: Vec<u8>,
    /// Shaded albedo target.
    pub rgb: Vec<u8>,
}

impl BakedView {
    pub fn label_at(&self, u: u32, v: u32) -> PixelLabel {
        let i = (v * self.width + u) as usize;
        let d = self.depth[i];
        let s = self.semantic[i];
        PixelLabel {
            depth: (d >= 0.0).then_some(d),
            semantic: (s != INVALID_SEMANTIC).then_some(s),
            rgb: [
                self.rgb[i * 3] as f32 / 255.0,
                self.rgb[i * 3 + 1] as f32 / 255.0,
                self.rgb[i * 3 + 2] as f32 / 255.0,
            ],
        }
    }
}

/// One timestamped observation of the world.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    /// Ego-to-world.
    pub ego_pose: Pose,
    pub ego_state: EgoState,
    /// Ground-truth grid in this frame's ego frame; None when withheld.
    pub grid: Option<SemanticGrid>,
    /// Baked labels per camera; empty when withheld.
    pub labels: Vec<BakedView>,
    /// Input images per camera; empty when withheld.
    pub images: Vec<RgbImage>,
    /// Future ego waypoints (x, y) in this frame's ego frame.
    pub future_waypoints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub rig: Vec<CameraModel>,
    pub taxonomy: Taxonomy,
    pub geometry: GridGeometry,
    /// Seconds between consecutive frames.
    pub dt: f64,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn num_categories(&self) -> usize {
        self.taxonomy.num_categories()
    }

    /// GT grid of a frame or a data error naming it.
    pub fn gt_grid(&self, frame: usize) -> Result<&SemanticGrid> {
        self.frames[frame]
            .grid
            .as_ref()
            .ok_or_else(|| Error::Data(format!("ground-truth grid for frame {frame} not loaded")))
    }
}

/// Which parts of a scene directory to read.
#[derive(Debug, Clone, Copy)]
pub struct LoadParts {
    pub grids: bool,
    pub labels: bool,
    pub images: bool,
}

impl LoadParts {
    pub fn all() -> LoadParts {
        LoadParts {
            grids: true,
            labels: true,
            images: true,
        }
    }

    /// What self-supervised pre-training needs: 2D labels and input images,
    /// never GT grids.
    pub fn for_pretrain() -> LoadParts {
        LoadParts {
            grids: false,
            labels: true,
            images: true,
        }
    }

    /// What fine-tuning needs: GT grids and input images, never baked 2D
    /// labels.
    pub fn for_finetune() -> LoadParts {
        LoadParts {
            grids: true,
            labels: false,
            images: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    timestamp: f64,
    ego_pose: Vec<f64>,
    ego_state: EgoState,
    future_waypoints: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    dt: f64,
    taxonomy: Taxonomy,
    geometry: GridGeometry,
    rig: Vec<CameraModel>,
    frames: Vec<FrameMeta>,
}

fn grid_path(dir: &Path, frame: usize) -> std::path::PathBuf {
    dir.join("grids").join(format!("frame_{frame:04}.occg"))
}

fn raster_path(dir: &Path, sub: &str, frame: usize, cam: usize, ext: &str) -> std::path::PathBuf {
    dir.join(sub).join(format!("frame_{frame:04}_cam{cam}.{ext}"))
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SceneMeta {
        dt: scene.dt,
        taxonomy: scene.taxonomy.clone(),
        geometry: scene.geometry,
        rig: scene.rig.clone(),
        frames: scene
            .frames
            .iter()
            .map(|f| FrameMeta {
                timestamp: f.timestamp,
                ego_pose: f.ego_pose.to_rows_3x4().to_vec(),
                ego_state: f.ego_state.clone(),
                future_waypoints: f.future_waypoints.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("scene.json encode: {e}")))?;
    fs::write(dir.join("scene.json"), json).map_err(|e| Error::io(dir.join("scene.json"), e))?;

    for (fi, frame) in scene.frames.iter().enumerate() {
        if let Some(grid) = &frame.grid {
            fs::create_dir_all(dir.join("grids")).map_err(|e| Error::io(dir, e))?;
            occg::save_semantic(&grid_path(dir, fi), grid, scene.num_categories())?;
        }
        for (ci, view) in frame.labels.iter().enumerate() {
            fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(dir, e))?;
            let f32_bytes: Vec<u8> = view.depth.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_raster(
                &raster_path(dir, "labels", fi, ci, "depth.f32"),
                MAGIC_DEPTH,
                view.width,
                view.height,
                &f32_bytes,
            )?;
            write_raster(
                &raster_path(dir, "labels", fi, ci, "sem.u8"),
                MAGIC_SEM,
                view.width,
                view.height,
                &view.semantic,
            )?;
            write_raster(
                &raster_path(dir, "labels", fi, ci, "rgb.u8"),
                MAGIC_RGB,
                view.width,
                view.height,
                &view.rgb,
            )?;
        }
        for (ci, img) in frame.images.iter().enumerate() {
            fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
            write_raster(
                &raster_path(dir, "images", fi, ci, "rgb.u8"),
                MAGIC_RGB,
                img.width,
                img.height,
                &img.data,
            )?;
        }
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    load_scene_parts(dir, LoadParts::all())
}

pub fn load_scene_parts(dir: &Path, parts: LoadParts) -> Result<Scene> {
    let meta_path = dir.join("scene.json");
    let json = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SceneMeta = serde_json::from_str(&json)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let num_cats = meta.taxonomy.num_categories();

    let mut frames = Vec::with_capacity(meta.frames.len());
    for (fi, fm) in meta.frames.iter().enumerate() {
        let rows: [f64; 12] = fm
            .ego_pose
            .clone()
            .try_into()
            .map_err(|_| Error::Format(format!("frame {fi}: ego pose must have 12 values")))?;
        let grid = if parts.grids {
            Some(occg::load_semantic(&grid_path(dir, fi), num_cats)?)
        } else {
            None
        };
        let mut labels = Vec::new();
        if parts.labels {
            for ci in 0..meta.rig.len() {
                let (w, h, depth_bytes) =
                    read_raster(&raster_path(dir, "labels", fi, ci, "depth.f32"), MAGIC_DEPTH)?;
                if depth_bytes.len() != (w * h * 4) as usize {
                    return Err(Error::Format(format!(
                        "depth raster frame {fi} cam {ci}: payload size mismatch"
                    )));
                }
                let depth = depth_bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let (w2, h2, semantic) =
                    read_raster(&raster_path(dir, "labels", fi, ci, "sem.u8"), MAGIC_SEM)?;
                let (w3, h3, rgb) =
                    read_raster(&raster_path(dir, "labels", fi, ci, "rgb.u8"), MAGIC_RGB)?;
                if (w2, h2) != (w, h) || (w3, h3) != (w, h) {
                    return Err(Error::Format(format!(
                        "label rasters frame {fi} cam {ci} disagree on size"
                    )));
                }
                labels.push(BakedView {
                    width: w,
                    height: h,
                    depth,
                    semantic,
                    rgb,
                });
            }
        }
        let mut images = Vec::new();
        if parts.images {
            for ci in 0..meta.rig.len() {
                let (w, h, data) =
                    read_raster(&raster_path(dir, "images", fi, ci, "rgb.u8"), MAGIC_RGB)?;
                images.push(RgbImage {
                    width: w,
                    height: h,
                    data,
                });
            }
        }
        frames.push(Frame {
            timestamp: fm.timestamp,
            ego_pose: Pose::from_rows_3x4(&rows),
            ego_state: fm.ego_state.clone(),
            grid,
            labels,
            images,
            future_waypoints: fm.future_waypoints.clone(),
        });
    }

    Ok(Scene {
        rig: meta.rig,
        taxonomy: meta.taxonomy,
        geometry: meta.geometry,
        dt: meta.dt,
        frames,
    })
}

fn write_raster(path: &Path, magic: &[u8; 4], w: u32, h: u32, payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&w.to_le_bytes());
    bytes.extend_from_slice(&h.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_raster(path: &Path, magic: &[u8; 4]) -> Result<(u32, u32, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    if &bytes[0..4] != magic {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            &bytes[0..4],
            magic
        )));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    Ok((w, h, bytes[16..].to_vec()))
}
