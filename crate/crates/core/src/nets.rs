//! Trainable components: the multi-view unprojection encoder that lifts
//! images into a per-voxel feature volume, the attribute projection head,
//! the occupancy head, the state-conditioned forecasting module, the
//! trajectory head, the Adam optimizer, and the checkpoint format.

use crate::autodiff::{Grads, Graph, Op, Tensor, TensorId, Values};
use crate::camera::CameraModel;
use crate::ego::EgoState;
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, SemanticGrid};
use crate::render::AttributeFields;
use crate::scene::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Per-voxel feature volume produced by the encoder and transformed by the
/// forecasting module.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub geometry: GridGeometry,
    pub dim: usize,
    /// [V, dim].
    pub features: Tensor,
}

impl FeatureGrid {
    pub fn new(geometry: GridGeometry, dim: usize, features: Tensor) -> FeatureGrid {
        assert!(dim >= 1);
        assert_eq!(features.shape(), &[geometry.voxel_count(), dim]);
        FeatureGrid {
            geometry,
            dim,
            features,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    adam_m: Vec<f32>,
    adam_v: Vec<f32>,
}

/// Named parameter table plus Adam state. The trainer owns it exclusively
/// during updates.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    pub adam_step_count: u64,
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "parameter {name}: data/shape mismatch");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        });
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// One Adam update over the named gradients. Parameters without an
    /// entry are left untouched (they were not part of the graph).
    pub fn adam_step(&mut self, grads: &HashMap<String, Vec<f32>>, lr: f32) {
        self.adam_step_count += 1;
        let t = self.adam_step_count as f64;
        let bias1 = 1.0 - (ADAM_BETA1 as f64).powf(t);
        let bias2 = 1.0 - (ADAM_BETA2 as f64).powf(t);
        for param in &mut self.params {
            let Some(g) = grads.get(&param.name) else {
                continue;
            };
            assert_eq!(
                g.len(),
                param.data.len(),
                "gradient shape mismatch for {}",
                param.name
            );
            for i in 0..g.len() {
                let m = ADAM_BETA1 * param.adam_m[i] + (1.0 - ADAM_BETA1) * g[i];
                let v = ADAM_BETA2 * param.adam_v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                param.adam_m[i] = m;
                param.adam_v[i] = v;
                let m_hat = m as f64 / bias1;
                let v_hat = v as f64 / bias2;
                param.data[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + ADAM_EPS as f64)) as f32;
            }
        }
    }
}

/// Leaf tensors for every parameter, created per training step.
pub struct BoundParams {
    map: HashMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collects gradients by parameter name after a backward pass.
    pub fn collect_grads(&self, bp: &crate::autodiff::Backprop) -> HashMap<String, Vec<f32>> {
        let mut out = HashMap::new();
        for (name, tensor) in &self.map {
            if let Some(g) = bp.grad(tensor) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// MLPs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
}

fn apply_activation(x: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Relu => x.relu(),
        Activation::Softplus => x.softplus(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

/// Fully-connected network: ReLU between layers, optional output
/// activation. Parameters are registered as `{name}.w{i}` / `{name}.b{i}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    /// [input, hidden..., output].
    pub widths: Vec<usize>,
    pub out_activation: Option<Activation>,
    pub zero_init_last: bool,
}

impl Mlp {
    pub fn new(name: &str, widths: Vec<usize>) -> Mlp {
        assert!(widths.len() >= 2, "mlp needs input and output widths");
        Mlp {
            name: name.to_string(),
            widths,
            out_activation: None,
            zero_init_last: false,
        }
    }

    pub fn with_out(mut self, act: Activation) -> Mlp {
        self.out_activation = Some(act);
        self
    }

    pub fn with_zero_init_last(mut self) -> Mlp {
        self.zero_init_last = true;
        self
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Xavier-uniform weights, zero biases; the last layer is zeroed when
    /// requested (residual identity at init).
    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let layers = self.widths.len() - 1;
        for i in 0..layers {
            let (fan_in, fan_out) = (self.widths[i], self.widths[i + 1]);
            let zero = self.zero_init_last && i == layers - 1;
            let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| if zero { 0.0 } else { rng.gen_range(-a..a) })
                .collect();
            store.register(&format!("{}.w{i}", self.name), vec![fan_in, fan_out], w);
            store.register(
                &format!("{}.b{i}", self.name),
                vec![fan_out],
                vec![0.0; fan_out],
            );
        }
    }

    /// x: [n, widths[0]] -> [n, widths.last()].
    pub fn forward(&self, bound: &BoundParams, x: &Tensor) -> Tensor {
        let layers = self.widths.len() - 1;
        let mut h = x.clone();
        for i in 0..layers {
            let w = bound.get(&format!("{}.w{i}", self.name));
            let b = bound.get(&format!("{}.b{i}", self.name));
            h = h.matmul(w).add_row(b);
            if i + 1 < layers {
                h = h.relu();
            }
        }
        match self.out_activation {
            Some(act) => apply_activation(&h, act),
            None => h,
        }
    }
}

// ---------------------------------------------------------------------------
// Positional encodings
// ---------------------------------------------------------------------------

/// Sinusoidal features of normalized coordinates: for each axis and
/// frequency l, sin(2^l pi x) and cos(2^l pi x).
pub fn positional_encoding(coords: &[f64], freqs: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(coords.len() * 2 * freqs);
    for &x in coords {
        for l in 0..freqs {
            let arg = (1u64 << l) as f64 * std::f64::consts::PI * x;
            out.push(arg.sin() as f32);
            out.push(arg.cos() as f32);
        }
    }
    out
}

pub fn posenc_len(axes: usize, freqs: usize) -> usize {
    axes * 2 * freqs
}

/// Voxel-center coordinates normalized to [-1, 1] per axis.
fn normalized_voxel_coords(geometry: &GridGeometry, lin: usize) -> [f64; 3] {
    let [i, j, k] = geometry.index_to_ijk(lin);
    [
        (i as f64 + 0.5) / geometry.dims[0] as f64 * 2.0 - 1.0,
        (j as f64 + 0.5) / geometry.dims[1] as f64 * 2.0 - 1.0,
        (k as f64 + 0.5) / geometry.dims[2] as f64 * 2.0 - 1.0,
    ]
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: GridGeometry,
    /// Number of semantic categories including free.
    pub num_categories: usize,
    /// Volume feature dimension D.
    pub feature_dim: usize,
    pub pixel_feat_dim: usize,
    pub pixel_hidden: usize,
    pub encoder_hidden: usize,
    pub projection_hidden: usize,
    pub head_hidden: usize,
    pub forecast_hidden: Vec<usize>,
    pub state_embed_dim: usize,
    pub state_hidden: usize,
    pub traj_hidden: usize,
    /// Past-waypoint count k in the ego state.
    pub ego_history: usize,
    /// Future frames f the trajectory head emits.
    pub future_horizon: usize,
    pub posenc_freqs_2d: usize,
    pub posenc_freqs_3d: usize,
    pub residual_forecast: bool,
    pub use_ego_state: bool,
}

impl ModelConfig {
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            geometry: GridGeometry::desk_config(),
            num_categories: 9,
            feature_dim: 32,
            pixel_feat_dim: 16,
            pixel_hidden: 32,
            encoder_hidden: 64,
            projection_hidden: 64,
            head_hidden: 64,
            forecast_hidden: vec![128, 128],
            state_embed_dim: 16,
            state_hidden: 32,
            traj_hidden: 64,
            ego_history: 2,
            future_horizon: 3,
            posenc_freqs_2d: 4,
            posenc_freqs_3d: 8,
            residual_forecast: true,
            use_ego_state: true,
        }
    }

    /// Semantic channels of the attribute fields: every category except
    /// free (occupancy itself is carried by the density field).
    pub fn num_semantic(&self) -> usize {
        self.num_categories - 1
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pixel_mlp: Mlp,
    voxel_mlp: Mlp,
    proj_trunk: Mlp,
    proj_density: Mlp,
    proj_semantics: Mlp,
    proj_color: Mlp,
    head_mlp: Mlp,
    state_mlp: Mlp,
    forecast_mlp: Mlp,
    traj_mlp: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Model {
        let pe2 = posenc_len(2, config.posenc_freqs_2d);
        let pe3 = posenc_len(3, config.posenc_freqs_3d);
        let state_in = EgoState::feature_len(config.ego_history);
        let d = config.feature_dim;

        let pixel_mlp = Mlp::new(
            "pixel",
            vec![3 + pe2, config.pixel_hidden, config.pixel_feat_dim],
        );
        let voxel_mlp = Mlp::new(
            "voxel",
            vec![config.pixel_feat_dim + pe3, config.encoder_hidden, d],
        );
        let proj_trunk =
            Mlp::new("proj.trunk", vec![d, config.projection_hidden]).with_out(Activation::Relu);
        let proj_density = Mlp::new("proj.density", vec![config.projection_hidden, 1])
            .with_out(Activation::Softplus);
        let proj_semantics = Mlp::new(
            "proj.semantics",
            vec![config.projection_hidden, config.num_semantic()],
        );
        let proj_color =
            Mlp::new("proj.color", vec![config.projection_hidden, 3]).with_out(Activation::Sigmoid);
        let head_mlp = Mlp::new("head", vec![d, config.head_hidden, config.num_categories]);
        let state_mlp = Mlp::new(
            "state",
            vec![state_in, config.state_hidden, config.state_embed_dim],
        );
        let mut forecast_widths = vec![d + config.state_embed_dim + pe3];
        forecast_widths.extend_from_slice(&config.forecast_hidden);
        forecast_widths.push(d);
        let forecast_mlp = Mlp::new("forecast", forecast_widths).with_zero_init_last();
        let traj_mlp = Mlp::new(
            "traj",
            vec![
                d + config.state_embed_dim,
                config.traj_hidden,
                config.future_horizon * 2,
            ],
        )
        .with_zero_init_last();

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mlp in [
            &pixel_mlp,
            &voxel_mlp,
            &proj_trunk,
            &proj_density,
            &proj_semantics,
            &proj_color,
            &head_mlp,
            &state_mlp,
            &forecast_mlp,
            &traj_mlp,
        ] {
            mlp.register(&mut store, &mut rng);
        }
        Model {
            config,
            store,
            pixel_mlp,
            voxel_mlp,
            proj_trunk,
            proj_density,
            proj_semantics,
            proj_color,
            head_mlp,
            state_mlp,
            forecast_mlp,
            traj_mlp,
        }
    }

    /// Creates one leaf tensor per parameter on `graph`.
    pub fn bind(&self, graph: &Graph) -> BoundParams {
        let mut map = HashMap::new();
        for p in self.store.params() {
            map.insert(p.name.clone(), graph.leaf(&p.shape, p.data.clone()));
        }
        BoundParams { map }
    }

    /// Lifts multi-view images to a per-voxel feature volume: each voxel
    /// center projects into every camera, bilinearly samples that camera's
    /// per-pixel MLP features, averages over cameras that see it, and a
    /// per-voxel MLP maps the average (with voxel positional encoding) to a
    /// D-vector. Voxels seen by no camera keep the zero feature.
    pub fn encode_scene(
        &self,
        graph: &Graph,
        bound: &BoundParams,
        images: &[RgbImage],
        rig: &[CameraModel],
    ) -> Result<FeatureGrid> {
        if rig.is_empty() {
            return Err(Error::Data("encode_scene: no cameras".into()));
        }
        if images.len() != rig.len() {
            return Err(Error::Data(format!(
                "encode_scene: {} images for {} cameras",
                images.len(),
                rig.len()
            )));
        }
        for (img, cam) in images.iter().zip(rig) {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::Data(
                    "encode_scene: image size does not match camera".into(),
                ));
            }
        }
        let geometry = self.config.geometry;
        let v = geometry.voxel_count();
        let pe2 = self.config.posenc_freqs_2d;
        let pe3 = self.config.posenc_freqs_3d;

        // Per-pixel inputs across all cameras: RGB plus 2D posenc.
        let mut cam_offsets = Vec::with_capacity(rig.len());
        let mut pixel_inputs = Vec::new();
        let mut total_pixels = 0usize;
        for (img, cam) in images.iter().zip(rig) {
            cam_offsets.push(total_pixels);
            for py in 0..cam.height {
                for px in 0..cam.width {
                    let rgb = img.pixel(px, py);
                    pixel_inputs.extend_from_slice(&rgb);
                    let un = (px as f64 + 0.5) / cam.width as f64 * 2.0 - 1.0;
                    let vn = (py as f64 + 0.5) / cam.height as f64 * 2.0 - 1.0;
                    pixel_inputs.extend_from_slice(&positional_encoding(&[un, vn], pe2));
                }
            }
            total_pixels += (cam.width * cam.height) as usize;
        }
        let in_width = 3 + posenc_len(2, pe2);
        let pixel_in = graph.constant(&[total_pixels, in_width], pixel_inputs);
        let pixel_feats = self.pixel_mlp.forward(bound, &pixel_in);

        // Blend per voxel over cameras with valid projections.
        let entries = camera_blend_entries(&geometry, rig, &cam_offsets);
        let blended = blend_rows(&pixel_feats, &entries, v);

        // Voxel positional encodings.
        let mut pos = Vec::with_capacity(v * posenc_len(3, pe3));
        for lin in 0..v {
            pos.extend_from_slice(&positional_encoding(
                &normalized_voxel_coords(&geometry, lin),
                pe3,
            ));
        }
        let pos = graph.constant(&[v, posenc_len(3, pe3)], pos);
        let voxel_in = Tensor::concat_cols(&[&blended, &pos]);
        let features = self.voxel_mlp.forward(bound, &voxel_in);
        Ok(FeatureGrid::new(
            geometry,
            self.config.feature_dim,
            features,
        ))
    }

    /// Projects volume features to renderable attribute fields: a shared
    /// trunk with softplus density, linear semantic logits, and sigmoid
    /// color branches.
    pub fn project_attributes(&self, bound: &BoundParams, fg: &FeatureGrid) -> AttributeFields {
        let trunk = self.proj_trunk.forward(bound, &fg.features);
        let density = self.proj_density.forward(bound, &trunk);
        let semantics = self.proj_semantics.forward(bound, &trunk);
        let color = self.proj_color.forward(bound, &trunk);
        let v = fg.geometry.voxel_count();
        AttributeFields::new(fg.geometry, density.reshape(&[v]), semantics, color)
    }

    /// Per-voxel category logits [V, C].
    pub fn occupancy_logits(&self, bound: &BoundParams, fg: &FeatureGrid) -> Tensor {
        self.head_mlp.forward(bound, &fg.features)
    }

    fn state_embedding(
        &self,
        graph: &Graph,
        bound: &BoundParams,
        ego: Option<&EgoState>,
    ) -> Tensor {
        // A missing or disabled state embeds the zero vector, so "no ego
        // conditioning" and "all-zero ego" coincide by construction.
        let zero = EgoState::zeroed(self.config.ego_history);
        let state = match (self.config.use_ego_state, ego) {
            (true, Some(e)) => e,
            _ => &zero,
        };
        let feat = state.feature_vector();
        assert_eq!(
            feat.len(),
            EgoState::feature_len(self.config.ego_history),
            "ego history length must match the configured k"
        );
        let x = graph.constant(&[1, feat.len()], feat);
        self.state_mlp
            .forward(bound, &x)
            .reshape(&[self.config.state_embed_dim])
    }

    /// One forecasting step: next-frame features from current features and
    /// the (optional) ego state.
    pub fn forecast_step(
        &self,
        graph: &Graph,
        bound: &BoundParams,
        fg: &FeatureGrid,
        ego: Option<&EgoState>,
    ) -> FeatureGrid {
        let v = fg.geometry.voxel_count();
        let embed = self.state_embedding(graph, bound, ego).broadcast_row(v);
        let pe3 = self.config.posenc_freqs_3d;
        let mut pos = Vec::with_capacity(v * posenc_len(3, pe3));
        for lin in 0..v {
            pos.extend_from_slice(&positional_encoding(
                &normalized_voxel_coords(&fg.geometry, lin),
                pe3,
            ));
        }
        let pos = graph.constant(&[v, posenc_len(3, pe3)], pos);
        let input = Tensor::concat_cols(&[&fg.features, &embed, &pos]);
        let delta = self.forecast_mlp.forward(bound, &input);
        let features = if self.config.residual_forecast {
            fg.features.add(&delta)
        } else {
            delta
        };
        FeatureGrid::new(fg.geometry, fg.dim, features)
    }

    /// Recursive forecasting: `horizon` applications of `forecast_step`,
    /// each consuming the previous output. `egos[i]` conditions step i.
    pub fn rollout(
        &self,
        graph: &Graph,
        bound: &BoundParams,
        fg: &FeatureGrid,
        egos: &[Option<EgoState>],
        horizon: usize,
    ) -> Vec<FeatureGrid> {
        assert!(horizon >= 1, "rollout horizon must be >= 1");
        assert!(
            egos.is_empty() || egos.len() == horizon,
            "need one ego state per step or none"
        );
        let mut out = Vec::with_capacity(horizon);
        let mut current = fg.clone();
        for step in 0..horizon {
            let ego = egos.get(step).and_then(|e| e.as_ref());
            current = self.forecast_step(graph, bound, &current, ego);
            out.push(current.clone());
        }
        out
    }

    /// Future ego waypoints [f, 2] in the current ego frame (cumulative
    /// positions, not per-step deltas).
    pub fn trajectory(
        &self,
        graph: &Graph,
        bound: &BoundParams,
        fg: &FeatureGrid,
        ego: Option<&EgoState>,
    ) -> Tensor {
        let pooled = fg
            .features
            .mean_axis0()
            .reshape(&[1, self.config.feature_dim]);
        let embed = self
            .state_embedding(graph, bound, ego)
            .reshape(&[1, self.config.state_embed_dim]);
        let x = Tensor::concat_cols(&[&pooled, &embed]);
        self.traj_mlp
            .forward(bound, &x)
            .reshape(&[self.config.future_horizon, 2])
    }
}

/// Per-voxel bilinear lookup table into the concatenated pixel-feature
/// rows: entry lists (pixel row, weight) pairs, already divided by the
/// number of cameras that see the voxel.
pub fn camera_blend_entries(
    geometry: &GridGeometry,
    rig: &[CameraModel],
    cam_offsets: &[usize],
) -> Vec<Vec<(usize, f32)>> {
    let v = geometry.voxel_count();
    let mut entries: Vec<Vec<(usize, f32)>> = vec![Vec::new(); v];
    for lin in 0..v {
        let [i, j, k] = geometry.index_to_ijk(lin);
        let center = geometry.voxel_center(i, j, k);
        let mut per_cam: Vec<[(usize, f32); 4]> = Vec::new();
        for (ci, cam) in rig.iter().enumerate() {
            let Some(uv) = cam.project(center) else {
                continue;
            };
            if !cam.in_image(uv) {
                continue;
            }
            // Bilinear over pixel centers, clamped to the image border.
            let w = cam.width as usize;
            let h = cam.height as usize;
            let qx = (uv[0] - 0.5).clamp(0.0, (w - 1) as f64);
            let qy = (uv[1] - 0.5).clamp(0.0, (h - 1) as f64);
            let x0 = qx.floor() as usize;
            let y0 = qy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = qx - x0 as f64;
            let fy = qy - y0 as f64;
            let base = cam_offsets[ci];
            per_cam.push([
                (base + y0 * w + x0, ((1.0 - fx) * (1.0 - fy)) as f32),
                (base + y0 * w + x1, (fx * (1.0 - fy)) as f32),
                (base + y1 * w + x0, ((1.0 - fx) * fy) as f32),
                (base + y1 * w + x1, (fx * fy) as f32),
            ]);
        }
        if per_cam.is_empty() {
            continue;
        }
        let inv = 1.0 / per_cam.len() as f32;
        for cam_entries in per_cam {
            for (idx, w) in cam_entries {
                entries[lin].push((idx, w * inv));
            }
        }
    }
    entries
}

/// Sparse weighted row-combination op: out[r] = sum_i w_i src[rows_i].
struct BlendRowsOp {
    src: TensorId,
    entries: Vec<Vec<(usize, f32)>>,
    cols: usize,
}

impl Op for BlendRowsOp {
    fn name(&self) -> &'static str {
        "blend_rows"
    }
    fn parents(&self) -> Vec<TensorId> {
        vec![self.src]
    }
    fn backward(&self, upstream: &[f32], _values: &Values, grads: &mut Grads) {
        if let Some(buf) = grads.buf_mut(self.src) {
            for (r, entry) in self.entries.iter().enumerate() {
                for &(row, w) in entry {
                    for c in 0..self.cols {
                        buf[row * self.cols + c] += w * upstream[r * self.cols + c];
                    }
                }
            }
        }
    }
}

fn blend_rows(src: &Tensor, entries: &[Vec<(usize, f32)>], n_out: usize) -> Tensor {
    let cols = src.shape()[1];
    let v = src.value();
    let mut out = vec![0.0f32; n_out * cols];
    for (r, entry) in entries.iter().enumerate() {
        for &(row, w) in entry {
            for c in 0..cols {
                out[r * cols + c] += w * v[row * cols + c];
            }
        }
    }
    src.graph().custom(
        vec![n_out, cols],
        out,
        Box::new(BlendRowsOp {
            src: src.id(),
            entries: entries.to_vec(),
            cols,
        }),
    )
}

/// Argmax over category logits with ties broken toward the lower index.
pub fn predict_grid(logits: &[f32], geometry: GridGeometry, num_categories: usize) -> SemanticGrid {
    let v = geometry.voxel_count();
    assert_eq!(logits.len(), v * num_categories, "logit buffer size");
    let mut cats = vec![0u8; v];
    for vox in 0..v {
        let row = &logits[vox * num_categories..(vox + 1) * num_categories];
        let mut best = 0usize;
        for (c, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = c;
            }
        }
        cats[vox] = best as u8;
    }
    SemanticGrid::from_raw(geometry, num_categories, cats)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 5] = b"OCKP1";

/// Serializes the parameter table, Adam state, and a config fingerprint.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let params = model.store.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &p.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.push(1); // optimizer state present
    out.extend_from_slice(&model.store.adam_step_count.to_le_bytes());
    for p in params {
        for &x in &p.adam_m {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &x in &p.adam_v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let fp = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Format(format!("config fingerprint encode: {e}")))?;
    out.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    out.extend_from_slice(&fp);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Restores a model (parameters, Adam state, config) from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint at offset {}",
                path.display(),
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 5)? != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad checkpoint magic, expected OCKP1",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut names = Vec::with_capacity(count);
    let mut shapes = Vec::with_capacity(count);
    let mut datas: Vec<Vec<f32>> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint parameter name is not utf-8".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = take(&mut pos, n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        names.push(name);
        shapes.push(shape);
        datas.push(data);
    }
    let has_adam = take(&mut pos, 1)?[0] == 1;
    let mut step = 0u64;
    let mut adam_ms: Vec<Vec<f32>> = Vec::new();
    let mut adam_vs: Vec<Vec<f32>> = Vec::new();
    if has_adam {
        step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        for shape in &shapes {
            let n: usize = shape.iter().product();
            let m: Vec<f32> = take(&mut pos, n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let v: Vec<f32> = take(&mut pos, n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            adam_ms.push(m);
            adam_vs.push(v);
        }
    }
    let fp_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let fp = take(&mut pos, fp_len)?;
    let config: ModelConfig = serde_json::from_slice(fp)
        .map_err(|e| Error::Format(format!("{}: config fingerprint: {e}", path.display())))?;
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: trailing bytes in checkpoint",
            path.display()
        )));
    }

    let mut model = Model::new(config, 0);
    if model.store.params().len() != count {
        return Err(Error::Format(format!(
            "{}: checkpoint has {} parameters, model expects {}",
            path.display(),
            count,
            model.store.params().len()
        )));
    }
    for (i, p) in model.store.params.iter_mut().enumerate() {
        if p.name != names[i] || p.shape != shapes[i] {
            return Err(Error::Format(format!(
                "{}: parameter {} mismatch: checkpoint has {} {:?}, model expects {} {:?}",
                path.display(),
                i,
                names[i],
                shapes[i],
                p.name,
                p.shape
            )));
        }
        p.data = datas[i].clone();
        if has_adam {
            p.adam_m = adam_ms[i].clone();
            p.adam_v = adam_vs[i].clone();
        }
    }
    model.store.adam_step_count = step;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::extrinsic_facing;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            geometry: GridGeometry::new([4, 4, 2], 0.5, [-1.0, -1.0, 0.0]),
            num_categories: 4,
            feature_dim: 8,
            pixel_feat_dim: 6,
            pixel_hidden: 8,
            encoder_hidden: 12,
            projection_hidden: 10,
            head_hidden: 12,
            forecast_hidden: vec![16, 16],
            state_embed_dim: 4,
            state_hidden: 8,
            traj_hidden: 8,
            ego_history: 2,
            future_horizon: 3,
            posenc_freqs_2d: 2,
            posenc_freqs_3d: 2,
            residual_forecast: true,
            use_ego_state: true,
        }
    }

    fn flat_image(w: u32, h: u32, value: u8) -> RgbImage {
        RgbImage {
            width: w,
            height: h,
            data: vec![value; (w * h * 3) as usize],
        }
    }

    fn front_cam(w: u32, h: u32) -> CameraModel {
        CameraModel::from_fov(
            w,
            h,
            90f64.to_radians(),
            extrinsic_facing([0.0, 0.0, 0.5], 0.0),
        )
    }

    #[test]
    fn mlp_param_count_matches_formula() {
        let mlp = Mlp::new("t", vec![5, 7, 3]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mlp.register(&mut store, &mut rng);
        assert_eq!(store.total_len(), 5 * 7 + 7 + 7 * 3 + 3);
        assert_eq!(mlp.param_count(), store.total_len());
    }

    #[test]
    fn mlp_forward_is_deterministic() {
        let m = Model::new(tiny_config(), 5);
        let g1 = Graph::new();
        let b1 = m.bind(&g1);
        let x1 = g1.constant(&[2, 8], (0..16).map(|i| i as f32 * 0.1).collect());
        let y1 = m.head_mlp.forward(&b1, &x1).value();
        let g2 = Graph::new();
        let b2 = m.bind(&g2);
        let x2 = g2.constant(&[2, 8], (0..16).map(|i| i as f32 * 0.1).collect());
        let y2 = m.head_mlp.forward(&b2, &x2).value();
        assert_eq!(y1, y2);
    }

    #[test]
    fn predict_breaks_ties_toward_lower_index() {
        let g = GridGeometry::new([1, 1, 1], 1.0, [0.0; 3]);
        let grid = predict_grid(&[0.0, 1.0, 5.0, 1.0, 5.0, 1.0], g, 6);
        assert_eq!(grid.get(0, 0, 0), 2);
        let one_hot = predict_grid(&[0.0, 0.0, 0.0, 9.0, 0.0, 0.0], g, 6);
        assert_eq!(one_hot.get(0, 0, 0), 3);
    }

    #[test]
    fn predict_invariant_to_rescale_and_shift() {
        let g = GridGeometry::new([2, 2, 1], 1.0, [0.0; 3]);
        let logits: Vec<f32> = vec![
            0.3, -0.2, 0.9, //
            1.0, 2.0, -1.0, //
            -0.5, -0.4, -0.6, //
            0.0, 0.1, 0.2, //
        ];
        let base = predict_grid(&logits, g, 3);
        let transformed: Vec<f32> = logits
            .chunks(3)
            .flat_map(|row| {
                let shift = row[0] * 0.7 - 1.3;
                row.iter().map(move |&x| 2.5 * x + shift)
            })
            .collect();
        let scaled = predict_grid(&transformed, g, 3);
        assert_eq!(base.raw(), scaled.raw());
    }

    #[test]
    fn residual_forecast_is_identity_at_init() {
        let config = tiny_config();
        let m = Model::new(config.clone(), 7);
        let graph = Graph::new();
        let bound = m.bind(&graph);
        let v = config.geometry.voxel_count();
        let values: Vec<f32> = (0..v * config.feature_dim)
            .map(|i| (i as f32 * 0.37).sin())
            .collect();
        let fg = FeatureGrid::new(
            config.geometry,
            config.feature_dim,
            graph.leaf(&[v, config.feature_dim], values.clone()),
        );
        let ego = EgoState::new(3.0, 0.5, 0.1, vec![[1.0, 0.0], [2.0, 0.0]], vec![true, true]);
        for horizon in 1..=5 {
            let outs = m.rollout(&graph, &bound, &fg, &[], horizon);
            assert_eq!(outs.len(), horizon);
            for out in &outs {
                let got = out.features.value();
                assert!(
                    got.iter()
                        .zip(&values)
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                    "rollout must be bit-identical to the input at zero init"
                );
            }
        }
        // Ego conditioning cannot break the identity either.
        let out = m.forecast_step(&graph, &bound, &fg, Some(&ego));
        assert_eq!(out.features.value(), values);
    }

    #[test]
    fn absent_ego_equals_zero_ego() {
        let config = tiny_config();
        let mut m = Model::new(config.clone(), 11);
        // Perturb the forecast output layer so the step is not an identity.
        let idx = m.store.index["forecast.w2"];
        for x in m.store.params[idx].data.iter_mut() {
            *x = 0.01;
        }
        let graph = Graph::new();
        let bound = m.bind(&graph);
        let v = config.geometry.voxel_count();
        let fg = FeatureGrid::new(
            config.geometry,
            config.feature_dim,
            graph.leaf(
                &[v, config.feature_dim],
                (0..v * config.feature_dim)
                    .map(|i| (i % 7) as f32 * 0.3)
                    .collect(),
            ),
        );
        let zero = EgoState::zeroed(config.ego_history);
        let a = m.forecast_step(&graph, &bound, &fg, None).features.value();
        let b = m
            .forecast_step(&graph, &bound, &fg, Some(&zero))
            .features
            .value();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_gradients_reach_module_through_all_steps() {
        let config = tiny_config();
        let mut m = Model::new(config.clone(), 13);
        let idx = m.store.index["forecast.w2"];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for x in m.store.params[idx].data.iter_mut() {
            *x = rng.gen_range(-0.05..0.05);
        }
        let graph = Graph::new();
        let bound = m.bind(&graph);
        let v = config.geometry.voxel_count();
        let fg = FeatureGrid::new(
            config.geometry,
            config.feature_dim,
            graph.leaf(
                &[v, config.feature_dim],
                (0..v * config.feature_dim)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            ),
        );
        let outs = m.rollout(&graph, &bound, &fg, &[], 3);
        let loss = outs[2].features.mul(&outs[2].features).sum_all();
        let bp = graph.backward(&loss);
        let grads = bound.collect_grads(&bp);
        for layer in ["forecast.w0", "forecast.w1", "forecast.w2"] {
            let g = grads.get(layer).expect("gradient reaches forecast layer");
            let norm: f32 = g.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!(norm.is_finite() && norm > 0.0, "{layer} grad norm {norm}");
        }
    }

    #[test]
    fn encoder_uniform_on_black_images_without_posenc() {
        let mut config = tiny_config();
        config.posenc_freqs_2d = 0;
        config.posenc_freqs_3d = 0;
        let m = Model::new(config.clone(), 17);
        let graph = Graph::new();
        let bound = m.bind(&graph);
        let cam = front_cam(8, 6);
        let fg = m
            .encode_scene(&graph, &bound, &[flat_image(8, 6, 0)], &[cam])
            .unwrap();
        let vals = fg.features.value();
        let first = &vals[..config.feature_dim];
        for row in vals.chunks(config.feature_dim) {
            assert_eq!(row, first, "all voxels must share one feature");
        }
    }

    #[test]
    fn voxel_behind_all_cameras_has_empty_blend() {
        let config = tiny_config();
        let cam = front_cam(8, 6);
        let offsets = [0usize];
        let entries = camera_blend_entries(&config.geometry, &[cam], &offsets);
        let g = config.geometry;
        let mut checked = 0;
        for lin in 0..g.voxel_count() {
            let [i, j, k] = g.index_to_ijk(lin);
            let c = g.voxel_center(i, j, k);
            if c[0] < -0.01 {
                assert!(entries[lin].is_empty(), "voxel at {c:?} should be unseen");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn encoder_gradient_reaches_pixel_mlp() {
        let config = tiny_config();
        let m = Model::new(config.clone(), 23);
        let graph = Graph::new();
        let bound = m.bind(&graph);
        let img = RgbImage {
            width: 8,
            height: 6,
            data: (0..8 * 6 * 3).map(|i| (i * 5 % 251) as u8).collect(),
        };
        let fg = m
            .encode_scene(&graph, &bound, &[img], &[front_cam(8, 6)])
            .unwrap();
        let loss = fg.features.mul(&fg.features).sum_all();
        let bp = graph.backward(&loss);
        let grads = bound.collect_grads(&bp);
        let g = grads.get("pixel.w0").expect("pixel mlp in graph");
        let norm: f32 = g.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(norm > 0.0 && norm.is_finite());
    }

    #[test]
    fn projection_ranges() {
        let config = tiny_config();
        let m = Model::new(config.clone(), 29);
        let graph = Graph::new();
        let bound = m.bind(&graph);
        let v = config.geometry.voxel_count();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fg = FeatureGrid::new(
            config.geometry,
            config.feature_dim,
            graph.leaf(
                &[v, config.feature_dim],
                (0..v * config.feature_dim)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect(),
            ),
        );
        let fields = m.project_attributes(&bound, &fg);
        assert!(fields.density.value().iter().all(|&x| x >= 0.0));
        assert!(fields
            .color
            .value()
            .iter()
            .all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(fields.semantics.shape(), &[v, config.num_semantic()]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        store.register("p", vec![3], vec![1.0, -2.0, 0.5]);
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), vec![0.0; 3]);
        store.adam_step(&grads, 0.1);
        assert_eq!(store.get("p").data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // With fresh state: m = (1-b1) g, v = (1-b2) g^2; bias correction
        // makes m_hat = g, v_hat = g^2, so the update is lr * g/(|g|+eps).
        let mut store = ParamStore::new();
        store.register("p", vec![1], vec![2.0]);
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), vec![0.5]);
        store.adam_step(&grads, 0.1);
        let expect = 2.0 - 0.1 * 0.5 / (0.5 + ADAM_EPS);
        assert!((store.get("p").data[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.register("w", vec![1], vec![3.0]);
        for _ in 0..2000 {
            let w = store.get("w").data[0];
            let mut grads = HashMap::new();
            grads.insert("w".to_string(), vec![2.0 * w]);
            store.adam_step(&grads, 1e-2);
        }
        let w = store.get("w").data[0];
        assert!(w * w < 1e-6, "w^2 = {}", w * w);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let config = tiny_config();
        let mut m = Model::new(config, 31);
        // Touch optimizer state so it is non-trivial.
        let mut grads = HashMap::new();
        grads.insert(
            "head.w0".to_string(),
            vec![0.01; m.store.get("head.w0").data.len()],
        );
        m.store.adam_step(&grads, 1e-3);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &m).unwrap();
        let restored = load_checkpoint(&p1).unwrap();
        assert_eq!(restored.config, m.config);
        assert_eq!(restored.store.adam_step_count, m.store.adam_step_count);
        for (a, b) in m.store.params().iter().zip(restored.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
            assert_eq!(a.adam_m, b.adam_m);
            assert_eq!(a.adam_v, b.adam_v);
        }
        save_checkpoint(&p2, &restored).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_bad_magic_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        fs::write(&p, b"NOTCKPT").unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn trajectory_zero_init_outputs_origin() {
        let config = tiny_config();
        let m = Model::new(config.clone(), 37);
        let graph = Graph::new();
        let bound = m.bind(&graph);
        let v = config.geometry.voxel_count();
        let fg = FeatureGrid::new(
            config.geometry,
            config.feature_dim,
            graph.leaf(&[v, config.feature_dim], vec![0.0; v * config.feature_dim]),
        );
        let wp = m.trajectory(&graph, &bound, &fg, None);
        assert_eq!(wp.shape(), &[3, 2]);
        assert!(wp.value().iter().all(|&x| x == 0.0));
        // Finite for random inputs as well.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fg2 = FeatureGrid::new(
            config.geometry,
            config.feature_dim,
            graph.leaf(
                &[v, config.feature_dim],
                (0..v * config.feature_dim)
                    .map(|_| rng.gen_range(-3.0..3.0))
                    .collect(),
            ),
        );
        let ego = EgoState::new(
            2.0,
            0.0,
            0.0,
            vec![[-1.0, 0.0], [-2.0, 0.0]],
            vec![true, true],
        );
        let wp2 = m.trajectory(&graph, &bound, &fg2, Some(&ego));
        assert!(wp2.value().iter().all(|x| x.is_finite()));
    }
}
