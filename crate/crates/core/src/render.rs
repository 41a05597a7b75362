//! Differentiable volume rendering of voxel attribute fields.
//!
//! Fields are evaluated by trilinear interpolation (zero outside the grid)
//! and composited along ray samples with transmittance weights
//! w_m = T_m (1 - exp(-sigma_m delta_m)), T_m = exp(-sum_{p<m} sigma_p delta_p).
//! A pixel accumulates weighted depth, semantic logits, color, and total
//! opacity. The backward pass is hand-written and accumulates field
//! gradients in a fixed ray order, so deterministic runs are bit-identical;
//! a chunked parallel mode is available for the forward pass where each ray
//! writes only its own output slot.
//!
//! All inner accumulations run in f64 and are stored back as f32.

use crate::autodiff::{Grads, Op, Tensor, TensorId, Values};
use crate::grid::GridGeometry;
use crate::math::Vec3;
use crate::ray::{RayBundle, RaySamples};
use rayon::prelude::*;

/// Guard on sigma*delta before exponentiation.
const EXP_CLAMP: f64 = 80.0;

/// The renderable scene representation: per-voxel density (non-negative),
/// semantic logits, and color, sharing one lattice. All three are
/// Tensor-backed so rendering can participate in a gradient graph.
#[derive(Debug, Clone)]
pub struct AttributeFields {
    pub geometry: GridGeometry,
    /// [V] non-negative densities.
    pub density: Tensor,
    /// [V, num_semantic] logits.
    pub semantics: Tensor,
    /// [V, 3] colors in [0,1].
    pub color: Tensor,
}

impl AttributeFields {
    pub fn new(geometry: GridGeometry, density: Tensor, semantics: Tensor, color: Tensor) -> AttributeFields {
        let v = geometry.voxel_count();
        assert_eq!(density.numel(), v, "density is per-voxel scalar");
        assert_eq!(semantics.shape()[0], v, "semantics rows");
        assert_eq!(color.shape(), &[v, 3], "color is per-voxel RGB");
        AttributeFields {
            geometry,
            density,
            semantics,
            color,
        }
    }

    pub fn num_semantic(&self) -> usize {
        self.semantics.shape()[1]
    }
}

/// Rendered quantities of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    pub depth: f32,
    pub semantics: Vec<f32>,
    pub color: [f32; 3],
    /// Accumulated weight sum in [0,1].
    pub opacity: f32,
}

/// Trilinear interpolation stencil: up to 8 (voxel index, weight) pairs.
/// Corners outside the lattice are dropped, which realizes the
/// zero-outside-the-grid convention.
pub fn trilinear_stencil(geometry: &GridGeometry, p: Vec3) -> Vec<(usize, f64)> {
    let (lo, hi) = geometry.bounds();
    for a in 0..3 {
        if p[a] < lo[a] || p[a] >= hi[a] {
            return Vec::new();
        }
    }
    let o = geometry.origin_f64();
    let r = geometry.res();
    let mut base = [0i64; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let q = (p[a] - o[a]) / r - 0.5; // voxel-center coordinates
        let f = q.floor();
        base[a] = f as i64;
        frac[a] = q - f;
    }
    let dims = [
        geometry.dims[0] as i64,
        geometry.dims[1] as i64,
        geometry.dims[2] as i64,
    ];
    let mut out = Vec::with_capacity(8);
    for corner in 0..8u32 {
        let mut idx = [0i64; 3];
        let mut w = 1.0f64;
        for a in 0..3 {
            if corner >> a & 1 == 0 {
                idx[a] = base[a];
                w *= 1.0 - frac[a];
            } else {
                idx[a] = base[a] + 1;
                w *= frac[a];
            }
        }
        if w == 0.0 {
            continue;
        }
        if idx.iter().zip(&dims).any(|(&i, &d)| i < 0 || i >= d) {
            continue;
        }
        let lin = geometry.linear_index(idx[0] as u32, idx[1] as u32, idx[2] as u32);
        out.push((lin, w));
    }
    out
}

/// Evaluates (density, semantic logits, color) at a point.
pub fn field_at(fields: &AttributeFields, p: Vec3) -> (f32, Vec<f32>, [f32; 3]) {
    let ds = fields.num_semantic();
    let stencil = trilinear_stencil(&fields.geometry, p);
    let density = fields.density.value();
    let semantics = fields.semantics.value();
    let color = fields.color.value();
    let mut sigma = 0.0f64;
    let mut sem = vec![0.0f64; ds];
    let mut col = [0.0f64; 3];
    for &(v, w) in &stencil {
        sigma += w * density[v] as f64;
        for c in 0..ds {
            sem[c] += w * semantics[v * ds + c] as f64;
        }
        for c in 0..3 {
            col[c] += w * color[v * 3 + c] as f64;
        }
    }
    (
        sigma as f32,
        sem.iter().map(|&x| x as f32).collect(),
        [col[0] as f32, col[1] as f32, col[2] as f32],
    )
}

/// Per-sample forward state kept for the backward pass.
struct SampleRecord {
    stencil: Vec<(usize, f64)>,
    sem: Vec<f64>,
    col: [f64; 3],
    transmittance: f64, // T at this sample
    alpha: f64,         // 1 - exp(-sigma*delta)
    weight: f64,
}

fn forward_ray_records(
    geometry: &GridGeometry,
    density: &[f32],
    semantics: &[f32],
    color: &[f32],
    ds: usize,
    samples: &RaySamples,
) -> Vec<SampleRecord> {
    let mut records = Vec::with_capacity(samples.depths.len());
    let mut accum = 0.0f64; // sum sigma*delta so far
    for (m, &u) in samples.depths.iter().enumerate() {
        let p = samples.ray.point_at(u);
        let stencil = trilinear_stencil(geometry, p);
        let mut sigma = 0.0f64;
        let mut sem = vec![0.0f64; ds];
        let mut col = [0.0f64; 3];
        for &(v, w) in &stencil {
            sigma += w * density[v] as f64;
            for c in 0..ds {
                sem[c] += w * semantics[v * ds + c] as f64;
            }
            for c in 0..3 {
                col[c] += w * color[v * 3 + c] as f64;
            }
        }
        let delta = samples.deltas[m];
        let transmittance = (-accum.min(EXP_CLAMP)).exp();
        let alpha = 1.0 - (-(sigma * delta).min(EXP_CLAMP)).exp();
        let weight = transmittance * alpha;
        accum += sigma * delta;
        records.push(SampleRecord {
            stencil,
            sem,
            col,
            transmittance,
            alpha,
            weight,
        });
    }
    records
}

fn composite(records: &[SampleRecord], samples: &RaySamples, ds: usize) -> RenderedPixel {
    let mut depth = 0.0f64;
    let mut sem = vec![0.0f64; ds];
    let mut col = [0.0f64; 3];
    let mut opacity = 0.0f64;
    for (rec, &u) in records.iter().zip(&samples.depths) {
        depth += rec.weight * u;
        for c in 0..ds {
            sem[c] += rec.weight * rec.sem[c];
        }
        for c in 0..3 {
            col[c] += rec.weight * rec.col[c];
        }
        opacity += rec.weight;
    }
    RenderedPixel {
        depth: depth as f32,
        semantics: sem.iter().map(|&x| x as f32).collect(),
        color: [col[0] as f32, col[1] as f32, col[2] as f32],
        opacity: opacity as f32,
    }
}

/// Renders a single ray.
pub fn render_ray(fields: &AttributeFields, samples: &RaySamples) -> RenderedPixel {
    let ds = fields.num_semantic();
    let density = fields.density.value();
    let semantics = fields.semantics.value();
    let color = fields.color.value();
    let records = forward_ray_records(&fields.geometry, &density, &semantics, &color, ds, samples);
    composite(&records, samples, ds)
}

/// Renders every ray of a bundle, order-stable. Rays are independent, so
/// the parallel path writes disjoint slots and matches the serial one.
pub fn render_bundle(fields: &AttributeFields, bundle: &RayBundle, parallel: bool) -> Vec<RenderedPixel> {
    let ds = fields.num_semantic();
    let geometry = fields.geometry;
    let density = fields.density.value();
    let semantics = fields.semantics.value();
    let color = fields.color.value();
    let render_one = move |s: &RaySamples| {
        let records = forward_ray_records(&geometry, &density, &semantics, &color, ds, s);
        composite(&records, s, ds)
    };
    if parallel {
        bundle.rays.par_iter().map(render_one).collect()
    } else {
        bundle.rays.iter().map(render_one).collect()
    }
}

/// Gradients of a scalar loss with respect to the three fields given
/// upstream gradients on each rendered pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub density: Vec<f32>,
    pub semantics: Vec<f32>,
    pub color: Vec<f32>,
}

/// Upstream gradient on one rendered pixel.
#[derive(Debug, Clone)]
pub struct PixelGrad {
    pub depth: f32,
    pub semantics: Vec<f32>,
    pub color: [f32; 3],
    pub opacity: f32,
}

impl PixelGrad {
    pub fn zero(ds: usize) -> PixelGrad {
        PixelGrad {
            depth: 0.0,
            semantics: vec![0.0; ds],
            color: [0.0; 3],
            opacity: 0.0,
        }
    }
}

/// Exact reverse-mode gradients of the compositing + interpolation chain.
///
/// For sample m with upstream contribution G_m = g_d u_m + <g_s, s_m> +
/// <g_c, c_m> + g_o, the density gradient is
///   dL/dsigma_k = delta_k (G_k T_{k+1} - sum_{m>k} G_m w_m),
/// and semantic/color gradients are w_m g_s / w_m g_c, all scattered back
/// through the trilinear weights.
pub fn render_backward(
    fields: &AttributeFields,
    rays: &[RaySamples],
    upstream: &[PixelGrad],
) -> FieldGrads {
    assert_eq!(rays.len(), upstream.len(), "one upstream grad per ray");
    let ds = fields.num_semantic();
    let v = fields.geometry.voxel_count();
    let density = fields.density.value();
    let semantics = fields.semantics.value();
    let color = fields.color.value();

    let mut grads = FieldGrads {
        density: vec![0.0; v],
        semantics: vec![0.0; v * ds],
        color: vec![0.0; v * 3],
    };
    let mut d_density = vec![0.0f64; v];
    let mut d_semantics = vec![0.0f64; v * ds];
    let mut d_color = vec![0.0f64; v * 3];

    for (samples, up) in rays.iter().zip(upstream) {
        accumulate_ray_backward(
            &fields.geometry,
            &density,
            &semantics,
            &color,
            ds,
            samples,
            up,
            &mut d_density,
            &mut d_semantics,
            &mut d_color,
        );
    }
    for (dst, src) in grads.density.iter_mut().zip(&d_density) {
        *dst = *src as f32;
    }
    for (dst, src) in grads.semantics.iter_mut().zip(&d_semantics) {
        *dst = *src as f32;
    }
    for (dst, src) in grads.color.iter_mut().zip(&d_color) {
        *dst = *src as f32;
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn accumulate_ray_backward(
    geometry: &GridGeometry,
    density: &[f32],
    semantics: &[f32],
    color: &[f32],
    ds: usize,
    samples: &RaySamples,
    up: &PixelGrad,
    d_density: &mut [f64],
    d_semantics: &mut [f64],
    d_color: &mut [f64],
) {
    let records = forward_ray_records(geometry, density, semantics, color, ds, samples);
    let m_count = records.len();

    // G_m: sensitivity of the loss to w_m.
    let mut g = vec![0.0f64; m_count];
    for (m, rec) in records.iter().enumerate() {
        let mut acc = up.depth as f64 * samples.depths[m] + up.opacity as f64;
        for c in 0..ds {
            acc += up.semantics[c] as f64 * rec.sem[c];
        }
        for c in 0..3 {
            acc += up.color[c] as f64 * rec.col[c];
        }
        g[m] = acc;
    }

    // suffix[k] = sum_{m>k} G_m w_m
    let mut suffix = vec![0.0f64; m_count];
    let mut acc = 0.0f64;
    for k in (0..m_count).rev() {
        suffix[k] = acc;
        acc += g[k] * records[k].weight;
    }

    for (k, rec) in records.iter().enumerate() {
        let delta = samples.deltas[k];
        // T_{k+1} = T_k * (1 - alpha_k). Where the exp clamp saturated the
        // forward value, the true local derivative is ~0 as well.
        let t_next = rec.transmittance * (1.0 - rec.alpha);
        let d_sigma_sample = delta * (g[k] * t_next - suffix[k]);
        let w = rec.weight;
        for &(vox, tw) in &rec.stencil {
            d_density[vox] += tw * d_sigma_sample;
            for c in 0..ds {
                d_semantics[vox * ds + c] += tw * w * up.semantics[c] as f64;
            }
            for c in 0..3 {
                d_color[vox * 3 + c] += tw * w * up.color[c] as f64;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Autodiff bridge
// ---------------------------------------------------------------------------

/// Fused graph op: renders a whole bundle from the three field tensors.
/// Output rows are [depth | semantics .. | color r g b | opacity].
struct RenderBundleOp {
    density: TensorId,
    semantics: TensorId,
    color: TensorId,
    geometry: GridGeometry,
    rays: Vec<RaySamples>,
    ds: usize,
}

impl Op for RenderBundleOp {
    fn name(&self) -> &'static str {
        "render_bundle"
    }

    fn parents(&self) -> Vec<TensorId> {
        vec![self.density, self.semantics, self.color]
    }

    fn backward(&self, upstream: &[f32], values: &Values, grads: &mut Grads) {
        let ds = self.ds;
        let cols = 1 + ds + 3 + 1;
        let density = values.value(self.density).to_vec();
        let semantics = values.value(self.semantics).to_vec();
        let color = values.value(self.color).to_vec();
        let v = self.geometry.voxel_count();

        let mut d_density = vec![0.0f64; v];
        let mut d_semantics = vec![0.0f64; v * ds];
        let mut d_color = vec![0.0f64; v * 3];
        for (r, samples) in self.rays.iter().enumerate() {
            let row = &upstream[r * cols..(r + 1) * cols];
            let up = PixelGrad {
                depth: row[0],
                semantics: row[1..1 + ds].to_vec(),
                color: [row[1 + ds], row[2 + ds], row[3 + ds]],
                opacity: row[cols - 1],
            };
            accumulate_ray_backward(
                &self.geometry,
                &density,
                &semantics,
                &color,
                ds,
                samples,
                &up,
                &mut d_density,
                &mut d_semantics,
                &mut d_color,
            );
        }
        if let Some(buf) = grads.buf_mut(self.density) {
            for (b, d) in buf.iter_mut().zip(&d_density) {
                *b += *d as f32;
            }
        }
        if let Some(buf) = grads.buf_mut(self.semantics) {
            for (b, d) in buf.iter_mut().zip(&d_semantics) {
                *b += *d as f32;
            }
        }
        if let Some(buf) = grads.buf_mut(self.color) {
            for (b, d) in buf.iter_mut().zip(&d_color) {
                *b += *d as f32;
            }
        }
    }
}

/// Packed rendered outputs of a bundle as a graph node.
pub struct RenderedBundle {
    /// [R, 1 + ds + 3 + 1] packed tensor.
    pub packed: Tensor,
    pub ds: usize,
}

impl RenderedBundle {
    pub fn depth(&self) -> Tensor {
        self.packed.slice_cols(0, 1)
    }

    pub fn semantics(&self) -> Tensor {
        self.packed.slice_cols(1, 1 + self.ds)
    }

    pub fn color(&self) -> Tensor {
        self.packed.slice_cols(1 + self.ds, 4 + self.ds)
    }

    pub fn opacity(&self) -> Tensor {
        self.packed.slice_cols(4 + self.ds, 5 + self.ds)
    }
}

/// Differentiable rendering of a bundle: forward values match
/// `render_bundle`, backward matches `render_backward`.
pub fn render_bundle_graph(fields: &AttributeFields, bundle: &RayBundle, parallel: bool) -> RenderedBundle {
    let ds = fields.num_semantic();
    let pixels = render_bundle(fields, bundle, parallel);
    let cols = 1 + ds + 3 + 1;
    let mut packed = Vec::with_capacity(pixels.len() * cols);
    for p in &pixels {
        packed.push(p.depth);
        packed.extend_from_slice(&p.semantics);
        packed.extend_from_slice(&p.color);
        packed.push(p.opacity);
    }
    let graph = fields.density.graph().clone();
    let tensor = graph.custom(
        vec![pixels.len(), cols],
        packed,
        Box::new(RenderBundleOp {
            density: fields.density.id(),
            semantics: fields.semantics.id(),
            color: fields.color.id(),
            geometry: fields.geometry,
            rays: bundle.rays.clone(),
            ds,
        }),
    );
    RenderedBundle { packed: tensor, ds }
}
