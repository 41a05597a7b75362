//! Voxel lattices: geometric registration plus dense per-voxel category
//! storage. Grids live in the ego frame of their timestamp; storage is
//! row-major with x fastest.

use crate::math::Vec3;
use serde::{Deserialize, Serialize};

/// Placement of a dense voxel lattice in the ego frame.
///
/// `resolution` and `origin` are kept as f32 so that the on-disk OCCG form
/// round-trips bit-exactly; all geometry math goes through the f64 accessors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// Voxel counts (X, Y, Z).
    pub dims: [u32; 3],
    /// Meters per voxel.
    pub resolution: f32,
    /// Minimum corner of the lattice, meters.
    pub origin: [f32; 3],
}

impl GridGeometry {
    pub fn new(dims: [u32; 3], resolution: f32, origin: [f32; 3]) -> GridGeometry {
        assert!(
            dims.iter().all(|&d| d >= 1),
            "grid dims must be >= 1, got {dims:?}"
        );
        assert!(resolution > 0.0, "resolution must be positive");
        GridGeometry {
            dims,
            resolution,
            origin,
        }
    }

    /// Occ3D-nuScenes layout: 200x200x16 at 0.4 m, origin (-40,-40,-1).
    pub fn reference_config() -> GridGeometry {
        GridGeometry::new([200, 200, 16], 0.4, [-40.0, -40.0, -1.0])
    }

    /// Small lattice for desk-scale experiments: 32x32x8 at 0.5 m.
    pub fn desk_config() -> GridGeometry {
        GridGeometry::new([32, 32, 8], 0.5, [-8.0, -8.0, -1.0])
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] as usize * self.dims[1] as usize * self.dims[2] as usize
    }

    pub fn res(&self) -> f64 {
        self.resolution as f64
    }

    pub fn origin_f64(&self) -> Vec3 {
        [
            self.origin[0] as f64,
            self.origin[1] as f64,
            self.origin[2] as f64,
        ]
    }

    /// Extent along each axis in meters.
    pub fn extent(&self) -> Vec3 {
        [
            self.dims[0] as f64 * self.res(),
            self.dims[1] as f64 * self.res(),
            self.dims[2] as f64 * self.res(),
        ]
    }

    /// Length of the main diagonal — the default far bound for rays.
    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn voxel_center(&self, i: u32, j: u32, k: u32) -> Vec3 {
        let o = self.origin_f64();
        let r = self.res();
        [
            o[0] + r * (i as f64 + 0.5),
            o[1] + r * (j as f64 + 0.5),
            o[2] + r * (k as f64 + 0.5),
        ]
    }

    /// Floor-based binning, half-open: a point on the max face is outside.
    ///
    /// Coordinates within 1e-4 voxel of a face are snapped onto it first,
    /// so boundaries that are exact in real arithmetic keep their bin even
    /// though resolution/origin are stored as f32.
    pub fn world_to_voxel(&self, p: Vec3) -> Option<[u32; 3]> {
        let o = self.origin_f64();
        let r = self.res();
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let mut q = (p[a] - o[a]) / r;
            let snapped = q.round();
            if (q - snapped).abs() < 1e-4 {
                q = snapped;
            }
            if q < 0.0 {
                return None;
            }
            let i = q.floor();
            if i >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = i as u32;
        }
        Some(idx)
    }

    /// Row-major linear index, x fastest.
    pub fn linear_index(&self, i: u32, j: u32, k: u32) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        (k as usize * self.dims[1] as usize + j as usize) * self.dims[0] as usize + i as usize
    }

    pub fn index_to_ijk(&self, lin: usize) -> [u32; 3] {
        let x = self.dims[0] as usize;
        let y = self.dims[1] as usize;
        let i = lin % x;
        let j = (lin / x) % y;
        let k = lin / (x * y);
        [i as u32, j as u32, k as u32]
    }

    /// World-space box, min and max corners.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let o = self.origin_f64();
        let e = self.extent();
        (o, [o[0] + e[0], o[1] + e[1], o[2] + e[2]])
    }
}

/// Dense per-voxel semantic categories. Category `num_categories - 1` is
/// "free"; category 0 is "others".
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    pub geometry: GridGeometry,
    pub num_categories: usize,
    categories: Vec<u8>,
}

impl SemanticGrid {
    /// All-free grid.
    pub fn new_free(geometry: GridGeometry, num_categories: usize) -> SemanticGrid {
        assert!(
            (2..=256).contains(&num_categories),
            "need at least an occupied and a free category, at most 256"
        );
        let free = (num_categories - 1) as u8;
        SemanticGrid {
            geometry,
            num_categories,
            categories: vec![free; geometry.voxel_count()],
        }
    }

    pub fn from_raw(
        geometry: GridGeometry,
        num_categories: usize,
        categories: Vec<u8>,
    ) -> SemanticGrid {
        assert_eq!(categories.len(), geometry.voxel_count(), "payload size");
        assert!(
            categories.iter().all(|&c| (c as usize) < num_categories),
            "category id out of range"
        );
        SemanticGrid {
            geometry,
            num_categories,
            categories,
        }
    }

    pub fn free_category(&self) -> u8 {
        (self.num_categories - 1) as u8
    }

    pub fn get(&self, i: u32, j: u32, k: u32) -> u8 {
        self.categories[self.geometry.linear_index(i, j, k)]
    }

    pub fn set(&mut self, i: u32, j: u32, k: u32, cat: u8) {
        assert!((cat as usize) < self.num_categories);
        let idx = self.geometry.linear_index(i, j, k);
        self.categories[idx] = cat;
    }

    pub fn raw(&self) -> &[u8] {
        &self.categories
    }

    pub fn is_occupied(&self, i: u32, j: u32, k: u32) -> bool {
        self.get(i, j, k) != self.free_category()
    }

    pub fn occupied_count(&self) -> usize {
        let free = self.free_category();
        self.categories.iter().filter(|&&c| c != free).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_voxel_binning() {
        let g = GridGeometry::new([4, 4, 4], 0.4, [1.0, 2.0, 3.0]);
        let p = [1.0 + 0.2, 2.0 + 0.2, 3.0 + 0.2];
        assert_eq!(g.world_to_voxel(p), Some([0, 0, 0]));
    }

    #[test]
    fn max_corner_is_outside() {
        let g = GridGeometry::new([4, 4, 4], 0.5, [0.0, 0.0, 0.0]);
        assert_eq!(g.world_to_voxel([2.0, 2.0, 2.0]), None);
        assert_eq!(g.world_to_voxel([2.0 - 1e-3, 2.0 - 1e-3, 2.0 - 1e-3]), Some([3, 3, 3]));
        // A face point belongs to the upper bin (half-open convention).
        assert_eq!(g.world_to_voxel([1.0, 1.0, 1.0]), Some([2, 2, 2]));
    }

    #[test]
    fn reference_config_ego_center_bin() {
        let g = GridGeometry::reference_config();
        assert_eq!(g.world_to_voxel([0.0, 0.0, 0.0]), Some([100, 100, 2]));
    }

    #[test]
    fn voxel_center_round_trips() {
        let g = GridGeometry::new([7, 5, 3], 0.35, [-1.0, 0.5, -2.0]);
        for k in 0..3 {
            for j in 0..5 {
                for i in 0..7 {
                    let c = g.voxel_center(i, j, k);
                    assert_eq!(g.world_to_voxel(c), Some([i, j, k]), "center of {i},{j},{k}");
                }
            }
        }
    }

    #[test]
    fn linear_index_is_x_fastest() {
        let g = GridGeometry::new([3, 4, 5], 1.0, [0.0; 3]);
        assert_eq!(g.linear_index(0, 0, 0), 0);
        assert_eq!(g.linear_index(1, 0, 0), 1);
        assert_eq!(g.linear_index(0, 1, 0), 3);
        assert_eq!(g.linear_index(0, 0, 1), 12);
        for lin in 0..g.voxel_count() {
            let [i, j, k] = g.index_to_ijk(lin);
            assert_eq!(g.linear_index(i, j, k), lin);
        }
    }

    #[test]
    fn grid_set_get() {
        let mut grid = SemanticGrid::new_free(GridGeometry::new([2, 2, 2], 1.0, [0.0; 3]), 9);
        assert_eq!(grid.free_category(), 8);
        assert_eq!(grid.occupied_count(), 0);
        grid.set(1, 0, 1, 3);
        assert_eq!(grid.get(1, 0, 1), 3);
        assert_eq!(grid.occupied_count(), 1);
    }
}
