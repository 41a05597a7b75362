//! Rigid SE(3) poses. Ego poses are ego-to-world, camera extrinsics are
//! camera-to-ego; composing and inverting these is how rays and grids move
//! between frames.

use crate::math::{self, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Orthonormal, det +1.
    pub rotation: Mat3,
    /// Meters.
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Pose {
        Pose {
            rotation: math::IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Pose {
        Pose {
            rotation,
            translation,
        }
    }

    /// Planar pose: position plus heading about +z.
    pub fn from_xy_yaw(x: f64, y: f64, yaw: f64) -> Pose {
        Pose {
            rotation: math::rot_z(yaw),
            translation: [x, y, 0.0],
        }
    }

    /// `self` applied after `other`: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: math::mat_mul(&self.rotation, &other.rotation),
            translation: math::add(
                math::mat_vec(&self.rotation, other.translation),
                self.translation,
            ),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = math::transpose(&self.rotation);
        Pose {
            rotation: rt,
            translation: math::scale(math::mat_vec(&rt, self.translation), -1.0),
        }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation, p), self.translation)
    }

    /// Rotates without translating; directions stay unit length.
    pub fn transform_dir(&self, d: Vec3) -> Vec3 {
        math::mat_vec(&self.rotation, d)
    }

    /// Max deviation from orthonormality and unit determinant.
    pub fn rigidity_error(&self) -> f64 {
        let rt_r = math::mat_mul(&math::transpose(&self.rotation), &self.rotation);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((rt_r[i][j] - target).abs());
            }
        }
        err.max((math::determinant(&self.rotation) - 1.0).abs())
    }

    /// Row-major 3x4 [R | t] flattening used in scene.json.
    pub fn to_rows_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 4 + j] = self.rotation[i][j];
            }
            out[i * 4 + 3] = self.translation[i];
        }
        out
    }

    pub fn from_rows_3x4(rows: &[f64; 12]) -> Pose {
        let mut rotation = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = rows[i * 4 + j];
            }
            translation[i] = rows[i * 4 + 3];
        }
        Pose {
            rotation,
            translation,
        }
    }
}
