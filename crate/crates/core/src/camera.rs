//! Pinhole camera model. Camera frame is the usual +z forward, +x right,
//! +y down; the extrinsic maps camera coordinates into the ego frame.

use crate::math::{self, Vec3};
use crate::pose::Pose;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera-to-ego.
    #[serde(with = "pose_rows")]
    pub extrinsic: Pose,
}

mod pose_rows {
    use super::Pose;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        p.to_rows_3x4().to_vec().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        let rows: [f64; 12] = v
            .try_into()
            .map_err(|_| serde::de::Error::custom("pose must be 12 row-major values"))?;
        Ok(Pose::from_rows_3x4(&rows))
    }
}

/// Minimum camera-frame depth considered in front of the camera.
const MIN_DEPTH: f64 = 1e-6;

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32, extrinsic: Pose) -> CameraModel {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(cx > 0.0 && cx < width as f64, "cx out of image");
        assert!(cy > 0.0 && cy < height as f64, "cy out of image");
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        }
    }

    /// Symmetric pinhole from a horizontal field of view.
    pub fn from_fov(width: u32, height: u32, fov_x_rad: f64, extrinsic: Pose) -> CameraModel {
        let fx = width as f64 / (2.0 * (fov_x_rad / 2.0).tan());
        CameraModel::new(
            fx,
            fx,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            extrinsic,
        )
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> Vec3 {
        self.extrinsic.translation
    }

    /// Ego-frame point to pixel coordinates; None when behind the camera.
    /// The pixel may lie outside the image — combine with `in_image`.
    pub fn project(&self, p_ego: Vec3) -> Option<[f64; 2]> {
        let pc = self.extrinsic.inverse().transform_point(p_ego);
        if pc[2] < MIN_DEPTH {
            return None;
        }
        Some([
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
        ])
    }

    pub fn in_image(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] < self.width as f64 && uv[1] >= 0.0 && uv[1] < self.height as f64
    }

    /// Pixel plus camera-frame depth (z, not range) back to the ego frame.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let pc = [(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z];
        self.extrinsic.transform_point(pc)
    }

    /// Unit ego-frame direction through a pixel.
    pub fn pixel_dir(&self, u: f64, v: f64) -> Vec3 {
        let dc = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        math::normalize(self.extrinsic.transform_dir(dc))
    }

    /// Forward (+z) axis expressed in the ego frame.
    pub fn forward(&self) -> Vec3 {
        self.extrinsic.transform_dir([0.0, 0.0, 1.0])
    }
}

/// Extrinsic that points the camera along an ego-frame yaw heading
/// (0 = +x). Camera +z maps to the heading, +x to the ego right, +y down.
pub fn extrinsic_facing(position: Vec3, yaw: f64) -> Pose {
    extrinsic_facing_pitched(position, yaw, 0.0)
}

/// Like `extrinsic_facing` but tilted down by `pitch` radians, keeping the
/// camera x axis horizontal.
pub fn extrinsic_facing_pitched(position: Vec3, yaw: f64, pitch: f64) -> Pose {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let fwd = [cy * cp, sy * cp, -sp];
    let right = [sy, -cy, 0.0];
    let down = math::cross(fwd, right);
    // Columns are the camera axes (x right, y down, z forward) in ego coords.
    let rotation = [
        [right[0], down[0], fwd[0]],
        [right[1], down[1], fwd[1]],
        [right[2], down[2], fwd[2]],
    ];
    Pose::new(rotation, position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn forward_camera_axes() {
        let cam = CameraModel::from_fov(64, 48, 90f64.to_radians(), extrinsic_facing([1.0, 0.0, 0.5], 0.0));
        let f = cam.forward();
        assert!((f[0] - 1.0).abs() < 1e-12 && f[1].abs() < 1e-12 && f[2].abs() < 1e-12);
        // Principal point looks straight ahead.
        let d = cam.pixel_dir(cam.cx, cam.cy);
        assert!((d[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = StdRng::seed_from_u64(5);
        let cam = CameraModel::from_fov(
            128,
            96,
            70f64.to_radians(),
            extrinsic_facing([0.3, -0.1, 0.4], 0.7),
        );
        for _ in 0..200 {
            let u = rng.gen_range(0.0..128.0);
            let v = rng.gen_range(0.0..96.0);
            let z = rng.gen_range(0.5..30.0);
            let p = cam.unproject(u, v, z);
            let uv = cam.project(p).expect("in front");
            assert!((uv[0] - u).abs() < 1e-6 && (uv[1] - v).abs() < 1e-6);
            // Round-trip the world point as well.
            let p2 = cam.unproject(uv[0], uv[1], z);
            for a in 0..3 {
                assert!((p2[a] - p[a]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn behind_camera_rejected() {
        let cam = CameraModel::from_fov(64, 48, 90f64.to_radians(), extrinsic_facing([0.0; 3], 0.0));
        assert!(cam.project([-1.0, 0.0, 0.0]).is_none());
    }
}
