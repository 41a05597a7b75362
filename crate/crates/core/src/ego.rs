//! Ego kinematic state: the optional conditioning input of the forecasting
//! module and the trajectory head.

use serde::{Deserialize, Serialize};

/// Speed/acceleration/yaw-rate plus a fixed-length history of past 2D
/// waypoints in the current ego frame. Missing history entries are
/// zero-padded and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub speed: f64,
    pub acceleration: f64,
    pub yaw_rate: f64,
    pub history: Vec<[f64; 2]>,
    pub history_valid: Vec<bool>,
}

impl EgoState {
    pub fn zeroed(k: usize) -> EgoState {
        EgoState {
            speed: 0.0,
            acceleration: 0.0,
            yaw_rate: 0.0,
            history: vec![[0.0, 0.0]; k],
            history_valid: vec![false; k],
        }
    }

    pub fn new(
        speed: f64,
        acceleration: f64,
        yaw_rate: f64,
        history: Vec<[f64; 2]>,
        history_valid: Vec<bool>,
    ) -> EgoState {
        assert_eq!(history.len(), history_valid.len(), "history flags length");
        EgoState {
            speed,
            acceleration,
            yaw_rate,
            history,
            history_valid,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Flat input vector for the state embedding MLP: 3 kinematic scalars
    /// followed by the history waypoints.
    pub fn feature_vector(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(3 + 2 * self.history.len());
        out.push(self.speed as f32);
        out.push(self.acceleration as f32);
        out.push(self.yaw_rate as f32);
        for w in &self.history {
            out.push(w[0] as f32);
            out.push(w[1] as f32);
        }
        out
    }

    pub fn feature_len(k: usize) -> usize {
        3 + 2 * k
    }
}
