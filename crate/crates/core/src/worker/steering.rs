// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::ModelSpec;

/// Which positions of each forward call receive the steering vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringPositions {
    #[default]
    All,
    Last,
}

/// Adds `alpha * vector` to the residual-stream output of `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub layer: usize,
    pub vector: Vec<f32>,
    pub alpha: f32,
    #[serde(default)]
    pub positions: SteeringPositions,
}

impl SteeringPlan {
    pub fn new(layer: usize, vector: Vec<f32>, alpha: f32) -> Self {
        Self {
            layer,
            vector,
            alpha,
            positions: SteeringPositions::All,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.layer >= spec.n_layers {
            return Err(Error::UnknownLayer {
                layer: self.layer,
                n_layers: spec.n_layers,
            });
        }
        if self.vector.len() != spec.d_model {
            return Err(Error::Steering(format!(
                "vector has {} entries, model d_model is {}",
                self.vector.len(),
                spec.d_model
            )));
        }
        if !self.alpha.is_finite() || self.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Steering("alpha and vector entries must be finite".into()));
        }
        Ok(())
    }

    /// Applies the plan to a `[n_new, d_model]` hidden block in place.
    pub fn apply(&self, n_new: usize, hidden: &mut [f32]) {
        let d = self.vector.len();
        let rows = match self.positions {
            SteeringPositions::All => 0..n_new,
            SteeringPositions::Last => n_new.saturating_sub(1)..n_new,
        };
        for r in rows {
            for (h, v) in hidden[r * d..(r + 1) * d].iter_mut().zip(&self.vector) {
                *h += self.alpha * v;
            }
        }
    }
}
