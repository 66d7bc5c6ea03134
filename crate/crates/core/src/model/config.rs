use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the encoder output of a window is reduced to one frame vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Output at the newest window position (the current frame).
    #[default]
    Last,
    /// Mean over all window positions.
    Mean,
}

/// Hyperparameters of the head. Every parameter shape derives from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the per-frame backbone features.
    pub input_dim: usize,
    pub d_model: usize,
    /// Stacked encoder layers.
    pub layers: usize,
    pub heads: usize,
    /// Frames preceding the current one in each encoder window (window length is `lookback + 1`).
    pub lookback: usize,
    /// Temporal neighbors each frame attends to in the frame graph.
    pub graph_neighbors: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub positional_encoding: bool,
    pub pooling: Pooling,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 768,
            d_model: 256,
            layers: 2,
            heads: 4,
            lookback: 15,
            graph_neighbors: 20,
            hidden_dim: 128,
            classes: 2,
            positional_encoding: true,
            pooling: Pooling::Last,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".to_string());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            problems.push(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.graph_neighbors == 0 {
            problems.push("graph_neighbors must be at least 1".to_string());
        }
        if self.hidden_dim == 0 {
            problems.push("hidden_dim must be positive".to_string());
        }
        if self.classes != 2 {
            problems.push(format!("classes must be 2, got {}", self.classes));
        }
        if !(self.layer_norm_eps > 0.0) {
            problems.push("layer_norm_eps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn window_len(&self) -> usize {
        self.lookback + 1
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }
}
