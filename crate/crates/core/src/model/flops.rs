use serde::Serialize;

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// FLOPs of an `m x k` by `k x n` product, counted as one multiply and one
/// add per inner-product term.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> f64 {
    2.0 * m as f64 * k as f64 * n as f64
}

/// Per-frame FLOPs of the head, split by stage. Backbone cost is excluded.
///
/// Only matrix products are counted (projections, attention scores and
/// weighted sums); bias adds, normalization and activations are ignored.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopEstimate {
    /// Input projection of the `u+1` window rows.
    pub projection: f64,
    /// All encoder layers over the `u+1` window tokens.
    pub encoder: f64,
    /// Graph transformer work for the new node, with the neighbor count
    /// averaged over a clip of `frames` frames.
    pub graph: f64,
    pub classifier: f64,
    pub frames: usize,
}

impl FlopEstimate {
    pub fn total(&self) -> f64 {
        self.projection + self.encoder + self.graph + self.classifier
    }

    pub fn stages(&self) -> [(&'static str, f64); 4] {
        [
            ("projection", self.projection),
            ("encoder", self.encoder),
            ("graph", self.graph),
            ("classifier", self.classifier),
        ]
    }
}

/// Analytic FLOPs needed to score one new frame.
pub fn flop_estimate(config: &ModelConfig, frames: usize) -> Result<FlopEstimate> {
    config.validate()?;
    if frames == 0 {
        return Err(Error::input("flop estimate needs at least one frame"));
    }
    let n = config.window_len();
    let d = config.d_model;
    let ds = config.head_dim();
    let heads = config.heads;

    let projection = matmul_flops(n, config.input_dim, d);

    let per_layer = 3.0 * matmul_flops(n, d, d)      // Q, K, V
        + heads as f64 * matmul_flops(n, ds, n)      // scores
        + heads as f64 * matmul_flops(n, n, ds)      // weighted values
        + matmul_flops(n, d, d)                      // output projection
        + matmul_flops(n, d, config.ff_dim())
        + matmul_flops(n, config.ff_dim(), d);
    let encoder = config.layers as f64 * per_layer;

    let mean_support = (0..frames)
        .map(|t| (t.min(config.graph_neighbors) + 1) as f64)
        .sum::<f64>()
        / frames as f64;
    let graph = 3.0 * matmul_flops(1, d, d)
        + 2.0 * heads as f64 * 2.0 * mean_support * ds as f64
        + matmul_flops(1, d, d);

    let classifier =
        matmul_flops(1, 2 * d, config.hidden_dim) + matmul_flops(1, config.hidden_dim, config.classes);

    Ok(FlopEstimate {
        projection,
        encoder,
        graph,
        classifier,
        frames,
    })
}
