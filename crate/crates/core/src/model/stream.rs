use std::collections::VecDeque;

use super::forward::{
    classify, encode_windows, graph_transformer_layer, project, register, window_frames,
};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Scalar, Tape, Tensor};

/// Risk for one streamed frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRisk {
    pub index: usize,
    pub prob: f64,
    pub logits: [f64; 2],
}

/// Frame-at-a-time inference.
///
/// Each pushed frame is scored as soon as it arrives. The per-row arithmetic
/// is the same as in the batch forward, and the model is causal, so the
/// streamed trace equals the batch trace of the same clip bit for bit.
pub struct StreamingSession<'a, S: Scalar> {
    params: &'a ModelParams<S>,
    /// Projected rows of the newest `lookback + 1` frames.
    projected: VecDeque<Vec<S>>,
    /// Window encodings of the newest `graph_neighbors + 1` frames.
    encoded: VecDeque<Vec<S>>,
    next: usize,
}

impl<'a, S: Scalar> StreamingSession<'a, S> {
    pub fn new(params: &'a ModelParams<S>) -> Self {
        Self {
            params,
            projected: VecDeque::new(),
            encoded: VecDeque::new(),
            next: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.next
    }

    pub fn push(&mut self, features: &[S]) -> Result<FrameRisk> {
        let config = &self.params.config;
        if features.len() != config.input_dim {
            return Err(Error::dim(format!(
                "frame has {} features, model expects {}",
                features.len(),
                config.input_dim
            )));
        }
        let t = self.next;
        let d = config.d_model;
        let mut tape = Tape::new();
        let p = register(&mut tape, self.params, false)?;

        let x = tape.constant(Tensor::new(vec![1, features.len()], features.to_vec())?)?;
        let projected = project(&mut tape, &p, x)?;
        let row = tape.value(projected).data().to_vec();
        self.projected.push_back(row);
        if self.projected.len() > config.window_len() {
            self.projected.pop_front();
        }

        // the buffer holds frames oldest..=t, which covers every window row
        let oldest = t + 1 - self.projected.len();
        let mut window = Vec::with_capacity(config.window_len() * d);
        for f in window_frames(t, config.lookback) {
            window.extend_from_slice(&self.projected[f - oldest]);
        }
        let window = tape.constant(Tensor::new(vec![config.window_len(), d], window)?)?;
        let (pooled, _) =
            encode_windows(&mut tape, &p, config, window, (0..config.window_len()).collect())?;
        self.encoded.push_back(tape.value(pooled).data().to_vec());
        if self.encoded.len() > config.graph_neighbors + 1 {
            self.encoded.pop_front();
        }

        let k = self.encoded.len();
        let context: Vec<S> = self.encoded.iter().flatten().copied().collect();
        let context = tape.constant(Tensor::new(vec![k, d], context)?)?;
        // only the newest node is needed; other rows get empty supports
        let mut supports = vec![0..0; k];
        supports[k - 1] = 0..k;
        let (fused, _) =
            graph_transformer_layer(&mut tape, &p.graph, context, config.heads, supports)?;
        let fused = tape.gather_rows(fused, vec![k - 1])?;
        let logits = classify(&mut tape, &p.classifier, pooled, fused)?;

        let mut row = tape.value(logits).data().to_vec();
        let raw = [to_f64(row[0]), to_f64(row[1])];
        softmax_in_place(&mut row);
        self.next += 1;
        Ok(FrameRisk {
            index: t,
            prob: to_f64(row[1]),
            logits: raw,
        })
    }
}

fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
