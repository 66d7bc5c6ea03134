//! Forward computation of the head on a [`Tape`].
//!
//! Per frame `t`: the window of frames `t-u..=t` (left-padded with frame 0)
//! is projected to `d_model`, run through the encoder stack, and pooled to
//! one vector. A graph transformer layer then mixes each frame with its
//! causal neighbors, the two vectors are concatenated and classified.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Pooling};
use super::graph::build_causal_adjacency;
use super::params::{Classifier, EncoderLayer, GraphLayer, ModelParams, ParamTree};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Scalar, Tape, Tensor, Var};

/// Model parameters registered as leaves on a tape.
pub type TapeParams = ParamTree<Var>;

/// Per-frame accident probabilities and the raw two-class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTrace {
    pub probs: Vec<f64>,
    pub logits: Vec<[f64; 2]>,
}

impl RiskTrace {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn from_logits<S: Scalar>(logits: &Tensor<S>) -> Self {
        let mut probs = Vec::with_capacity(logits.rows());
        let mut raw = Vec::with_capacity(logits.rows());
        for r in 0..logits.rows() {
            let mut row = logits.row(r).to_vec();
            raw.push([to_f64(row[0]), to_f64(row[1])]);
            softmax_in_place(&mut row);
            probs.push(to_f64(row[1]));
        }
        Self { probs, logits: raw }
    }
}

fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

pub fn register<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    requires_grad: bool,
) -> Result<TapeParams> {
    params
        .tree
        .try_map(|_, t| tape.param(Arc::clone(t), requires_grad))
}

/// Sinusoidal position table, `len` rows of width `d`.
pub fn positional_encoding<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for c in 0..d {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(S::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("consistent shape")
}

/// Source frame of each window position for frame `t`, oldest first.
/// Positions before the clip start repeat frame 0.
pub fn window_frames(t: usize, lookback: usize) -> impl Iterator<Item = usize> {
    (0..=lookback).map(move |p| (t + p).saturating_sub(lookback))
}

/// Key ranges for windows of `n` rows stacked one after another.
fn block_supports(windows: usize, n: usize) -> Vec<Range<usize>> {
    (0..windows * n).map(|r| (r / n) * n..(r / n + 1) * n).collect()
}

pub fn project(tape: &mut Tape<impl Scalar>, p: &TapeParams, features: Var) -> Result<Var> {
    let h = tape.matmul(features, p.proj_weight)?;
    tape.add_bias(h, p.proj_bias)
}

/// Multi-head self-attention followed by the output projection. Returns
/// `(output, attention node)`; the attention node exposes the weights.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    query: Var,
    key: Var,
    value: Var,
    output: Var,
    heads: usize,
    supports: Vec<Range<usize>>,
) -> Result<(Var, Var)> {
    let q = tape.matmul(h, query)?;
    let k = tape.matmul(h, key)?;
    let v = tape.matmul(h, value)?;
    let attn = tape.attention(q, k, v, heads, supports)?;
    let out = tape.matmul(attn, output)?;
    Ok((out, attn))
}

/// `H~ = LN(H + MHA(H))`, `H' = LN(H~ + FC(H~))` with `FC(x) = relu(x W1 + b1) W2 + b2`.
pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &EncoderLayer<Var>,
    h: Var,
    heads: usize,
    eps: f64,
    supports: Vec<Range<usize>>,
) -> Result<(Var, Var)> {
    let (mha, attn) = multi_head_attention(
        tape,
        h,
        layer.query,
        layer.key,
        layer.value,
        layer.output,
        heads,
        supports,
    )?;
    let r1 = tape.add(h, mha)?;
    let h1 = tape.layer_norm(r1, layer.norm1_gain, layer.norm1_bias, eps)?;
    let f = tape.matmul(h1, layer.ff_in_weight)?;
    let f = tape.add_bias(f, layer.ff_in_bias)?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, layer.ff_out_weight)?;
    let f = tape.add_bias(f, layer.ff_out_bias)?;
    let r2 = tape.add(h1, f)?;
    let out = tape.layer_norm(r2, layer.norm2_gain, layer.norm2_bias, eps)?;
    Ok((out, attn))
}

/// Encodes windows whose rows are `projected[index[..]]`, `index.len()` being
/// a multiple of the window length. Returns one pooled row per window plus
/// the attention node of every layer.
pub fn encode_windows<S: Scalar>(
    tape: &mut Tape<S>,
    p: &TapeParams,
    config: &ModelConfig,
    projected: Var,
    index: Vec<usize>,
) -> Result<(Var, Vec<Var>)> {
    let n = config.window_len();
    if index.is_empty() || !index.len().is_multiple_of(n) {
        return Err(Error::input(format!(
            "window rows ({}) must be a positive multiple of the window length {n}",
            index.len()
        )));
    }
    let windows = index.len() / n;
    let mut h = tape.gather_rows(projected, index)?;
    if config.positional_encoding {
        let pe = positional_encoding::<S>(n, config.d_model);
        let mut tiled = Vec::with_capacity(windows * pe.len());
        for _ in 0..windows {
            tiled.extend_from_slice(pe.data());
        }
        let pe = tape.constant(Tensor::new(vec![windows * n, config.d_model], tiled)?)?;
        h = tape.add(h, pe)?;
    }
    let mut attentions = Vec::with_capacity(p.encoder.len());
    for layer in &p.encoder {
        let (out, attn) = encoder_layer(
            tape,
            layer,
            h,
            config.heads,
            config.layer_norm_eps,
            block_supports(windows, n),
        )?;
        h = out;
        attentions.push(attn);
    }
    let pooled = match config.pooling {
        Pooling::Last => tape.gather_rows(h, (0..windows).map(|b| b * n + n - 1).collect())?,
        Pooling::Mean => tape.block_mean(h, n)?,
    };
    Ok((pooled, attentions))
}

/// Graph transformer layer: row `i` attends over `supports[i]` with per-head
/// neighbor softmax, heads concatenated and projected. Returns
/// `(output, attention node)`.
pub fn graph_transformer_layer<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &GraphLayer<Var>,
    x: Var,
    heads: usize,
    supports: Vec<Range<usize>>,
) -> Result<(Var, Var)> {
    multi_head_attention(
        tape,
        x,
        layer.query,
        layer.key,
        layer.value,
        layer.output,
        heads,
        supports,
    )
}

/// Two-layer classifier over `[encoded, fused]`.
pub fn classify<S: Scalar>(
    tape: &mut Tape<S>,
    c: &Classifier<Var>,
    encoded: Var,
    fused: Var,
) -> Result<Var> {
    let x = tape.concat_cols(encoded, fused)?;
    let h = tape.matmul(x, c.hidden_weight)?;
    let h = tape.add_bias(h, c.hidden_bias)?;
    let h = tape.relu(h)?;
    let z = tape.matmul(h, c.out_weight)?;
    tape.add_bias(z, c.out_bias)
}

/// Handles to the interesting intermediates of one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Per-frame window encodings, `T x d_model`.
    pub encoded: Var,
    /// Graph transformer output, `T x d_model`.
    pub fused: Var,
    pub encoder_attention: Vec<Var>,
    pub graph_attention: Var,
}

/// Full forward over a clip's `T x D` feature matrix.
pub fn forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    p: &TapeParams,
    config: &ModelConfig,
    features: Var,
) -> Result<ForwardPass> {
    let dims = tape.value(features).shape().to_vec();
    if dims.len() != 2 || dims[1] != config.input_dim {
        return Err(Error::dim(format!(
            "features {:?} do not match input_dim {}",
            dims, config.input_dim
        )));
    }
    let frames = dims[0];
    let graph = build_causal_adjacency(frames, config.graph_neighbors)?;

    let projected = project(tape, p, features)?;
    let index = (0..frames)
        .flat_map(|t| window_frames(t, config.lookback))
        .collect();
    let (encoded, encoder_attention) = encode_windows(tape, p, config, projected, index)?;
    let (fused, graph_attention) =
        graph_transformer_layer(tape, &p.graph, encoded, config.heads, graph.supports())?;
    let logits = classify(tape, &p.classifier, encoded, fused)?;
    Ok(ForwardPass {
        logits,
        encoded,
        fused,
        encoder_attention,
        graph_attention,
    })
}

/// Risk trace of one clip (`T x input_dim` features).
pub fn forward<S: Scalar>(params: &ModelParams<S>, features: &Tensor<S>) -> Result<RiskTrace> {
    let mut tape = Tape::new();
    let p = register(&mut tape, params, false)?;
    let x = tape.param(Arc::new(features.clone()), false)?;
    let pass = forward_on_tape(&mut tape, &p, &params.config, x)?;
    Ok(RiskTrace::from_logits(tape.value(pass.logits)))
}

/// Encodes a single `(u+1) x input_dim` window to its `d_model` frame vector.
pub fn encode_window<S: Scalar>(params: &ModelParams<S>, window: &Tensor<S>) -> Result<Vec<S>> {
    let config = &params.config;
    if window.rank() != 2 || window.rows() != config.window_len() {
        return Err(Error::input(format!(
            "window has shape {:?}, expected {} rows",
            window.shape(),
            config.window_len()
        )));
    }
    if window.cols() != config.input_dim {
        return Err(Error::dim(format!(
            "window width {} vs input_dim {}",
            window.cols(),
            config.input_dim
        )));
    }
    let mut tape = Tape::new();
    let p = register(&mut tape, params, false)?;
    let x = tape.constant(window.clone())?;
    let projected = project(&mut tape, &p, x)?;
    let (pooled, _) = encode_windows(&mut tape, &p, config, projected, (0..config.window_len()).collect())?;
    Ok(tape.value(pooled).data().to_vec())
}

/// Mean cross-entropy of the clip's logits against one-hot frame labels.
pub fn clip_loss<S: Scalar>(
    tape: &mut Tape<S>,
    p: &TapeParams,
    config: &ModelConfig,
    features: Var,
    labels: &Tensor<S>,
) -> Result<Var> {
    let pass = forward_on_tape(tape, p, config, features)?;
    tape.cross_entropy(pass.logits, labels)
}
