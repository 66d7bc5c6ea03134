//! The accident-anticipation head: window encoder, causal frame graph,
//! graph transformer fusion and per-frame classifier.

mod config;
mod flops;
mod forward;
mod graph;
mod params;
mod stream;

pub use config::{ModelConfig, Pooling};
pub use flops::{flop_estimate, matmul_flops, FlopEstimate};
pub use forward::{
    classify, clip_loss, encode_window, encode_windows, encoder_layer, forward, forward_on_tape,
    graph_transformer_layer, multi_head_attention, positional_encoding, project, register,
    window_frames, ForwardPass, RiskTrace, TapeParams,
};
pub use graph::{build_causal_adjacency, FrameGraph};
pub use params::{
    layout, parameter_count, Classifier, EncoderLayer, GraphLayer, Init, ModelParams, ParamTree,
};
pub use stream::{FrameRisk, StreamingSession};
