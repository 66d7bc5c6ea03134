//! Feature files, manifests, clip construction, synthetic data and weights.

mod checkpoint;
mod clips;
mod format;
mod manifest;
mod synth;

pub use checkpoint::{
    load_weights, save_weights, weights_from_bytes, weights_to_bytes, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};
pub use clips::{clip_frames, make_clips, CLIP_SECONDS, ONSET_WINDOW_SECONDS};
pub use format::{
    read_features, write_features, FeatureSequence, FEATURE_HEADER_LEN, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use manifest::{
    load_manifest, write_manifest, DatasetManifest, ManifestEntry, MANIFEST_VERSION,
};
pub use synth::{
    synth_basis, synth_generate, write_synthetic_dataset, SyntheticBasis, SyntheticSpec,
};
