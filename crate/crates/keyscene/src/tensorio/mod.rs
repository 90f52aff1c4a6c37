//! Dataset plumbing: the `CMDT` tensor container, line-delimited dataset
//! manifests, and the seeded synthetic dataset generator.

mod format;
mod manifest;
mod synth;

pub use format::{read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor, FormatError, Tensor};
pub use manifest::{
    load_manifest, save_manifest, ClipRecord, DatasetManifest, ExpertFeature, ExpertSpec,
    ManifestError, Movie, Split,
};
pub use synth::{generate_synth, generate_synth_with_truth, SynthError, SynthSpec, SynthTruth};
