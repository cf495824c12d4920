//! Synthetic clips, dataset generation, manifests, and batch loading.

mod dataset;
mod synth;

pub use dataset::{
    build_dataset, load_batch, mix_quantized, stack, Batch, DatasetConfig, Manifest, ManifestEntry, NoiseKind, Split,
    MANIFEST_FILE,
};
pub use synth::{synth_clip, SynthKind, SynthSpec, DEFAULT_CLIP_SAMPLES};
