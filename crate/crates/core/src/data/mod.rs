//! Dataset ingestion, synthetic data, preprocessing and frozen encoders.

pub mod dataset;
pub mod encoder;
pub mod preprocess;
pub mod synth;

pub use dataset::{load_mvtec_layout, read_mask, DatasetIndex, SampleRecord, Split};
pub use encoder::{CacheManifest, EncoderBackend, EncoderSpec, FeatureCache, ToyVit, ToyVitConfig};
pub use preprocess::{load_and_preprocess, load_rgb, preprocess, preprocess_mask, PreprocessSpec};
pub use synth::{synth_dataset, SynthManifest, SynthSpec};
