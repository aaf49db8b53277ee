//! Network building blocks and the trainable reconstructor.

pub mod attention;
pub mod bottleneck;
pub mod conv;
pub mod dinomaly;
pub mod layers;
pub mod reconstructor;
pub mod scheme;
pub mod transformer;

pub use attention::{
    linear_attention, mixing_flops, neighbor_mask, neighbor_mask_matrix, reset_mixing_flops, softmax_attention,
    AttentionKind, AttentionParams,
};
pub use bottleneck::{noisy_bottleneck_forward, BottleneckConfig, NoiseKind, NoisyBottleneck};
pub use conv::ConvMixer;
pub use dinomaly::DinomalyModel;
pub use reconstructor::{
    collect, collect_and_fuse, decoder_forward, default_collected_layers, Reconstructor, ReconstructorConfig,
    DECODER_DEPTH,
};
pub use scheme::{build_groups, ConstraintScheme, GroupedFeatures};
pub use transformer::{SpatialMixer, TransformerLayer};
