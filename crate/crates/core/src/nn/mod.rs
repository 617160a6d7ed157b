//! Small differentiable models with hand-written backward passes.

pub mod checkpoint;
mod extractor;
mod generator;
mod head;
mod layers;
mod optim;
mod params;

pub use extractor::{
    ExtractorCache, ExtractorGrads, ExtractorOutput, FeatureExtractor, Mode, HIDDEN,
};
pub use generator::{ConditionalGenerator, GeneratorCache, GeneratorGrads, GENERATOR_HIDDEN};
pub use head::LinearHead;
pub use layers::{
    l2_normalize, l2_normalize_backward, BatchNorm, BnStats, Linear, Normalization, BN_EPS,
    BN_MOMENTUM,
};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, EPOCH_DECAY};
pub use params::{load_params, Layout, ParameterVector, Parameterized, Segment};
