//! Toy multi-encoder/shared-decoder backbone with hand-written backward
//! passes, plus its checkpoint format.

pub mod backbone;
pub mod checkpoint;
pub mod ops;

pub use backbone::{
    parameter_count, Backbone, BackboneConfig, FeaturePyramid, ForwardPass, Fusion, ParamSet,
    PyramidGrads,
};
pub use ops::{upsample, UpsampleMode};
