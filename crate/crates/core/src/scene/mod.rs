//! Weather-aware Gaussian primitives, per-weather decoders and the scene graph.

pub mod decoder;
pub mod gaussian;
pub mod graph;
pub mod sky;

pub use decoder::{DecodeTrace, DecoderGrad, WeatherDecoder, WeatherLabel, HIDDEN_DIM};
pub use gaussian::{covariance3d, Feature, GaussianPrimitive, FEATURE_DIM};
pub use graph::{
    FlatScene, GaussianNode, NodeInfo, NodeKind, NodeRef, Pose, SceneGraph, Source, WeatherNode,
    BACKGROUND_ID, SKY_ID,
};
pub use sky::{SkyNode, SkyTaps, DEFAULT_SKY_HEIGHT, DEFAULT_SKY_WIDTH};
