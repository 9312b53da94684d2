//! Parameters, layers, the encoder/decoder family and the FVW1 weight format.

pub mod layers;
pub mod model;
pub mod params;
pub mod weights;

pub use layers::{Layer, NetBuilder, Network, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
pub use model::{
    build_decoder, build_encoder, Adapter, AdapterSpec, Decoded, Encoded, ModelSpec,
    OutputActivation, Vae,
};
pub use params::{apply_stat_updates, Graph, Param, ParamId, ParamSet, Role, StatUpdate};
