//! Trainable layers and the forward-pass context that binds parameters to a tape.

mod layers;
mod params;

pub use layers::{
    batchnorm_forward, dense_forward, he_normal, instance_norm_input, stochastic_forward, BnSet,
    Forward, Layer, Mode, Network, StatsUpdate, Stochastic, BN_EPS, BN_MOMENTUM, IN_EPS,
};
pub use params::{Group, ParamId, ParamMeta, ParamStore, RunningStats, StatsId};
