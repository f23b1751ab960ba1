//! Tensor autodiff, layers and optimizer shared by every learned component.

mod adam;
pub mod kernels;
mod layers;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use layers::{he_uniform, instance_norm, BatchNorm, Conv2d, ConvTranspose2d, Ctx, Dense, BN_MOMENTUM, LEAKY_SLOPE};
pub use params::{ParamId, ParamStore};
pub use tape::{CustomBackward, NormKind, NormStats, Tape, Var, NORM_EPS, PROB_EPS};
