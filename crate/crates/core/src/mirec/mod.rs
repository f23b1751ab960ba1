//! Masked image reconstruction: patching and masking, the adversarial
//! encoder-decoder, its objectives and training loop.

mod loss;
mod model;
mod patch;
mod train;

pub use loss::{discriminator_loss, generator_loss, mirec_total_loss};
pub use model::{Discriminator, Generator, Geometry, DEPTH};
pub use patch::{patch_offsets, positional_encoding, repair, sample_mask, MaskPlan, PatchSet};
pub use train::{log_csv, train_mirec, MirecConfig, MirecLogRow, MirecModel, MirecOutcome};
