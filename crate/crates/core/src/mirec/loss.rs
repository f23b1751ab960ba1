//! Reconstruction objectives.

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::scalar::Real;

/// `BCE(d_fake, 1) + alpha * L1(reconstructed, original)`.
pub fn generator_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var, reconstructed: Var, original: Var, alpha: T) -> Result<Var> {
    if alpha < T::zero() {
        return Err(Error::Argument(format!("alpha must be nonnegative, got {alpha}")));
    }
    let ones = vec![T::one(); tape.value(d_fake).len()];
    let adv = tape.bce(d_fake, &ones)?;
    let l1 = tape.l1(reconstructed, original)?;
    let l1 = tape.scale(l1, alpha)?;
    tape.add(adv, l1)
}

/// `1/2 BCE(d_real, 1) + alpha * 1/2 BCE(d_fake, 0)`; the weight sits on
/// the fake term only.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var, alpha: T) -> Result<Var> {
    if alpha < T::zero() {
        return Err(Error::Argument(format!("alpha must be nonnegative, got {alpha}")));
    }
    let half = T::lit(0.5);
    let ones = vec![T::one(); tape.value(d_real).len()];
    let zeros = vec![T::zero(); tape.value(d_fake).len()];
    let real = tape.bce(d_real, &ones)?;
    let real = tape.scale(real, half)?;
    let fake = tape.bce(d_fake, &zeros)?;
    let fake = tape.scale(fake, half * alpha)?;
    tape.add(real, fake)
}

pub fn mirec_total_loss<T: Real>(gen_loss: T, dis_loss: T) -> T {
    gen_loss + dis_loss
}
