//! The attention steps as differentiable tape operations. Row vectors are `[1, n]`.

use crate::numerics::{lit, Real, Tape, TensorError, Var};

use super::{S2paError, LOG_FLOOR};

/// Raw scores `[1, R]` and their softmax for `z: [1, d]`, `keys: [R, d]`.
pub fn scores<F: Real>(tape: &mut Tape<'_, F>, z: Var, keys: Var, scale: F) -> Result<(Var, Var), S2paError> {
    if tape.shape(keys).first().copied().unwrap_or(0) == 0 {
        return Err(S2paError::EmptyKeys);
    }
    let dot = tape.matmul_bt(z, keys)?;
    let raw = tape.scale(dot, F::one() / scale);
    let normalized = tape.softmax_lastdim(raw)?;
    Ok((raw, normalized))
}

/// `s' = a' K`, `[1, d]`.
pub fn retrieve<F: Real>(tape: &mut Tape<'_, F>, normalized: Var, keys: Var) -> Result<Var, TensorError> {
    tape.matmul(normalized, keys)
}

/// `w = a' G` with `group: [R, m]` the row-to-pronunciation indicator.
pub fn aggregate<F: Real>(tape: &mut Tape<'_, F>, normalized: Var, group: Var) -> Result<Var, TensorError> {
    tape.matmul(normalized, group)
}

/// Gumbel-Softmax relaxation of `w: [1, m]` with fixed `noise`. With `hard`, the
/// forward value is the one-hot argmax and gradients pass straight through.
pub fn gumbel<F: Real>(tape: &mut Tape<'_, F>, w: Var, noise: &[F], tau: F, hard: bool) -> Result<Var, S2paError> {
    if !(tau > F::zero()) {
        return Err(S2paError::Temperature(tau.as_f64()));
    }
    let shape = tape.shape(w).to_vec();
    let clamped = tape.clamp_min(w, lit(LOG_FLOOR));
    let logw = tape.log(clamped);
    let g = tape.constant(shape, noise.to_vec())?;
    let noisy = tape.add(logw, g)?;
    let logits = tape.scale(noisy, F::one() / tau);
    let soft = tape.softmax_lastdim(logits)?;
    Ok(if hard { tape.straight_through(soft) } else { soft })
}

/// `p' = y P` for `prons: [m, d]`.
pub fn mix<F: Real>(tape: &mut Tape<'_, F>, sampled: Var, prons: Var) -> Result<Var, TensorError> {
    tape.matmul(sampled, prons)
}
