use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

use super::vq::{check_beta, commitment_loss, vq_assign};
use super::{finish, Assignment, Mode, QuantizeResult};

/// Gumbel-softmax relaxation over distance logits `−‖z − c_j‖²/τ`.
///
/// In training the output is `C · softmax(logits + G)` with fresh Gumbel
/// noise `G`, and `codes` records the sampled `argmax(logits + G)`. In
/// evaluation the noise is dropped and the nearest code is emitted.
pub fn gumbel_quantize(
    tape: &mut Tape,
    z_e: NodeId,
    codebook: NodeId,
    beta: f64,
    tau: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<QuantizeResult> {
    check_beta(beta)?;
    if !(tau > 0.0) {
        return Err(Error::contract("gumbel_quantize", format!("tau must be > 0, got {tau}")));
    }
    if mode == Mode::Eval {
        let (indices, assignment) = vq_assign(tape.value(z_e), tape.value(codebook))?;
        let z_q = tape.gather_cols(codebook, &indices)?;
        let commit = commitment_loss(tape, z_e, z_q, beta)?;
        return Ok(finish(tape, z_e, z_q, commit, assignment, indices));
    }
    let dist = tape.sq_dist(codebook, z_e)?;
    let logits = tape.scale(dist, -1.0 / tau);
    let (k, m) = tape.value(logits).shape();
    let noise = Mat::from_vec(k, m, rng.gumbel_vec(k * m))?;
    let noise = tape.constant(noise);
    let perturbed = tape.add(logits, noise)?;
    let codes = column_argmax(tape.value(perturbed));
    let weights = tape.softmax_cols(perturbed);
    let z_q = tape.matmul(codebook, weights)?;
    let commit = commitment_loss(tape, z_e, z_q, beta)?;
    let assignment = Assignment::Soft(tape.value(weights).clone());
    Ok(finish(tape, z_e, z_q, commit, assignment, codes))
}

pub(crate) fn column_argmax(x: &Mat) -> Vec<usize> {
    let (k, m) = x.shape();
    let mut best = vec![f64::NEG_INFINITY; m];
    let mut idx = vec![0; m];
    for r in 0..k {
        for ((b, i), v) in best.iter_mut().zip(idx.iter_mut()).zip(x.row(r)) {
            if *v > *b {
                *b = *v;
                *i = r;
            }
        }
    }
    idx
}
