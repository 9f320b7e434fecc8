use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mat::{matmul, Mat};

use super::{finish, Assignment, QuantizeResult};

/// Nearest codebook column for every column of `z` (`F×M` against `F×K`),
/// ties to the lowest index. Scores are `‖c_j‖² − 2 c_jᵀ z`, which orders
/// codes exactly like the squared distance.
pub fn vq_assign(z: &Mat, c: &Mat) -> Result<(Vec<usize>, Assignment)> {
    if z.rows() != c.rows() {
        return Err(Error::contract(
            "vq_assign",
            format!("latent dim {} vs codebook dim {}", z.rows(), c.rows()),
        ));
    }
    let (k, m) = (c.cols(), z.cols());
    let scores = matmul(&c.transpose(), z)?;
    let norms = c.zip_map(c, |a, b| a * b).col_sums();
    let mut best = vec![f64::INFINITY; m];
    let mut indices = vec![0usize; m];
    for (j, norm) in norms.iter().enumerate() {
        for ((b, idx), s) in best.iter_mut().zip(indices.iter_mut()).zip(scores.row(j)) {
            let d = norm - 2.0 * s;
            if d < *b {
                *b = d;
                *idx = j;
            }
        }
    }
    let assignment = Assignment::OneHot {
        codes: k,
        indices: indices.clone(),
    };
    Ok((indices, assignment))
}

/// Exhaustive `O(K·M·F)` nearest-neighbour scan on explicit squared
/// distances. Kept deliberately naive as a cross-check for [`vq_assign`].
pub fn vq_assign_brute_force(z: &Mat, c: &Mat) -> Vec<usize> {
    (0..z.cols())
        .map(|m| {
            let mut best = (f64::INFINITY, 0);
            for j in 0..c.cols() {
                let d: f64 = (0..z.rows()).map(|f| (z.get(f, m) - c.get(f, j)).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// `(1−β)·mse(sg[z_e], z_q) + β·mse(z_e, sg[z_q])`, averaged over latent
/// entries.
pub fn commitment_loss(tape: &mut Tape, z_e: NodeId, z_q: NodeId, beta: f64) -> Result<NodeId> {
    let ze_stop = tape.detach(z_e);
    let zq_stop = tape.detach(z_q);
    let codebook_term = tape.mse(ze_stop, z_q)?;
    let encoder_term = tape.mse(z_e, zq_stop)?;
    let a = tape.scale(codebook_term, 1.0 - beta);
    let b = tape.scale(encoder_term, beta);
    tape.add(a, b)
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::contract("commitment", format!("beta must lie in (0, 1), got {beta}")))
    }
}

/// Hard nearest-code quantization. The forward value is the assigned code;
/// the backward pass hands the upstream gradient to `z_e` unchanged, and the
/// codebook learns only through the commitment loss.
pub fn vq_quantize_ste(
    tape: &mut Tape,
    z_e: NodeId,
    codebook: NodeId,
    beta: f64,
) -> Result<QuantizeResult> {
    check_beta(beta)?;
    let (indices, assignment) = vq_assign(tape.value(z_e), tape.value(codebook))?;
    let codes = tape.gather_cols(codebook, &indices)?;
    let z_q = tape.straight_through(z_e, tape.value(codes).clone())?;
    let commit = commitment_loss(tape, z_e, codes, beta)?;
    Ok(finish(tape, z_e, z_q, commit, assignment, indices))
}

/// Residual quantization with one codebook shared across `depth` levels.
/// Level `d` quantizes what the previous levels left over; the output is the
/// sum of the chosen codes with a straight-through backward pass. The
/// commitment loss is evaluated on each cumulative reconstruction and
/// averaged over levels.
pub fn rq_quantize(
    tape: &mut Tape,
    z_e: NodeId,
    codebook: NodeId,
    beta: f64,
    depth: usize,
) -> Result<QuantizeResult> {
    check_beta(beta)?;
    if depth == 0 {
        return Err(Error::contract("rq_quantize", "depth must be at least 1"));
    }
    let k = tape.value(codebook).cols();
    let mut residual = tape.value(z_e).clone();
    let mut all_codes = Vec::with_capacity(depth * residual.cols());
    let mut partial: Option<NodeId> = None;
    let mut losses = Vec::with_capacity(depth);
    for _ in 0..depth {
        let (indices, _) = vq_assign(&residual, tape.value(codebook))?;
        let chosen = tape.gather_cols(codebook, &indices)?;
        residual = residual.sub(tape.value(chosen))?;
        let sum = match partial {
            None => chosen,
            Some(prev) => tape.add(prev, chosen)?,
        };
        losses.push(commitment_loss(tape, z_e, sum, beta)?);
        partial = Some(sum);
        all_codes.extend(indices);
    }
    let reconstruction = tape.value(partial.expect("depth >= 1")).clone();
    let z_q = tape.straight_through(z_e, reconstruction)?;
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let commit = tape.scale(total, 1.0 / depth as f64);
    let assignment = Assignment::OneHot {
        codes: k,
        indices: all_codes.clone(),
    };
    Ok(finish(tape, z_e, z_q, commit, assignment, all_codes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn member_of_codebook_maps_to_itself() {
        let c = Mat::from_rows(&[&[0.0, 1.0, 2.0, -1.0], &[0.0, 0.0, 1.0, 3.0]]);
        let z = Mat::column_vector(&[2.0, 1.0]);
        let (idx, _) = vq_assign(&z, &c).unwrap();
        assert_eq!(idx, vec![2]);
    }

    #[test]
    fn hand_distance_example() {
        let c = Mat::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let z = Mat::column_vector(&[0.9, 0.1]);
        assert_eq!(vq_assign(&z, &c).unwrap().0, vec![1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // codes 0 and 3 are both at distance 0.5 from z
        let c = Mat::from_rows(&[&[0.0, 5.0, -5.0, 1.0]]);
        let z = Mat::column_vector(&[0.5]);
        assert_eq!(vq_assign(&z, &c).unwrap().0, vec![0]);
        assert_eq!(vq_assign_brute_force(&z, &c), vec![0]);
    }

    #[test]
    fn commitment_hand_value() {
        let mut t = Tape::new();
        let z = t.leaf(Mat::scalar(1.0));
        let c = t.leaf(Mat::scalar(0.0));
        let r = vq_quantize_ste(&mut t, z, c, 0.25).unwrap();
        assert!((t.value(r.commit_loss).get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_commitment_when_already_quantized() {
        let mut t = Tape::new();
        let c = t.leaf(Mat::from_rows(&[&[0.0, 1.0], &[2.0, -1.0]]));
        let z = t.leaf(Mat::from_rows(&[&[1.0, 0.0], &[-1.0, 2.0]]));
        let r = vq_quantize_ste(&mut t, z, c, 0.25).unwrap();
        assert_eq!(t.value(r.commit_loss).get(0, 0), 0.0);
        assert_eq!(r.quant_error, 0.0);
    }

    #[test]
    fn ste_passes_task_gradient_through() {
        let mut t = Tape::new();
        let c = t.leaf(Mat::from_rows(&[&[0.0, 1.0]]));
        let z = t.leaf(Mat::from_rows(&[&[0.2, 0.9, 0.4]]));
        let r = vq_quantize_ste(&mut t, z, c, 0.25).unwrap();
        let w = t.constant(Mat::from_rows(&[&[3.0], &[-2.0], &[0.5]]));
        let y = t.matmul(r.z_q, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(z), Mat::from_rows(&[&[3.0, -2.0, 0.5]]));
        // the codebook gets nothing from the task term alone
        assert_eq!(g.get(c), Mat::zeros(1, 2));
    }

    #[test]
    fn residual_depth_one_matches_vq() {
        let c = Mat::from_rows(&[&[0.0, 0.6, -0.3], &[0.2, 0.1, 0.9]]);
        let z = Mat::from_rows(&[&[0.5, -0.2, 1.0], &[0.1, 0.8, -0.4]]);
        let mut t = Tape::new();
        let (cn, zn) = (t.leaf(c.clone()), t.leaf(z.clone()));
        let rq = rq_quantize(&mut t, zn, cn, 0.25, 1).unwrap();
        let vq = vq_quantize_ste(&mut t, zn, cn, 0.25).unwrap();
        assert_eq!(t.value(rq.z_q), t.value(vq.z_q));
        assert_eq!(rq.codes, vq.codes);
        assert_eq!(
            t.value(rq.commit_loss).get(0, 0),
            t.value(vq.commit_loss).get(0, 0)
        );
    }

    #[test]
    fn residual_hand_trace() {
        let mut t = Tape::new();
        let c = t.leaf(Mat::from_rows(&[&[0.0, 0.6]]));
        let z = t.leaf(Mat::scalar(1.0));
        let r = rq_quantize(&mut t, z, c, 0.25, 2).unwrap();
        assert_eq!(r.codes, vec![1, 1]);
        assert!((t.value(r.z_q).get(0, 0) - 1.2).abs() < 1e-15);
        assert!((1.0 - t.value(r.z_q).get(0, 0) + 0.2).abs() < 1e-15);
    }
}
