//! Scalable soft convex quantization.
//!
//! Forward pass, for latents `Z` (`F×M`) and codebook `C` (`F×K`):
//!
//! 1. `P̃` ← one-hot nearest-code assignment of `Z` (constant, no gradient).
//! 2. `P₀` ← `(CᵀC + λI)⁻¹ (CᵀZ + λP̃)`.
//! 3. `steps` rounds of clamp-then-shift on every column of `P₀`.
//! 4. `Z_q` ← `C P⋆`.
//!
//! Step 2 is evaluated as `W Z + λ·A⁻¹[:, idx]` with `A = CᵀC + λI` and
//! `W = A⁻¹Cᵀ`. This is the same linear solve with its right-hand side split
//! into its two terms; it keeps the cost at `O(K·F·M + K³)` instead of
//! `O(K²·M)` because `A⁻¹P̃` is a column gather. Gradients reach `C` through
//! `A`, through `W` and through the final product, and reach `Z` through
//! `W Z`.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::mat::Mat;

use super::vq::{check_beta, commitment_loss, vq_assign};
use super::{finish, Assignment, QuantizeResult, ScqConfig};

/// Intermediate nodes of the fast SCQ forward pass.
pub struct ScqFastNodes {
    pub indices: Vec<usize>,
    pub initial: NodeId,
    pub projected: NodeId,
    pub z_q: NodeId,
}

/// Builds the SCQ graph without the loss terms.
pub fn scq_fast_nodes(
    tape: &mut Tape,
    z_e: NodeId,
    codebook: NodeId,
    config: &ScqConfig,
) -> Result<ScqFastNodes> {
    config.validate()?;
    let (indices, _) = vq_assign(tape.value(z_e), tape.value(codebook))?;
    let k = tape.value(codebook).cols();

    let ct = tape.transpose(codebook);
    let gram = tape.matmul(ct, codebook)?;
    let ridge = tape.constant(Mat::identity(k).scale(config.lambda));
    let system = tape.add(gram, ridge)?;

    let lifted = tape.solve_spd(system, ct)?;
    let data_term = tape.matmul(lifted, z_e)?;
    let eye = tape.constant(Mat::identity(k));
    let inverse = tape.solve_spd(system, eye)?;
    let anchor_cols = tape.gather_cols(inverse, &indices)?;
    let anchor_term = tape.scale(anchor_cols, config.lambda);
    let initial = tape.add(data_term, anchor_term)?;

    let mut projected = tape.simplex_project(initial, config.steps)?;
    if config.final_clamp {
        let clamped = tape.clamp_min(projected, 0.0);
        projected = tape.normalize_cols(clamped)?;
    }
    let z_q = tape.matmul(codebook, projected)?;
    Ok(ScqFastNodes {
        indices,
        initial,
        projected,
        z_q,
    })
}

/// Fast soft convex quantization with optional commitment loss
/// (`commit_beta = None` yields a zero loss node).
pub fn scq_fast(
    tape: &mut Tape,
    z_e: NodeId,
    codebook: NodeId,
    config: &ScqConfig,
    commit_beta: Option<f64>,
) -> Result<QuantizeResult> {
    if let Some(beta) = commit_beta {
        check_beta(beta)?;
    }
    let nodes = scq_fast_nodes(tape, z_e, codebook, config)?;
    let commit = match commit_beta {
        Some(beta) => commitment_loss(tape, z_e, nodes.z_q, beta)?,
        None => tape.constant(Mat::scalar(0.0)),
    };
    let assignment = Assignment::Soft(tape.value(nodes.projected).clone());
    Ok(finish(tape, z_e, nodes.z_q, commit, assignment, nodes.indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_spd;
    use crate::mat::matmul;

    fn run(c: Mat, z: Mat, cfg: ScqConfig) -> (Tape, ScqFastNodes) {
        let mut t = Tape::new();
        let (cn, zn) = (t.leaf(c), t.leaf(z));
        let nodes = scq_fast_nodes(&mut t, zn, cn, &cfg).unwrap();
        (t, nodes)
    }

    #[test]
    fn hand_traced_two_code_example() {
        let cfg = ScqConfig {
            lambda: 0.1,
            steps: 2,
            final_clamp: false,
        };
        let (t, n) = run(Mat::from_rows(&[&[0.0, 1.0]]), Mat::scalar(0.6), cfg);
        let p0 = t.value(n.initial);
        assert!(p0.get(0, 0).abs() < 1e-15);
        assert!((p0.get(1, 0) - 7.0 / 11.0).abs() < 1e-14);
        let p = t.value(n.projected);
        assert!((p.get(0, 0) - 2.0 / 11.0).abs() < 1e-14);
        assert!((p.get(1, 0) - 9.0 / 11.0).abs() < 1e-14);
        assert!((t.value(n.z_q).get(0, 0) - 9.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn split_solve_matches_direct_solve() {
        let c = Mat::from_rows(&[&[0.3, -0.8, 1.2, 0.1], &[0.5, 0.2, -0.4, 0.9], &[-1.0, 0.7, 0.3, 0.0]]);
        let z = Mat::from_rows(&[&[0.1, 1.0, -0.5], &[0.4, -0.2, 0.3], &[0.9, 0.0, -1.1]]);
        let lambda = 0.1;
        let cfg = ScqConfig {
            lambda,
            steps: 1,
            final_clamp: false,
        };
        let (t, n) = run(c.clone(), z.clone(), cfg);
        let (_, pt) = vq_assign(&z, &c).unwrap();
        let a = matmul(&c.transpose(), &c).unwrap().add(&Mat::identity(4).scale(lambda)).unwrap();
        let b = matmul(&c.transpose(), &z).unwrap().add(&pt.to_dense().scale(lambda)).unwrap();
        let direct = solve_spd(&a, &b).unwrap();
        assert!(t.value(n.initial).max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn codebook_member_is_reproduced_exactly() {
        let c = Mat::from_rows(&[&[0.0, 1.0, 0.5], &[1.0, 0.0, 0.5]]);
        let z = Mat::column_vector(&[1.0, 0.0]);
        let mut t = Tape::new();
        let (cn, zn) = (t.leaf(c), t.leaf(z));
        let r = scq_fast(&mut t, zn, cn, &ScqConfig::default(), Some(0.25)).unwrap();
        let p = match &r.assignment {
            Assignment::Soft(p) => p.clone(),
            _ => unreachable!(),
        };
        assert!(p.max_abs_diff(&Mat::column_vector(&[0.0, 1.0, 0.0])) < 1e-12);
        assert!(r.quant_error < 1e-24);
    }

    #[test]
    fn final_clamp_gives_nonnegative_columns() {
        let c = Mat::from_rows(&[&[0.0, 1.0, 2.0, -1.0]]);
        let z = Mat::from_rows(&[&[0.3, 1.7, -2.0]]);
        let cfg = ScqConfig {
            lambda: 0.05,
            steps: 3,
            final_clamp: true,
        };
        let (t, n) = run(c, z, cfg);
        let p = t.value(n.projected);
        assert!(p.min() >= 0.0);
        for s in p.col_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
