//! Exact soft convex quantization.
//!
//! The quadratic program decouples over columns. For one column `z` with
//! anchor code `k̃`, writing `H = CᵀC + λI` and `r = Cᵀz + λe_k̃`, the
//! problem is
//!
//! ```text
//! min_p  pᵀHp − 2rᵀp   s.t.  p ≥ 0, 1ᵀp = 1
//! ```
//!
//! solved here by a primal active-set method in the Lawson–Hanson style:
//! grow the free set with the most negative multiplier, solve the
//! equality-constrained subproblem on it through its bordered KKT system,
//! and step back to the boundary whenever a free weight would turn
//! non-positive. Backpropagation differentiates the bordered system on the
//! final free set.

use std::rc::Rc;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::solve_lu;
use crate::mat::{matmul, Mat};

use super::vq::{check_beta, commitment_loss, vq_assign};
use super::{finish, Assignment, QuantizeResult};

const PIVOT_TOL: f64 = 1e-14;
const DEGENERATE_TOL: f64 = 1e-9;

/// Primal and dual solution of one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSolution {
    pub p: Vec<f64>,
    /// Free set `{j : p_j > 0}` in ascending order.
    pub free: Vec<usize>,
    /// Multiplier of `1ᵀp = 1`.
    pub mu: f64,
    /// Multipliers of `p ≥ 0` (zero on the free set).
    pub nu: Vec<f64>,
    pub anchor: usize,
    pub changes: usize,
    /// A zero weight whose multiplier is also (numerically) zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub p: Mat,
    pub columns: Vec<ColumnSolution>,
}

/// Worst KKT violations of a column solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖∇f − μ1 − ν‖∞`
    pub stationarity: f64,
    /// `|1ᵀp − 1|`
    pub primal: f64,
    /// `min(0, min p)` magnitude.
    pub negativity: f64,
    /// `min ν` (should be ≥ 0).
    pub min_nu: f64,
    /// `|νᵀp|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn worst(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.negativity)
            .max((-self.min_nu).max(0.0))
            .max(self.complementarity)
    }
}

struct ColumnProblem<'a> {
    hessian: &'a Mat,
    rhs: Vec<f64>,
    column: usize,
}

impl ColumnProblem<'_> {
    /// `∇f / 2 = Hp − r`, exploiting that `p` vanishes off `free`.
    fn half_gradient(&self, p: &[f64], free: &[usize]) -> Vec<f64> {
        (0..self.rhs.len())
            .map(|j| {
                let row = self.hessian.row(j);
                free.iter().map(|&i| row[i] * p[i]).sum::<f64>() - self.rhs[j]
            })
            .collect()
    }

    fn solve_subproblem(&self, free: &[usize]) -> Result<Vec<f64>> {
        let block = Mat::from_vec(
            free.len(),
            free.len(),
            free.iter()
                .flat_map(|&i| free.iter().map(move |&j| (i, j)))
                .map(|(i, j)| self.hessian.get(i, j))
                .collect(),
        )?;
        let top: Vec<f64> = free.iter().map(|&i| self.rhs[i]).collect();
        bordered_solve(&block, &top, 1.0).ok_or(Error::DegenerateActiveSet {
            column: self.column,
            active: free.len(),
        })
    }
}

/// Solves `[[H, 1], [1ᵀ, 0]] [x; t] = [a; b]` for `x`. The `H` block is
/// rescaled to unit magnitude first so the singularity test does not depend
/// on the size of λ.
fn bordered_solve(h: &Mat, a: &[f64], b: f64) -> Option<Vec<f64>> {
    let s = h.rows();
    let scale = h.max_abs();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut m = Mat::zeros(s + 1, s + 1);
    for i in 0..s {
        for j in 0..s {
            m.set(i, j, h.get(i, j) / scale);
        }
        m.set(i, s, 1.0);
        m.set(s, i, 1.0);
    }
    let mut rhs: Vec<f64> = a.iter().map(|v| v / scale).collect();
    rhs.push(b);
    let mut x = solve_lu(&m, &rhs, PIVOT_TOL)?;
    x.truncate(s);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn solve_column(
    hessian: &Mat,
    ctz: &[f64],
    lambda: f64,
    anchor: usize,
    column: usize,
) -> Result<ColumnSolution> {
    let k = ctz.len();
    let mut rhs = ctz.to_vec();
    rhs[anchor] += lambda;
    let prob = ColumnProblem {
        hessian,
        rhs,
        column,
    };
    let cap = 10 * k;
    let mut changes = 0usize;
    let mut free = vec![anchor];
    let mut p = vec![0.0; k];
    p[anchor] = 1.0;

    loop {
        let g = prob.half_gradient(&p, &free);
        let mu = free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64;
        let scale = 1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let entering = (0..k)
            .filter(|j| !free.contains(j))
            .map(|j| (j, g[j] - mu))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            });
        match entering {
            Some((j, nu)) if nu < -1e-13 * scale => {
                free.push(j);
                free.sort_unstable();
            }
            _ => break,
        }
        changes += 1;
        loop {
            if changes > cap {
                return Err(Error::SolverStall { column, changes });
            }
            let q = prob.solve_subproblem(&free)?;
            if q.iter().all(|&v| v > 0.0) {
                for (&i, &v) in free.iter().zip(&q) {
                    p[i] = v;
                }
                break;
            }
            let (mut alpha, mut blocking) = (1.0f64, usize::MAX);
            for (&i, &qi) in free.iter().zip(&q) {
                if qi <= 0.0 {
                    let ratio = p[i] / (p[i] - qi);
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = i;
                    }
                }
            }
            for (&i, &qi) in free.iter().zip(&q) {
                p[i] += alpha * (qi - p[i]);
            }
            if blocking != usize::MAX {
                p[blocking] = 0.0;
            }
            free.retain(|&i| p[i] > 0.0);
            for (j, v) in p.iter_mut().enumerate() {
                if !free.contains(&j) {
                    *v = 0.0;
                }
            }
            changes += 1;
        }
    }

    let g = prob.half_gradient(&p, &free);
    // multipliers of the true objective (gradient is 2·g)
    let mu = 2.0 * free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64;
    let mut nu = vec![0.0; k];
    let mut degenerate = false;
    for j in 0..k {
        if !free.contains(&j) {
            nu[j] = 2.0 * g[j] - mu;
            if nu[j].abs() <= DEGENERATE_TOL {
                degenerate = true;
            }
        }
    }
    Ok(ColumnSolution {
        p,
        free,
        mu,
        nu,
        anchor,
        changes,
        degenerate,
    })
}

/// Solves every column of `z` to KKT tolerance. `lambda` may be zero here.
pub fn scq_exact(z: &Mat, c: &Mat, lambda: f64) -> Result<ExactSolution> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::contract("scq_exact", format!("lambda must be ≥ 0, got {lambda}")));
    }
    let (anchors, _) = vq_assign(z, c)?;
    let ct = c.transpose();
    let k = c.cols();
    let hessian = matmul(&ct, c)?.add(&Mat::identity(k).scale(lambda))?;
    let ctz = matmul(&ct, z)?;
    let mut p = Mat::zeros(k, z.cols());
    let mut columns = Vec::with_capacity(z.cols());
    for (m, &anchor) in anchors.iter().enumerate() {
        let sol = solve_column(&hessian, &ctz.col(m), lambda, anchor, m)?;
        p.set_col(m, &sol.p);
        columns.push(sol);
    }
    Ok(ExactSolution { p, columns })
}

/// `‖z − Cp‖² + λ‖p − e_anchor‖²` for a single column.
pub fn column_objective(z: &[f64], c: &Mat, lambda: f64, anchor: usize, p: &[f64]) -> f64 {
    let mut fit = 0.0;
    for (f, zf) in z.iter().enumerate() {
        let cp: f64 = c.row(f).iter().zip(p).map(|(a, b)| a * b).sum();
        fit += (zf - cp) * (zf - cp);
    }
    let reg: f64 = p
        .iter()
        .enumerate()
        .map(|(j, pj)| {
            let d = pj - if j == anchor { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    fit + lambda * reg
}

/// KKT residuals of a column solution against the problem data.
pub fn kkt_residuals(z: &[f64], c: &Mat, lambda: f64, sol: &ColumnSolution) -> KktResiduals {
    let k = c.cols();
    let cp: Vec<f64> = (0..c.rows())
        .map(|f| c.row(f).iter().zip(&sol.p).map(|(a, b)| a * b).sum())
        .collect();
    let mut stationarity = 0.0f64;
    for j in 0..k {
        let ctr: f64 = (0..c.rows()).map(|f| c.get(f, j) * (cp[f] - z[f])).sum();
        let reg = sol.p[j] - if j == sol.anchor { 1.0 } else { 0.0 };
        let grad = 2.0 * ctr + 2.0 * lambda * reg;
        stationarity = stationarity.max((grad - sol.mu - sol.nu[j]).abs());
    }
    KktResiduals {
        stationarity,
        primal: (sol.p.iter().sum::<f64>() - 1.0).abs(),
        negativity: (-sol.p.iter().copied().fold(0.0, f64::min)).max(0.0),
        min_nu: sol.nu.iter().copied().fold(f64::INFINITY, f64::min),
        complementarity: sol.nu.iter().zip(&sol.p).map(|(a, b)| a * b).sum::<f64>().abs(),
    }
}

/// Vector-Jacobian product of a column solution `p⋆(z, C)` with `upstream`
/// (a `K`-vector on `p⋆`). Differentiates the bordered KKT system on the
/// free set; weights outside it have zero derivative.
pub fn scq_exact_vjp(
    z: &[f64],
    c: &Mat,
    lambda: f64,
    sol: &ColumnSolution,
    upstream: &[f64],
) -> Result<(Mat, Vec<f64>)> {
    let (f_dim, k) = c.shape();
    if z.len() != f_dim || upstream.len() != k || sol.p.len() != k {
        return Err(Error::contract("scq_exact_vjp", "dimension mismatch"));
    }
    let free = &sol.free;
    let s = free.len();
    let mut block = Mat::zeros(s, s);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            let dot: f64 = (0..f_dim).map(|f| c.get(f, i) * c.get(f, j)).sum();
            block.set(a, b, dot + if a == b { lambda } else { 0.0 });
        }
    }
    let top: Vec<f64> = free.iter().map(|&i| upstream[i]).collect();
    let w = bordered_solve(&block, &top, 0.0).ok_or(Error::DegenerateActiveSet {
        column: 0,
        active: s,
    })?;

    let cw: Vec<f64> = (0..f_dim)
        .map(|f| free.iter().zip(&w).map(|(&i, wi)| c.get(f, i) * wi).sum())
        .collect();
    let residual: Vec<f64> = (0..f_dim)
        .map(|f| z[f] - free.iter().map(|&i| c.get(f, i) * sol.p[i]).sum::<f64>())
        .collect();
    let mut grad_c = Mat::zeros(f_dim, k);
    for f in 0..f_dim {
        for (&i, wi) in free.iter().zip(&w) {
            grad_c.set(f, i, residual[f] * wi - cw[f] * sol.p[i]);
        }
    }
    Ok((grad_c, cw))
}

/// Differentiable exact SCQ layer: `P⋆` as a tape node followed by `Z_q = C P⋆`.
pub(crate) fn scq_exact_layer(
    tape: &mut Tape,
    z_e: NodeId,
    codebook: NodeId,
    lambda: f64,
    commit_beta: Option<f64>,
) -> Result<QuantizeResult> {
    if let Some(beta) = commit_beta {
        check_beta(beta)?;
    }
    let (p_star, flagged) = record_exact_solution(tape, z_e, codebook, lambda)?;
    let solution_value = tape.value(p_star).clone();
    let z_q = tape.matmul(codebook, p_star)?;
    let commit = match commit_beta {
        Some(beta) => commitment_loss(tape, z_e, z_q, beta)?,
        None => tape.constant(Mat::scalar(0.0)),
    };
    let (anchors, _) = vq_assign(tape.value(z_e), tape.value(codebook))?;
    let mut result = finish(tape, z_e, z_q, commit, Assignment::Soft(solution_value), anchors);
    result.flagged_columns = flagged;
    Ok(result)
}

/// Records `P⋆(Z, C)` on the tape with the KKT-based backward rule. Also
/// returns the columns whose solution is degenerate.
pub fn record_exact_solution(
    tape: &mut Tape,
    z_e: NodeId,
    codebook: NodeId,
    lambda: f64,
) -> Result<(NodeId, Vec<usize>)> {
    let z = tape.value_rc(z_e);
    let c = tape.value_rc(codebook);
    let solution = scq_exact(&z, &c, lambda)?;
    let flagged: Vec<usize> = solution
        .columns
        .iter()
        .enumerate()
        .filter(|(_, s)| s.degenerate)
        .map(|(m, _)| m)
        .collect();
    let columns = Rc::new(solution.columns);
    let node = tape.record(
        "scq_exact",
        &[z_e, codebook],
        solution.p,
        Box::new(move |g, _| {
            let (f_dim, k) = c.shape();
            let mut grad_z = Mat::zeros(f_dim, z.cols());
            let mut grad_c = Mat::zeros(f_dim, k);
            for (m, sol) in columns.iter().enumerate() {
                let zc = z.col(m);
                let u = g.col(m);
                // forward already factored this same bordered matrix
                if let Ok((gc, gz)) = scq_exact_vjp(&zc, &c, lambda, sol, &u) {
                    grad_c.add_assign(&gc);
                    grad_z.set_col(m, &gz);
                } else {
                    log::warn!("scq_exact: singular reduced system in backward, column {m}");
                }
            }
            vec![Some(grad_z), Some(grad_c)]
        }),
    )?;
    Ok((node, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_code_hand_example() {
        let c = Mat::from_rows(&[&[0.0, 1.0]]);
        let sol = scq_exact(&Mat::scalar(0.6), &c, 0.1).unwrap();
        assert!((sol.p.get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((sol.p.get(1, 0) - 2.0 / 3.0).abs() < 1e-12);
        let r = kkt_residuals(&[0.6], &c, 0.1, &sol.columns[0]);
        assert!(r.worst() <= 1e-12, "{r:?}");
    }

    #[test]
    fn interior_point_reconstructed_without_regularization() {
        let c = Mat::from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let z = Mat::column_vector(&[0.2, 0.3]);
        let sol = scq_exact(&z, &c, 0.0).unwrap();
        let zq = matmul(&c, &sol.p).unwrap();
        assert!(zq.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn huge_lambda_pins_to_anchor() {
        let c = Mat::from_rows(&[&[0.0, 1.0, 2.0], &[1.0, 0.0, 1.0]]);
        let z = Mat::column_vector(&[0.7, 0.4]);
        let sol = scq_exact(&z, &c, 1e8).unwrap();
        let (anchors, pt) = vq_assign(&z, &c).unwrap();
        assert_eq!(sol.columns[0].anchor, anchors[0]);
        assert!(sol.p.max_abs_diff(&pt.to_dense()) < 1e-3);
    }

    #[test]
    fn vertex_solution_has_nonnegative_multipliers() {
        // z sits far outside the hull beyond code 1
        let c = Mat::from_rows(&[&[0.0, 1.0, 0.5]]);
        let sol = scq_exact(&Mat::scalar(3.0), &c, 0.1).unwrap();
        let col = &sol.columns[0];
        assert_eq!(col.free, vec![1]);
        assert!(col.nu.iter().all(|&v| v >= 0.0));
        assert!(kkt_residuals(&[3.0], &c, 0.1, col).worst() < 1e-12);
    }

    #[test]
    fn vjp_vanishes_for_huge_lambda() {
        let c = Mat::from_rows(&[&[0.0, 1.0]]);
        let sol = scq_exact(&Mat::scalar(0.6), &c, 1e10).unwrap();
        let (gc, gz) = scq_exact_vjp(&[0.6], &c, 1e10, &sol.columns[0], &[1.0, -1.0]).unwrap();
        assert!(gz[0].abs() < 1e-9);
        assert!(gc.max_abs() < 1e-9);
    }
}
