//! Slow reference implementations for cross-checking the production solvers.
//!
//! Nothing here shares code with the quantizers beyond [`Mat`]: the QP is
//! solved by projected gradient descent with an exact sort-based simplex
//! projection, and derivatives are taken by central differences.

use crate::mat::Mat;

/// How far an oracle answer is from a reference answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    /// `f(reference) − f(oracle)`; non-negative up to rounding when the
    /// oracle is at least as good.
    pub objective_gap: f64,
    /// `‖p_reference − p_oracle‖∞`
    pub argmin_distance: f64,
    pub iterations: usize,
}

/// Euclidean projection onto `{p ≥ 0, 1ᵀp = 1}` by sorting and thresholding.
pub fn simplex_euclidean_project(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn objective(z: &[f64], c: &Mat, lambda: f64, p_tilde: &[f64], p: &[f64]) -> f64 {
    let mut fit = 0.0;
    for (f, zf) in z.iter().enumerate() {
        let r = zf - c.row(f).iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
        fit += r * r;
    }
    let reg: f64 = p.iter().zip(p_tilde).map(|(a, b)| (a - b) * (a - b)).sum();
    fit + lambda * reg
}

/// Largest eigenvalue of `CᵀC` by power iteration.
fn largest_gram_eigenvalue(c: &Mat) -> f64 {
    let k = c.cols();
    let mut v: Vec<f64> = (0..k).map(|i| 1.0 + (i as f64) * 1e-3).collect();
    let mut estimate = 0.0;
    for _ in 0..10_000 {
        let cv: Vec<f64> = (0..c.rows())
            .map(|f| c.row(f).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut w = vec![0.0; k];
        for (f, cvf) in cv.iter().enumerate() {
            for (wj, cfj) in w.iter_mut().zip(c.row(f)) {
                *wj += cfj * cvf;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - estimate).abs() <= 1e-13 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Minimizes `‖z − Cp‖² + λ‖p − p̃‖²` over the unit simplex by projected
/// gradient descent, returning the best iterate.
pub fn qp_oracle_column(z: &[f64], c: &Mat, lambda: f64, p_tilde: &[f64]) -> Vec<f64> {
    qp_oracle_column_with_iterations(z, c, lambda, p_tilde).0
}

fn qp_oracle_column_with_iterations(
    z: &[f64],
    c: &Mat,
    lambda: f64,
    p_tilde: &[f64],
) -> (Vec<f64>, usize) {
    let k = c.cols();
    // 1% headroom on the Lipschitz constant absorbs power-iteration error
    let lipschitz = 2.0 * (largest_gram_eigenvalue(c) * 1.01 + lambda);
    let step = 1.0 / lipschitz;
    let mut p = simplex_euclidean_project(p_tilde);
    let mut value = objective(z, c, lambda, p_tilde, &p);
    let mut best = (value, p.clone());
    let mut iterations = 0;
    while iterations < 1_000_000 {
        iterations += 1;
        let residual: Vec<f64> = (0..c.rows())
            .map(|f| c.row(f).iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() - z[f])
            .collect();
        let mut grad: Vec<f64> = (0..k).map(|j| 2.0 * lambda * (p[j] - p_tilde[j])).collect();
        for (f, rf) in residual.iter().enumerate() {
            for (g, cfj) in grad.iter_mut().zip(c.row(f)) {
                *g += 2.0 * cfj * rf;
            }
        }
        let trial: Vec<f64> = p.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
        let next = simplex_euclidean_project(&trial);
        let next_value = objective(z, c, lambda, p_tilde, &next);
        let moved = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let decrease = value - next_value;
        p = next;
        value = next_value;
        if value < best.0 {
            best = (value, p.clone());
        }
        // near the optimum the objective flattens quadratically, so also
        // require the iterate itself to have settled
        if decrease < 1e-14 && moved < 1e-13 {
            break;
        }
    }
    (best.1, iterations)
}

/// Runs the oracle and compares it with a candidate solution.
pub fn qp_oracle_report(
    z: &[f64],
    c: &Mat,
    lambda: f64,
    p_tilde: &[f64],
    candidate: &[f64],
) -> (Vec<f64>, OracleReport) {
    let (p, iterations) = qp_oracle_column_with_iterations(z, c, lambda, p_tilde);
    let report = OracleReport {
        objective_gap: objective(z, c, lambda, p_tilde, candidate)
            - objective(z, c, lambda, p_tilde, &p),
        argmin_distance: p
            .iter()
            .zip(candidate)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        iterations,
    };
    (p, report)
}

/// Objective of the per-column problem, exposed for tests.
pub fn qp_objective(z: &[f64], c: &Mat, lambda: f64, p_tilde: &[f64], p: &[f64]) -> f64 {
    objective(z, c, lambda, p_tilde, p)
}

/// Central differences `(f(x + εe) − f(x − εe)) / 2ε` for every entry of `x`.
pub fn fd_gradient<F: FnMut(&Mat) -> f64>(mut f: F, x: &Mat, eps: f64) -> Mat {
    let mut probe = x.clone();
    let mut grad = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}
