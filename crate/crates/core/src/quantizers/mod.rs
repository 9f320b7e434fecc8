//! Quantization bottlenecks.
//!
//! Every quantizer maps encoder latents `Z_e` (an `F×M` node, one column per
//! spatial position) and a codebook `C` (`F×K` node) to quantized latents
//! `Z_q`, a commitment-loss node and diagnostics. The soft convex variants
//! solve, per column, the simplex-constrained least-squares problem
//!
//! ```text
//! min_p ‖z − C p‖² + λ ‖p − p̃‖²   s.t.  p ≥ 0, 1ᵀp = 1
//! ```
//!
//! where `p̃` is the one-hot nearest-code assignment. [`scq_fast`] uses the
//! regularized linear solve followed by a fixed number of alternating
//! orthant/hyperplane projections; [`scq_exact`] solves the problem to KKT
//! tolerance with an active-set method and differentiates the active KKT
//! system.

mod codebook;
mod gumbel;
mod metrics;
pub mod scq_exact;
pub mod scq_fast;
pub mod simplex;
mod vq;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

pub use codebook::{codebook_replacement, Codebook};
pub use gumbel::gumbel_quantize;
pub use metrics::{perplexity, perplexity_from_usage, quant_error, top_s_restrict};
pub use scq_exact::{scq_exact, scq_exact_vjp, ColumnSolution, ExactSolution};
pub use scq_fast::scq_fast;
pub use simplex::simplex_project_steps;
pub use vq::{commitment_loss, rq_quantize, vq_assign, vq_assign_brute_force, vq_quantize_ste};

/// Weights assigning each data column to codebook vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    /// `indices[m]` is the single code used by column `m`.
    OneHot { codes: usize, indices: Vec<usize> },
    /// Dense `K×M` weights; columns sum to one (entries may dip slightly
    /// below zero for the fast relaxation).
    Soft(Mat),
}

impl Assignment {
    pub fn num_codes(&self) -> usize {
        match self {
            Assignment::OneHot { codes, .. } => *codes,
            Assignment::Soft(p) => p.rows(),
        }
    }

    pub fn num_columns(&self) -> usize {
        match self {
            Assignment::OneHot { indices, .. } => indices.len(),
            Assignment::Soft(p) => p.cols(),
        }
    }

    pub fn to_dense(&self) -> Mat {
        match self {
            Assignment::OneHot { codes, indices } => {
                let mut p = Mat::zeros(*codes, indices.len());
                for (m, &k) in indices.iter().enumerate() {
                    p.set(k, m, 1.0);
                }
                p
            }
            Assignment::Soft(p) => p.clone(),
        }
    }

    /// Total usage mass per code. Soft columns are clamped at zero and
    /// renormalized first, so every column contributes exactly one unit.
    pub fn usage_mass(&self) -> Vec<f64> {
        match self {
            Assignment::OneHot { codes, indices } => {
                let mut mass = vec![0.0; *codes];
                for &k in indices {
                    mass[k] += 1.0;
                }
                mass
            }
            Assignment::Soft(p) => {
                let (k, m) = p.shape();
                let mut sums = vec![0.0; m];
                for r in 0..k {
                    for (s, v) in sums.iter_mut().zip(p.row(r)) {
                        *s += v.max(0.0);
                    }
                }
                let mut mass = vec![0.0; k];
                for (r, out) in mass.iter_mut().enumerate() {
                    *out = p
                        .row(r)
                        .iter()
                        .zip(&sums)
                        .map(|(v, s)| if *s > 0.0 { v.max(0.0) / s } else { 0.0 })
                        .sum();
                }
                mass
            }
        }
    }

    /// Most negative entry (0 for one-hot assignments).
    pub fn min_entry(&self) -> f64 {
        match self {
            Assignment::OneHot { .. } => 0.0,
            Assignment::Soft(p) => p.min().min(0.0),
        }
    }
}

/// Hyperparameters of the fast soft convex quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScqConfig {
    /// Regularization weight pulling the solution toward the one-hot VQ code.
    pub lambda: f64,
    /// Number of clamp-then-shift projection rounds.
    pub steps: usize,
    /// Clamp and renormalize once more after the last round.
    #[serde(default)]
    pub final_clamp: bool,
}

impl Default for ScqConfig {
    fn default() -> Self {
        ScqConfig {
            lambda: 0.1,
            steps: 20,
            final_clamp: false,
        }
    }
}

impl ScqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::contract("scq_fast", format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.steps == 0 {
            return Err(Error::contract("scq_fast", "at least one projection step is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of a quantizer forward pass.
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    pub z_q: NodeId,
    pub commit_loss: NodeId,
    pub assignment: Assignment,
    /// Nearest-code index per column (the sampled index for Gumbel; depth-major
    /// `D×M` codes for residual quantization).
    pub codes: Vec<usize>,
    pub quant_error: f64,
    pub min_entry: f64,
    pub perplexity: f64,
    /// Columns whose active set is degenerate (exact solver only).
    pub flagged_columns: Vec<usize>,
}

/// A configured bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub enum Quantizer {
    /// Nearest-code assignment with straight-through gradients.
    Vq { beta: f64 },
    Gumbel { beta: f64, tau: f64 },
    Residual { beta: f64, depth: usize },
    ScqFast { beta: f64, config: ScqConfig, commit: bool },
    ScqExact { beta: f64, lambda: f64, commit: bool },
    /// `Z_q := Z_e`; used for ablations.
    Identity,
}

impl Quantizer {
    pub fn is_soft(&self) -> bool {
        matches!(
            self,
            Quantizer::ScqFast { .. } | Quantizer::ScqExact { .. } | Quantizer::Gumbel { .. }
        )
    }

    pub fn quantize(
        &self,
        tape: &mut Tape,
        z_e: NodeId,
        codebook: NodeId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<QuantizeResult> {
        match *self {
            Quantizer::Vq { beta } => vq_quantize_ste(tape, z_e, codebook, beta),
            Quantizer::Gumbel { beta, tau } => {
                gumbel_quantize(tape, z_e, codebook, beta, tau, mode, rng)
            }
            Quantizer::Residual { beta, depth } => rq_quantize(tape, z_e, codebook, beta, depth),
            Quantizer::ScqFast {
                beta,
                config,
                commit,
            } => scq_fast::scq_fast(tape, z_e, codebook, &config, commit.then_some(beta)),
            Quantizer::ScqExact {
                beta,
                lambda,
                commit,
            } => scq_exact::scq_exact_layer(tape, z_e, codebook, lambda, commit.then_some(beta)),
            Quantizer::Identity => {
                let (k, m) = (tape.value(codebook).cols(), tape.value(z_e).cols());
                let commit_loss = tape.constant(Mat::scalar(0.0));
                Ok(QuantizeResult {
                    z_q: z_e,
                    commit_loss,
                    assignment: Assignment::OneHot {
                        codes: k,
                        indices: vec![0; m],
                    },
                    codes: vec![0; m],
                    quant_error: 0.0,
                    min_entry: 0.0,
                    perplexity: 1.0,
                    flagged_columns: Vec::new(),
                })
            }
        }
    }
}

/// Assembles the diagnostics shared by all quantizers.
pub(crate) fn finish(
    tape: &Tape,
    z_e: NodeId,
    z_q: NodeId,
    commit_loss: NodeId,
    assignment: Assignment,
    codes: Vec<usize>,
) -> QuantizeResult {
    let quant_error = quant_error(tape.value(z_e), tape.value(z_q));
    let perplexity = perplexity(&assignment);
    let min_entry = assignment.min_entry();
    QuantizeResult {
        z_q,
        commit_loss,
        assignment,
        codes,
        quant_error,
        min_entry,
        perplexity,
        flagged_columns: Vec::new(),
    }
}
