//! Alternating orthant/hyperplane projection of assignment columns.
//!
//! One round is `p ← max(0, p)` followed by `p ← p − ((1ᵀp − 1)/K)·1`. The
//! shift runs last, so after any number of rounds every column sums to one
//! exactly (up to rounding) while small negative entries may survive.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Runs exactly `steps` clamp-then-shift rounds on every column of `p`.
pub fn simplex_project_steps(p: &Mat, steps: usize) -> Mat {
    project(p, steps)
}

const BLOCK: usize = 64;

/// Copies columns `c0..c0+w` of `p` into a row-major `K×w` block.
fn load_block(p: &Mat, c0: usize, w: usize, out: &mut Vec<f64>) {
    out.clear();
    for r in 0..p.rows() {
        out.extend_from_slice(&p.row(r)[c0..c0 + w]);
    }
}

fn store_block(out: &mut Mat, c0: usize, w: usize, block: &[f64]) {
    for r in 0..out.rows() {
        out.row_mut(r)[c0..c0 + w].copy_from_slice(&block[r * w..(r + 1) * w]);
    }
}

/// All rounds on one row-major `K×w` block. With `masks`, also records
/// which entries survived each clamp (`steps·K·w` bytes, round-major).
fn project_block(block: &mut [f64], w: usize, steps: usize, mut masks: Option<&mut Vec<u8>>) {
    let kf = (block.len() / w) as f64;
    let mut sums = [0.0; BLOCK];
    if let Some(ms) = masks.as_deref_mut() {
        ms.clear();
    }
    for _ in 0..steps {
        sums[..w].fill(0.0);
        for row in block.chunks_exact_mut(w) {
            if let Some(ms) = masks.as_deref_mut() {
                ms.extend(row.iter().map(|&v| u8::from(v > 0.0)));
            }
            for (v, s) in row.iter_mut().zip(&mut sums[..w]) {
                *v = if *v > 0.0 { *v } else { 0.0 };
                *s += *v;
            }
        }
        for s in &mut sums[..w] {
            *s = (*s - 1.0) / kf;
        }
        for row in block.chunks_exact_mut(w) {
            for (v, s) in row.iter_mut().zip(&sums[..w]) {
                *v -= s;
            }
        }
    }
}

/// Processes 64 columns at a time: a `K×64` block stays in cache for all
/// rounds, and the per-column sums run across rows so they vectorize. Each
/// column is still summed in row order.
fn project(p: &Mat, steps: usize) -> Mat {
    let (k, m) = p.shape();
    let mut out = Mat::zeros(k, m);
    let mut block = Vec::with_capacity(k * BLOCK);
    for c0 in (0..m).step_by(BLOCK) {
        let w = BLOCK.min(m - c0);
        load_block(p, c0, w, &mut block);
        project_block(&mut block, w, steps, None);
        store_block(&mut out, c0, w, &block);
    }
    out
}

impl Tape {
    /// Differentiable [`simplex_project_steps`]; the clamp's subgradient at 0
    /// is 0 and the shift is affine. The backward pass replays the forward
    /// rounds block by block to recover the clamp pattern instead of storing
    /// it for the whole matrix.
    pub fn simplex_project(&mut self, p: NodeId, steps: usize) -> Result<NodeId> {
        if steps == 0 {
            return Err(Error::contract("simplex_project", "steps must be at least 1"));
        }
        let input = self.value(p).clone();
        let value = project(&input, steps);
        self.record(
            "simplex_project",
            &[p],
            value,
            Box::new(move |g, _| {
                let (k, m) = input.shape();
                let kf = k as f64;
                let mut out = Mat::zeros(k, m);
                let mut replay = Vec::with_capacity(k * BLOCK);
                let mut block = Vec::with_capacity(k * BLOCK);
                let mut masks = Vec::with_capacity(steps * k * BLOCK);
                let mut means = [0.0; BLOCK];
                for c0 in (0..m).step_by(BLOCK) {
                    let w = BLOCK.min(m - c0);
                    load_block(&input, c0, w, &mut replay);
                    project_block(&mut replay, w, steps, Some(&mut masks));
                    load_block(g, c0, w, &mut block);
                    for step in (0..steps).rev() {
                        means[..w].fill(0.0);
                        for row in block.chunks_exact(w) {
                            for (s, v) in means[..w].iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        for s in &mut means[..w] {
                            *s /= kf;
                        }
                        let round = &masks[step * k * w..(step + 1) * k * w];
                        for (row, keep) in block.chunks_exact_mut(w).zip(round.chunks_exact(w)) {
                            for ((v, s), &keep) in row.iter_mut().zip(&means[..w]).zip(keep) {
                                *v = if keep != 0 { *v - s } else { 0.0 };
                            }
                        }
                    }
                    store_block(&mut out, c0, w, &block);
                }
                vec![Some(out)]
            }),
        )
    }

    /// Divides each column by its sum. Columns must have positive sums.
    pub fn normalize_cols(&mut self, p: NodeId) -> Result<NodeId> {
        let vp = self.value(p);
        let sums = vp.col_sums();
        if let Some(bad) = sums.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::contract(
                "normalize_cols",
                format!("column {bad} has non-positive sum {}", sums[bad]),
            ));
        }
        let mut y = vp.clone();
        for r in 0..y.rows() {
            for (v, s) in y.row_mut(r).iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        let y_saved = std::rc::Rc::new(y.clone());
        self.record(
            "normalize_cols",
            &[p],
            y,
            Box::new(move |g, _| {
                let dots = y_saved.hadamard(g).expect("same shape").col_sums();
                let mut out = g.clone();
                for r in 0..out.rows() {
                    for ((v, d), s) in out.row_mut(r).iter_mut().zip(&dots).zip(&sums) {
                        *v = (*v - d) / s;
                    }
                }
                vec![Some(out)]
            }),
        )
    }
}
