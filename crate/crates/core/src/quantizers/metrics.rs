use crate::error::{Error, Result};
use crate::mat::Mat;

use super::Assignment;

/// Mean squared discrepancy between encoder outputs and their quantization.
pub fn quant_error(z_e: &Mat, z_q: &Mat) -> f64 {
    assert!(z_e.same_shape(z_q));
    if z_e.is_empty() {
        return 0.0;
    }
    let s: f64 = z_e
        .data()
        .iter()
        .zip(z_q.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    s / z_e.len() as f64
}

/// Exponential of the Shannon entropy of mean code usage.
pub fn perplexity(assignment: &Assignment) -> f64 {
    perplexity_from_usage(&assignment.usage_mass())
}

/// Perplexity from unnormalized per-code usage mass (0·ln 0 = 0).
pub fn perplexity_from_usage(mass: &[f64]) -> f64 {
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return 1.0;
    }
    let entropy: f64 = mass
        .iter()
        .map(|&w| w / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    entropy.exp().clamp(1.0, mass.len().max(1) as f64)
}

/// Keeps the `s` largest weights of every column (ties to the lowest index),
/// zeroes the rest and rescales the kept weights to sum to one.
pub fn top_s_restrict(p: &Mat, s: usize) -> Result<Mat> {
    let (k, m) = p.shape();
    if s == 0 || s > k {
        return Err(Error::contract("top_s_restrict", format!("S = {s} outside 1..={k}")));
    }
    let mut out = Mat::zeros(k, m);
    let mut order: Vec<usize> = Vec::with_capacity(k);
    for col in 0..m {
        order.clear();
        order.extend(0..k);
        order.sort_by(|&a, &b| {
            p.get(b, col)
                .partial_cmp(&p.get(a, col))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let kept = &order[..s];
        let total: f64 = kept.iter().map(|&r| p.get(r, col)).sum();
        for &r in kept {
            out.set(r, col, p.get(r, col) / total);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_extremes_and_half() {
        let uniform = Assignment::OneHot {
            codes: 4,
            indices: vec![0, 1, 2, 3],
        };
        assert!((perplexity(&uniform) - 4.0).abs() < 1e-12);
        let collapsed = Assignment::OneHot {
            codes: 4,
            indices: vec![2, 2, 2],
        };
        assert_eq!(perplexity(&collapsed), 1.0);
        assert!((perplexity_from_usage(&[0.5, 0.5, 0.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn soft_perplexity_clamps_negatives() {
        // column sums to one but carries a negative entry
        let p = Mat::from_rows(&[&[1.1], &[-0.1]]);
        assert_eq!(perplexity(&Assignment::Soft(p)), 1.0);
    }

    #[test]
    fn top_s_examples() {
        let p = Mat::column_vector(&[0.5, 0.3, 0.2]);
        let r = top_s_restrict(&p, 2).unwrap();
        assert!(r.max_abs_diff(&Mat::column_vector(&[0.625, 0.375, 0.0])) < 1e-15);
        let r = top_s_restrict(&p, 3).unwrap();
        assert!(r.max_abs_diff(&p) < 1e-15);
        let ties = Mat::column_vector(&[0.25, 0.5, 0.25]);
        let r = top_s_restrict(&ties, 1).unwrap();
        assert_eq!(r, Mat::column_vector(&[0.0, 1.0, 0.0]));
        let r = top_s_restrict(&ties, 2).unwrap();
        assert!(r.max_abs_diff(&Mat::column_vector(&[1.0 / 3.0, 2.0 / 3.0, 0.0])) < 1e-15);
        assert!(top_s_restrict(&p, 0).is_err());
        assert!(top_s_restrict(&p, 4).is_err());
    }
}
