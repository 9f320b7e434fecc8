use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

/// Learnable code vectors stored as the columns of an `F×K` matrix, plus the
/// per-code count of consecutive steps without any assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Mat,
    idle_steps: Vec<u64>,
}

impl Codebook {
    pub fn new(vectors: Mat) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::contract("Codebook::new", "codebook needs F ≥ 1 and K ≥ 1"));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        let k = vectors.cols();
        Ok(Codebook {
            vectors,
            idle_steps: vec![0; k],
        })
    }

    /// Entries drawn uniformly from `(−1/K, 1/K)`.
    pub fn random(dim: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / size.max(1) as f64;
        let data = (0..dim * size).map(|_| rng.uniform(-bound, bound)).collect();
        Self::new(Mat::from_vec(dim, size, data)?)
    }

    /// Restores a codebook together with its idle counters.
    pub fn with_idle_steps(vectors: Mat, idle_steps: Vec<u64>) -> Result<Self> {
        let mut cb = Self::new(vectors)?;
        if idle_steps.len() != cb.size() {
            return Err(Error::contract("Codebook::with_idle_steps", "one idle counter per code"));
        }
        cb.idle_steps = idle_steps;
        Ok(cb)
    }

    pub fn dim(&self) -> usize {
        self.vectors.rows()
    }

    pub fn size(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Mat {
        &mut self.vectors
    }

    pub fn idle_steps(&self) -> &[u64] {
        &self.idle_steps
    }

    /// Resets the idle counter of every code in `used` and ages the rest.
    pub fn record_usage(&mut self, used: &[usize]) {
        let mut hit = vec![false; self.size()];
        for &k in used {
            hit[k] = true;
        }
        for (idle, h) in self.idle_steps.iter_mut().zip(hit) {
            *idle = if h { 0 } else { *idle + 1 };
        }
    }
}

/// Overwrites every code idle for at least `threshold_steps` steps with a
/// uniformly drawn column of `z_e`, resetting its counter. Dead codes are
/// visited in ascending order, one draw each. Returns the replaced indices.
pub fn codebook_replacement(
    codebook: &mut Codebook,
    z_e: &Mat,
    threshold_steps: u64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if z_e.rows() != codebook.dim() {
        return Err(Error::contract(
            "codebook_replacement",
            format!("latents have {} rows, codebook dim {}", z_e.rows(), codebook.dim()),
        ));
    }
    let mut replaced = Vec::new();
    if z_e.cols() == 0 {
        return Ok(replaced);
    }
    for k in 0..codebook.size() {
        if codebook.idle_steps[k] >= threshold_steps {
            let col = z_e.col(rng.below(z_e.cols()));
            codebook.vectors.set_col(k, &col);
            codebook.idle_steps[k] = 0;
            replaced.push(k);
        }
    }
    Ok(replaced)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_used_leaves_codebook_unchanged() {
        let mut cb = Codebook::new(Mat::from_rows(&[&[0.0, 1.0]])).unwrap();
        let before = cb.clone();
        cb.record_usage(&[0, 1]);
        let mut rng = Rng::new(0);
        let replaced = codebook_replacement(&mut cb, &Mat::from_rows(&[&[5.0]]), 1, &mut rng).unwrap();
        assert!(replaced.is_empty());
        assert_eq!(cb, before);
    }

    #[test]
    fn dead_code_takes_the_only_batch_column() {
        let mut cb = Codebook::new(Mat::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]])).unwrap();
        for _ in 0..3 {
            cb.record_usage(&[0]);
        }
        let z = Mat::column_vector(&[0.25, -0.75]);
        let mut rng = Rng::new(9);
        let replaced = codebook_replacement(&mut cb, &z, 3, &mut rng).unwrap();
        assert_eq!(replaced, vec![1]);
        assert_eq!(cb.vectors().col(1), vec![0.25, -0.75]);
        assert_eq!(cb.idle_steps(), &[0, 0]);
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(11);
            let mut cb = Codebook::random(3, 6, &mut rng).unwrap();
            let z = Mat::from_vec(3, 10, (0..30).map(|i| i as f64 * 0.1).collect()).unwrap();
            let mut log = Vec::new();
            for step in 0..20u64 {
                cb.record_usage(&[(step % 2) as usize]);
                let mut step_rng = rng.substream(step);
                log.push(codebook_replacement(&mut cb, &z, 4, &mut step_rng).unwrap());
            }
            (cb, log)
        };
        assert_eq!(run(), run());
    }
}
