//! Cholesky factorization, SPD solves, and a small pivoted LU for the
//! bordered systems of the active-set solver.

use crate::error::{Error, Result};
use crate::mat::Mat;

const SYMMETRY_TOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn factor(a: &Mat) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::contract(
                "cholesky_spd",
                format!("matrix is {}x{}, not square", a.rows(), a.cols()),
            ));
        }
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (a.get(i, j), a.get(j, i));
                if (x - y).abs() > SYMMETRY_TOL * x.abs().max(y.abs()).max(1.0) {
                    return Err(Error::contract(
                        "cholesky_spd",
                        format!("asymmetric entries ({i},{j})={x} vs ({j},{i})={y}"),
                    ));
                }
            }
        }
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        Ok(Cholesky { l })
    }

    pub fn factor_matrix(&self) -> &Mat {
        &self.l
    }

    pub fn into_factor(self) -> Mat {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `A X = B` for every column of `B` at once. Both substitutions
    /// run row by row so the inner loops sweep contiguous rows of `B`.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::contract(
                "solve_spd",
                format!("right-hand side has {} rows, system has {n}", b.rows()),
            ));
        }
        let m = b.cols();
        let mut x = b.clone();
        // forward: L Y = B
        for i in 0..n {
            for k in 0..i {
                let lik = self.l.get(i, k);
                if lik == 0.0 {
                    continue;
                }
                let (head, tail) = x.data_mut().split_at_mut(i * m);
                let src = &head[k * m..(k + 1) * m];
                for (t, s) in tail[..m].iter_mut().zip(src) {
                    *t -= lik * s;
                }
            }
            let inv = 1.0 / self.l.get(i, i);
            for v in x.row_mut(i) {
                *v *= inv;
            }
        }
        // backward: Lᵀ X = Y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = self.l.get(k, i);
                if lki == 0.0 {
                    continue;
                }
                let (head, tail) = x.data_mut().split_at_mut(k * m);
                let dst = &mut head[i * m..(i + 1) * m];
                for (t, s) in dst.iter_mut().zip(&tail[..m]) {
                    *t -= lki * s;
                }
            }
            let inv = 1.0 / self.l.get(i, i);
            for v in x.row_mut(i) {
                *v *= inv;
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Mat {
        self.solve(&Mat::identity(self.dim()))
            .expect("identity has matching rows")
    }
}

pub fn cholesky_spd(a: &Mat) -> Result<Mat> {
    Cholesky::factor(a).map(Cholesky::into_factor)
}

pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    Cholesky::factor(a)?.solve(b)
}

/// Solves the square system `a x = b` by LU with partial pivoting.
/// Returns `None` when a pivot falls below `rel_tol · max|a|`.
pub fn solve_lu(a: &Mat, b: &[f64], rel_tol: f64) -> Option<Vec<f64>> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    assert_eq!(b.len(), n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (piv, best) = (col..n)
            .map(|r| (r, lu.get(r, col).abs()))
            .fold((col, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best <= rel_tol * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                let tmp = lu.get(col, c);
                lu.set(col, c, lu.get(piv, c));
                lu.set(piv, c, tmp);
            }
            perm.swap(col, piv);
            x.swap(col, piv);
        }
        let d = lu.get(col, col);
        for r in col + 1..n {
            let f = lu.get(r, col) / d;
            if f == 0.0 {
                continue;
            }
            lu.set(r, col, f);
            for c in col + 1..n {
                lu.set(r, c, lu.get(r, c) - f * lu.get(col, c));
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for c in r + 1..n {
            s -= lu.get(r, c) * x[c];
        }
        x[r] = s / lu.get(r, r);
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::matmul;

    #[test]
    fn identity_factor_is_identity() {
        assert_eq!(cholesky_spd(&Mat::identity(4)).unwrap(), Mat::identity(4));
    }

    #[test]
    fn two_by_two_factor_by_hand() {
        let a = Mat::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let l = cholesky_spd(&a).unwrap();
        let expected = Mat::from_rows(&[&[2.0, 0.0], &[1.0, 2f64.sqrt()]]);
        assert!(l.max_abs_diff(&expected) < 1e-15);
        let llt = matmul(&l, &l.transpose()).unwrap();
        assert!(llt.max_abs_diff(&a) <= 1e-12 * a.max_abs());
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(
            cholesky_spd(&a),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn asymmetric_matrix_is_a_contract_violation() {
        let a = Mat::from_rows(&[&[2.0, 1.0], &[0.0, 2.0]]);
        assert!(matches!(cholesky_spd(&a), Err(Error::Contract { .. })));
    }

    #[test]
    fn solves_by_hand() {
        let b = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(solve_spd(&Mat::identity(2), &b).unwrap(), b);

        let a = Mat::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let x = solve_spd(&a, &Mat::column_vector(&[2.0, 8.0])).unwrap();
        assert!(x.max_abs_diff(&Mat::column_vector(&[1.0, 2.0])) < 1e-15);

        let a = Mat::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let x = solve_spd(&a, &Mat::column_vector(&[10.0, 9.0])).unwrap();
        assert!(x.max_abs_diff(&Mat::column_vector(&[1.5, 2.0])) < 1e-14);
    }

    #[test]
    fn lu_detects_singular_and_solves_bordered() {
        let singular = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(solve_lu(&singular, &[1.0, 1.0], 1e-13).is_none());
        // [[2,1],[1,0]] [p; mu] = [1; 1]
        let bordered = Mat::from_rows(&[&[2.0, 1.0], &[1.0, 0.0]]);
        let x = solve_lu(&bordered, &[1.0, 1.0], 1e-13).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] + 1.0).abs() < 1e-15);
    }
}
