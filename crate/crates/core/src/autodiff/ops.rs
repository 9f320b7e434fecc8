//! Differentiable primitives.

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::mat::{matmul, Mat};

use super::{NodeId, Tape};

fn shape_error(op: &'static str, a: &Mat, b: &Mat) -> Error {
    Error::contract(op, format!("shape {:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_error("add", va, vb));
        }
        let value = va.zip_map(vb, |x, y| x + y);
        self.record(
            "add",
            &[a, b],
            value,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_error("sub", va, vb));
        }
        let value = va.zip_map(vb, |x, y| x - y);
        self.record(
            "sub",
            &[a, b],
            value,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        )
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let value = va.hadamard(&vb).map_err(|_| shape_error("mul", &va, &vb))?;
        self.record(
            "mul",
            &[a, b],
            value,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&vb, |x, y| x * y)),
                    needs[1].then(|| g.zip_map(&va, |x, y| x * y)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.record("scale", &[a], value, Box::new(move |g, _| vec![Some(g.scale(s))]))
            .expect("input is on tape")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let value = matmul(&va, &vb)?;
        self.record(
            "matmul",
            &[a, b],
            value,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| matmul(g, &vb.transpose()).expect("shapes checked"));
                let gb = needs[1].then(|| matmul(&va.transpose(), g).expect("shapes checked"));
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.record(
            "transpose",
            &[a],
            value,
            Box::new(|g, _| vec![Some(g.transpose())]),
        )
        .expect("input is on tape")
    }

    /// `max(floor, x)` entrywise. The subgradient at `x == floor` is 0.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.clamp_min_tagged(a, floor, "clamp_min")
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.clamp_min_tagged(a, 0.0, "relu")
    }

    fn clamp_min_tagged(&mut self, a: NodeId, floor: f64, op: &'static str) -> NodeId {
        let x = self.value_rc(a);
        let value = x.map(|v| if v > floor { v } else { floor });
        self.record(
            op,
            &[a],
            value,
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |gv, xv| if xv > floor { gv } else { 0.0 }))]
            }),
        )
        .expect("input is on tape")
    }

    /// Adds a `rows×1` bias to every column of `x`.
    pub fn add_col_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.shape() != (vx.rows(), 1) {
            return Err(shape_error("add_col_bias", vx, vb));
        }
        let mut value = vx.clone();
        for r in 0..value.rows() {
            let b = vb.get(r, 0);
            for v in value.row_mut(r) {
                *v += b;
            }
        }
        self.record(
            "add_col_bias",
            &[x, bias],
            value,
            Box::new(|g, needs| vec![Some(g.clone()), needs[1].then(|| g.row_sums())]),
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).shape();
        let value = Mat::scalar(self.value(a).sum());
        self.record(
            "sum",
            &[a],
            value,
            Box::new(move |g, _| vec![Some(Mat::filled(r, c, g.get(0, 0)))]),
        )
        .expect("input is on tape")
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).shape();
        let n = (r * c).max(1) as f64;
        let value = Mat::scalar(self.value(a).sum() / n);
        self.record(
            "mean",
            &[a],
            value,
            Box::new(move |g, _| vec![Some(Mat::filled(r, c, g.get(0, 0) / n))]),
        )
        .expect("input is on tape")
    }

    /// Mean of squared entrywise differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(shape_error("mse", va, vb));
        }
        let diff = va.zip_map(vb, |x, y| x - y);
        let n = diff.len().max(1) as f64;
        let value = Mat::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / n);
        self.record(
            "mse",
            &[a, b],
            value,
            Box::new(move |g, needs| {
                let s = 2.0 * g.get(0, 0) / n;
                vec![
                    needs[0].then(|| diff.scale(s)),
                    needs[1].then(|| diff.scale(-s)),
                ]
            }),
        )
    }

    /// Stop-gradient: same value, no gradient ever reaches `a` through it.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push("detach", value, vec![a], None, false)
    }

    /// Emits `value` in the forward pass while routing the upstream gradient
    /// unchanged to `x` (straight-through estimator).
    pub fn straight_through(&mut self, x: NodeId, value: Mat) -> Result<NodeId> {
        if !self.value(x).same_shape(&value) {
            return Err(shape_error("straight_through", self.value(x), &value));
        }
        self.record(
            "straight_through",
            &[x],
            value,
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    /// Column gather `out[:, m] = c[:, idx[m]]`.
    pub fn gather_cols(&mut self, c: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vc = self.value(c);
        let (f, k) = vc.shape();
        if let Some(bad) = idx.iter().find(|&&j| j >= k) {
            return Err(Error::contract(
                "gather_cols",
                format!("index {bad} out of range for {k} columns"),
            ));
        }
        let m = idx.len();
        let mut value = Mat::zeros(f, m);
        for r in 0..f {
            let src = vc.row(r);
            for (o, &j) in value.row_mut(r).iter_mut().zip(idx) {
                *o = src[j];
            }
        }
        let idx = idx.to_vec();
        self.record(
            "gather_cols",
            &[c],
            value,
            Box::new(move |g, _| {
                let mut gc = Mat::zeros(f, k);
                for r in 0..f {
                    let grow = g.row(r);
                    let dst = gc.row_mut(r);
                    for (gv, &j) in grow.iter().zip(&idx) {
                        dst[j] += gv;
                    }
                }
                vec![Some(gc)]
            }),
        )
    }

    /// Affine shift of every column onto the hyperplane `1ᵀp = 1`:
    /// `p ← p − ((Σ p − 1)/K)·1`.
    pub fn col_shift(&mut self, p: NodeId) -> NodeId {
        let vp = self.value(p);
        let k = vp.rows() as f64;
        let shifts: Vec<f64> = vp.col_sums().iter().map(|s| (s - 1.0) / k).collect();
        let mut value = vp.clone();
        for r in 0..value.rows() {
            for (v, s) in value.row_mut(r).iter_mut().zip(&shifts) {
                *v -= s;
            }
        }
        self.record(
            "col_shift",
            &[p],
            value,
            Box::new(move |g, _| {
                let means: Vec<f64> = g.col_sums().iter().map(|s| s / k).collect();
                let mut out = g.clone();
                for r in 0..out.rows() {
                    for (v, mu) in out.row_mut(r).iter_mut().zip(&means) {
                        *v -= mu;
                    }
                }
                vec![Some(out)]
            }),
        )
        .expect("input is on tape")
    }

    /// `X = A⁻¹ B` for symmetric positive definite `A`.
    pub fn solve_spd(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let chol = Cholesky::factor(self.value(a))?;
        let x = std::rc::Rc::new(chol.solve(self.value(b))?);
        let value = (*x).clone();
        self.record(
            "solve_spd",
            &[a, b],
            value,
            Box::new(move |g, needs| {
                let gb = chol.solve(g).expect("shapes checked");
                let ga = needs[0].then(|| symmetric_outer_grad(&gb, &x));
                vec![ga, needs[1].then_some(gb)]
            }),
        )
    }

    /// Squared Euclidean distances between codebook columns and data columns:
    /// `D[j, m] = ‖z_m − c_j‖²` for `c: F×K`, `z: F×M`.
    pub fn sq_dist(&mut self, c: NodeId, z: NodeId) -> Result<NodeId> {
        let (vc, vz) = (self.value_rc(c), self.value_rc(z));
        if vc.rows() != vz.rows() {
            return Err(shape_error("sq_dist", &vc, &vz));
        }
        let value = squared_distances(&vc, &vz);
        self.record(
            "sq_dist",
            &[c, z],
            value,
            Box::new(move |g, needs| {
                // ∂/∂z = 2 z·diag(1ᵀG) − 2 C G ; ∂/∂c = 2 c·diag(G1) − 2 Z Gᵀ
                let gc = needs[0].then(|| {
                    let row_tot = g.row_sums();
                    let zg = matmul(&vz, &g.transpose()).expect("shapes checked");
                    let mut out = Mat::zeros(vc.rows(), vc.cols());
                    for f in 0..vc.rows() {
                        for j in 0..vc.cols() {
                            out.set(f, j, 2.0 * vc.get(f, j) * row_tot.get(j, 0) - 2.0 * zg.get(f, j));
                        }
                    }
                    out
                });
                let gz = needs[1].then(|| {
                    let col_tot = g.col_sums();
                    let cg = matmul(&vc, g).expect("shapes checked");
                    let mut out = Mat::zeros(vz.rows(), vz.cols());
                    for f in 0..vz.rows() {
                        let (zr, cgr) = (vz.row(f), cg.row(f));
                        for (m, o) in out.row_mut(f).iter_mut().enumerate() {
                            *o = 2.0 * zr[m] * col_tot[m] - 2.0 * cgr[m];
                        }
                    }
                    out
                });
                vec![gc, gz]
            }),
        )
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, x: NodeId) -> NodeId {
        let y = std::rc::Rc::new(softmax_columns(self.value(x)));
        let value = (*y).clone();
        self.record(
            "softmax_cols",
            &[x],
            value,
            Box::new(move |g, _| {
                let dots = y.hadamard(g).expect("same shape").col_sums();
                let mut out = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    for (m, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = yr[m] * (gr[m] - dots[m]);
                    }
                }
                vec![Some(out)]
            }),
        )
        .expect("input is on tape")
    }
}

/// `−sym(G Xᵀ)`: gradient of `⟨U, A⁻¹B⟩` w.r.t. a symmetric `A`, given
/// `G = A⁻¹U`.
fn symmetric_outer_grad(gb: &Mat, x: &Mat) -> Mat {
    let ga = matmul(gb, &x.transpose()).expect("shapes checked");
    let gat = ga.transpose();
    ga.zip_map(&gat, |p, q| -0.5 * (p + q))
}

/// Vector-Jacobian product of `X = A⁻¹B` with symmetric `A`:
/// `grad_B = A⁻¹U`, `grad_A = −sym(grad_B Xᵀ)`.
pub fn solve_spd_vjp(a: &Mat, b: &Mat, x: &Mat, upstream: &Mat) -> Result<(Mat, Mat)> {
    if b.shape() != x.shape() || x.shape() != upstream.shape() {
        return Err(Error::contract(
            "solve_spd_vjp",
            format!(
                "B {:?}, X {:?}, upstream {:?} must agree",
                b.shape(),
                x.shape(),
                upstream.shape()
            ),
        ));
    }
    let gb = Cholesky::factor(a)?.solve(upstream)?;
    let ga = symmetric_outer_grad(&gb, x);
    Ok((ga, gb))
}

/// `D[j, m] = ‖z_m‖² + ‖c_j‖² − 2 c_jᵀ z_m`.
pub fn squared_distances(c: &Mat, z: &Mat) -> Mat {
    let ctz = matmul(&c.transpose(), z).expect("row counts checked by caller");
    let cn = c.zip_map(c, |a, b| a * b).col_sums();
    let zn = z.zip_map(z, |a, b| a * b).col_sums();
    let mut d = ctz;
    for (j, cnj) in cn.iter().enumerate() {
        for (v, znm) in d.row_mut(j).iter_mut().zip(&zn) {
            *v = znm + cnj - 2.0 * *v;
        }
    }
    d
}

pub fn softmax_columns(x: &Mat) -> Mat {
    let (k, m) = x.shape();
    let mut maxes = vec![f64::NEG_INFINITY; m];
    for r in 0..k {
        for (mx, v) in maxes.iter_mut().zip(x.row(r)) {
            *mx = mx.max(*v);
        }
    }
    let mut out = Mat::zeros(k, m);
    for r in 0..k {
        for ((o, v), mx) in out.row_mut(r).iter_mut().zip(x.row(r)).zip(&maxes) {
            *o = (v - mx).exp();
        }
    }
    let sums = out.col_sums();
    for r in 0..k {
        for (o, s) in out.row_mut(r).iter_mut().zip(&sums) {
            *o /= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_passes_upstream_to_both() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[&[1.0, 2.0]]));
        let b = t.leaf(Mat::from_rows(&[&[3.0, 4.0]]));
        let s = t.add(a, b).unwrap();
        let w = t.constant(Mat::from_rows(&[&[2.0], &[-1.0]]));
        let y = t.matmul(s, w).unwrap();
        let g = t.backward(y).unwrap();
        let expected = Mat::from_rows(&[&[2.0, -1.0]]);
        assert_eq!(g.get(a), expected);
        assert_eq!(g.get(b), expected);
    }

    #[test]
    fn relu_slopes() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[&[-1.0, 2.0]]));
        let r = t.relu(a);
        let w = t.constant(Mat::from_rows(&[&[5.0], &[7.0]]));
        let y = t.matmul(r, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a), Mat::from_rows(&[&[0.0, 7.0]]));
    }

    #[test]
    fn clamp_subgradient_at_floor_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[&[0.0, 1e-300]]));
        let r = t.clamp_min(a, 0.0);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a), Mat::from_rows(&[&[0.0, 1.0]]));
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[&[1.5, -2.0]]));
        let d = t.detach(a);
        let s = t.sum(d);
        let both = t.add(s, s).unwrap();
        let g = t.backward(both).unwrap();
        assert!(g.get(a).data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn sum_and_half_square() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().get(x), Mat::filled(2, 2, 1.0));

        let zero = t.constant(Mat::zeros(2, 2));
        let m = t.mse(x, zero).unwrap();
        let half_sq = t.scale(m, 0.5 * 4.0);
        let g = t.backward(half_sq).unwrap();
        assert!(g.get(x).max_abs_diff(t.value(x)) < 1e-15);
    }

    #[test]
    fn straight_through_is_identity_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_rows(&[&[0.3, 0.7]]));
        let q = t.straight_through(x, Mat::from_rows(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(t.value(q), &Mat::from_rows(&[&[0.0, 1.0]]));
        let w = t.constant(Mat::from_rows(&[&[2.0], &[3.0]]));
        let y = t.matmul(q, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x), Mat::from_rows(&[&[2.0, 3.0]]));
    }

    #[test]
    fn solve_vjp_identity_and_scalar() {
        let u = Mat::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let b = Mat::from_rows(&[&[0.5, 1.0], &[2.0, 0.0]]);
        let (ga, gb) = solve_spd_vjp(&Mat::identity(2), &b, &b, &u).unwrap();
        assert_eq!(gb, u);
        let raw = matmul(&u, &b.transpose()).unwrap();
        let expected = raw.zip_map(&raw.transpose(), |p, q| -0.5 * (p + q));
        assert!(ga.max_abs_diff(&expected) < 1e-15);

        let (a, bb, up) = (4.0, 3.0, 2.0);
        let (ga, gb) = solve_spd_vjp(
            &Mat::scalar(a),
            &Mat::scalar(bb),
            &Mat::scalar(bb / a),
            &Mat::scalar(up),
        )
        .unwrap();
        assert!((ga.get(0, 0) + up * bb / (a * a)).abs() < 1e-15);
        assert!((gb.get(0, 0) - up / a).abs() < 1e-15);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let x = Mat::from_rows(&[&[1.0, -3.0, 100.0], &[2.0, 0.0, -100.0], &[0.5, 0.1, 0.0]]);
        for s in softmax_columns(&x).col_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn col_shift_lands_on_hyperplane() {
        let mut t = Tape::new();
        let p = t.leaf(Mat::from_rows(&[&[2.0, 0.2], &[0.0, 0.1], &[1.0, -0.4]]));
        let s = t.col_shift(p);
        for v in t.value(s).col_sums() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }
}
