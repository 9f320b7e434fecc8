//! Finite-difference verification of the backward rules.
//!
//! [`grad_check`] compares reverse-mode gradients with central differences.
//! [`run_suite`] applies it to every registered primitive and composite on
//! seeded random instances; the CLI `gradcheck` verb is a thin wrapper.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ConvGeom, NodeId, Tape};
use crate::error::Result;
use crate::mat::Mat;
use crate::models::{autoencoder_forward, AutoencoderParams, Grid, ModelConfig};
use crate::oracle::fd_gradient;
use crate::quantizers::scq_exact::record_exact_solution;
use crate::quantizers::{
    commitment_loss, gumbel_quantize, scq_fast, Mode, Quantizer, ScqConfig,
};
use crate::rng::Rng;

/// `|a − b| / (1e-8 + |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-8 + a.abs() + b.abs())
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries left out because a kink lies within the difference stencil.
    pub skipped: usize,
}

/// Scalar function of a list of parameters, built on a fresh tape from one
/// leaf per parameter.
pub trait Objective: Fn(&mut Tape, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>> Objective for F {}

fn evaluate<F: Objective>(f: &F, params: &[Mat]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    Ok(tape.value(root).get(0, 0))
}

fn analytic<F: Objective>(f: &F, params: &[Mat]) -> Result<Vec<Mat>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let grads = tape.backward(root)?;
    Ok(ids.iter().map(|&id| grads.get(id)).collect())
}

fn numeric<F: Objective>(f: &F, params: &[Mat], which: usize, eps: f64) -> Result<Mat> {
    let failure = RefCell::new(None);
    let g = fd_gradient(
        |x| {
            let mut probe = params.to_vec();
            probe[which] = x.clone();
            evaluate(f, &probe).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            })
        },
        &params[which],
        eps,
    );
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(g),
    }
}

/// Worst entrywise relative error between reverse-mode and central-difference
/// gradients over all parameters.
pub fn grad_check<F: Objective>(f: F, params: &[Mat], eps: f64) -> Result<f64> {
    Ok(grad_check_detailed(&f, params, eps, false)?.max_rel_err)
}

/// Like [`grad_check`]. An entry that disagrees is re-differenced with
/// `10·eps` and scored by the closer of the two quotients. With `skip_kinks`,
/// an entry that still disagrees is re-differenced with `eps/10`; if the two difference quotients disagree
/// with each other as much as with the analytic value (and by more than
/// rounding can explain), the stencil straddles a kink and the entry is
/// skipped instead of counted.
pub fn grad_check_detailed<F: Objective>(
    f: &F,
    params: &[Mat],
    eps: f64,
    skip_kinks: bool,
) -> Result<GradCheck> {
    let ad = analytic(f, params)?;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (i, g_ad) in ad.iter().enumerate() {
        let g_fd = numeric(f, params, i, eps)?;
        let mut fine: Option<Mat> = None;
        let mut coarse: Option<Mat> = None;
        for (j, (&a, &n)) in g_ad.data().iter().zip(g_fd.data()).enumerate() {
            let mut err = relative_error(a, n);
            if err <= 1e-6 {
                out.checked += 1;
                out.max_rel_err = out.max_rel_err.max(err);
                continue;
            }
            // entries far below the loss scale are limited by cancellation in
            // f(x+ε) − f(x−ε); a wider stencil cuts that rounding tenfold
            let c = match &mut coarse {
                Some(m) => &*m,
                None => coarse.insert(numeric(f, params, i, eps * 10.0)?),
            };
            err = err.min(relative_error(a, c.data()[j]));
            if skip_kinks && err > 1e-6 {
                let fine = match &mut fine {
                    Some(m) => &*m,
                    None => fine.insert(numeric(f, params, i, eps / 10.0)?),
                };
                let spread = relative_error(n, fine.data()[j]);
                // rounding alone moves the two quotients apart by far less
                if spread > 0.5 * err && spread > 1e-4 {
                    out.skipped += 1;
                    continue;
                }
            }
            out.checked += 1;
            out.max_rel_err = out.max_rel_err.max(err);
        }
    }
    Ok(out)
}

/// Which registered checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Quantizers,
    Models,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quantizers" => Ok(Suite::Quantizers),
            "models" => Ok(Suite::Models),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite {other:?} (expected quantizers, models or all)")),
        }
    }
}

/// Result of one registered check across its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub instances: usize,
    /// Instances or entries left out (kinks, active-set changes).
    pub excluded: usize,
    /// Reported but not compared against finite differences.
    pub informational: bool,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.informational || self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.informational {
            return write!(f, "{:<22} skipped (biased estimator, not a gradient)", self.name);
        }
        write!(
            f,
            "{:<22} {:<4} worst rel err {:.3e} (tol {:.0e}, {} instances, {} excluded)",
            self.name,
            if self.passed() { "ok" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.instances,
            self.excluded
        )
    }
}

const EPS: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-6;
const COMPOSITE_TOL: f64 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    Mat::from_raw(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect())
}

/// Values bounded away from zero so piecewise-linear ops are smooth at eps.
fn away_from_zero(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.uniform(0.1, 1.0);
            if rng.below(2) == 0 {
                v
            } else {
                -v
            }
        })
        .collect();
    Mat::from_raw(rows, cols, data)
}

/// Reduces `y` to a scalar with fixed random weights so every output entry
/// carries an O(1) gradient.
fn weigh(tape: &mut Tape, y: NodeId, weights: &Mat) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

struct Registered {
    name: &'static str,
    models: bool,
    tolerance: f64,
    instances: usize,
    run: fn(&mut Rng) -> Result<GradCheck>,
}

macro_rules! smooth {
    ($params:expr, $body:expr) => {
        grad_check_detailed(&$body, &$params, EPS, false)
    };
}

fn check_matmul(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(3, 5, rng);
    smooth!([random(3, 4, rng), random(4, 5, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.matmul(p[0], p[1])?;
        weigh(t, y, &w)
    })
}

fn check_add(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(3, 4, rng);
    smooth!([random(3, 4, rng), random(3, 4, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.add(p[0], p[1])?;
        let y = t.sub(y, p[1])?;
        let y = t.add(y, p[1])?;
        weigh(t, y, &w)
    })
}

fn check_mul_scale(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(2, 5, rng);
    smooth!([random(2, 5, rng), random(2, 5, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.mul(p[0], p[1])?;
        let y = t.scale(y, -1.7);
        weigh(t, y, &w)
    })
}

fn check_relu(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(4, 6, rng);
    smooth!([away_from_zero(4, 6, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.relu(p[0]);
        weigh(t, y, &w)
    })
}

fn check_clamp_min(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(4, 6, rng);
    smooth!([away_from_zero(4, 6, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.clamp_min(p[0], 0.0);
        weigh(t, y, &w)
    })
}

fn check_add_col_bias(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(3, 7, rng);
    smooth!([random(3, 7, rng), random(3, 1, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.add_col_bias(p[0], p[1])?;
        weigh(t, y, &w)
    })
}

fn small_geom(rng: &mut Rng, channels: usize) -> ConvGeom {
    let kernel = [1, 3, 4][rng.below(3)];
    ConvGeom {
        batch: 2,
        channels,
        height: 6,
        width: 4,
        kernel,
        stride: if kernel == 4 { 2 } else { 1 },
        pad: if kernel == 1 { 0 } else { 1 },
    }
}

fn check_conv(rng: &mut Rng) -> Result<GradCheck> {
    let g = small_geom(rng, 2);
    let cout = 3;
    let w = random(cout, g.patch_cols(), rng);
    let params = [
        random(g.channels, g.image_cols(), rng),
        random(cout, g.patch_rows(), rng),
        random(cout, 1, rng),
    ];
    smooth!(params, |t: &mut Tape, p: &[NodeId]| {
        let y = t.conv2d(p[0], p[1], p[2], g)?;
        weigh(t, y, &w)
    })
}

fn check_conv_transpose(rng: &mut Rng) -> Result<GradCheck> {
    let g = small_geom(rng, 3);
    let cin = 2;
    let w = random(g.channels, g.image_cols(), rng);
    let params = [
        random(cin, g.patch_cols(), rng),
        random(g.patch_rows(), cin, rng),
        random(g.channels, 1, rng),
    ];
    smooth!(params, |t: &mut Tape, p: &[NodeId]| {
        let y = t.conv_transpose2d(p[0], p[1], p[2], g)?;
        weigh(t, y, &w)
    })
}

fn check_mse(rng: &mut Rng) -> Result<GradCheck> {
    smooth!([random(3, 5, rng), random(3, 5, rng)], |t: &mut Tape, p: &[NodeId]| {
        t.mse(p[0], p[1])
    })
}

fn check_solve_spd(rng: &mut Rng) -> Result<GradCheck> {
    let k = 4;
    let w = random(k, 3, rng);
    // A = S + Sᵀ + 2k·I stays positive definite for |S| ≤ 1
    let shift = Mat::identity(k).scale(2.0 * k as f64);
    smooth!([random(k, k, rng), random(k, 3, rng)], |t: &mut Tape, p: &[NodeId]| {
        let st = t.transpose(p[0]);
        let sym = t.add(p[0], st)?;
        let d = t.constant(shift.clone());
        let a = t.add(sym, d)?;
        let x = t.solve_spd(a, p[1])?;
        weigh(t, x, &w)
    })
}

fn check_col_shift(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(5, 4, rng);
    smooth!([random(5, 4, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.col_shift(p[0]);
        weigh(t, y, &w)
    })
}

fn check_sq_dist(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(5, 4, rng);
    smooth!([random(3, 5, rng), random(3, 4, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.sq_dist(p[0], p[1])?;
        weigh(t, y, &w)
    })
}

fn check_softmax(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(5, 4, rng);
    smooth!([random(5, 4, rng).scale(3.0)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.softmax_cols(p[0]);
        weigh(t, y, &w)
    })
}

fn check_gather(rng: &mut Rng) -> Result<GradCheck> {
    let idx: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
    let w = random(3, 6, rng);
    smooth!([random(3, 4, rng)], |t: &mut Tape, p: &[NodeId]| {
        let y = t.gather_cols(p[0], &idx)?;
        weigh(t, y, &w)
    })
}

fn check_simplex_project(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(5, 4, rng);
    // long alternations contract some sensitivities geometrically, until
    // they sit below what differencing an O(1) loss can resolve
    let steps = 1 + rng.below(8);
    let p0 = random(5, 4, rng).scale(0.8).map(|v| v + 0.2);
    grad_check_detailed(
        &|t: &mut Tape, p: &[NodeId]| {
            let y = t.simplex_project(p[0], steps)?;
            weigh(t, y, &w)
        },
        &[p0],
        EPS,
        true,
    )
}

fn check_normalize_cols(rng: &mut Rng) -> Result<GradCheck> {
    let w = random(4, 3, rng);
    let p0 = random(4, 3, rng).map(|v| 1.5 + v);
    smooth!([p0], |t: &mut Tape, p: &[NodeId]| {
        let y = t.normalize_cols(p[0])?;
        weigh(t, y, &w)
    })
}

/// The stop-gradients make the commitment loss's gradient differ from the
/// derivative of its value, so it is compared against the surrogate
/// `β·mse(z_e, z̄_q) + (1−β)·mse(z̄_e, z_q)` with the barred values frozen at
/// the evaluation point.
fn check_commitment(rng: &mut Rng) -> Result<GradCheck> {
    let beta = rng.uniform(0.05, 0.95);
    let (ze, zq) = (random(3, 5, rng), random(3, 5, rng));
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(ze.clone()), tape.leaf(zq.clone()));
    let loss = commitment_loss(&mut tape, a, b, beta)?;
    let grads = tape.backward(loss)?;
    let mse = |x: &Mat, y: &Mat| {
        x.data().iter().zip(y.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / x.len() as f64
    };
    let fd_e = fd_gradient(|x| beta * mse(x, &zq), &ze, EPS);
    let fd_q = fd_gradient(|x| (1.0 - beta) * mse(&ze, x), &zq, EPS);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (g, fd) in [(grads.get(a), fd_e), (grads.get(b), fd_q)] {
        for (x, y) in g.data().iter().zip(fd.data()) {
            out.max_rel_err = out.max_rel_err.max(relative_error(*x, *y));
            out.checked += 1;
        }
    }
    Ok(out)
}

fn check_gumbel(rng: &mut Rng) -> Result<GradCheck> {
    let seed = rng.next_u64();
    let w = random(3, 6, rng);
    smooth!([random(3, 6, rng), random(3, 5, rng)], |t: &mut Tape, p: &[NodeId]| {
        // same noise at every evaluation: the relaxation is smooth given G
        let mut noise = Rng::new(seed);
        let r = gumbel_quantize(t, p[0], p[1], 0.25, 1.0, Mode::Train, &mut noise)?;
        weigh(t, r.z_q, &w)
    })
}

fn check_scq_fast(rng: &mut Rng) -> Result<GradCheck> {
    let (f, k, m) = (3, 5, 4);
    let w = random(f, m, rng);
    let config = ScqConfig {
        lambda: [0.1, 0.5, 1.0][rng.below(3)],
        steps: 20,
        final_clamp: false,
    };
    let params = [random(f, m, rng), random(f, k, rng)];
    grad_check_detailed(
        &|t: &mut Tape, p: &[NodeId]| {
            let r = scq_fast(t, p[0], p[1], &config, None)?;
            weigh(t, r.z_q, &w)
        },
        &params,
        EPS,
        true,
    )
}

/// Active-set-stable instances only: a trial is excluded when any
/// perturbation in the difference stencil changes some column's free set.
fn check_scq_exact(rng: &mut Rng) -> Result<GradCheck> {
    let (f, k) = (3, 5);
    let lambda = [0.1, 0.5, 1.0][rng.below(3)];
    let w = random(k, 2, rng);
    let params = [random(f, 2, rng), random(f, k, rng)];
    let free_sets: RefCell<Vec<Vec<Vec<usize>>>> = RefCell::new(Vec::new());
    let objective = |t: &mut Tape, p: &[NodeId]| {
        let (node, _) = record_exact_solution(t, p[0], p[1], lambda)?;
        let sol = crate::quantizers::scq_exact(t.value(p[0]), t.value(p[1]), lambda)?;
        free_sets
            .borrow_mut()
            .push(sol.columns.into_iter().map(|c| c.free).collect());
        weigh(t, node, &w)
    };
    let out = grad_check_detailed(&objective, &params, EPS, false)?;
    let sets = free_sets.into_inner();
    if sets.iter().any(|s| s != &sets[0]) {
        return Ok(GradCheck {
            max_rel_err: 0.0,
            checked: 0,
            skipped: out.checked + out.skipped,
        });
    }
    Ok(out)
}

fn check_scq_exact_interior(_rng: &mut Rng) -> Result<GradCheck> {
    let c = Mat::from_rows(&[&[0.0, 1.0]]);
    smooth!([Mat::scalar(0.6), c], |t: &mut Tape, p: &[NodeId]| {
        let (node, _) = record_exact_solution(t, p[0], p[1], 0.1)?;
        let w = t.constant(Mat::column_vector(&[0.3, -1.1]));
        let y = t.mul(node, w)?;
        Ok(t.sum(y))
    })
}

fn check_pipeline(rng: &mut Rng) -> Result<GradCheck> {
    let cfg = ModelConfig {
        hidden: 4,
        residual: 2,
        res_blocks: 1,
        downsample: 4,
    };
    let (latent, k) = (4, 8);
    // weights at He scale (√6/√fan_in instead of 1/√fan_in) keep the signal
    // from shrinking through the stack, so no gradient drowns in the
    // rounding noise of the difference quotients
    let mut model = AutoencoderParams::init(cfg, 3, latent, rng)?;
    for t in model.tensors_mut() {
        *t = t.scale(6f64.sqrt());
    }
    let grid = Grid {
        batch: 2,
        height: 8,
        width: 8,
    };
    let images = Mat::from_raw(3, 128, (0..384).map(|_| rng.uniform(0.0, 1.0)).collect());
    // codes spread over the same range as the latents, so columns land on
    // faces of the simplex with several free weights rather than on vertices
    let z_scale = {
        let mut t = Tape::new();
        let bound = model.bind(&mut t);
        let x = t.constant(images.clone());
        let (z, _) = crate::models::encoder_forward(&mut t, &bound, x, grid)?;
        t.value(z).frobenius_norm() / (t.value(z).len() as f64).sqrt()
    };
    let codebook = random(latent, k, rng).scale(2.0 * z_scale);
    let quantizer = Quantizer::ScqFast {
        beta: 0.25,
        config: ScqConfig::default(),
        commit: true,
    };
    let names: Vec<String> = model.iter().map(|(n, _)| n.to_string()).collect();
    let mut params: Vec<Mat> = model.iter().map(|(_, m)| m.clone()).collect();
    params.push(codebook);
    let objective = |t: &mut Tape, p: &[NodeId]| {
        let bound = model.bind_ids(&p[..names.len()]);
        let x = t.constant(images.clone());
        let mut unused = Rng::new(0);
        let fwd = autoencoder_forward(t, &bound, p[names.len()], &quantizer, x, grid, Mode::Train, &mut unused)?;
        Ok(fwd.recon)
    };
    grad_check_detailed(&objective, &params, EPS, true)
}

fn registry() -> Vec<Registered> {
    let prim = |name, run| Registered {
        name,
        models: true,
        tolerance: PRIMITIVE_TOL,
        instances: 20,
        run,
    };
    let quant = |name, tolerance, instances, run| Registered {
        name,
        models: false,
        tolerance,
        instances,
        run,
    };
    vec![
        prim("matmul", check_matmul as fn(&mut Rng) -> Result<GradCheck>),
        prim("add/sub", check_add),
        prim("mul/scale", check_mul_scale),
        prim("relu", check_relu),
        prim("clamp_min", check_clamp_min),
        prim("add_col_bias", check_add_col_bias),
        prim("conv2d", check_conv),
        prim("conv_transpose2d", check_conv_transpose),
        prim("mse", check_mse),
        Registered {
            name: "autoencoder+scq_fast",
            models: true,
            tolerance: COMPOSITE_TOL,
            instances: 2,
            run: check_pipeline,
        },
        quant("solve_spd", PRIMITIVE_TOL, 20, check_solve_spd),
        quant("col_shift", PRIMITIVE_TOL, 20, check_col_shift),
        quant("sq_dist", PRIMITIVE_TOL, 20, check_sq_dist),
        quant("softmax_cols", PRIMITIVE_TOL, 20, check_softmax),
        quant("gather_cols", PRIMITIVE_TOL, 20, check_gather),
        quant("normalize_cols", PRIMITIVE_TOL, 20, check_normalize_cols),
        quant("simplex_project", PRIMITIVE_TOL, 20, check_simplex_project),
        quant("commitment_loss", PRIMITIVE_TOL, 20, check_commitment),
        quant("gumbel_softmax", COMPOSITE_TOL, 20, check_gumbel),
        quant("scq_fast", COMPOSITE_TOL, 20, check_scq_fast),
        quant("scq_exact_vjp", COMPOSITE_TOL, 20, check_scq_exact),
        quant("scq_exact_vjp_interior", PRIMITIVE_TOL, 1, check_scq_exact_interior),
    ]
}

/// Runs the registered checks of `suite`. Instance `i` of check `name` draws
/// from a substream keyed by both, so reports do not depend on which other
/// checks ran.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckReport>> {
    let root = Rng::new(seed);
    let mut reports = Vec::new();
    for (ci, check) in registry().into_iter().enumerate() {
        let wanted = match suite {
            Suite::All => true,
            Suite::Models => check.models,
            Suite::Quantizers => !check.models,
        };
        if !wanted {
            continue;
        }
        let mut report = CheckReport {
            name: check.name,
            max_rel_err: 0.0,
            tolerance: check.tolerance,
            instances: check.instances,
            excluded: 0,
            informational: false,
        };
        for i in 0..check.instances {
            let mut rng = root.substream(((ci as u64) << 32) | i as u64);
            let out = (check.run)(&mut rng)?;
            report.max_rel_err = report.max_rel_err.max(out.max_rel_err);
            report.excluded += out.skipped;
        }
        reports.push(report);
    }
    if suite != Suite::Models {
        reports.push(CheckReport {
            name: "vq_quantize_ste",
            max_rel_err: 0.0,
            tolerance: 0.0,
            instances: 0,
            excluded: 0,
            informational: true,
        });
    }
    Ok(reports)
}

/// Convenience for callers that only need pass/fail plus the failing names.
pub fn failing(reports: &[CheckReport]) -> Vec<&'static str> {
    reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect()
}
