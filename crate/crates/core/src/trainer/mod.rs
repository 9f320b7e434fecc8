//! Minibatch training, evaluation and metric logging.
//!
//! Randomness is drawn from substreams of the run seed: parameter init,
//! codebook init, one shuffle per epoch, and per-step streams for Gumbel
//! noise and dead-code replacement. With `wall_clock` off, a run's metrics
//! and checkpoints depend only on its config.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{QuantizerKind, TrainConfig};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::models::{autoencoder_forward, decoder_forward, encoder_forward, AutoencoderParams, Grid};
use crate::quantizers::{codebook_replacement, perplexity_from_usage, top_s_restrict, Assignment, Codebook, Mode};
use crate::rng::Rng;

const PARAM_STREAM: u64 = 1;
const CODEBOOK_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 1 << 20;
const STEP_STREAM: u64 = 1 << 32;
const REPLACE_STREAM: u64 = 2 << 32;

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Mat>) -> Self {
        let m: Vec<Mat> = shapes.into_iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Mat], grads: &[Mat], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract("adam_step", "params, grads and state disagree in length"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !p.same_shape(g) {
            return Err(Error::contract("adam_step", format!("gradient {i} has the wrong shape")));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub split: String,
    pub mse: f64,
    pub quant_error: f64,
    pub perplexity: f64,
    pub loss_total: f64,
    pub loss_commit: f64,
    pub min_entry: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,epoch,split,mse,quant_error,perplexity,loss_total,loss_commit,min_entry,wall_ms";

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_test: MetricsRow,
    pub best_test_mse: f64,
    pub output_dir: PathBuf,
}

/// Loads the training and test splits named by a config.
pub fn load_splits(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let data = Dataset::read(Path::new(&cfg.dataset))?;
    match &cfg.test_dataset {
        Some(p) => Ok((data, Dataset::read(Path::new(p))?)),
        None => {
            let test = ((data.count as f64) * cfg.test_fraction).round() as usize;
            data.split_tail(test)
        }
    }
}

fn check_compatible(data: &Dataset, in_channels: usize, cfg: &TrainConfig, pointer: &str) -> Result<()> {
    let d = cfg.model.downsample;
    let mut issues = Vec::new();
    if data.channels != in_channels {
        issues.push(format!("{pointer}: {} channels, model expects {in_channels}", data.channels));
    }
    if data.height % d != 0 || data.width % d != 0 || data.height == 0 {
        issues.push(format!(
            "{pointer}: {}x{} images are not divisible by the downsample factor {d}",
            data.height, data.width
        ));
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Schema(issues))
    }
}

struct Metrics {
    images: usize,
    mse: f64,
    quant_error: f64,
    commit: f64,
    min_entry: f64,
    usage: Vec<f64>,
}

impl Metrics {
    fn new(codes: usize) -> Self {
        Metrics {
            images: 0,
            mse: 0.0,
            quant_error: 0.0,
            commit: 0.0,
            min_entry: 0.0,
            usage: vec![0.0; codes],
        }
    }

    fn add(&mut self, images: usize, mse: f64, quant_error: f64, commit: f64, min_entry: f64, assignment: &Assignment) {
        let w = images as f64;
        self.images += images;
        self.mse += w * mse;
        self.quant_error += w * quant_error;
        self.commit += w * commit;
        self.min_entry = self.min_entry.min(min_entry);
        for (u, m) in self.usage.iter_mut().zip(assignment.usage_mass()) {
            *u += m;
        }
    }

    fn row(&self, step: u64, epoch: u64, split: &str, wall_ms: u64) -> MetricsRow {
        let n = self.images.max(1) as f64;
        let (mse, commit) = (self.mse / n, self.commit / n);
        MetricsRow {
            step,
            epoch,
            split: split.into(),
            mse,
            quant_error: self.quant_error / n,
            perplexity: perplexity_from_usage(&self.usage),
            loss_total: mse + commit,
            loss_commit: commit,
            min_entry: self.min_entry,
            wall_ms,
        }
    }
}

fn grid_for(data: &Dataset, batch: usize) -> Grid {
    Grid {
        batch,
        height: data.height,
        width: data.width,
    }
}

/// No-gradient pass over `data` in fixed batch order.
pub fn evaluate_model(
    cfg: &TrainConfig,
    params: &AutoencoderParams,
    codebook: &Codebook,
    data: &Dataset,
    step: u64,
    epoch: u64,
) -> Result<MetricsRow> {
    check_compatible(data, params.in_channels, cfg, "/dataset")?;
    let quantizer = cfg.quantizer();
    let mut rng = Rng::new(cfg.seed).substream(EVAL_STREAM);
    let mut acc = Metrics::new(codebook.size());
    let order: Vec<usize> = (0..data.count).collect();
    for chunk in order.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let c = tape.constant(codebook.vectors().clone());
        let x = tape.constant(data.batch(chunk));
        let fwd = autoencoder_forward(&mut tape, &bound, c, &quantizer, x, grid_for(data, chunk.len()), Mode::Eval, &mut rng)?;
        let q = &fwd.quant;
        acc.add(
            chunk.len(),
            tape.value(fwd.recon).get(0, 0),
            q.quant_error,
            tape.value(q.commit_loss).get(0, 0),
            q.min_entry,
            &q.assignment,
        );
    }
    Ok(acc.row(step, epoch, "test", 0))
}

/// Evaluates a checkpoint on a dataset; the row carries the checkpoint's
/// step and epoch.
pub fn evaluate(ck: &Checkpoint, data: &Dataset) -> Result<MetricsRow> {
    evaluate_model(&ck.config, &ck.params, &ck.codebook, data, ck.step, ck.epoch)
}

/// Reconstruction MSE over `data` when each column keeps only its `S`
/// largest convex weights, for `S = 1..=max_s`.
pub fn analyze_tops(ck: &Checkpoint, data: &Dataset, max_s: usize) -> Result<Vec<(usize, f64)>> {
    let cfg = &ck.config;
    if !cfg.quantizer.is_scq() {
        return Err(Error::contract(
            "analyze_tops",
            "top-S analysis needs a checkpoint trained with scq_fast or scq_exact",
        ));
    }
    let k = ck.codebook.size();
    if max_s == 0 || max_s > k {
        return Err(Error::contract("analyze_tops", format!("max S must lie in 1..={k}, got {max_s}")));
    }
    check_compatible(data, ck.params.in_channels, cfg, "/dataset")?;
    let quantizer = cfg.quantizer();
    let mut rng = Rng::new(cfg.seed).substream(EVAL_STREAM);
    let mut sums = vec![0.0; max_s];
    let order: Vec<usize> = (0..data.count).collect();
    for chunk in order.chunks(cfg.batch_size) {
        let grid = grid_for(data, chunk.len());
        let x = data.batch(chunk);
        let mut tape = Tape::new();
        let bound = ck.params.bind(&mut tape);
        let c = tape.constant(ck.codebook.vectors().clone());
        let xn = tape.constant(x.clone());
        let (z_e, latent) = encoder_forward(&mut tape, &bound, xn, grid)?;
        let q = quantizer.quantize(&mut tape, z_e, c, Mode::Eval, &mut rng)?;
        let Assignment::Soft(p) = &q.assignment else {
            return Err(Error::contract("analyze_tops", "quantizer did not produce convex weights"));
        };
        for (s, sum) in sums.iter_mut().enumerate() {
            let restricted = top_s_restrict(p, s + 1)?;
            let z_q = ck.codebook.vectors().matmul(&restricted)?;
            let z_q = tape.constant(z_q);
            let x_hat = decoder_forward(&mut tape, &bound, z_q, latent)?;
            let mse = tape.mse(x_hat, xn)?;
            *sum += chunk.len() as f64 * tape.value(mse).get(0, 0);
        }
    }
    let n = data.count.max(1) as f64;
    Ok(sums.into_iter().enumerate().map(|(s, v)| (s + 1, v / n)).collect())
}

fn batch_stats(x: &Mat) -> String {
    let finite = x.data().iter().filter(|v| v.is_finite()).count();
    let (lo, hi) = x
        .data()
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    format!("{}x{} finite {finite}/{} range [{lo:e}, {hi:e}]", x.rows(), x.cols(), x.len())
}

/// Trains a model as configured, writing `metrics.csv`, `best.ckpt` and
/// `final.ckpt` into `cfg.output_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (train_set, test_set) = load_splits(cfg)?;
    train_on(cfg, &train_set, &test_set)
}

pub fn train_on(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    check_compatible(train_set, train_set.channels, cfg, "/dataset")?;
    check_compatible(test_set, train_set.channels, cfg, "/test_dataset")?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = csv::Writer::from_path(&metrics_path).map_err(|e| csv_error(&metrics_path, e))?;

    let root = Rng::new(cfg.seed);
    let mut params = AutoencoderParams::init(cfg.model, train_set.channels, cfg.latent_dim, &mut root.substream(PARAM_STREAM))?;
    let mut codebook = Codebook::random(cfg.latent_dim, cfg.codebook_size, &mut root.substream(CODEBOOK_STREAM))?;
    let mut adam = AdamState::new(params.iter().map(|(_, m)| m).chain([codebook.vectors()]));
    let quantizer = cfg.quantizer();
    let started = Instant::now();
    let wall = |cfg: &TrainConfig| if cfg.wall_clock { started.elapsed().as_millis() as u64 } else { 0 };

    let mut rows = Vec::new();
    let mut log_row = |row: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<()> {
        writer.serialize(&row).and_then(|_| writer.flush().map_err(Into::into)).map_err(|e| csv_error(&metrics_path, e))?;
        rows.push(row);
        Ok(())
    };
    let snapshot = |params: &AutoencoderParams, codebook: &Codebook, step: u64, epoch: u64| Checkpoint {
        config: cfg.clone(),
        params: params.clone(),
        codebook: codebook.clone(),
        step,
        epoch,
    };

    let mut test_row = evaluate_model(cfg, &params, &codebook, test_set, 0, 0)?;
    test_row.wall_ms = wall(cfg);
    let mut best = test_row.mse;
    snapshot(&params, &codebook, 0, 0).write(&out_dir.join("best.ckpt"))?;
    log_row(test_row.clone(), &mut rows)?;

    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs as u64 {
        let order = root.substream(SHUFFLE_STREAM + epoch).permutation(train_set.count);
        let mut window = Metrics::new(codebook.size());
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let c = tape.leaf(codebook.vectors().clone());
            let x = tape.constant(train_set.batch(chunk));
            let mut noise = root.substream(STEP_STREAM + step);
            let fwd = autoencoder_forward(&mut tape, &bound, c, &quantizer, x, grid_for(train_set, chunk.len()), Mode::Train, &mut noise)?;
            let total = tape.value(fwd.total).get(0, 0);
            if !total.is_finite() {
                return Err(Error::Aborted {
                    step,
                    detail: format!(
                        "loss is {total}; batch {}; z_e {}; codebook {}",
                        batch_stats(&train_set.batch(chunk)),
                        batch_stats(tape.value(fwd.z_e)),
                        batch_stats(codebook.vectors())
                    ),
                });
            }
            let mut grads = tape.backward(fwd.total)?;
            let g: Vec<Mat> = bound.ids.iter().chain([&c]).map(|&id| grads.take(id)).collect();
            if let Some(i) = g.iter().position(|m| !m.is_finite()) {
                let name = params.iter().nth(i).map_or("codebook", |(n, _)| n).to_string();
                return Err(Error::Aborted {
                    step,
                    detail: format!("non-finite gradient for {name}; batch {}", batch_stats(&train_set.batch(chunk))),
                });
            }
            {
                let mut slots: Vec<&mut Mat> = params.tensors_mut().collect();
                slots.push(codebook.vectors_mut());
                adam_step(&mut slots, &g, &mut adam, cfg.learning_rate)?;
            }
            codebook.record_usage(&fwd.quant.codes);
            if cfg.quantizer == QuantizerKind::VqReplace {
                let mut r = root.substream(REPLACE_STREAM + step);
                codebook_replacement(&mut codebook, tape.value(fwd.z_e), cfg.replacement_threshold, &mut r)?;
            }
            let q = &fwd.quant;
            window.add(
                chunk.len(),
                tape.value(fwd.recon).get(0, 0),
                q.quant_error,
                tape.value(q.commit_loss).get(0, 0),
                q.min_entry,
                &q.assignment,
            );
            if step % cfg.log_interval == 0 {
                log_row(window.row(step, epoch, "train", wall(cfg)), &mut rows)?;
                window = Metrics::new(codebook.size());
            }
        }
        test_row = evaluate_model(cfg, &params, &codebook, test_set, step, epoch + 1)?;
        test_row.wall_ms = wall(cfg);
        log::info!(
            "epoch {} step {step}: test mse {:.4e} quant error {:.4e} perplexity {:.2}",
            epoch + 1,
            test_row.mse,
            test_row.quant_error,
            test_row.perplexity
        );
        if test_row.mse < best {
            best = test_row.mse;
            snapshot(&params, &codebook, step, epoch + 1).write(&out_dir.join("best.ckpt"))?;
        }
        log_row(test_row.clone(), &mut rows)?;
    }
    snapshot(&params, &codebook, step, cfg.epochs as u64).write(&out_dir.join("final.ckpt"))?;
    Ok(TrainOutcome {
        rows,
        final_test: test_row,
        best_test_mse: best,
        output_dir: out_dir,
    })
}
