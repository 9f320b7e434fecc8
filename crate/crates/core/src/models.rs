//! Convolutional encoder/decoder pair around a quantization bottleneck.
//!
//! Encoder: 4×4 stride-2 conv `in→c`, ReLU, then either a second 4×4
//! stride-2 conv (`downsample = 4`) or a 3×3 stride-1 conv (`downsample =
//! 2`), residual blocks, ReLU and a 1×1 projection `c→F`. Each residual block
//! computes `x + conv1×1(relu(conv3×3(relu(x))))` with `r` hidden channels.
//! The decoder mirrors it: 3×3 conv `F→c`, residual blocks, ReLU, then
//! transposed 4×4 stride-2 convs back to the input resolution. The output is
//! linear; images live in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, NodeId, Tape};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::quantizers::{commitment_loss, Mode, QuantizeResult, Quantizer};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Convolution channels `c`.
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    /// Hidden channels `r` inside residual blocks.
    #[serde(default = "defaults::residual")]
    pub residual: usize,
    #[serde(default = "defaults::res_blocks")]
    pub res_blocks: usize,
    /// Spatial reduction factor of the encoder, 2 or 4.
    #[serde(default = "defaults::downsample")]
    pub downsample: usize,
}

mod defaults {
    pub fn hidden() -> usize {
        32
    }
    pub fn residual() -> usize {
        16
    }
    pub fn res_blocks() -> usize {
        2
    }
    pub fn downsample() -> usize {
        2
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: defaults::hidden(),
            residual: defaults::residual(),
            res_blocks: defaults::res_blocks(),
            downsample: defaults::downsample(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.residual == 0 {
            return Err(Error::contract("ModelConfig", "channel counts must be positive"));
        }
        if self.downsample != 2 && self.downsample != 4 {
            return Err(Error::contract(
                "ModelConfig",
                format!("downsample must be 2 or 4, got {}", self.downsample),
            ));
        }
        Ok(())
    }
}

/// Named, ordered model parameters. Convolution weights are stored as
/// `Cout × (Cin·k·k)`; transposed-convolution weights as `(Cout·k·k) × Cin`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub config: ModelConfig,
    pub in_channels: usize,
    pub latent_dim: usize,
    entries: Vec<(String, Mat)>,
}

#[derive(Clone, Copy)]
enum Layer {
    Conv { cin: usize, cout: usize, k: usize },
    ConvT { cin: usize, cout: usize, k: usize },
}

fn layout(cfg: &ModelConfig, in_channels: usize, latent: usize) -> Vec<(String, Layer)> {
    let (c, r) = (cfg.hidden, cfg.residual);
    let mut v = vec![("enc.conv1".to_string(), Layer::Conv { cin: in_channels, cout: c, k: 4 })];
    let k2 = if cfg.downsample == 4 { 4 } else { 3 };
    v.push(("enc.conv2".into(), Layer::Conv { cin: c, cout: c, k: k2 }));
    for i in 0..cfg.res_blocks {
        v.push((format!("enc.res{i}.conv3"), Layer::Conv { cin: c, cout: r, k: 3 }));
        v.push((format!("enc.res{i}.conv1"), Layer::Conv { cin: r, cout: c, k: 1 }));
    }
    v.push(("enc.proj".into(), Layer::Conv { cin: c, cout: latent, k: 1 }));
    v.push(("dec.proj".into(), Layer::Conv { cin: latent, cout: c, k: 3 }));
    for i in 0..cfg.res_blocks {
        v.push((format!("dec.res{i}.conv3"), Layer::Conv { cin: c, cout: r, k: 3 }));
        v.push((format!("dec.res{i}.conv1"), Layer::Conv { cin: r, cout: c, k: 1 }));
    }
    if cfg.downsample == 4 {
        v.push(("dec.up1".into(), Layer::ConvT { cin: c, cout: c, k: 4 }));
    } else {
        v.push(("dec.up1".into(), Layer::Conv { cin: c, cout: c, k: 3 }));
    }
    v.push(("dec.up2".into(), Layer::ConvT { cin: c, cout: in_channels, k: 4 }));
    v
}

impl AutoencoderParams {
    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(config: ModelConfig, in_channels: usize, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::build(config, in_channels, latent_dim, |rows, cols, fan_in| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
            Mat::from_raw(rows, cols, data)
        })
    }

    pub fn zeros(config: ModelConfig, in_channels: usize, latent_dim: usize) -> Result<Self> {
        Self::build(config, in_channels, latent_dim, |r, c, _| Mat::zeros(r, c))
    }

    fn build(
        config: ModelConfig,
        in_channels: usize,
        latent_dim: usize,
        mut fill: impl FnMut(usize, usize, usize) -> Mat,
    ) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 || latent_dim == 0 {
            return Err(Error::contract("AutoencoderParams", "channels and latent dim must be positive"));
        }
        let mut entries = Vec::new();
        for (name, layer) in layout(&config, in_channels, latent_dim) {
            let (w_shape, cout, fan_in) = match layer {
                Layer::Conv { cin, cout, k } => ((cout, cin * k * k), cout, cin * k * k),
                Layer::ConvT { cin, cout, k } => ((cout * k * k, cin), cout, cin * k * k),
            };
            let w = fill(w_shape.0, w_shape.1, fan_in);
            let b = fill(cout, 1, fan_in);
            entries.push((format!("{name}.weight"), w));
            entries.push((format!("{name}.bias"), b));
        }
        Ok(AutoencoderParams {
            config,
            in_channels,
            latent_dim,
            entries,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_entries(
        config: ModelConfig,
        in_channels: usize,
        latent_dim: usize,
        tensors: Vec<(String, Mat)>,
    ) -> Result<Self> {
        let template = Self::zeros(config, in_channels, latent_dim)?;
        let mut issues = Vec::new();
        if template.entries.len() != tensors.len() {
            issues.push(format!(
                "/params: expected {} tensors, found {}",
                template.entries.len(),
                tensors.len()
            ));
        }
        for ((want_name, want), (name, got)) in template.entries.iter().zip(&tensors) {
            if want_name != name || want.shape() != got.shape() {
                issues.push(format!(
                    "/params/{name}: expected {want_name} with shape {:?}, found {:?}",
                    want.shape(),
                    got.shape()
                ));
            }
        }
        if !issues.is_empty() {
            return Err(Error::Schema(issues));
        }
        Ok(AutoencoderParams {
            config,
            in_channels,
            latent_dim,
            entries: tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.entries.iter_mut().map(|(_, m)| m)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Puts every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            ids: self.entries.iter().map(|(_, m)| tape.leaf(m.clone())).collect(),
            config: self.config,
            in_channels: self.in_channels,
        }
    }
}

impl AutoencoderParams {
    /// Uses nodes already on a tape (in manifest order) as the parameters.
    pub fn bind_ids(&self, ids: &[NodeId]) -> BoundParams {
        assert_eq!(ids.len(), self.entries.len(), "one node per parameter tensor");
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            ids: ids.to_vec(),
            config: self.config,
            in_channels: self.in_channels,
        }
    }
}

/// Tape handles of an [`AutoencoderParams`] in manifest order.
pub struct BoundParams {
    names: Vec<String>,
    pub ids: Vec<NodeId>,
    config: ModelConfig,
    in_channels: usize,
}

impl BoundParams {
    fn id(&self, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from manifest"));
        self.ids[i]
    }

    fn pair(&self, layer: &str) -> (NodeId, NodeId) {
        (self.id(&format!("{layer}.weight")), self.id(&format!("{layer}.bias")))
    }
}

/// Encoder output in both layouts: the `F×M` matrix used by quantizers
/// (column `(n·H̃ + h)·W̃ + w`) and the `(N, F, H̃, W̃)` tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub z: Mat,
}

impl LatentBatch {
    pub fn channels(&self) -> usize {
        self.z.rows()
    }

    /// Flattens an `(N, F, H̃, W̃)` tensor into the `F×M` view.
    pub fn from_nchw(data: &[f64], batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let hw = height * width;
        if data.len() != batch * channels * hw {
            return Err(Error::contract("LatentBatch::from_nchw", "length does not match shape"));
        }
        let mut z = Mat::zeros(channels, batch * hw);
        for n in 0..batch {
            for f in 0..channels {
                let src = &data[(n * channels + f) * hw..][..hw];
                z.row_mut(f)[n * hw..(n + 1) * hw].copy_from_slice(src);
            }
        }
        Ok(LatentBatch {
            batch,
            height,
            width,
            z,
        })
    }

    pub fn to_nchw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let channels = self.channels();
        let mut out = vec![0.0; self.batch * channels * hw];
        for n in 0..self.batch {
            for f in 0..channels {
                out[(n * channels + f) * hw..][..hw].copy_from_slice(&self.z.row(f)[n * hw..(n + 1) * hw]);
            }
        }
        out
    }
}

/// Spatial extent of a batch on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

fn conv(tape: &mut Tape, x: NodeId, (w, b): (NodeId, NodeId), cin: usize, g: Grid, k: usize, stride: usize) -> Result<(NodeId, Grid)> {
    let geom = ConvGeom {
        batch: g.batch,
        channels: cin,
        height: g.height,
        width: g.width,
        kernel: k,
        stride,
        pad: if k == 1 { 0 } else { 1 },
    };
    let y = tape.conv2d(x, w, b, geom)?;
    Ok((
        y,
        Grid {
            batch: g.batch,
            height: geom.out_height(),
            width: geom.out_width(),
        },
    ))
}

/// 4×4 stride-2 transposed conv doubling the spatial size.
fn conv_up(tape: &mut Tape, x: NodeId, (w, b): (NodeId, NodeId), cout: usize, g: Grid) -> Result<(NodeId, Grid)> {
    let out = Grid {
        batch: g.batch,
        height: 2 * g.height,
        width: 2 * g.width,
    };
    let geom = ConvGeom {
        batch: g.batch,
        channels: cout,
        height: out.height,
        width: out.width,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    Ok((tape.conv_transpose2d(x, w, b, geom)?, out))
}

fn res_stack(tape: &mut Tape, p: &BoundParams, prefix: &str, mut x: NodeId, g: Grid) -> Result<NodeId> {
    let (c, r) = (p.config.hidden, p.config.residual);
    for i in 0..p.config.res_blocks {
        let a = tape.relu(x);
        let (h, _) = conv(tape, a, p.pair(&format!("{prefix}.res{i}.conv3")), c, g, 3, 1)?;
        let h = tape.relu(h);
        let (h, _) = conv(tape, h, p.pair(&format!("{prefix}.res{i}.conv1")), r, g, 1, 1)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Maps images (`Cin × N·H·W`) to latents (`F × N·H̃·W̃`).
pub fn encoder_forward(tape: &mut Tape, p: &BoundParams, x: NodeId, grid: Grid) -> Result<(NodeId, Grid)> {
    let cfg = p.config;
    let d = cfg.downsample;
    if grid.height % d != 0 || grid.width % d != 0 {
        return Err(Error::contract(
            "encoder_forward",
            format!("image {}x{} not divisible by {d}", grid.height, grid.width),
        ));
    }
    if tape.value(x).shape() != (p.in_channels, grid.batch * grid.height * grid.width) {
        return Err(Error::contract("encoder_forward", "input shape does not match grid"));
    }
    let c = cfg.hidden;
    let (h, g) = conv(tape, x, p.pair("enc.conv1"), p.in_channels, grid, 4, 2)?;
    let h = tape.relu(h);
    let (h, g) = if d == 4 {
        conv(tape, h, p.pair("enc.conv2"), c, g, 4, 2)?
    } else {
        conv(tape, h, p.pair("enc.conv2"), c, g, 3, 1)?
    };
    let h = res_stack(tape, p, "enc", h, g)?;
    let h = tape.relu(h);
    let (z, g) = conv(tape, h, p.pair("enc.proj"), c, g, 1, 1)?;
    Ok((z, g))
}

/// Maps quantized latents back to images on the grid `d` times larger.
pub fn decoder_forward(tape: &mut Tape, p: &BoundParams, z_q: NodeId, latent: Grid) -> Result<NodeId> {
    let cfg = p.config;
    let c = cfg.hidden;
    let f = tape.value(z_q).rows();
    let (h, g) = conv(tape, z_q, p.pair("dec.proj"), f, latent, 3, 1)?;
    let h = res_stack(tape, p, "dec", h, g)?;
    let h = tape.relu(h);
    let (h, g) = if cfg.downsample == 4 {
        conv_up(tape, h, p.pair("dec.up1"), c, g)?
    } else {
        conv(tape, h, p.pair("dec.up1"), c, g, 3, 1)?
    };
    let h = tape.relu(h);
    let (x_hat, _) = conv_up(tape, h, p.pair("dec.up2"), p.in_channels, g)?;
    Ok(x_hat)
}

/// `mse(X, X̂) + (1−β)·mse(sg[Z_e], Z_q) + β·mse(Z_e, sg[Z_q])`.
pub fn vqvae_loss(tape: &mut Tape, x: NodeId, x_hat: NodeId, z_e: NodeId, z_q: NodeId, beta: f64) -> Result<NodeId> {
    let recon = tape.mse(x_hat, x)?;
    let commit = commitment_loss(tape, z_e, z_q, beta)?;
    tape.add(recon, commit)
}

/// Nodes of one autoencoder pass.
pub struct Forward {
    pub z_e: NodeId,
    pub latent: Grid,
    pub quant: QuantizeResult,
    pub x_hat: NodeId,
    pub recon: NodeId,
    pub total: NodeId,
}

/// Encoder, bottleneck, decoder and the training loss
/// `mse(X̂, X) + commitment`, where the commitment term is the one the
/// quantizer defines.
pub fn autoencoder_forward(
    tape: &mut Tape,
    p: &BoundParams,
    codebook: NodeId,
    quantizer: &Quantizer,
    x: NodeId,
    grid: Grid,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Forward> {
    let (z_e, latent) = encoder_forward(tape, p, x, grid)?;
    let quant = quantizer.quantize(tape, z_e, codebook, mode, rng)?;
    let x_hat = decoder_forward(tape, p, quant.z_q, latent)?;
    let recon = tape.mse(x_hat, x)?;
    let total = tape.add(recon, quant.commit_loss)?;
    Ok(Forward {
        z_e,
        latent,
        quant,
        x_hat,
        recon,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(batch: usize, ch: usize, size: usize, rng: &mut Rng) -> Mat {
        let n = ch * batch * size * size;
        Mat::from_vec(ch, batch * size * size, (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_latents_and_images() {
        let cfg = ModelConfig::default();
        let params = AutoencoderParams::zeros(cfg, 3, 8).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut rng = Rng::new(1);
        let x = tape.constant(images(2, 3, 8, &mut rng));
        let grid = Grid { batch: 2, height: 8, width: 8 };
        let (z, lg) = encoder_forward(&mut tape, &bound, x, grid).unwrap();
        assert_eq!(tape.value(z).max_abs(), 0.0);
        let out = decoder_forward(&mut tape, &bound, z, lg).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
    }

    #[test]
    fn default_config_halves_and_restores_32px() {
        let mut rng = Rng::new(3);
        let params = AutoencoderParams::init(ModelConfig::default(), 3, 16, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(images(1, 3, 32, &mut rng));
        let grid = Grid { batch: 1, height: 32, width: 32 };
        let (z, lg) = encoder_forward(&mut tape, &bound, x, grid).unwrap();
        assert_eq!((lg.height, lg.width), (16, 16));
        assert_eq!(tape.value(z).shape(), (16, 256));
        let out = decoder_forward(&mut tape, &bound, z, lg).unwrap();
        assert_eq!(tape.value(out).shape(), tape.value(x).shape());
    }

    #[test]
    fn factor_four_decoder_upsamples_16_to_64() {
        let cfg = ModelConfig {
            hidden: 4,
            residual: 2,
            res_blocks: 1,
            downsample: 4,
        };
        let mut rng = Rng::new(5);
        let params = AutoencoderParams::init(cfg, 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let z = tape.constant(Mat::filled(4, 256, 0.1));
        let out = decoder_forward(&mut tape, &bound, z, Grid { batch: 1, height: 16, width: 16 }).unwrap();
        assert_eq!(tape.value(out).shape(), (3, 64 * 64));
    }

    #[test]
    fn latent_round_trip_is_bitwise() {
        let mut rng = Rng::new(11);
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| rng.normal()).collect();
        let lb = LatentBatch::from_nchw(&data, 2, 3, 4, 5).unwrap();
        assert_eq!(lb.z.shape(), (3, 40));
        assert_eq!(lb.to_nchw(), data);
    }

    #[test]
    fn vqvae_loss_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_rows(&[&[0.2, 0.7]]));
        let ze = tape.leaf(Mat::scalar(1.0));
        let zq = tape.leaf(Mat::scalar(0.0));
        let l = vqvae_loss(&mut tape, x, x, ze, zq, 0.25).unwrap();
        assert!((tape.value(l).get(0, 0) - 1.0).abs() < 1e-15);
        let same = vqvae_loss(&mut tape, x, x, ze, ze, 0.25).unwrap();
        assert_eq!(tape.value(same).get(0, 0), 0.0);
        let g = tape.backward(l).unwrap();
        // 0.75·2(z_q − z_e) on z_q, 0.25·2(z_e − z_q) on z_e
        assert!((g.get(zq).get(0, 0) + 1.5).abs() < 1e-15);
        assert!((g.get(ze).get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn manifest_mismatch_is_a_schema_error() {
        let p = AutoencoderParams::zeros(ModelConfig::default(), 3, 8).unwrap();
        let mut tensors: Vec<(String, Mat)> = p.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
        tensors[0].1 = Mat::zeros(1, 1);
        assert!(matches!(
            AutoencoderParams::from_entries(ModelConfig::default(), 3, 8, tensors),
            Err(Error::Schema(_))
        ));
    }
}
