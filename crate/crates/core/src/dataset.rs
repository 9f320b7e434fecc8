//! Image datasets in the SCQD container.
//!
//! Layout: the ASCII magic `SCQD`, then little-endian `u32` version (1),
//! count, channels, height and width, then `count·channels·height·width`
//! little-endian `f32` pixels in `[0, 1]`, image-major and channel-major
//! within an image. The file length must match the header exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"SCQD";
const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;

/// Images held as `f32` in `(N, C, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(count: usize, channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != count * channels * height * width {
            return Err(Error::contract(
                "Dataset::new",
                format!(
                    "{} pixels for shape ({count}, {channels}, {height}, {width})",
                    pixels.len()
                ),
            ));
        }
        Ok(Dataset {
            count,
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.image_len()..(i + 1) * self.image_len()]
    }

    /// The listed images as a `C × (n·H·W)` matrix, column `(n·H + h)·W + w`.
    pub fn batch(&self, indices: &[usize]) -> Mat {
        let hw = self.height * self.width;
        let cols = indices.len() * hw;
        let mut out = Mat::zeros(self.channels, cols);
        for (n, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            for c in 0..self.channels {
                let dst = &mut out.row_mut(c)[n * hw..(n + 1) * hw];
                for (d, s) in dst.iter_mut().zip(&img[c * hw..(c + 1) * hw]) {
                    *d = f64::from(*s);
                }
            }
        }
        out
    }

    /// Splits off the last `test` images as a second dataset.
    pub fn split_tail(&self, test: usize) -> Result<(Dataset, Dataset)> {
        if test > self.count {
            return Err(Error::contract("Dataset::split_tail", "test split larger than dataset"));
        }
        let cut = (self.count - test) * self.image_len();
        Ok((
            Dataset::new(self.count - test, self.channels, self.height, self.width, self.pixels[..cut].to_vec())?,
            Dataset::new(test, self.channels, self.height, self.width, self.pixels[cut..].to_vec())?,
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.pixels.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.count as u32, self.channels as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < HEADER_BYTES {
            return Err(bad(format!("{} bytes is shorter than the SCQD header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("missing SCQD magic".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if field(0) != VERSION {
            return Err(bad(format!("unsupported SCQD version {}", field(0))));
        }
        let (count, channels, height, width) = (field(1) as usize, field(2) as usize, field(3) as usize, field(4) as usize);
        let expected = count
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_BYTES));
        if expected != Some(bytes.len()) {
            return Err(bad(format!(
                "header declares ({count}, {channels}, {height}, {width}) but file has {} bytes",
                bytes.len()
            )));
        }
        let pixels = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::new(count, channels, height, width, pixels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Seeded RGB scenes: a uniform background with one to three axis-aligned
/// rectangles or circles of random colour, position and size.
pub fn generate_synthetic(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 || size % 4 != 0 {
        return Err(Error::contract("generate_synthetic", format!("size {size} is not a positive multiple of 4")));
    }
    let hw = size * size;
    let mut pixels = vec![0f32; count * 3 * hw];
    let root = Rng::new(seed);
    for (i, img) in pixels.chunks_exact_mut(3 * hw).enumerate() {
        // one stream per image keeps image i independent of the count
        let mut rng = root.substream(i as u64);
        let background: [f32; 3] = std::array::from_fn(|_| rng.uniform_open01() as f32);
        for (c, plane) in img.chunks_exact_mut(hw).enumerate() {
            plane.fill(background[c]);
        }
        let shapes = 1 + rng.below(3);
        for _ in 0..shapes {
            let colour: [f32; 3] = std::array::from_fn(|_| rng.uniform_open01() as f32);
            let circle = rng.below(2) == 1;
            let s = size as f64;
            let cx = rng.uniform(0.0, s);
            let cy = rng.uniform(0.0, s);
            let a = rng.uniform(s / 8.0, s / 3.0);
            let b = rng.uniform(s / 8.0, s / 3.0);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let inside = if circle {
                        dx * dx + dy * dy <= a * a
                    } else {
                        dx.abs() <= a && dy.abs() <= b
                    };
                    if inside {
                        for (c, plane) in img.chunks_exact_mut(hw).enumerate() {
                            plane[y * size + x] = colour[c];
                        }
                    }
                }
            }
        }
    }
    Dataset::new(count, 3, size, size, pixels)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Which CIFAR-10 binary batches to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl std::str::FromStr for CifarSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(CifarSplit::Train),
            "test" => Ok(CifarSplit::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

impl CifarSplit {
    pub fn files(self) -> Vec<String> {
        match self {
            CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarSplit::Test => vec!["test_batch.bin".into()],
        }
    }
}

/// Decodes CIFAR-10 binary records (label byte, then 1024 red, 1024 green
/// and 1024 blue bytes), dropping labels and scaling bytes by 1/255.
pub fn decode_cifar_records(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .flat_map(|rec| rec[1..].iter().map(|&b| f32::from(b) / 255.0))
        .collect())
}

/// Reads the standard batch files of `split` from `dir` in their canonical
/// order.
pub fn ingest_cifar(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    let mut pixels = Vec::new();
    for name in split.files() {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        pixels.extend(decode_cifar_records(&bytes, &path)?);
    }
    let count = pixels.len() / (3 * 32 * 32);
    Dataset::new(count, 3, 32, 32, pixels)
}
