//! Patch extraction (`im2col`) and its adjoint (`col2im`).
//!
//! Feature maps are stored as `(channels, N·H·W)` matrices with column index
//! `(n·H + h)·W + w`. A convolution is then `W · im2col(x) + b` and a
//! transposed convolution is `col2im(Wᵀ x) + b`, so both inherit their
//! gradients from matmul and these two linear maps.

use crate::error::{Error, Result};
use crate::mat::Mat;

use super::{NodeId, Tape};

/// Geometry of a square-kernel convolution over a batch of images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn image_cols(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn patch_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn patch_cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::contract(op, "kernel and stride must be positive"));
        }
        if self.height + 2 * self.pad < self.kernel || self.width + 2 * self.pad < self.kernel {
            return Err(Error::contract(op, format!("kernel larger than padded input: {self:?}")));
        }
        Ok(())
    }
}

pub fn im2col(x: &Mat, g: &ConvGeom) -> Result<Mat> {
    g.validate("im2col")?;
    if x.shape() != (g.channels, g.image_cols()) {
        return Err(Error::contract(
            "im2col",
            format!("input {:?}, geometry expects {:?}", x.shape(), (g.channels, g.image_cols())),
        ));
    }
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride, g.pad as isize);
    let mut out = Mat::zeros(g.patch_rows(), g.patch_cols());
    for c in 0..g.channels {
        let src = x.row(c);
        for ki in 0..k {
            for kj in 0..k {
                let dst = out.row_mut((c * k + ki) * k + kj);
                for n in 0..g.batch {
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let src_base = (n as isize * h + ih) * w;
                        let dst_base = (n * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * s + kj) as isize - p;
                            if iw >= 0 && iw < w {
                                dst[dst_base + ow] = src[(src_base + iw) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the image grid,
/// summing overlaps.
pub fn col2im(cols: &Mat, g: &ConvGeom) -> Result<Mat> {
    g.validate("col2im")?;
    if cols.shape() != (g.patch_rows(), g.patch_cols()) {
        return Err(Error::contract(
            "col2im",
            format!(
                "input {:?}, geometry expects {:?}",
                cols.shape(),
                (g.patch_rows(), g.patch_cols())
            ),
        ));
    }
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride, g.pad as isize);
    let mut out = Mat::zeros(g.channels, g.image_cols());
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let src = cols.row((c * k + ki) * k + kj);
                let dst = out.row_mut(c);
                for n in 0..g.batch {
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let dst_base = (n as isize * h + ih) * w;
                        let src_base = (n * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * s + kj) as isize - p;
                            if iw >= 0 && iw < w {
                                dst[(dst_base + iw) as usize] += src[src_base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

impl Tape {
    pub fn im2col(&mut self, x: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let value = im2col(self.value(x), &geom)?;
        self.record(
            "im2col",
            &[x],
            value,
            Box::new(move |g, _| vec![Some(col2im(g, &geom).expect("shape fixed at record"))]),
        )
    }

    pub fn col2im(&mut self, cols: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let value = col2im(self.value(cols), &geom)?;
        self.record(
            "col2im",
            &[cols],
            value,
            Box::new(move |g, _| vec![Some(im2col(g, &geom).expect("shape fixed at record"))]),
        )
    }

    /// `weight · im2col(x) + bias` with `weight: Cout×(Cin·k·k)`, `bias: Cout×1`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let cols = self.im2col(x, geom)?;
        let y = self.matmul(weight, cols)?;
        self.add_col_bias(y, bias)
    }

    /// Transposed convolution producing an image with the geometry `geom`
    /// describes; `x` lives on `geom`'s output grid. `weight` is
    /// `(Cout·k·k)×Cin`, `bias` is `Cout×1`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let cols = self.matmul(weight, x)?;
        let y = self.col2im(cols, geom)?;
        self.add_col_bias(y, bias)
    }
}
