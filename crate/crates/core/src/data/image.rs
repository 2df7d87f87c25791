//! Small helpers over `[3, H, W]` RGB tensors and single-channel images.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Single-channel image, row-major, pixel centres at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return shape_err(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            ));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

pub(crate) fn rgb_dims(image: &Tensor) -> Result<(usize, usize)> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return shape_err(format!("expected a [3, H, W] image, got {:?}", image.shape()));
    }
    Ok((image.shape()[1], image.shape()[2]))
}

/// Luma `0.299 R + 0.587 G + 0.114 B`.
pub fn to_gray(image: &Tensor) -> Result<GrayImage> {
    let (h, w) = rgb_dims(image)?;
    let plane = h * w;
    let d = image.data();
    let data = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect();
    GrayImage::new(w, h, data)
}

/// Area-averaging downsample by an integer factor; trailing rows and
/// columns that do not fill a whole block are dropped.
pub fn downsample(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = rgb_dims(image)?;
    let (oh, ow) = (h / factor, w / factor);
    if factor == 0 || oh == 0 || ow == 0 {
        return shape_err(format!("cannot downsample {h}x{w} by a factor of {factor}"));
    }
    let d = image.data();
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (c * h + oy * factor + dy) * w + ox * factor;
                    acc += d[row..row + factor].iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    Tensor::new(&[3, oh, ow], out)
}

/// Bilinear sample of channel `c` at continuous `(x, y)`, clamping to the
/// image border.
#[inline]
pub fn bilinear(image: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let d = image.data();
    let base = c * h * w;
    let p00 = d[base + y0 * w + x0];
    let p01 = d[base + y0 * w + x1];
    let p10 = d[base + y1 * w + x0];
    let p11 = d[base + y1 * w + x1];
    let top = p00 + (p01 - p00) * fx;
    let bottom = p10 + (p11 - p10) * fx;
    top + (bottom - top) * fy
}
