//! Valid (unpadded) 2-D cross-correlation lowered to a matrix product.

use crate::error::{shape_err, Result};

use super::{gemm, Tensor};

/// Output extent of a valid convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input < kernel {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Geometry> {
    input.expect_rank(3, "conv2d input")?;
    weights.expect_rank(4, "conv2d weights")?;
    bias.expect_rank(1, "conv2d bias")?;
    let [c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let [c_out, wc_in, kh, kw] = [
        weights.shape()[0],
        weights.shape()[1],
        weights.shape()[2],
        weights.shape()[3],
    ];
    if wc_in != c_in {
        return shape_err(format!(
            "conv2d: input has {c_in} channels but weights {:?} expect {wc_in}",
            weights.shape()
        ));
    }
    if bias.len() != c_out {
        return shape_err(format!(
            "conv2d: bias length {} does not match {c_out} output channels",
            bias.len()
        ));
    }
    let (Some(oh), Some(ow)) = (conv_output_extent(h, kh, stride), conv_output_extent(w, kw, stride)) else {
        return shape_err(format!(
            "conv2d: input {:?} too small for {kh}x{kw} kernel at stride {stride}",
            input.shape()
        ));
    };
    Ok(Geometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        oh,
        ow,
    })
}

/// Unfold input windows into a `(c_in*kh*kw) x (oh*ow)` column matrix.
fn im2col(g: &Geometry, input: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let src_row = (c * g.h + oy * g.stride + ki) * g.w + kj;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        out.copy_from_slice(&input[src_row..src_row + g.ow]);
                    } else {
                        for (ox, v) in out.iter_mut().enumerate() {
                            *v = input[src_row + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_accumulate(g: &Geometry, cols: &[f64], grad_input: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let dst_row = (c * g.h + oy * g.stride + ki) * g.w + kj;
                    for ox in 0..g.ow {
                        grad_input[dst_row + ox * g.stride] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kh, kw]`
/// weights plus a per-channel bias. Output is `[C_out, H', W']` with
/// `H' = (H - kh) / stride + 1`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = geometry(input, weights, bias, stride)?;
    let p = g.positions();
    let mut out = vec![0.0; g.c_out * p];
    for (o, b) in bias.data().iter().enumerate() {
        out[o * p..(o + 1) * p].fill(*b);
    }
    let cols = im2col(&g, input.data());
    gemm(
        g.c_out,
        g.patch_len(),
        p,
        1.0,
        weights.data(),
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    Tensor::new(&[g.c_out, g.oh, g.ow], out)
}

/// Accumulates gradients of a [`conv2d`] given the output gradient.
/// `grad_input` may be `None` when the input is not trainable (first layer).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    grad_output: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) -> Result<()> {
    let g = geometry(input, weights, bias, stride)?;
    let p = g.positions();
    let k = g.patch_len();
    if grad_output.len() != g.c_out * p || grad_weights.len() != weights.len() || grad_bias.len() != bias.len() {
        return shape_err("conv2d_backward: gradient buffer lengths do not match operands");
    }
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_output[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    let cols = im2col(&g, input.data());
    gemm(g.c_out, p, k, 1.0, grad_output, false, &cols, true, 1.0, grad_weights);
    if let Some(grad_input) = grad_input {
        if grad_input.len() != input.len() {
            return shape_err("conv2d_backward: input gradient buffer length");
        }
        let mut grad_cols = vec![0.0; k * p];
        gemm(
            k,
            g.c_out,
            p,
            1.0,
            weights.data(),
            true,
            grad_output,
            false,
            0.0,
            &mut grad_cols,
        );
        col2im_accumulate(&g, &grad_cols, grad_input);
    }
    Ok(())
}
