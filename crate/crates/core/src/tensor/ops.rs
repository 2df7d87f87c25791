use crate::error::{shape_err, Error, Result};

use super::{gemm, Tensor};

/// Inputs to [`l2_normalize`] with a smaller norm are rejected.
pub const NORM_EPSILON: f64 = 1e-12;

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_output: &[f64], grad_input: &mut [f64]) {
    assert_eq!(grad_output.len(), input.len());
    assert_eq!(grad_input.len(), input.len());
    for ((gi, &go), &x) in grad_input.iter_mut().zip(grad_output).zip(input.data()) {
        if x > 0.0 {
            *gi += go;
        }
    }
}

fn pool_dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    input.expect_rank(3, "maxpool2x2 input")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!(
            "maxpool2x2 needs even spatial extents, got {:?}",
            input.shape()
        ));
    }
    Ok((c, h, w))
}

/// Flat input index of the maximum in window `(c, oy, ox)`; first in
/// row-major order on ties.
#[inline]
fn window_argmax(data: &[f64], h: usize, w: usize, c: usize, oy: usize, ox: usize) -> usize {
    let base = (c * h + 2 * oy) * w + 2 * ox;
    let mut best = base;
    for idx in [base + 1, base + w, base + w + 1] {
        if data[idx] > data[best] {
            best = idx;
        }
    }
    best
}

/// Non-overlapping 2x2 max pooling of a `[C, H, W]` tensor with even `H`, `W`.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pool_dims(input)?;
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(data[window_argmax(data, h, w, ch, oy, ox)]);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Routes each window's gradient to its (first) argmax.
pub fn maxpool2x2_backward(input: &Tensor, grad_output: &[f64], grad_input: &mut [f64]) -> Result<()> {
    let (c, h, w) = pool_dims(input)?;
    let (oh, ow) = (h / 2, w / 2);
    if grad_output.len() != c * oh * ow || grad_input.len() != input.len() {
        return shape_err("maxpool2x2_backward: gradient buffer lengths");
    }
    let data = input.data();
    let mut k = 0;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                grad_input[window_argmax(data, h, w, ch, oy, ox)] += grad_output[k];
                k += 1;
            }
        }
    }
    Ok(())
}

fn affine_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    weights.expect_rank(2, "affine weights")?;
    let (d_out, d_in) = (weights.rows(), weights.cols());
    if input.len() != d_in {
        return shape_err(format!(
            "affine: input of {} elements against weights {:?}",
            input.len(),
            weights.shape()
        ));
    }
    if bias.len() != d_out {
        return shape_err(format!(
            "affine: bias of {} elements against weights {:?}",
            bias.len(),
            weights.shape()
        ));
    }
    Ok((d_out, d_in))
}

/// `weights * input + bias`. Any input shape with `D_in` elements is
/// accepted and treated as flattened.
pub fn affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = affine_dims(input, weights, bias)?;
    let mut out = bias.data().to_vec();
    gemm(
        d_out,
        d_in,
        1,
        1.0,
        weights.data(),
        false,
        input.data(),
        false,
        1.0,
        &mut out,
    );
    Ok(Tensor::from_vec(out))
}

pub fn affine_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_output: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) -> Result<()> {
    let (d_out, d_in) = affine_dims(input, weights, bias)?;
    if grad_output.len() != d_out || grad_weights.len() != weights.len() || grad_bias.len() != d_out {
        return shape_err("affine_backward: gradient buffer lengths");
    }
    for (gb, go) in grad_bias.iter_mut().zip(grad_output) {
        *gb += go;
    }
    // outer product g_out * x^T
    gemm(
        d_out,
        1,
        d_in,
        1.0,
        grad_output,
        false,
        input.data(),
        false,
        1.0,
        grad_weights,
    );
    if let Some(grad_input) = grad_input {
        if grad_input.len() != d_in {
            return shape_err("affine_backward: input gradient buffer length");
        }
        gemm(
            d_in,
            d_out,
            1,
            1.0,
            weights.data(),
            true,
            grad_output,
            false,
            1.0,
            grad_input,
        );
    }
    Ok(())
}

/// Scales a vector to unit Euclidean length.
pub fn l2_normalize(input: &Tensor) -> Result<Tensor> {
    let norm = input.norm();
    if !(norm > NORM_EPSILON) {
        return Err(Error::DegenerateNorm {
            norm,
            min: NORM_EPSILON,
        });
    }
    let data = input.data().iter().map(|v| v / norm).collect();
    Tensor::new(input.shape(), data)
}

/// Applies the Jacobian `(I - y y^T) / |x|` of the normalization to
/// `grad_output`, given the forward input `x` and output `y`.
pub fn l2_normalize_backward(input: &Tensor, output: &Tensor, grad_output: &[f64], grad_input: &mut [f64]) {
    let norm = input.norm();
    let y = output.data();
    let dot: f64 = y.iter().zip(grad_output).map(|(a, b)| a * b).sum();
    for ((gi, &go), &yi) in grad_input.iter_mut().zip(grad_output).zip(y) {
        *gi += (go - yi * dot) / norm;
    }
}
