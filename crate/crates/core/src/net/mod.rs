//! The patch descriptor network: four valid convolutions, one 2x2 max pool,
//! a fully connected projection and a final L2 normalization.
//!
//! ```text
//! 3x32x32 -conv3x3-> C1x30x30 -relu-conv4x4/2-> C2x14x14 -relu-conv3x3-> C3x12x12
//!         -pool-> C3x6x6 -conv1x1-> C4x6x6 -fc-> D -l2-> unit descriptor
//! ```

mod io;

pub use io::{load_net, save_net, MODEL_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{
    affine, affine_backward, conv2d, conv2d_backward, l2_normalize, l2_normalize_backward, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, Tensor,
};

/// Side length of the square input patches.
pub const PATCH_SIDE: usize = 32;
/// Colour channels of a patch.
pub const PATCH_CHANNELS: usize = 3;
/// Descriptor length of the standard network.
pub const DESCRIPTOR_DIM: usize = 64;
/// Parameter count of the standard network.
pub const STANDARD_PARAM_COUNT: usize = 185_504;

const KERNELS: [usize; 4] = [3, 4, 3, 1];
const STRIDES: [usize; 4] = [1, 2, 1, 1];
/// Spatial side after conv4 (30 -> 14 -> 12 -> pool 6 -> 6).
const FINAL_SIDE: usize = 6;
const PARAM_TENSORS: usize = 10;
const LAYER_NAMES: [&str; 5] = ["conv1", "conv2", "conv3", "conv4", "fc"];

/// Layer widths. Topology (kernels, strides, pooling, activations) is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub conv_channels: [usize; 4],
    pub descriptor_dim: usize,
}

impl Architecture {
    pub const STANDARD: Architecture = Architecture {
        conv_channels: [32, 64, 128, 32],
        descriptor_dim: DESCRIPTOR_DIM,
    };

    /// Narrow variant with identical topology, used where finite
    /// differences over every parameter would be too slow.
    pub const REDUCED: Architecture = Architecture {
        conv_channels: [4, 8, 16, 4],
        descriptor_dim: 8,
    };

    pub fn flat_features(&self) -> usize {
        self.conv_channels[3] * FINAL_SIDE * FINAL_SIDE
    }

    /// Shapes of the ten parameter tensors, weights then bias per layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(PARAM_TENSORS);
        let mut c_in = PATCH_CHANNELS;
        for (layer, &c_out) in self.conv_channels.iter().enumerate() {
            shapes.push(vec![c_out, c_in, KERNELS[layer], KERNELS[layer]]);
            shapes.push(vec![c_out]);
            c_in = c_out;
        }
        shapes.push(vec![self.descriptor_dim, self.flat_features()]);
        shapes.push(vec![self.descriptor_dim]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn fan_in(shape: &[usize]) -> usize {
        shape[1..].iter().product()
    }
}

/// Name of parameter tensor `i` (e.g. `conv2.weight`).
pub fn param_name(i: usize) -> String {
    let kind = if i.is_multiple_of(2) { "weight" } else { "bias" };
    format!("{}.{kind}", LAYER_NAMES[i / 2])
}

/// A 3x32x32 RGB patch with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch(Tensor);

impl Patch {
    /// Wraps a `[3, 32, 32]` tensor, clamping values into [0, 1].
    pub fn new(mut pixels: Tensor) -> Result<Self> {
        if pixels.shape() != [PATCH_CHANNELS, PATCH_SIDE, PATCH_SIDE] {
            return shape_err(format!(
                "patch must be {PATCH_CHANNELS}x{PATCH_SIDE}x{PATCH_SIDE}, got {:?}",
                pixels.shape()
            ));
        }
        pixels.check_finite("patch pixels")?;
        for v in pixels.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self(pixels))
    }

    pub fn pixels(&self) -> &Tensor {
        &self.0
    }

    pub const LEN: usize = PATCH_CHANNELS * PATCH_SIDE * PATCH_SIDE;
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: Tensor,
    /// relu(conv1)
    pub conv1: Tensor,
    /// relu(conv2)
    pub conv2: Tensor,
    pub conv3: Tensor,
    pub pooled: Tensor,
    pub conv4: Tensor,
    /// Pre-normalization fc output.
    pub fc: Tensor,
    pub descriptor: Tensor,
}

/// Gradient buffers shaped like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            tensors: arch
                .param_shapes()
                .iter()
                .map(|s| vec![0.0; s.iter().product()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

/// Parameters of the descriptor extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorNet {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl DescriptorNet {
    /// Standard-width network with seeded uniform fan-in initialization.
    pub fn init(seed: u64) -> Self {
        Self::init_with(Architecture::STANDARD, seed)
    }

    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero. Values are
    /// drawn in single precision so they survive the on-disk format exactly.
    pub fn init_with(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let len: usize = shape.iter().product();
                let data = if i % 2 == 0 {
                    let scale = 1.0 / (Architecture::fan_in(shape) as f32).sqrt();
                    (0..len).map(|_| f64::from(rng.random_range(-scale..scale))).collect()
                } else {
                    vec![0.0; len]
                };
                Tensor::new(shape, data).expect("shape from architecture")
            })
            .collect();
        Self { arch, params }
    }

    /// Builds a network from explicit parameter tensors, validating shapes.
    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if params.len() != shapes.len() {
            return shape_err(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            ));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return shape_err(format!("{} has shape {:?}, expected {s:?}", param_name(i), p.shape()));
            }
            p.check_finite(&param_name(i))?;
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn descriptor_dim(&self) -> usize {
        self.arch.descriptor_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return shape_err(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.param_count()
            ));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Adds `grads` into every parameter's gradient slot.
    pub fn accumulate_grads(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.tensors) {
            p.accumulate_grad(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    fn layer(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.params[2 * i], &self.params[2 * i + 1])
    }

    pub fn forward_traced(&self, patch: &Patch) -> Result<Activations> {
        let input = patch.pixels().clone();
        let (w, b) = self.layer(0);
        let conv1 = relu(&conv2d(&input, w, b, STRIDES[0])?);
        let (w, b) = self.layer(1);
        let conv2 = relu(&conv2d(&conv1, w, b, STRIDES[1])?);
        let (w, b) = self.layer(2);
        let conv3 = conv2d(&conv2, w, b, STRIDES[2])?;
        let pooled = maxpool2x2(&conv3)?;
        let (w, b) = self.layer(3);
        let conv4 = conv2d(&pooled, w, b, STRIDES[3])?;
        let (w, b) = self.layer(4);
        let fc = affine(&conv4, w, b)?;
        let descriptor = l2_normalize(&fc)?;
        Ok(Activations {
            input,
            conv1,
            conv2,
            conv3,
            pooled,
            conv4,
            fc,
            descriptor,
        })
    }

    /// Unit-length descriptor of one patch.
    pub fn forward(&self, patch: &Patch) -> Result<Tensor> {
        Ok(self.forward_traced(patch)?.descriptor)
    }

    /// Accumulates parameter gradients for one traced patch given the
    /// gradient of some scalar with respect to its descriptor.
    pub fn backward(&self, acts: &Activations, grad_descriptor: &[f64], grads: &mut Gradients) -> Result<()> {
        let g = &mut grads.tensors;
        let mut g_fc = vec![0.0; acts.fc.len()];
        l2_normalize_backward(&acts.fc, &acts.descriptor, grad_descriptor, &mut g_fc);

        let mut g_conv4 = vec![0.0; acts.conv4.len()];
        let (w, b) = self.layer(4);
        let (gw, gb) = split_pair(g, 4);
        affine_backward(&acts.conv4, w, b, &g_fc, Some(&mut g_conv4), gw, gb)?;

        let mut g_pooled = vec![0.0; acts.pooled.len()];
        let (w, b) = self.layer(3);
        let (gw, gb) = split_pair(g, 3);
        conv2d_backward(&acts.pooled, w, b, STRIDES[3], &g_conv4, Some(&mut g_pooled), gw, gb)?;

        let mut g_conv3 = vec![0.0; acts.conv3.len()];
        maxpool2x2_backward(&acts.conv3, &g_pooled, &mut g_conv3)?;

        let mut g_relu2 = vec![0.0; acts.conv2.len()];
        let (w, b) = self.layer(2);
        let (gw, gb) = split_pair(g, 2);
        conv2d_backward(&acts.conv2, w, b, STRIDES[2], &g_conv3, Some(&mut g_relu2), gw, gb)?;
        // relu(x) > 0 exactly where x > 0, so the stored output gives the mask
        let mut g_conv2 = vec![0.0; acts.conv2.len()];
        relu_backward(&acts.conv2, &g_relu2, &mut g_conv2);

        let mut g_relu1 = vec![0.0; acts.conv1.len()];
        let (w, b) = self.layer(1);
        let (gw, gb) = split_pair(g, 1);
        conv2d_backward(&acts.conv1, w, b, STRIDES[1], &g_conv2, Some(&mut g_relu1), gw, gb)?;
        let mut g_conv1 = vec![0.0; acts.conv1.len()];
        relu_backward(&acts.conv1, &g_relu1, &mut g_conv1);

        let (w, b) = self.layer(0);
        let (gw, gb) = split_pair(g, 0);
        conv2d_backward(&acts.input, w, b, STRIDES[0], &g_conv1, None, gw, gb)?;
        Ok(())
    }

    /// Descriptor matrix `E` of a bag: row `i` is the descriptor of patch `i`.
    pub fn forward_bag(&self, patches: &[Patch]) -> Result<Tensor> {
        if patches.is_empty() {
            return shape_err("cannot describe an empty bag");
        }
        let rows = patches
            .par_iter()
            .map(|p| self.forward(p))
            .collect::<Result<Vec<_>>>()?;
        stack_rows(&rows, self.descriptor_dim())
    }

    /// Like [`forward_bag`](Self::forward_bag) but keeps every patch's activations.
    pub fn forward_bag_traced(&self, patches: &[Patch]) -> Result<(Tensor, Vec<Activations>)> {
        if patches.is_empty() {
            return shape_err("cannot describe an empty bag");
        }
        let traces = patches
            .par_iter()
            .map(|p| self.forward_traced(p))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Tensor> = traces.iter().map(|t| t.descriptor.clone()).collect();
        Ok((stack_rows(&rows, self.descriptor_dim())?, traces))
    }

    /// Backpropagates `grad_e` (same shape as the bag's descriptor matrix)
    /// through every patch of a traced bag, in patch order.
    pub fn backward_bag(&self, traces: &[Activations], grad_e: &Tensor, grads: &mut Gradients) -> Result<()> {
        if grad_e.shape() != [traces.len(), self.descriptor_dim()] {
            return shape_err(format!(
                "bag gradient {:?} does not match {} traced patches",
                grad_e.shape(),
                traces.len()
            ));
        }
        for (i, acts) in traces.iter().enumerate() {
            let row = grad_e.row(i);
            if row.iter().any(|&v| v != 0.0) {
                self.backward(acts, row, grads)?;
            }
        }
        Ok(())
    }
}

fn split_pair(g: &mut [Vec<f64>], layer: usize) -> (&mut [f64], &mut [f64]) {
    let (w, rest) = g[2 * layer..].split_first_mut().expect("weight buffer");
    (w.as_mut_slice(), rest[0].as_mut_slice())
}

fn stack_rows(rows: &[Tensor], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(&[rows.len(), dim], data)
}
