//! Elementwise activations, valid convolution and 2x2 max pooling, with the
//! backward passes training needs.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Kernel side of every convolution layer (3x3, fixed).
pub const KERNEL_SIDE: usize = 3;

/// Rectified linear unit, elementwise `max(0, x)`.
pub fn relu<T: Float>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(|v| v.max(T::zero()))
}

/// Logistic sigmoid `1 / (1 + e^-z)`.
pub fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// One convolution layer: 3x3 kernel per (input, output) channel pair plus a
/// per-output-channel bias. Kernel layout is `[ky][kx][in][out]`, output
/// channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> ConvLayer<T> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            kernel: vec![T::zero(); KERNEL_SIDE * KERNEL_SIDE * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    #[inline]
    pub fn kernel_index(&self, ky: usize, kx: usize, ic: usize, oc: usize) -> usize {
        ((ky * KERNEL_SIDE + kx) * self.in_channels + ic) * self.out_channels + oc
    }

    pub fn cast<U: Float>(&self) -> ConvLayer<U> {
        ConvLayer {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self
                .kernel
                .iter()
                .map(|&v| U::from(v).expect("float cast"))
                .collect(),
            bias: self
                .bias
                .iter()
                .map(|&v| U::from(v).expect("float cast"))
                .collect(),
        }
    }
}

/// Valid (no padding) cross-correlation with a 3x3 kernel: the output shrinks
/// by one pixel on each side. No kernel flip is applied; golden values assume
/// the cross-correlation convention.
pub fn conv2d_valid<T: Float>(input: &Tensor3<T>, layer: &ConvLayer<T>) -> Result<Tensor3<T>> {
    let (h, w, c) = input.shape();
    if h < KERNEL_SIDE || w < KERNEL_SIDE {
        return Err(Error::Dimension(format!(
            "input {h}x{w} smaller than {KERNEL_SIDE}x{KERNEL_SIDE} kernel"
        )));
    }
    if c != layer.in_channels {
        return Err(Error::Dimension(format!(
            "input has {c} channels, layer expects {}",
            layer.in_channels
        )));
    }
    let (oh, ow, oc) = (h - 2, w - 2, layer.out_channels);
    let mut out = Tensor3::zeros(oh, ow, oc);
    let in_data = input.data();
    let kernel = &layer.kernel;
    let out_data = out.data_mut();
    for y in 0..oh {
        for x in 0..ow {
            let out_base = (y * ow + x) * oc;
            let out_row = &mut out_data[out_base..out_base + oc];
            out_row.copy_from_slice(&layer.bias);
            for ky in 0..KERNEL_SIDE {
                let in_row = ((y + ky) * w + x) * c;
                for kx in 0..KERNEL_SIDE {
                    let in_px = in_row + kx * c;
                    for ic in 0..c {
                        let v = in_data[in_px + ic];
                        if v == T::zero() {
                            continue;
                        }
                        let k_base = ((ky * KERNEL_SIDE + kx) * c + ic) * oc;
                        let k_row = &kernel[k_base..k_base + oc];
                        for (o, k) in out_row.iter_mut().zip(k_row) {
                            *o = *o + v * *k;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvGrads<T = f32> {
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

/// Backward pass of [`conv2d_valid`]: given the gradient w.r.t. the output,
/// returns gradients w.r.t. kernel, bias and input.
pub fn conv2d_backward<T: Float>(
    input: &Tensor3<T>,
    layer: &ConvLayer<T>,
    d_out: &Tensor3<T>,
) -> Result<(ConvGrads<T>, Tensor3<T>)> {
    let (h, w, c) = input.shape();
    let (oh, ow, oc) = d_out.shape();
    if oh != h - 2 || ow != w - 2 || oc != layer.out_channels || c != layer.in_channels {
        return Err(Error::Dimension(format!(
            "conv backward shape mismatch: input {h}x{w}x{c}, grad {oh}x{ow}x{oc}"
        )));
    }
    let mut d_kernel = vec![T::zero(); layer.kernel.len()];
    let mut d_bias = vec![T::zero(); oc];
    let mut d_input = Tensor3::zeros(h, w, c);
    let in_data = input.data();
    let g_data = d_out.data();
    let kernel = &layer.kernel;
    let d_in = d_input.data_mut();
    for y in 0..oh {
        for x in 0..ow {
            let g_base = (y * ow + x) * oc;
            let g_row = &g_data[g_base..g_base + oc];
            for (b, g) in d_bias.iter_mut().zip(g_row) {
                *b = *b + *g;
            }
            for ky in 0..KERNEL_SIDE {
                let in_row = ((y + ky) * w + x) * c;
                for kx in 0..KERNEL_SIDE {
                    let in_px = in_row + kx * c;
                    for ic in 0..c {
                        let v = in_data[in_px + ic];
                        let k_base = ((ky * KERNEL_SIDE + kx) * c + ic) * oc;
                        let k_row = &kernel[k_base..k_base + oc];
                        let dk_row = &mut d_kernel[k_base..k_base + oc];
                        let mut acc = T::zero();
                        for o in 0..oc {
                            let g = g_row[o];
                            dk_row[o] = dk_row[o] + v * g;
                            acc = acc + k_row[o] * g;
                        }
                        d_in[in_px + ic] = d_in[in_px + ic] + acc;
                    }
                }
            }
        }
    }
    Ok((
        ConvGrads {
            kernel: d_kernel,
            bias: d_bias,
        },
        d_input,
    ))
}

/// 2x2 max pool with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of its argmax in the input (ties break toward the
/// first element in row-major order), as needed to route gradients back.
pub fn maxpool_2x2<T: Float>(input: &Tensor3<T>) -> Result<(Tensor3<T>, Vec<u32>)> {
    let (h, w, c) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "max pool requires even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(oh, ow, c);
    let mut argmax = vec![0u32; oh * ow * c];
    let in_data = input.data();
    let out_data = out.data_mut();
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                        let v = in_data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let out_idx = (y * ow + x) * c + ch;
                out_data[out_idx] = best;
                argmax[out_idx] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Scatter output gradients back to the argmax positions recorded by
/// [`maxpool_2x2`].
pub fn maxpool_backward<T: Float>(
    d_out: &Tensor3<T>,
    argmax: &[u32],
    input_shape: (usize, usize, usize),
) -> Tensor3<T> {
    let mut d_input = Tensor3::zeros(input_shape.0, input_shape.1, input_shape.2);
    let d_in = d_input.data_mut();
    for (g, &idx) in d_out.data().iter().zip(argmax) {
        d_in[idx as usize] = d_in[idx as usize] + *g;
    }
    d_input
}
