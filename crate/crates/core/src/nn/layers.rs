//! Forward and backward primitives for the fixed layer menu: valid
//! convolution, max pooling, inner product, ReLU and softmax.

use crate::error::{PcnError, Result};
use crate::tensor::{Real, Tensor};

use super::gemm::{axpy, dot, gemm_nn_acc, gemm_tn_acc};

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            velocity,
        }
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            velocity: self.velocity.cast(),
        }
    }
}

/// Convolution with weights `(out_ch, in_ch, k, k)` and bias `(out_ch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        ConvLayer {
            kernel,
            stride,
            weight: Param::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Param::zeros(&[out_ch]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_dims(h, w, self.kernel, self.stride)
    }
}

/// Inner product with weights `(n_out, n_in)` and bias `(n_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> FcLayer<T> {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        FcLayer {
            weight: Param::zeros(&[n_out, n_in]),
            bias: Param::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

pub(crate) fn conv_output_dims(
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> Result<(usize, usize)> {
    if s == 0 || k == 0 || h < k || w < k {
        return Err(PcnError::shape(format!(
            "window {k}x{k} stride {s} does not fit a {h}x{w} input"
        )));
    }
    Ok(((h - k) / s + 1, (w - k) / s + 1))
}

/// Unrolls receptive fields into a `(c*k*k) x (oh*ow)` matrix.
fn im2col<T: Real>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let np = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * np];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let q = (ch * k + i) * k + j;
                let row = &mut cols[q * np..(q + 1) * np];
                for y in 0..oh {
                    let src = &plane[(y * s + i) * w + j..];
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    if s == 1 {
                        dst.copy_from_slice(&src[..ow]);
                    } else {
                        for (x, d) in dst.iter_mut().enumerate() {
                            *d = src[x * s];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let np = oh * ow;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let q = (ch * k + i) * k + j;
                let row = &cols[q * np..(q + 1) * np];
                for y in 0..oh {
                    let base = (y * s + i) * w + j;
                    for x in 0..ow {
                        plane[base + x * s] += row[y * ow + x];
                    }
                }
            }
        }
    }
    out
}

fn check_conv_input<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.chw();
    if c != layer.in_channels() {
        return Err(PcnError::shape(format!(
            "conv expects {} input channels, got {c}",
            layer.in_channels()
        )));
    }
    Ok((c, h, w))
}

pub fn conv2d<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_conv_input(input, layer)?;
    let (k, s) = (layer.kernel, layer.stride);
    let (oh, ow) = conv_output_dims(h, w, k, s)?;
    let np = oh * ow;
    let nq = c * k * k;
    let cols = im2col(input.data(), (c, h, w), k, s, (oh, ow));
    let oc = layer.out_channels();
    let wt = layer.weight.value.data();
    let bias = layer.bias.value.data();
    let mut out = vec![T::zero(); oc * np];
    for o in 0..oc {
        out[o * np..(o + 1) * np].iter_mut().for_each(|v| *v = bias[o]);
    }
    gemm_nn_acc(wt, &cols, &mut out, oc, nq, np);
    Tensor::from_vec(&[oc, oh, ow], out)
}

/// Accumulates `weight.grad` and `bias.grad` and returns the gradient with
/// respect to `input`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    layer: &mut ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = check_conv_input(input, layer)?;
    let (k, s) = (layer.kernel, layer.stride);
    let (oh, ow) = conv_output_dims(h, w, k, s)?;
    let oc = layer.out_channels();
    if grad_out.len() != oc * oh * ow {
        return Err(PcnError::shape(format!(
            "conv grad_out {:?} does not match output ({oc}, {oh}, {ow})",
            grad_out.shape()
        )));
    }
    let np = oh * ow;
    let nq = c * k * k;
    let cols = im2col(input.data(), (c, h, w), k, s, (oh, ow));
    // patches as rows, so the weight gradient is a plain product
    let mut rows = vec![T::zero(); np * nq];
    for q in 0..nq {
        for p in 0..np {
            rows[p * nq + q] = cols[q * np + p];
        }
    }
    let g = grad_out.data();

    {
        gemm_nn_acc(g, &rows, layer.weight.grad.data_mut(), oc, np, nq);
        let bgrad = layer.bias.grad.data_mut();
        for o in 0..oc {
            bgrad[o] += g[o * np..(o + 1) * np].iter().copied().sum::<T>();
        }
    }

    let wt = layer.weight.value.data();
    let mut dcols = vec![T::zero(); nq * np];
    gemm_tn_acc(wt, g, &mut dcols, nq, oc, np);
    let grad_in = col2im(&dcols, (c, h, w), k, s, (oh, ow));
    Tensor::from_vec(input.shape(), grad_in)
}

/// Max pooling. Returns the pooled tensor and, per output cell, the flat
/// input index of its maximum (first occurrence on ties).
pub fn maxpool<T: Real>(input: &Tensor<T>, k: usize, s: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw();
    let (oh, ow) = conv_output_dims(h, w, k, s)?;
    let data = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = ch * h * w + (y * s) * w + x * s;
                let mut best = data[best_idx];
                for i in 0..k {
                    for j in 0..k {
                        let idx = ch * h * w + (y * s + i) * w + x * s + j;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, argmax))
}

pub fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(PcnError::shape("maxpool grad_out does not match argmax"));
    }
    let mut grad = Tensor::zeros(input_shape);
    let gd = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    Ok(grad)
}

pub fn fc<T: Real>(input: &Tensor<T>, layer: &FcLayer<T>) -> Result<Tensor<T>> {
    let (n_out, n_in) = (layer.n_out(), layer.n_in());
    if input.len() != n_in {
        return Err(PcnError::shape(format!(
            "fc expects {n_in} inputs, got {}",
            input.len()
        )));
    }
    let x = input.data();
    let wt = layer.weight.value.data();
    let b = layer.bias.value.data();
    let out = (0..n_out)
        .map(|o| b[o] + dot(&wt[o * n_in..(o + 1) * n_in], x))
        .collect();
    Tensor::from_vec(&[n_out], out)
}

pub fn fc_backward<T: Real>(
    input: &Tensor<T>,
    layer: &mut FcLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n_out, n_in) = (layer.n_out(), layer.n_in());
    if input.len() != n_in || grad_out.len() != n_out {
        return Err(PcnError::shape("fc backward dimensions"));
    }
    let x = input.data();
    let g = grad_out.data();
    {
        let wgrad = layer.weight.grad.data_mut();
        for o in 0..n_out {
            axpy(g[o], x, &mut wgrad[o * n_in..(o + 1) * n_in]);
        }
        let bgrad = layer.bias.grad.data_mut();
        for o in 0..n_out {
            bgrad[o] += g[o];
        }
    }
    let wt = layer.weight.value.data();
    let mut dx = vec![T::zero(); n_in];
    for o in 0..n_out {
        axpy(g[o], &wt[o * n_in..(o + 1) * n_in], &mut dx);
    }
    Tensor::from_vec(input.shape(), dx)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.len() != grad_out.len() {
        return Err(PcnError::shape("relu grad_out does not match input"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Max-subtracted softmax over a rank-1 slice of logits.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_tensor<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.shape().len() != 1 {
        return Err(PcnError::shape("softmax input must be rank-1"));
    }
    Tensor::from_vec(t.shape(), softmax(t.data()))
}
