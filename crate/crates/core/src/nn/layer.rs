//! Layer kinds used by coarse-to-fine networks and their forward/backward maps.
//!
//! Images are `(H, W, C)`; dense layers and softmax operate on rank-1
//! vectors. Convolutions are always 3x3 with zero same-padding, pooling is
//! always 2x2 with stride 2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor used by the frozen batch-norm transform.
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Relu,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Flatten,
    Softmax,
    /// Frozen affine transform with loaded per-channel statistics.
    BatchNormInference { channels: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
            LayerSpec::BatchNormInference { .. } => "batchnorm",
        }
    }

    /// Names and shapes of the parameter tensors this layer owns.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => vec![
                ("weight", vec![3, 3, in_channels, out_channels]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::Dense { in_dim, out_dim } => vec![
                ("weight", vec![in_dim, out_dim]),
                ("bias", vec![out_dim]),
            ],
            LayerSpec::BatchNormInference { channels } => vec![
                ("scale", vec![channels]),
                ("shift", vec![channels]),
                ("mean", vec![channels]),
                ("variance", vec![channels]),
            ],
            _ => Vec::new(),
        }
    }

    /// Whether the optimizer updates this layer's parameters.
    pub fn trainable(&self) -> bool {
        matches!(self, LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. })
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_channels, .. } => 9 * in_channels,
            LayerSpec::Dense { in_dim, .. } => in_dim,
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => match input {
                &[h, w, c] if c == in_channels => Ok(vec![h, w, out_channels]),
                _ => Err(Error::shape(
                    "conv3x3 input",
                    &[input.first().copied().unwrap_or(0), input.get(1).copied().unwrap_or(0), in_channels],
                    input,
                )),
            },
            LayerSpec::MaxPool2x2 => match input {
                &[h, w, c] => {
                    if h % 2 != 0 || w % 2 != 0 {
                        Err(Error::OddSpatialDim {
                            height: h,
                            width: w,
                        })
                    } else {
                        Ok(vec![h / 2, w / 2, c])
                    }
                }
                _ => Err(Error::InvalidArgument(format!(
                    "maxpool2x2 expects an (H, W, C) input, got {input:?}"
                ))),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dense { in_dim, out_dim } => {
                if input == [in_dim] {
                    Ok(vec![out_dim])
                } else {
                    Err(Error::shape("dense input", &[in_dim], input))
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => match input {
                &[_] => Ok(input.to_vec()),
                _ => Err(Error::InvalidArgument(format!(
                    "softmax expects a vector, got {input:?}"
                ))),
            },
            LayerSpec::BatchNormInference { channels } => {
                if input.last() == Some(&channels) {
                    Ok(input.to_vec())
                } else {
                    let mut expected = input.to_vec();
                    if let Some(last) = expected.last_mut() {
                        *last = channels;
                    }
                    Err(Error::shape("batchnorm input", &expected, input))
                }
            }
        }
    }
}

/// Parameter tensors of a single layer, ordered as in [`LayerSpec::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn empty() -> Self {
        LayerParams {
            tensors: Vec::new(),
        }
    }

    pub fn zeros_for(layer: &LayerSpec) -> Self {
        LayerParams {
            tensors: layer
                .param_shapes()
                .iter()
                .map(|(_, s)| Tensor::zeros(s))
                .collect(),
        }
    }

    fn check(&self, layer: &LayerSpec) -> Result<()> {
        let shapes = layer.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} parameter tensors, got {}",
                layer.name(),
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("{} {name}", layer.name()),
                    shape,
                    t.shape(),
                ));
            }
        }
        Ok(())
    }
}

/// Values recorded during the forward pass that the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardCache<T> {
    None,
    /// Flat input index of the maximum in every pooling window.
    MaxPool { argmax: Vec<u32> },
    Softmax { probs: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_params: Vec<Tensor<T>>,
}

pub fn forward<T: Scalar>(
    layer: &LayerSpec,
    params: &LayerParams<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    forward_cached(layer, params, input).map(|(out, _)| out)
}

pub fn forward_cached<T: Scalar>(
    layer: &LayerSpec,
    params: &LayerParams<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    params.check(layer)?;
    let out_shape = layer.output_shape(input.shape())?;
    match *layer {
        LayerSpec::Conv3x3 {
            in_channels,
            out_channels,
        } => {
            let (h, w, _) = input.hwc()?;
            let out = conv3x3_forward(
                input.data(),
                params.tensors[0].data(),
                params.tensors[1].data(),
                h,
                w,
                in_channels,
                out_channels,
            );
            Ok((Tensor::new(out_shape, out)?, ForwardCache::None))
        }
        LayerSpec::MaxPool2x2 => {
            let (h, w, c) = input.hwc()?;
            let (out, argmax) = maxpool_forward(input.data(), h, w, c);
            Ok((Tensor::new(out_shape, out)?, ForwardCache::MaxPool { argmax }))
        }
        LayerSpec::Relu => Ok((input.map(|v| v.max(T::zero())), ForwardCache::None)),
        LayerSpec::Dense { in_dim, out_dim } => {
            let out = dense_forward(
                input.data(),
                params.tensors[0].data(),
                params.tensors[1].data(),
                in_dim,
                out_dim,
            );
            Ok((Tensor::new(out_shape, out)?, ForwardCache::None))
        }
        LayerSpec::Flatten => Ok((input.clone().reshape(&out_shape)?, ForwardCache::None)),
        LayerSpec::Softmax => {
            let probs = softmax(input.data());
            Ok((
                Tensor::new(out_shape, probs.clone())?,
                ForwardCache::Softmax { probs },
            ))
        }
        LayerSpec::BatchNormInference { channels } => {
            let (scale, shift) = batchnorm_affine(params, channels);
            let mut out = input.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let c = i % channels;
                *v = *v * scale[c] + shift[c];
            }
            Ok((out, ForwardCache::None))
        }
    }
}

/// Analytic gradients of the layer map, allocating fresh parameter-gradient buffers.
pub fn backward<T: Scalar>(
    layer: &LayerSpec,
    params: &LayerParams<T>,
    input: &Tensor<T>,
    cache: &ForwardCache<T>,
    grad_output: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let mut grad_params = LayerParams::zeros_for(layer).tensors;
    let grad_input = backward_accumulate(
        layer,
        params,
        input,
        cache,
        grad_output,
        &mut grad_params,
        true,
    )?
    .expect("input gradient requested");
    Ok(LayerGrads {
        grad_input,
        grad_params,
    })
}

/// Adds parameter gradients into `grad_params` and returns the input gradient
/// when `want_input_grad` is set.
pub fn backward_accumulate<T: Scalar>(
    layer: &LayerSpec,
    params: &LayerParams<T>,
    input: &Tensor<T>,
    cache: &ForwardCache<T>,
    grad_output: &Tensor<T>,
    grad_params: &mut [Tensor<T>],
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    params.check(layer)?;
    let out_shape = layer.output_shape(input.shape())?;
    if grad_output.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            format!("{} grad_output", layer.name()),
            &out_shape,
            grad_output.shape(),
        ));
    }
    let expected = layer.param_shapes();
    if grad_params.len() != expected.len()
        || grad_params
            .iter()
            .zip(&expected)
            .any(|(g, (_, s))| g.shape() != s.as_slice())
    {
        return Err(Error::InvalidArgument(format!(
            "{} gradient buffers do not match its parameters",
            layer.name()
        )));
    }
    let g = grad_output.data();
    match *layer {
        LayerSpec::Conv3x3 {
            in_channels,
            out_channels,
        } => {
            let (h, w, _) = input.hwc()?;
            let (gw, gb) = grad_params.split_at_mut(1);
            let mut grad_in = want_input_grad.then(|| vec![T::zero(); input.len()]);
            conv3x3_backward(
                input.data(),
                params.tensors[0].data(),
                g,
                gw[0].data_mut(),
                gb[0].data_mut(),
                grad_in.as_deref_mut(),
                h,
                w,
                in_channels,
                out_channels,
            );
            grad_in
                .map(|d| Tensor::new(input.shape().to_vec(), d))
                .transpose()
        }
        LayerSpec::MaxPool2x2 => {
            let ForwardCache::MaxPool { argmax } = cache else {
                return Err(Error::MissingContext("maxpool2x2"));
            };
            if argmax.len() != g.len() {
                return Err(Error::MissingContext("maxpool2x2"));
            }
            if !want_input_grad {
                return Ok(None);
            }
            let mut grad_in = Tensor::zeros(input.shape());
            let gi = grad_in.data_mut();
            for (&idx, &gv) in argmax.iter().zip(g) {
                gi[idx as usize] += gv;
            }
            Ok(Some(grad_in))
        }
        LayerSpec::Relu => Ok(want_input_grad.then(|| {
            let data = input
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                .collect();
            Tensor::new(input.shape().to_vec(), data).expect("relu shape")
        })),
        LayerSpec::Dense { in_dim, out_dim } => {
            let x = input.data();
            let weights = params.tensors[0].data();
            let (gw, gb) = grad_params.split_at_mut(1);
            for (b, &gv) in gb[0].data_mut().iter_mut().zip(g) {
                *b += gv;
            }
            let gw = gw[0].data_mut();
            let mut grad_in = want_input_grad.then(|| vec![T::zero(); in_dim]);
            for i in 0..in_dim {
                let xi = x[i];
                let wrow = &weights[i * out_dim..(i + 1) * out_dim];
                let gwrow = &mut gw[i * out_dim..(i + 1) * out_dim];
                let mut acc = T::zero();
                for o in 0..out_dim {
                    gwrow[o] += xi * g[o];
                    acc += wrow[o] * g[o];
                }
                if let Some(gi) = grad_in.as_mut() {
                    gi[i] = acc;
                }
            }
            grad_in.map(|d| Tensor::new(vec![in_dim], d)).transpose()
        }
        LayerSpec::Flatten => Ok(want_input_grad.then(|| {
            Tensor::new(input.shape().to_vec(), g.to_vec()).expect("flatten shape")
        })),
        LayerSpec::Softmax => {
            let ForwardCache::Softmax { probs } = cache else {
                return Err(Error::MissingContext("softmax"));
            };
            if probs.len() != g.len() {
                return Err(Error::MissingContext("softmax"));
            }
            if !want_input_grad {
                return Ok(None);
            }
            let dot: T = probs.iter().zip(g).map(|(&p, &gv)| p * gv).sum();
            let data = probs.iter().zip(g).map(|(&p, &gv)| p * (gv - dot)).collect();
            Ok(Some(Tensor::new(input.shape().to_vec(), data)?))
        }
        LayerSpec::BatchNormInference { channels } => {
            let eps = T::of(BATCHNORM_EPS);
            let scale = params.tensors[0].data();
            let mean = params.tensors[2].data();
            let var = params.tensors[3].data();
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut sums = vec![[T::zero(); 4]; channels];
            let mut grad_in = want_input_grad.then(|| vec![T::zero(); input.len()]);
            for (i, (&x, &gv)) in input.data().iter().zip(g).enumerate() {
                let c = i % channels;
                let centered = x - mean[c];
                let s = &mut sums[c];
                s[0] += gv * centered * inv_std[c];
                s[1] += gv;
                s[2] -= gv * scale[c] * inv_std[c];
                s[3] -= T::of(0.5) * gv * scale[c] * centered * inv_std[c].powi(3);
                if let Some(gi) = grad_in.as_mut() {
                    gi[i] = gv * scale[c] * inv_std[c];
                }
            }
            for (c, s) in sums.iter().enumerate() {
                for (k, &v) in s.iter().enumerate() {
                    grad_params[k].data_mut()[c] += v;
                }
            }
            grad_in
                .map(|d| Tensor::new(input.shape().to_vec(), d))
                .transpose()
        }
    }
}

fn batchnorm_affine<T: Scalar>(params: &LayerParams<T>, channels: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::of(BATCHNORM_EPS);
    let [scale, shift, mean, var] = [0, 1, 2, 3].map(|k| params.tensors[k].data());
    (0..channels)
        .map(|c| {
            let a = scale[c] / (var[c] + eps).sqrt();
            (a, shift[c] - a * mean[c])
        })
        .unzip()
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward<T: Scalar>(
    input: &[T],
    weights: &[T],
    bias: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            row.copy_from_slice(bias);
            for ky in 0..3 {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let pixel = &input[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for (ci, &a) in pixel.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (o, &wv) in row.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Scalar>(
    input: &[T],
    weights: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    mut grad_in: Option<&mut [T]>,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
) {
    for y in 0..h {
        for x in 0..w {
            let g = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (b, &gv) in grad_b.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..3 {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let pix = (iy * w + ix) * cin;
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = input[pix + ci];
                        let off = wbase + ci * cout;
                        let gwrow = &mut grad_w[off..off + cout];
                        if a != T::zero() {
                            for (gw, &gv) in gwrow.iter_mut().zip(g) {
                                *gw += a * gv;
                            }
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let wrow = &weights[off..off + cout];
                            let mut acc = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(g) {
                                acc += wv * gv;
                            }
                            gi[pix + ci] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn maxpool_forward<T: Scalar>(input: &[T], h: usize, w: usize, c: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * y) * w + 2 * x) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if input[idx] > input[best_idx] {
                        best_idx = idx;
                    }
                }
                out.push(input[best_idx]);
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}

fn dense_forward<T: Scalar>(
    input: &[T],
    weights: &[T],
    bias: &[T],
    in_dim: usize,
    out_dim: usize,
) -> Vec<T> {
    let mut out = bias.to_vec();
    for (i, &a) in input.iter().enumerate().take(in_dim) {
        if a == T::zero() {
            continue;
        }
        let wrow = &weights[i * out_dim..(i + 1) * out_dim];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += a * wv;
        }
    }
    out
}
