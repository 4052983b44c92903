//! Forward and backward passes over an ordered list of layers.

use crate::error::{Error, Result};
use crate::nn::layer::{self, ForwardCache, LayerParams, LayerSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activations recorded by [`forward_stack`]: `activations[i]` is the input of
/// layer `i` and the last entry is the stack output.
#[derive(Debug, Clone)]
pub struct StackTrace<T> {
    pub activations: Vec<Tensor<T>>,
    pub caches: Vec<ForwardCache<T>>,
}

impl<T: Scalar> StackTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("trace holds the input")
    }
}

fn check_lengths<T>(layers: &[LayerSpec], params: &[LayerParams<T>]) -> Result<()> {
    if layers.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layers but {} parameter sets",
            layers.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Plain forward pass without recording intermediate values.
pub fn run_stack<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_lengths(layers, params)?;
    let mut x = input.clone();
    for (spec, p) in layers.iter().zip(params) {
        x = layer::forward(spec, p, &x)?;
    }
    Ok(x)
}

pub fn forward_stack<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: Tensor<T>,
) -> Result<StackTrace<T>> {
    check_lengths(layers, params)?;
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut caches = Vec::with_capacity(layers.len());
    activations.push(input);
    for (spec, p) in layers.iter().zip(params) {
        let (out, cache) = layer::forward_cached(spec, p, activations.last().unwrap())?;
        activations.push(out);
        caches.push(cache);
    }
    Ok(StackTrace {
        activations,
        caches,
    })
}

/// Back-propagates `grad_output` through the stack, adding parameter
/// gradients into `grads` (one buffer set per layer).
pub fn backward_stack<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    trace: &StackTrace<T>,
    grad_output: Tensor<T>,
    grads: &mut [Vec<Tensor<T>>],
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    check_lengths(layers, params)?;
    if grads.len() != layers.len() || trace.caches.len() != layers.len() {
        return Err(Error::InvalidArgument(
            "gradient buffers or trace do not match the stack".into(),
        ));
    }
    let mut g = grad_output;
    for i in (0..layers.len()).rev() {
        let need_input = i > 0 || want_input_grad;
        match layer::backward_accumulate(
            &layers[i],
            &params[i],
            &trace.activations[i],
            &trace.caches[i],
            &g,
            &mut grads[i],
            need_input,
        )? {
            Some(next) => g = next,
            None => return Ok(None),
        }
    }
    Ok(Some(g))
}

/// Freshly zeroed gradient buffers for every layer in the stack.
pub fn zero_grads<T: Scalar>(layers: &[LayerSpec]) -> Vec<Vec<Tensor<T>>> {
    layers
        .iter()
        .map(|l| LayerParams::<T>::zeros_for(l).tensors)
        .collect()
}
