//! Finite-difference validation of the analytic backward passes.

use crate::error::Result;
use crate::nn::layer::{softmax, LayerParams, LayerSpec};
use crate::nn::loss::{cross_entropy, PROB_FLOOR};
use crate::nn::stack::{backward_stack, forward_stack, run_stack, zero_grads};
use crate::tensor::Tensor;

/// Magnitudes below this are treated as "no signal" in the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entries compared (parameters and input elements).
    pub checked: usize,
    /// Entries whose analytic and numeric values were both below the floor.
    pub skipped: usize,
    /// Entries whose relative error exceeded the tolerance.
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Cross-entropy loss of `label` under the stack output. A trailing softmax
/// layer is used as-is; otherwise softmax is applied to the (flattened) output.
fn stack_loss(
    layers: &[LayerSpec],
    params: &[LayerParams<f64>],
    input: &Tensor<f64>,
    label: usize,
) -> Result<f64> {
    let out = run_stack(layers, params, input)?;
    if matches!(layers.last(), Some(LayerSpec::Softmax)) {
        return Ok(-out.data()[label].max(PROB_FLOOR).ln());
    }
    // log-sum-exp form keeps roundoff well below the difference quotient
    let z = out.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

/// Compares the analytic gradient of the loss with respect to every parameter
/// and every input element against central differences with the given step.
pub fn grad_check(
    layers: &[LayerSpec],
    params: &[LayerParams<f64>],
    input: &Tensor<f64>,
    label: usize,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let trace = forward_stack(layers, params, input.clone())?;
    let out = trace.output();
    let grad_out = if matches!(layers.last(), Some(LayerSpec::Softmax)) {
        let mut g = vec![0.0; out.len()];
        g[label] = -1.0 / out.data()[label].max(PROB_FLOOR);
        Tensor::new(out.shape().to_vec(), g)?
    } else {
        let probs = softmax(out.data());
        let ce = cross_entropy(&probs, label)?;
        Tensor::new(out.shape().to_vec(), ce.grad_logits)?
    };
    let mut grads = zero_grads::<f64>(layers);
    let grad_input = backward_stack(layers, params, &trace, grad_out, &mut grads, true)?
        .expect("input gradient requested");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        failures: 0,
    };
    let mut record = |analytic: f64, numeric: f64| {
        report.checked += 1;
        if analytic.abs().max(numeric.abs()) < REL_ERROR_FLOOR {
            report.skipped += 1;
        }
        let err = relative_error(analytic, numeric);
        if err > tolerance {
            report.failures += 1;
        }
        report.max_rel_error = report.max_rel_error.max(err);
    };

    let mut probe = params.to_vec();
    for li in 0..layers.len() {
        for ti in 0..probe[li].tensors.len() {
            for k in 0..probe[li].tensors[ti].len() {
                let orig = probe[li].tensors[ti].data()[k];
                probe[li].tensors[ti].data_mut()[k] = orig + step;
                let plus = stack_loss(layers, &probe, input, label)?;
                probe[li].tensors[ti].data_mut()[k] = orig - step;
                let minus = stack_loss(layers, &probe, input, label)?;
                probe[li].tensors[ti].data_mut()[k] = orig;
                record(grads[li][ti].data()[k], (plus - minus) / (2.0 * step));
            }
        }
    }

    let mut x = input.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + step;
        let plus = stack_loss(layers, params, &x, label)?;
        x.data_mut()[k] = orig - step;
        let minus = stack_loss(layers, params, &x, label)?;
        x.data_mut()[k] = orig;
        record(grad_input.data()[k], (plus - minus) / (2.0 * step));
    }
    Ok(report)
}

/// Randomized single-layer stacks, one per layer kind, used by the tests and
/// the acceptance suite. Returns `(layers, params, input, label)`.
pub fn layer_kind_cases(
    seed: u64,
) -> Vec<(&'static str, Vec<LayerSpec>, Vec<LayerParams<f64>>, Tensor<f64>, usize)> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensor = |shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };
    let mut cases = Vec::new();

    let conv = LayerSpec::Conv3x3 {
        in_channels: 2,
        out_channels: 3,
    };
    let conv_params = LayerParams {
        tensors: vec![tensor(&[3, 3, 2, 3], -0.5, 0.5), tensor(&[3], -0.1, 0.1)],
    };
    cases.push((
        "conv3x3",
        vec![conv, LayerSpec::Flatten],
        vec![conv_params, LayerParams::empty()],
        tensor(&[4, 4, 2], -1.0, 1.0),
        seed as usize % 48,
    ));

    cases.push((
        "maxpool2x2",
        vec![LayerSpec::MaxPool2x2, LayerSpec::Flatten],
        vec![LayerParams::empty(), LayerParams::empty()],
        tensor(&[4, 4, 2], -2.0, 2.0),
        seed as usize % 8,
    ));

    cases.push((
        "relu",
        vec![LayerSpec::Relu],
        vec![LayerParams::empty()],
        tensor(&[6], -2.0, 2.0),
        seed as usize % 6,
    ));

    let dense = LayerSpec::Dense {
        in_dim: 8,
        out_dim: 5,
    };
    cases.push((
        "dense",
        vec![dense],
        vec![LayerParams {
            tensors: vec![tensor(&[8, 5], -0.8, 0.8), tensor(&[5], -0.2, 0.2)],
        }],
        tensor(&[8], -1.0, 1.0),
        seed as usize % 5,
    ));

    cases.push((
        "flatten",
        vec![LayerSpec::Flatten],
        vec![LayerParams::empty()],
        tensor(&[2, 2, 2], -1.0, 1.0),
        seed as usize % 8,
    ));

    cases.push((
        "softmax",
        vec![LayerSpec::Softmax],
        vec![LayerParams::empty()],
        tensor(&[5], -2.0, 2.0),
        seed as usize % 5,
    ));

    let bn = LayerSpec::BatchNormInference { channels: 3 };
    cases.push((
        "batchnorm",
        vec![bn, LayerSpec::Flatten],
        vec![
            LayerParams {
                tensors: vec![
                    tensor(&[3], 0.5, 1.5),
                    tensor(&[3], -0.5, 0.5),
                    tensor(&[3], -0.5, 0.5),
                    tensor(&[3], 0.5, 2.0),
                ],
            },
            LayerParams::empty(),
        ],
        tensor(&[2, 2, 3], -1.0, 1.0),
        seed as usize % 12,
    ));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn every_layer_kind_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            for (name, layers, params, input, label) in layer_kind_cases(seed) {
                let r = grad_check(&layers, &params, &input, label, 1e-5, 1e-4).unwrap();
                assert!(r.passed(), "{name} seed {seed}: {r:?}");
                worst = worst.max(r.max_rel_error);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn conv_example_at_small_step() {
        let (_, layers, params, input, label) = layer_kind_cases(3).remove(0);
        assert_eq!(input.shape(), &[4, 4, 2]);
        let r = grad_check(&layers, &params, &input, label, 1e-6, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn dense_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layers = vec![
            LayerSpec::Dense {
                in_dim: 8,
                out_dim: 4,
            },
            LayerSpec::Softmax,
        ];
        let params = vec![
            LayerParams {
                tensors: vec![random(&[8, 4], &mut rng), random(&[4], &mut rng)],
            },
            LayerParams::empty(),
        ];
        let r = grad_check(&layers, &params, &random(&[8], &mut rng), 2, 1e-6, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.checked, 8 * 4 + 4 + 8);
    }

    #[test]
    fn conv_relu_pool_dense_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers = vec![
            LayerSpec::Conv3x3 {
                in_channels: 1,
                out_channels: 2,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 32,
                out_dim: 3,
            },
        ];
        let params = vec![
            LayerParams {
                tensors: vec![random(&[3, 3, 1, 2], &mut rng), random(&[2], &mut rng)],
            },
            LayerParams::empty(),
            LayerParams::empty(),
            LayerParams::empty(),
            LayerParams {
                tensors: vec![random(&[32, 3], &mut rng), random(&[3], &mut rng)],
            },
        ];
        let r = grad_check(&layers, &params, &random(&[8, 8, 1], &mut rng), 1, 1e-6, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_signal_is_floored() {
        // Saturated output: loss is 0 and every gradient vanishes.
        let layers = vec![LayerSpec::Softmax];
        let input = Tensor::from_f64(&[3], &[0.0, 800.0, 0.0]).unwrap();
        let r = grad_check(&layers, &[LayerParams::empty()], &input, 1, 1e-6, 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.skipped, 3);
    }
}
