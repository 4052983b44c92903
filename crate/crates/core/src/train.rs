//! Stagewise training: the finest network end to end, then each coarser
//! classifier head on frozen features.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{save_weights, C2FArchitecture, WeightStore};
use crate::nn::stack::{backward_stack, forward_stack, zero_grads};
use crate::nn::{cross_entropy, softmax, LayerParams, LayerSpec};
use crate::parallel::par_map;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RMSPROP_EPS: f64 = 1e-8;
/// Maximum shift as a fraction of the image side.
pub const SHIFT_FRACTION: f64 = 0.1;
/// Examples per gradient chunk. Chunk sums are reduced in a fixed order, so
/// the worker count never changes the result.
pub const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    FlipsAndShifts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_decay_per_update: f64,
    pub rmsprop_smoothing: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augmentation: Augmentation,
    /// Whether head training reuses the augmentation of the first stage.
    pub augment_intermediate: bool,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Rmsprop,
            learning_rate: 1e-4,
            lr_decay_per_update: 1e-6,
            rmsprop_smoothing: 0.9,
            batch_size: 128,
            epochs: 5,
            augmentation: Augmentation::None,
            augment_intermediate: true,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.lr_decay_per_update >= 0.0) {
            return bad("lr_decay_per_update must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rmsprop_smoothing) {
            return bad("rmsprop_smoothing must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    /// Learning rate for the update that follows `updates` earlier ones.
    pub fn lr_at(&self, updates: u64) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay_per_update * updates as f64)
    }
}

/// Per-tensor optimizer memory for one trainable stack.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub acc: Vec<Vec<Tensor<T>>>,
    pub updates: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(layers: &[LayerSpec]) -> Self {
        OptimizerState {
            acc: zero_grads(layers),
            updates: 0,
        }
    }
}

fn check_state<T: Scalar>(
    params: &[LayerParams<T>],
    grads: &[Vec<Tensor<T>>],
    state: &OptimizerState<T>,
) -> Result<()> {
    let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
    };
    let ok = params.len() == grads.len()
        && params.len() == state.acc.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.acc)
            .all(|((p, g), a)| same(&p.tensors, g) && same(g, a));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "optimizer state, gradients and parameters disagree in shape".into(),
        ))
    }
}

/// One RMSprop update of every trainable layer in `layers`.
pub fn rmsprop_step<T: Scalar>(
    layers: &[LayerSpec],
    params: &mut [LayerParams<T>],
    grads: &[Vec<Tensor<T>>],
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    check_state(params, grads, state)?;
    let lr = T::of(cfg.lr_at(state.updates));
    let rho = T::of(cfg.rmsprop_smoothing);
    let one_minus = T::one() - rho;
    let eps = T::of(RMSPROP_EPS);
    for (i, layer) in layers.iter().enumerate() {
        if !layer.trainable() {
            continue;
        }
        for ((p, g), a) in params[i].tensors.iter_mut().zip(&grads[i]).zip(&mut state.acc[i]) {
            for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                *av = rho * *av + one_minus * gv * gv;
                *pv -= lr * gv / (av.sqrt() + eps);
            }
        }
    }
    state.updates += 1;
    Ok(())
}

/// Plain gradient descent with the same learning-rate decay.
pub fn sgd_step<T: Scalar>(
    layers: &[LayerSpec],
    params: &mut [LayerParams<T>],
    grads: &[Vec<Tensor<T>>],
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    check_state(params, grads, state)?;
    let lr = T::of(cfg.lr_at(state.updates));
    for (i, layer) in layers.iter().enumerate() {
        if !layer.trainable() {
            continue;
        }
        for (p, g) in params[i].tensors.iter_mut().zip(&grads[i]) {
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
    }
    state.updates += 1;
    Ok(())
}

/// A concrete random transform: optional horizontal flip, then a shift of
/// `dx` columns and `dy` rows (positive moves content right/down).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentParams {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
}

impl AugmentParams {
    pub fn sample(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let max_dx = (SHIFT_FRACTION * width as f64).round() as i32;
        let max_dy = (SHIFT_FRACTION * height as f64).round() as i32;
        AugmentParams {
            flip: rng.gen_bool(0.5),
            dx: rng.gen_range(-max_dx..=max_dx),
            dy: rng.gen_range(-max_dy..=max_dy),
        }
    }
}

pub fn apply_augmentation<T: Scalar>(image: &Tensor<T>, aug: &AugmentParams) -> Result<Tensor<T>> {
    let (h, w, c) = image.hwc()?;
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        let sy = y as i64 - aug.dy as i64;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w {
            let sx = x as i64 - aug.dx as i64;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let sx = if aug.flip { w - 1 - sx as usize } else { sx as usize };
            let from = (sy as usize * w + sx) * c;
            out[(y * w + x) * c..][..c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Random flip (p = 0.5) plus independent width/height shifts of up to 10%.
pub fn augment<T: Scalar>(image: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let (h, w, _) = image.hwc()?;
    apply_augmentation(image, &AugmentParams::sample(h, w, rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    /// Examples whose true-class probability hit the log floor.
    pub clamped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub updates: u64,
}

struct ChunkResult<T> {
    grads: Vec<Vec<Tensor<T>>>,
    loss: f64,
    correct: usize,
    clamped: usize,
}

/// Drops the trailing softmax: training differentiates the fused
/// softmax + cross-entropy from the logits.
fn logit_layers(layers: &[LayerSpec]) -> Result<&[LayerSpec]> {
    match layers.split_last() {
        Some((LayerSpec::Softmax, rest)) => Ok(rest),
        _ => Err(Error::InvalidArchitecture(
            "trainable path must end with softmax".into(),
        )),
    }
}

/// Mini-batch training of one layer stack. `input_for(i, aug)` produces the
/// stack input of training example `i`.
#[allow(clippy::too_many_arguments)]
fn fit_stack<T, F>(
    layers: &[LayerSpec],
    params: &mut [LayerParams<T>],
    labels: &[usize],
    input_for: F,
    augment_shape: Option<(usize, usize)>,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<TrainLog>
where
    T: Scalar,
    F: Fn(usize, Option<&AugmentParams>) -> Result<Tensor<T>> + Sync,
{
    cfg.validate()?;
    let logits = logit_layers(layers)?;
    let head = layers.len() - logits.len();
    debug_assert_eq!(head, 1);
    let mut trainable: Vec<LayerParams<T>> = params[..logits.len()].to_vec();
    let mut state = OptimizerState::<T>::new(logits);
    let mut log = TrainLog::default();
    let n = labels.len();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let augs: Option<Vec<AugmentParams>> =
            augment_shape.map(|(h, w)| (0..n).map(|_| AugmentParams::sample(h, w, &mut rng)).collect());

        let (mut loss_sum, mut correct, mut clamped) = (0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let offset = b * cfg.batch_size;
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let params_ref = &trainable;
            let results = par_map(chunks.len(), cfg.workers, |k| {
                let mut grads = zero_grads::<T>(logits);
                let (mut loss, mut ok, mut floor) = (0.0, 0, 0);
                for (j, &idx) in chunks[k].iter().enumerate() {
                    let pos = offset + k * GRAD_CHUNK + j;
                    let aug = augs.as_ref().map(|a| &a[pos]);
                    let x = input_for(idx, aug)?;
                    let trace = forward_stack(logits, params_ref, x)?;
                    let z = trace.output();
                    let probs = softmax(z.data());
                    if !z.is_finite() {
                        loss = f64::NAN;
                        continue;
                    }
                    let ce = cross_entropy(&probs, labels[idx])?;
                    loss += ce.loss.widen();
                    ok += usize::from(crate::tensor::argmax(&probs) == labels[idx]);
                    floor += usize::from(ce.clamped);
                    let g = Tensor::new(z.shape().to_vec(), ce.grad_logits)?;
                    backward_stack(logits, params_ref, &trace, g, &mut grads, false)?;
                }
                Ok(ChunkResult {
                    grads,
                    loss,
                    correct: ok,
                    clamped: floor,
                })
            })?;

            let mut iter = results.into_iter();
            let first = iter.next().expect("non-empty batch");
            let mut grads = first.grads;
            let mut batch_loss = first.loss;
            correct += first.correct;
            clamped += first.clamped;
            for r in iter {
                for (gl, rl) in grads.iter_mut().zip(&r.grads) {
                    for (g, rg) in gl.iter_mut().zip(rl) {
                        g.add_scaled(rg, T::one())?;
                    }
                }
                batch_loss += r.loss;
                correct += r.correct;
                clamped += r.clamped;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            let scale = T::of(1.0 / batch.len() as f64);
            for g in grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            match cfg.optimizer {
                OptimizerKind::Rmsprop => rmsprop_step(logits, &mut trainable, &grads, &mut state, cfg)?,
                OptimizerKind::Sgd => sgd_step(logits, &mut trainable, &grads, &mut state, cfg)?,
            }
        }
        let denom = n.max(1) as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / denom,
            accuracy: correct as f64 / denom,
            clamped,
        };
        log::info!(
            "stream {stream} epoch {epoch}: loss {:.4} acc {:.4}",
            stats.mean_loss,
            stats.accuracy
        );
        log.epochs.push(stats);
    }
    log.updates = state.updates;
    params[..logits.len()].clone_from_slice(&trainable);
    Ok(log)
}

fn augment_shape<T: Scalar>(data: &Dataset<T>, enabled: bool) -> Result<Option<(usize, usize)>> {
    if !enabled || data.is_empty() {
        return Ok(None);
    }
    let (h, w, _) = data.inputs[0].hwc()?;
    Ok(Some((h, w)))
}

fn augmented_input<T: Scalar>(image: &Tensor<T>, aug: Option<&AugmentParams>) -> Result<Tensor<T>> {
    match aug {
        Some(a) => apply_augmentation(image, a),
        None => Ok(image.clone()),
    }
}

/// Trains every feature transformer and the finest classifier as one network.
pub fn train_feature_transformers<T: Scalar>(
    arch: &C2FArchitecture,
    store: &mut WeightStore<T>,
    train: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    store.check_matches(arch)?;
    let last = arch.num_levels() - 1;
    let layers: Vec<LayerSpec> = arch.level_path(last).into_iter().cloned().collect();
    let mut params: Vec<LayerParams<T>> = store
        .alpha
        .iter()
        .flatten()
        .chain(&store.beta[last])
        .cloned()
        .collect();
    let shape = augment_shape(train, cfg.augmentation == Augmentation::FlipsAndShifts)?;
    let log = fit_stack(
        &layers,
        &mut params,
        &train.labels,
        |i, aug| augmented_input(&train.inputs[i], aug),
        shape,
        cfg,
        0,
    )?;
    let mut it = params.into_iter();
    for block in store.alpha.iter_mut().chain(std::iter::once(&mut store.beta[last])) {
        for p in block.iter_mut() {
            *p = it.next().expect("parameter count matches the path");
        }
    }
    Ok(log)
}

/// Trains the heads of levels `0..T-1` on frozen features. Returns one log per
/// head; a single-level architecture yields no logs and no changes.
pub fn train_intermediate_classifiers<T: Scalar>(
    arch: &C2FArchitecture,
    store: &mut WeightStore<T>,
    train: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<TrainLog>> {
    store.check_matches(arch)?;
    let augmenting = cfg.augmentation == Augmentation::FlipsAndShifts && cfg.augment_intermediate;
    let shape = augment_shape(train, augmenting)?;
    let mut logs = Vec::new();
    for level in 0..arch.num_levels().saturating_sub(1) {
        let frozen: &WeightStore<T> = store;
        let features_of = |image: &Tensor<T>| -> Result<Tensor<T>> {
            let mut x = image.clone();
            for i in 0..=level {
                x = frozen.transform(arch, i, &x)?;
            }
            Ok(x)
        };
        let cached = match shape {
            None => Some(par_map(train.len(), cfg.workers, |i| features_of(&train.inputs[i]))?),
            Some(_) => None,
        };
        let mut params = frozen.beta[level].clone();
        let log = fit_stack(
            &arch.levels[level].classifier,
            &mut params,
            &train.labels,
            |i, aug| match &cached {
                Some(f) => Ok(f[i].clone()),
                None => features_of(&augmented_input(&train.inputs[i], aug)?),
            },
            shape,
            cfg,
            level as u64 + 1,
        )?;
        store.beta[level] = params;
        logs.push(log);
    }
    Ok(logs)
}

/// Optimizer metadata stored next to a checkpointed weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_decay_per_update: f64,
    pub rmsprop_smoothing: f64,
    pub batch_size: usize,
    pub epochs_completed: usize,
    pub updates: u64,
    pub seed: u64,
    pub final_train_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(stage: &str, cfg: &TrainConfig, logs: &[TrainLog]) -> Self {
        CheckpointMeta {
            stage: stage.to_string(),
            optimizer: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            lr_decay_per_update: cfg.lr_decay_per_update,
            rmsprop_smoothing: cfg.rmsprop_smoothing,
            batch_size: cfg.batch_size,
            epochs_completed: cfg.epochs,
            updates: logs.iter().map(|l| l.updates).sum(),
            seed: cfg.seed,
            final_train_loss: logs
                .last()
                .and_then(|l| l.epochs.last())
                .map(|e| e.mean_loss),
        }
    }
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", weights.display()))
}

/// Writes the weights and the `<weights>.json` metadata sidecar.
pub fn save_checkpoint<T: Scalar>(
    store: &WeightStore<T>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    save_weights(store, path)?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint_meta(weights: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let side = sidecar_path(weights.as_ref());
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::model::{ArchConfig, LevelConfig};

    fn scalar_stack() -> (Vec<LayerSpec>, Vec<LayerParams<f64>>) {
        let layer = LayerSpec::Dense { in_dim: 1, out_dim: 1 };
        let p = LayerParams {
            tensors: vec![
                Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                Tensor::new(vec![1], vec![0.0]).unwrap(),
            ],
        };
        (vec![layer], vec![p])
    }

    fn grads_of(v: f64) -> Vec<Vec<Tensor<f64>>> {
        vec![vec![
            Tensor::new(vec![1, 1], vec![v]).unwrap(),
            Tensor::new(vec![1], vec![0.0]).unwrap(),
        ]]
    }

    #[test]
    fn rmsprop_worked_example() {
        let (layers, mut params) = scalar_stack();
        let mut state = OptimizerState::new(&layers);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        rmsprop_step(&layers, &mut params, &grads_of(1.0), &mut state, &cfg).unwrap();
        let acc = state.acc[0][0].data()[0];
        assert!((acc - 0.1).abs() < 1e-15);
        let expected = 1.0 - 0.1 / (0.1f64.sqrt() + 1e-8);
        assert!((params[0].tensors[0].data()[0] - expected).abs() < 1e-15);
        assert!((params[0].tensors[0].data()[0] - 0.6838).abs() < 1e-4);
        assert_eq!(state.updates, 1);
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let (layers, mut params) = scalar_stack();
        let before = params.clone();
        let mut state = OptimizerState::new(&layers);
        for _ in 0..3 {
            rmsprop_step(&layers, &mut params, &grads_of(0.0), &mut state, &TrainConfig::default())
                .unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn learning_rate_decay_closed_form() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            lr_decay_per_update: 1e-6,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(1000) - 0.01 / 1.001).abs() < 1e-18);
        assert_eq!(cfg.lr_at(0), 0.01);
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let (layers, mut params) = scalar_stack();
        let mut state = OptimizerState::new(&layers);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.5,
            lr_decay_per_update: 0.0,
            ..TrainConfig::default()
        };
        sgd_step(&layers, &mut params, &grads_of(2.0), &mut state, &cfg).unwrap();
        assert_eq!(params[0].tensors[0].data()[0], 0.0);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let (layers, mut params) = scalar_stack();
        let mut state = OptimizerState::<f64>::new(&[LayerSpec::Dense { in_dim: 2, out_dim: 1 }]);
        let r = rmsprop_step(&layers, &mut params, &grads_of(1.0), &mut state, &TrainConfig::default());
        assert!(r.is_err());
    }

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(vec![h, w, 1], (0..h * w).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let img = ramp(8, 8);
        assert_eq!(apply_augmentation(&img, &AugmentParams::default()).unwrap(), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(6, 4);
        let flip = AugmentParams {
            flip: true,
            ..Default::default()
        };
        let once = apply_augmentation(&img, &flip).unwrap();
        assert_ne!(once, img);
        assert_eq!(once.data()[0], img.data()[3]);
        assert_eq!(apply_augmentation(&once, &flip).unwrap(), img);
    }

    #[test]
    fn shift_by_three_columns() {
        let img = ramp(32, 32);
        let out = apply_augmentation(
            &img,
            &AugmentParams {
                flip: false,
                dx: 3,
                dy: 0,
            },
        )
        .unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let v = out.data()[y * 32 + x];
                if x < 3 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, img.data()[y * 32 + x - 3]);
                }
            }
        }
    }

    #[test]
    fn sampled_shifts_stay_within_ten_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flips = 0;
        for _ in 0..2000 {
            let a = AugmentParams::sample(32, 32, &mut rng);
            assert!(a.dx.abs() <= 3 && a.dy.abs() <= 3);
            flips += usize::from(a.flip);
        }
        assert!((800..1200).contains(&flips));
        let img = ramp(32, 32);
        assert_eq!(augment(&img, &mut rng).unwrap().shape(), img.shape());
    }

    fn tiny_arch(levels: usize) -> C2FArchitecture {
        let cfgs = [(4, 1), (6, 0), (8, 0)];
        let n = cfgs.len();
        C2FArchitecture::from_config(&ArchConfig {
            input_shape: [8, 8, 1],
            num_classes: 4,
            levels: cfgs[n - levels..]
                .iter()
                .enumerate()
                .map(|(i, &(filters, pools))| LevelConfig {
                    conv_layers: 1,
                    filters,
                    extra_pools: if i + 1 == levels { 0 } else { pools.min(1) },
                    classifier_hidden: vec![16],
                    batchnorm: false,
                })
                .collect(),
        })
        .unwrap()
    }

    fn tiny_data(n: usize) -> Dataset<f64> {
        synthetic(n, [8, 8, 1], 4, 0.05, 11)
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let arch = tiny_arch(2);
        let mut store = WeightStore::<f64>::build(&arch, 0).unwrap();
        let before = store.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train_feature_transformers(&arch, &mut store, &tiny_data(20), &cfg).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn worker_count_does_not_change_weights() {
        let arch = tiny_arch(2);
        let data = tiny_data(40);
        let run = |workers| {
            let mut store = WeightStore::<f64>::build(&arch, 1).unwrap();
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                epochs: 2,
                batch_size: 40,
                workers,
                augmentation: Augmentation::FlipsAndShifts,
                ..TrainConfig::default()
            };
            train_feature_transformers(&arch, &mut store, &data, &cfg).unwrap();
            train_intermediate_classifiers(&arch, &mut store, &data, &cfg).unwrap();
            store
        };
        let one = run(1);
        assert_eq!(one, run(1));
        assert_eq!(one, run(3));
    }

    #[test]
    fn overfits_a_tiny_subset() {
        let arch = tiny_arch(2);
        let data = tiny_data(10);
        let mut store = WeightStore::<f64>::build(&arch, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            ..TrainConfig::default()
        };
        let log = train_feature_transformers(&arch, &mut store, &data, &cfg).unwrap();
        assert_eq!(log.epochs.last().unwrap().accuracy, 1.0);
        assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
    }

    #[test]
    fn head_training_freezes_features_and_finest_head() {
        let arch = tiny_arch(3);
        let data = tiny_data(24);
        let mut store = WeightStore::<f64>::build(&arch, 3).unwrap();
        let before = store.clone();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let logs = train_intermediate_classifiers(&arch, &mut store, &data, &cfg).unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(store.alpha, before.alpha);
        assert_eq!(store.beta[2], before.beta[2]);
        assert_ne!(store.beta[0], before.beta[0]);
        assert_ne!(store.beta[1], before.beta[1]);
    }

    #[test]
    fn single_level_head_training_is_a_no_op() {
        let arch = tiny_arch(1);
        let mut store = WeightStore::<f64>::build(&arch, 0).unwrap();
        let before = store.clone();
        let logs =
            train_intermediate_classifiers(&arch, &mut store, &tiny_data(8), &TrainConfig::default())
                .unwrap();
        assert!(logs.is_empty());
        assert_eq!(store, before);
    }

    #[test]
    fn divergence_is_reported() {
        let arch = tiny_arch(1);
        let mut store = WeightStore::<f64>::build(&arch, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train_feature_transformers(&arch, &mut store, &tiny_data(8), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn checkpoint_sidecar_round_trip() {
        let arch = tiny_arch(2);
        let store = WeightStore::<f64>::build(&arch, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.c2fw");
        let meta = CheckpointMeta::new("feature_transformers", &TrainConfig::default(), &[]);
        save_checkpoint(&store, &meta, &path).unwrap();
        assert_eq!(load_checkpoint_meta(&path).unwrap(), meta);
        assert_eq!(crate::model::load_weights::<f64>(&path, &arch).unwrap(), store);
    }
}
