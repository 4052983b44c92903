use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::arch::C2FArchitecture;
use crate::nn::stack::run_stack;
use crate::nn::{LayerParams, LayerSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learned parameters: `alpha[i]` holds the transformer block of level `i`,
/// `beta[i]` its classifier head. Each inner vector has one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T> {
    pub alpha: Vec<Vec<LayerParams<T>>>,
    pub beta: Vec<Vec<LayerParams<T>>>,
}

/// Which half of a level a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Alpha,
    Beta,
}

impl Block {
    pub fn prefix(self) -> &'static str {
        match self {
            Block::Alpha => "alpha",
            Block::Beta => "beta",
        }
    }
}

fn init_layer<T: Scalar>(layer: &LayerSpec, rng: &mut ChaCha8Rng) -> LayerParams<T> {
    let mut params = LayerParams::zeros_for(layer);
    match layer {
        LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. } => {
            let limit = (6.0 / layer.fan_in() as f64).sqrt();
            for w in params.tensors[0].data_mut() {
                *w = T::of(rng.gen_range(-limit..limit));
            }
        }
        LayerSpec::BatchNormInference { .. } => {
            params.tensors[0].fill(T::one());
            params.tensors[3].fill(T::one());
        }
        _ => {}
    }
    params
}

impl<T: Scalar> WeightStore<T> {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn build(arch: &C2FArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alpha = Vec::with_capacity(arch.num_levels());
        let mut beta = Vec::with_capacity(arch.num_levels());
        for level in &arch.levels {
            alpha.push(level.transformer.iter().map(|l| init_layer(l, &mut rng)).collect());
            beta.push(level.classifier.iter().map(|l| init_layer(l, &mut rng)).collect());
        }
        Ok(WeightStore { alpha, beta })
    }

    pub fn block(&self, block: Block, level: usize) -> &[LayerParams<T>] {
        match block {
            Block::Alpha => &self.alpha[level],
            Block::Beta => &self.beta[level],
        }
    }

    pub fn block_mut(&mut self, block: Block, level: usize) -> &mut Vec<LayerParams<T>> {
        match block {
            Block::Alpha => &mut self.alpha[level],
            Block::Beta => &mut self.beta[level],
        }
    }

    /// Every parameter tensor with its canonical name, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for level in 0..self.alpha.len() {
            for block in [Block::Alpha, Block::Beta] {
                for (li, params) in self.block(block, level).iter().enumerate() {
                    for (ti, t) in params.tensors.iter().enumerate() {
                        out.push((format!("{}.{level}.{li}.{ti}", block.prefix()), t));
                    }
                }
            }
        }
        out
    }

    pub fn check_matches(&self, arch: &C2FArchitecture) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidArchitecture(msg));
        if self.alpha.len() != arch.num_levels() || self.beta.len() != arch.num_levels() {
            return err(format!(
                "weights hold {} levels, architecture has {}",
                self.alpha.len(),
                arch.num_levels()
            ));
        }
        for (i, lv) in arch.levels.iter().enumerate() {
            for (block, layers) in [(Block::Alpha, &lv.transformer), (Block::Beta, &lv.classifier)] {
                let params = self.block(block, i);
                if params.len() != layers.len() {
                    return err(format!(
                        "{}.{i}: {} parameter sets for {} layers",
                        block.prefix(),
                        params.len(),
                        layers.len()
                    ));
                }
                for (layer, p) in layers.iter().zip(params) {
                    let shapes = layer.param_shapes();
                    if shapes.len() != p.tensors.len()
                        || shapes.iter().zip(&p.tensors).any(|((_, s), t)| t.shape() != s.as_slice())
                    {
                        return err(format!(
                            "{}.{i}: {} parameters do not match the architecture",
                            block.prefix(),
                            layer.name()
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        let conv = |blocks: &Vec<Vec<LayerParams<T>>>| {
            blocks
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|p| LayerParams {
                            tensors: p.tensors.iter().map(|t| t.cast()).collect(),
                        })
                        .collect()
                })
                .collect()
        };
        WeightStore {
            alpha: conv(&self.alpha),
            beta: conv(&self.beta),
        }
    }

    /// Applies the transformer of `level` to the previous level's features
    /// (or the raw input for level 0).
    pub fn transform(
        &self,
        arch: &C2FArchitecture,
        level: usize,
        features: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        run_stack(&arch.levels[level].transformer, &self.alpha[level], features)
    }

    /// Class distribution of the `level` head given that level's features.
    pub fn classify(
        &self,
        arch: &C2FArchitecture,
        level: usize,
        features: &Tensor<T>,
    ) -> Result<Vec<T>> {
        run_stack(&arch.levels[level].classifier, &self.beta[level], features).map(|t| t.into_data())
    }

    /// Features `x_level` and class distribution of `level`, computed from the raw input.
    pub fn forward_to_level(
        &self,
        arch: &C2FArchitecture,
        input: &Tensor<T>,
        level: usize,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        if level >= arch.num_levels() {
            return Err(Error::InvalidArgument(format!(
                "level {level} out of range for {} levels",
                arch.num_levels()
            )));
        }
        let mut x = input.clone();
        for i in 0..=level {
            x = self.transform(arch, i, &x)?;
        }
        let dist = self.classify(arch, level, &x)?;
        Ok((x, dist))
    }

    /// Distributions of every level, reusing features along the way.
    pub fn forward_all_levels(
        &self,
        arch: &C2FArchitecture,
        input: &Tensor<T>,
    ) -> Result<Vec<Vec<T>>> {
        let mut x = input.clone();
        let mut out = Vec::with_capacity(arch.num_levels());
        for i in 0..arch.num_levels() {
            x = self.transform(arch, i, &x)?;
            out.push(self.classify(arch, i, &x)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::{ArchConfig, LevelConfig};

    fn small_arch() -> C2FArchitecture {
        C2FArchitecture::from_config(&ArchConfig {
            input_shape: [16, 16, 1],
            num_classes: 10,
            levels: [(4, 1), (8, 0)]
                .into_iter()
                .map(|(filters, extra_pools)| LevelConfig {
                    conv_layers: 1,
                    filters,
                    extra_pools,
                    classifier_hidden: vec![32],
                    batchnorm: false,
                })
                .collect(),
        })
        .unwrap()
    }

    fn input(seed: u64, shape: [usize; 3]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn build_is_seed_deterministic() {
        let arch = small_arch();
        let a = WeightStore::<f64>::build(&arch, 3).unwrap();
        let b = WeightStore::<f64>::build(&arch, 3).unwrap();
        let c = WeightStore::<f64>::build(&arch, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check_matches(&arch).unwrap();
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let arch = small_arch();
        let store = WeightStore::<f64>::build(&arch, 0).unwrap();
        for (lv, level) in arch.levels.iter().enumerate() {
            for (layer, p) in level.transformer.iter().zip(&store.alpha[lv]) {
                if layer.trainable() {
                    let limit = (6.0 / layer.fan_in() as f64).sqrt();
                    assert!(p.tensors[0].data().iter().all(|w| w.abs() <= limit));
                    assert!(p.tensors[1].data().iter().all(|&b| b == 0.0));
                }
            }
        }
    }

    #[test]
    fn finest_level_matches_full_network() {
        let arch = small_arch();
        let store = WeightStore::<f64>::build(&arch, 1).unwrap();
        let x = input(9, [16, 16, 1]);
        let layers: Vec<LayerSpec> = arch.level_path(1).into_iter().cloned().collect();
        let params: Vec<LayerParams<f64>> = store.alpha[0]
            .iter()
            .chain(&store.alpha[1])
            .chain(&store.beta[1])
            .cloned()
            .collect();
        let plain = run_stack(&layers, &params, &x).unwrap();
        let (_, dist) = store.forward_to_level(&arch, &x, 1).unwrap();
        assert_eq!(plain.data(), dist.as_slice());
    }

    #[test]
    fn incremental_levels_equal_fresh_passes() {
        let arch = small_arch();
        let store = WeightStore::<f64>::build(&arch, 2).unwrap();
        let x = input(5, [16, 16, 1]);
        let incremental = store.forward_all_levels(&arch, &x).unwrap();
        for (level, dist) in incremental.iter().enumerate() {
            let (_, fresh) = store.forward_to_level(&arch, &x, level).unwrap();
            assert_eq!(dist, &fresh);
        }
    }

    #[test]
    fn level_out_of_range() {
        let arch = small_arch();
        let store = WeightStore::<f64>::build(&arch, 2).unwrap();
        assert!(store.forward_to_level(&arch, &input(0, [16, 16, 1]), 2).is_err());
    }

    #[test]
    fn wrong_input_shape_propagates() {
        let arch = small_arch();
        let store = WeightStore::<f64>::build(&arch, 2).unwrap();
        let err = store
            .forward_to_level(&arch, &input(0, [16, 16, 3]), 0)
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
