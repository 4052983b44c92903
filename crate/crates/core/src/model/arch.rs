//! Static description of a coarse-to-fine network.
//!
//! A network with `T` levels is a single feature path cut into `T` blocks.
//! Level `i` runs blocks `0..=i` and then its own classifier head, so every
//! coarser level is a prefix of every finer one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerSpec;

/// Hidden width of the classifier head when the config does not name one.
pub const DEFAULT_CLASSIFIER_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// Feature transformer block appended to the previous level's path.
    pub transformer: Vec<LayerSpec>,
    /// Classifier head: extra pools, flatten, dense layers, softmax.
    pub classifier: Vec<LayerSpec>,
    pub extra_pool_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct C2FArchitecture {
    pub levels: Vec<LevelSpec>,
    pub num_classes: usize,
    /// `(H, W, C)`
    pub input_shape: [usize; 3],
}

/// JSON form of an architecture: one entry per level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub levels: Vec<LevelConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    /// Number of 3x3 convolutions in the block.
    pub conv_layers: usize,
    /// Filters per convolution.
    pub filters: usize,
    #[serde(default)]
    pub extra_pools: usize,
    #[serde(default = "default_hidden")]
    pub classifier_hidden: Vec<usize>,
    /// Insert a frozen batch-norm transform after every convolution.
    #[serde(default)]
    pub batchnorm: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![DEFAULT_CLASSIFIER_HIDDEN]
}

fn uniform_levels(specs: &[(usize, usize, usize)], hidden: usize) -> Vec<LevelConfig> {
    specs
        .iter()
        .map(|&(conv_layers, filters, extra_pools)| LevelConfig {
            conv_layers,
            filters,
            extra_pools,
            classifier_hidden: vec![hidden],
            batchnorm: false,
        })
        .collect()
}

impl ArchConfig {
    /// Three-level CIFAR-10 network with 64, 128 and 192 filters per block
    /// and one extra pool ahead of each coarse head.
    pub fn net_a() -> Self {
        ArchConfig {
            input_shape: [32, 32, 3],
            num_classes: 10,
            levels: uniform_levels(&[(2, 64, 1), (2, 128, 1), (2, 192, 0)], DEFAULT_CLASSIFIER_HIDDEN),
        }
    }

    /// Small three-level network for padded 32x32 MNIST digits.
    pub fn desk_mnist() -> Self {
        ArchConfig {
            input_shape: [32, 32, 1],
            num_classes: 10,
            levels: uniform_levels(&[(2, 8, 1), (2, 16, 0), (2, 32, 0)], DEFAULT_CLASSIFIER_HIDDEN),
        }
    }

    /// Four-level variant of [`ArchConfig::desk_mnist`].
    pub fn desk_mnist_4level() -> Self {
        ArchConfig {
            input_shape: [32, 32, 1],
            num_classes: 10,
            levels: uniform_levels(
                &[(1, 8, 2), (1, 16, 1), (1, 32, 0), (1, 64, 0)],
                DEFAULT_CLASSIFIER_HIDDEN,
            ),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl C2FArchitecture {
    /// Expands a config into explicit layer lists and validates the result.
    pub fn from_config(cfg: &ArchConfig) -> Result<Self> {
        if cfg.levels.is_empty() {
            return Err(Error::InvalidArchitecture("at least one level is required".into()));
        }
        let [h, w, c] = cfg.input_shape;
        let (mut h, mut w, mut channels) = (h, w, c);
        let mut levels = Vec::with_capacity(cfg.levels.len());
        for (i, lc) in cfg.levels.iter().enumerate() {
            if lc.conv_layers == 0 || lc.filters == 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "level {}: conv_layers and filters must be positive",
                    i + 1
                )));
            }
            let mut transformer = Vec::new();
            for _ in 0..lc.conv_layers {
                transformer.push(LayerSpec::Conv3x3 {
                    in_channels: channels,
                    out_channels: lc.filters,
                });
                channels = lc.filters;
                if lc.batchnorm {
                    transformer.push(LayerSpec::BatchNormInference { channels });
                }
                transformer.push(LayerSpec::Relu);
            }
            transformer.push(LayerSpec::MaxPool2x2);
            h /= 2;
            w /= 2;

            let mut classifier = vec![LayerSpec::MaxPool2x2; lc.extra_pools];
            let shrink = 1usize.checked_shl(lc.extra_pools as u32).unwrap_or(usize::MAX);
            let mut dim = (h / shrink).max(1) * (w / shrink).max(1) * channels;
            classifier.push(LayerSpec::Flatten);
            for &hidden in &lc.classifier_hidden {
                classifier.push(LayerSpec::Dense {
                    in_dim: dim,
                    out_dim: hidden,
                });
                classifier.push(LayerSpec::Relu);
                dim = hidden;
            }
            classifier.push(LayerSpec::Dense {
                in_dim: dim,
                out_dim: cfg.num_classes,
            });
            classifier.push(LayerSpec::Softmax);
            levels.push(LevelSpec {
                transformer,
                classifier,
                extra_pool_count: lc.extra_pools,
            });
        }
        let arch = C2FArchitecture {
            levels,
            num_classes: cfg.num_classes,
            input_shape: cfg.input_shape,
        };
        arch.validate()?;
        for warning in arch.classifier_balance_warnings()? {
            log::warn!("{warning}");
        }
        Ok(arch)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Shape of the features produced by the transformer of `level` (0-based).
    pub fn feature_shape(&self, level: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.to_vec();
        for lv in &self.levels[..=level] {
            for layer in &lv.transformer {
                shape = layer.output_shape(&shape)?;
            }
        }
        Ok(shape)
    }

    /// Every layer on the inference path of `level`: transformer blocks
    /// `0..=level` followed by that level's classifier.
    pub fn level_path(&self, level: usize) -> Vec<&LayerSpec> {
        self.feature_path(level)
            .into_iter()
            .chain(self.levels[level].classifier.iter())
            .collect()
    }

    pub fn feature_path(&self, level: usize) -> Vec<&LayerSpec> {
        self.levels[..=level]
            .iter()
            .flat_map(|lv| lv.transformer.iter())
            .collect()
    }

    /// Flattened input size of each level's first dense layer.
    pub fn classifier_input_dims(&self) -> Result<Vec<usize>> {
        (0..self.num_levels())
            .map(|i| {
                let mut shape = self.feature_shape(i)?;
                for layer in &self.levels[i].classifier {
                    if matches!(layer, LayerSpec::Flatten) {
                        return Ok(shape.iter().product());
                    }
                    shape = layer.output_shape(&shape)?;
                }
                Err(Error::InvalidArchitecture(format!(
                    "level {} classifier has no flatten layer",
                    i + 1
                )))
            })
            .collect()
    }

    /// Levels whose classifier input is not within 2x of the finest level's.
    pub fn classifier_balance_warnings(&self) -> Result<Vec<String>> {
        let dims = self.classifier_input_dims()?;
        let finest = *dims.last().unwrap() as f64;
        Ok(dims
            .iter()
            .enumerate()
            .filter(|(_, &d)| {
                let ratio = d as f64 / finest;
                !(0.5..=2.0).contains(&ratio)
            })
            .map(|(i, &d)| {
                format!(
                    "level {} classifier input dimension {d} is not within 2x of the finest level's {}",
                    i + 1,
                    finest
                )
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidArchitecture(msg));
        if self.levels.is_empty() {
            return invalid("at least one level is required".into());
        }
        if self.num_classes < 2 {
            return invalid(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return invalid(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        let last = self.levels.len() - 1;
        let mut shape = self.input_shape.to_vec();
        for (i, lv) in self.levels.iter().enumerate() {
            let n = i + 1;
            if lv.transformer.is_empty() {
                return invalid(format!("level {n} has an empty feature transformer"));
            }
            for layer in &lv.transformer {
                if matches!(
                    layer,
                    LayerSpec::Dense { .. } | LayerSpec::Flatten | LayerSpec::Softmax
                ) {
                    return invalid(format!(
                        "level {n} transformer may not contain {}",
                        layer.name()
                    ));
                }
                shape = layer
                    .output_shape(&shape)
                    .map_err(|e| Error::InvalidArchitecture(format!("level {n} transformer: {e}")))?;
            }
            if lv.extra_pool_count > 0 && i == last {
                return invalid(format!(
                    "extra pooling is only permitted on coarser levels, not the finest level {n}"
                ));
            }
            let leading_pools = lv
                .classifier
                .iter()
                .take_while(|l| matches!(l, LayerSpec::MaxPool2x2))
                .count();
            if leading_pools != lv.extra_pool_count {
                return invalid(format!(
                    "level {n} declares {} extra pools but its classifier starts with {leading_pools}",
                    lv.extra_pool_count
                ));
            }
            if lv.classifier.last() != Some(&LayerSpec::Softmax) {
                return invalid(format!("level {n} classifier must end with softmax"));
            }
            let mut cshape = shape.clone();
            for layer in &lv.classifier {
                cshape = layer
                    .output_shape(&cshape)
                    .map_err(|e| Error::InvalidArchitecture(format!("level {n} classifier: {e}")))?;
            }
            if cshape != [self.num_classes] {
                return invalid(format!(
                    "level {n} classifier outputs {cshape:?}, expected [{}]",
                    self.num_classes
                ));
            }
        }
        Ok(())
    }
}
