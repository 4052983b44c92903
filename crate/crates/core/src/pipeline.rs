//! End-to-end experiments: load and split data, train both stages, build
//! evaluation tables, tune thresholds per trade-off weight and report.
//!
//! Every stage writes its artifact into the output directory and, when
//! resuming, is skipped if that artifact already exists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bo::{optimize_shared_threshold, optimize_thresholds, BoConfig, BoResult};
use crate::cascade::{build_eval_table, ConfidenceKind, EvalTable, ThresholdVector};
use crate::cost::{latency_profile, CostProfile, CostProvider};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{load_weights, ArchConfig, C2FArchitecture, WeightStore};
use crate::report::{emit_report, Provenance, ReportRow, RowMode, Seeds, SweepReport};
use crate::scalar::{Precision, Scalar};
use crate::train::{
    load_checkpoint_meta, save_checkpoint, train_feature_transformers, train_intermediate_classifiers,
    CheckpointMeta, TrainConfig,
};

pub const DATA_ROOT_ENV: &str = "C2F_DATA_ROOT";
pub const STAGE1_WEIGHTS: &str = "weights_stage1.c2fw";
pub const STAGE2_WEIGHTS: &str = "weights.c2fw";
/// Hash of the settings the stored weights were trained with.
pub const TRAINING_KEY: &str = "training.sha256";
pub const VAL_TABLE: &str = "table_val.c2ft";
pub const TEST_TABLE: &str = "table_test.c2ft";
/// Validation examples timed per level by the latency cost provider.
pub const LATENCY_SAMPLE: usize = 32;
pub const LATENCY_REPS: usize = 5;

/// Architecture given inline, by file path, or as `preset:<name>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Inline(ArchConfig),
    Path(String),
}

impl ArchSource {
    pub fn resolve(&self, base: Option<&Path>) -> Result<ArchConfig> {
        match self {
            ArchSource::Inline(cfg) => Ok(cfg.clone()),
            ArchSource::Path(p) => match p.strip_prefix("preset:") {
                Some("net_a") => Ok(ArchConfig::net_a()),
                Some("desk_mnist") => Ok(ArchConfig::desk_mnist()),
                Some("desk_mnist_4level") => Ok(ArchConfig::desk_mnist_4level()),
                Some(other) => Err(Error::InvalidArgument(format!(
                    "unknown architecture preset {other:?} (net_a, desk_mnist, desk_mnist_4level)"
                ))),
                None => {
                    let path = Path::new(p);
                    match base {
                        Some(b) if path.is_relative() => ArchConfig::load(b.join(path)),
                        _ => ArchConfig::load(path),
                    }
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    /// Procedural patterns shaped like the architecture input.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory with the dataset files; falls back to `$C2F_DATA_ROOT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    /// Examples kept from each split after splitting (`None` keeps all).
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub val: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
    /// Total examples generated for the synthetic kind.
    #[serde(default = "default_synthetic_count")]
    pub synthetic_count: usize,
    #[serde(default = "default_synthetic_noise")]
    pub synthetic_noise: f64,
}

fn default_synthetic_count() -> usize {
    600
}

fn default_synthetic_noise() -> f64 {
    0.3
}

/// `mac`, `latency` or `table:<csv path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CostSpec {
    Mac,
    Latency,
    Table(PathBuf),
}

impl std::str::FromStr for CostSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac" => Ok(CostSpec::Mac),
            "latency" => Ok(CostSpec::Latency),
            _ => match s.strip_prefix("table:") {
                Some(p) if !p.is_empty() => Ok(CostSpec::Table(PathBuf::from(p))),
                _ => Err(Error::InvalidArgument(format!(
                    "cost provider {s:?} must be mac, latency or table:<csv>"
                ))),
            },
        }
    }
}

impl std::fmt::Display for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostSpec::Mac => f.write_str("mac"),
            CostSpec::Latency => f.write_str("latency"),
            CostSpec::Table(p) => write!(f, "table:{}", p.display()),
        }
    }
}

impl Serialize for CostSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CostSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub architecture: ArchSource,
    pub dataset: DatasetConfig,
    #[serde(default = "default_ratio")]
    pub split_ratio: [u32; 3],
    #[serde(default)]
    pub confidence: ConfidenceKind,
    #[serde(default = "default_cost")]
    pub cost: CostSpec,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Also tune one threshold shared by all levels for every λ.
    #[serde(default = "default_true")]
    pub single_threshold: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bo: BoConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output_dir: String,
}

fn default_ratio() -> [u32; 3] {
    [4, 1, 1]
}

fn default_cost() -> CostSpec {
    CostSpec::Mac
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_true() -> bool {
    true
}

fn default_precision() -> Precision {
    Precision::F64
}

fn default_workers() -> usize {
    1
}

fn default_output() -> String {
    "c2f-out".into()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_ratio.iter().sum::<u32>() == 0 {
            return Err(Error::InvalidArgument("split ratio must not be all zero".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::InvalidArgument(format!("lambda {l} outside [0, 1]")));
        }
        self.train.validate()?;
        self.bo.validate()
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            split: self.seed,
            init: self.seed.wrapping_add(1),
            train: self.seed.wrapping_add(2),
            bo: self.seed.wrapping_add(3),
        }
    }

    /// Training settings with the experiment's seed and worker count applied.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().train,
            workers: self.workers,
            ..self.train.clone()
        }
    }

    pub fn effective_bo(&self) -> BoConfig {
        BoConfig {
            seed: self.seeds().bo,
            ..self.bo.clone()
        }
    }

    /// Config fields that determine results, as canonical JSON.
    pub fn canonical(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("workers");
        }
        Ok(v)
    }

    pub fn hash(&self) -> Result<String> {
        hex_digest(&self.canonical()?)
    }

    /// Hash of the fields that determine the trained weights.
    pub fn training_hash(&self) -> Result<String> {
        let c = self.canonical()?;
        let keep = ["architecture", "dataset", "split_ratio", "train", "seed", "precision"];
        let v: serde_json::Map<_, _> = c
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, _)| keep.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        hex_digest(&serde_json::Value::Object(v))
    }
}

fn hex_digest(v: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(v)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl ExperimentConfig {
}

/// A loaded experiment: resolved architecture plus where artifacts live.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub arch: C2FArchitecture,
    pub out_dir: PathBuf,
    /// Directory relative architecture and data paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub val: EvalTable,
    pub test: EvalTable,
}

/// `path` exists and was written no earlier than `than`.
fn newer_than(path: &Path, than: &Path) -> bool {
    let modified = |p: &Path| std::fs::metadata(p).and_then(|m| m.modified()).ok();
    match (modified(path), modified(than)) {
        (Some(a), Some(b)) => a >= b,
        (Some(_), None) => true,
        _ => false,
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn take<T: Scalar>(d: &Dataset<T>, n: Option<usize>, split: Split) -> Result<Dataset<T>> {
    match n {
        None => Ok(Dataset { split, ..d.clone() }),
        Some(n) if n <= d.len() => Ok(d.subset(&(0..n).collect::<Vec<_>>(), split)),
        Some(n) => Err(Error::Dataset(format!(
            "requested {n} {split:?} examples but only {} are available",
            d.len()
        ))),
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig, base_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let arch_cfg = config.architecture.resolve(base_dir.as_deref())?;
        let arch = C2FArchitecture::from_config(&arch_cfg)?;
        let out = PathBuf::from(&config.output_dir);
        let out_dir = match &base_dir {
            Some(b) if out.is_relative() => b.join(out),
            _ => out,
        };
        Ok(Experiment {
            config,
            arch,
            out_dir,
            base_dir,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config = ExperimentConfig::load(path)?;
        Self::new(config, path.parent().map(Path::to_path_buf))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        let root = match &self.config.dataset.root {
            Some(r) => PathBuf::from(r),
            None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or_else(|| {
                Error::Dataset(format!("no dataset root configured and ${DATA_ROOT_ENV} is unset"))
            })?,
        };
        Ok(match &self.base_dir {
            Some(b) if root.is_relative() => b.join(root),
            _ => root,
        })
    }

    /// Loads the dataset and cuts the stratified train/val/test splits.
    pub fn load_splits<T: Scalar>(&self) -> Result<Splits<T>> {
        stage("load_data", self.load_splits_inner())
    }

    fn load_splits_inner<T: Scalar>(&self) -> Result<Splits<T>> {
        let ds = &self.config.dataset;
        let full: Dataset<T> = match ds.kind {
            DatasetKind::Mnist => data::load_mnist(self.data_root()?)?,
            DatasetKind::Cifar10 => data::load_cifar10(self.data_root()?)?,
            DatasetKind::Synthetic => data::synthetic(
                ds.synthetic_count,
                self.arch.input_shape,
                self.arch.num_classes,
                ds.synthetic_noise,
                self.config.seed,
            ),
        };
        if full.num_classes != self.arch.num_classes {
            return Err(Error::Dataset(format!(
                "dataset has {} classes, architecture expects {}",
                full.num_classes, self.arch.num_classes
            )));
        }
        if let Some(x) = full.inputs.first() {
            if x.shape() != self.arch.input_shape {
                return Err(Error::Dataset(format!(
                    "dataset images are {:?}, architecture expects {:?}",
                    x.shape(),
                    self.arch.input_shape
                )));
            }
        }
        let (train, val, test) = data::split_dataset(&full, self.config.split_ratio, self.config.seeds().split)?;
        Ok(Splits {
            train: take(&train, ds.train, Split::Train)?,
            val: take(&val, ds.val, Split::Val)?,
            test: take(&test, ds.test, Split::Test)?,
        })
    }

    /// Stage 1 (feature transformers and finest head) then stage 2 (coarser
    /// heads). With `resume`, finished stages are loaded from disk.
    pub fn train<T: Scalar>(&self, splits: &Splits<T>, resume: bool) -> Result<WeightStore<T>> {
        self.ensure_out_dir()?;
        let cfg = self.config.effective_train();
        let s1 = self.artifact(STAGE1_WEIGHTS);
        let s2 = self.artifact(STAGE2_WEIGHTS);
        let key_path = self.artifact(TRAINING_KEY);
        let key = self.config.training_hash()?;
        let resume = resume
            && match std::fs::read_to_string(&key_path) {
                Ok(stored) if stored.trim() == key => true,
                Ok(_) => {
                    return Err(Error::InvalidArgument(format!(
                        "{} holds weights trained with different settings; retrain from scratch to replace them",
                        self.out_dir.display()
                    ))
                    .in_stage("train_features"))
                }
                Err(_) => false,
            };
        if !resume {
            std::fs::write(&key_path, &key).map_err(|e| Error::io(&key_path, e))?;
        }
        if resume && s2.exists() && load_checkpoint_meta(&s2).is_ok() {
            log::info!("resume: loading {}", s2.display());
            return stage("train_heads", load_weights(&s2, &self.arch));
        }
        let mut store = if resume && s1.exists() && load_checkpoint_meta(&s1).is_ok() {
            log::info!("resume: loading {}", s1.display());
            stage("train_features", load_weights(&s1, &self.arch))?
        } else {
            stage("train_features", (|| {
                let mut store = WeightStore::build(&self.arch, self.config.seeds().init)?;
                let log = train_feature_transformers(&self.arch, &mut store, &splits.train, &cfg)?;
                save_checkpoint(&store, &CheckpointMeta::new("feature_transformers", &cfg, &[log]), &s1)?;
                Ok(store)
            })())?
        };
        stage("train_heads", (|| {
            let logs = train_intermediate_classifiers(&self.arch, &mut store, &splits.train, &cfg)?;
            save_checkpoint(&store, &CheckpointMeta::new("intermediate_classifiers", &cfg, &logs), &s2)
        })())?;
        Ok(store)
    }

    pub fn load_trained<T: Scalar>(&self) -> Result<WeightStore<T>> {
        stage("load_weights", load_weights(self.artifact(STAGE2_WEIGHTS), &self.arch))
    }

    pub fn cost_profile<T: Scalar>(&self, store: &WeightStore<T>, val: &Dataset<T>) -> Result<CostProfile> {
        stage("cost", (|| match &self.config.cost {
            CostSpec::Mac => CostProfile::analytic(&self.arch),
            CostSpec::Table(p) => {
                let path = match &self.base_dir {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                CostProfile::from_csv(path, self.arch.num_levels())
            }
            CostSpec::Latency => {
                let n = val.len().min(LATENCY_SAMPLE);
                let (profile, _) = latency_profile(&self.arch, store, &val.inputs[..n], LATENCY_REPS)?;
                Ok(profile)
            }
        })())
    }

    /// Builds (or, when resuming, reloads) the validation and test tables.
    pub fn tables<T: Scalar>(&self, store: &WeightStore<T>, splits: &Splits<T>, resume: bool) -> Result<Tables> {
        self.ensure_out_dir()?;
        let costs = self.cost_profile(store, &splits.val)?;
        let kind = self.config.confidence;
        let weights = self.artifact(STAGE2_WEIGHTS);
        stage("table", (|| {
            let mut out = Vec::new();
            for (name, data) in [(VAL_TABLE, &splits.val), (TEST_TABLE, &splits.test)] {
                let path = self.artifact(name);
                let reuse = resume && costs.provider != CostProvider::MeasuredLatency && newer_than(&path, &weights);
                let table = if reuse {
                    let t = EvalTable::load(&path)?;
                    if t.kind != kind || t.len() != data.len() || t.costs.costs != costs.costs {
                        return Err(Error::InvalidArgument(format!(
                            "{} does not match the current configuration; delete it or run without resume",
                            path.display()
                        )));
                    }
                    t.with_costs(costs.clone())?
                } else {
                    let t = build_eval_table(data, &self.arch, store, kind, &costs, self.config.workers)?;
                    t.save(&path)?;
                    t
                };
                out.push(table);
            }
            let test = out.pop().unwrap();
            let val = out.pop().unwrap();
            Ok(Tables { val, test })
        })())
    }

    pub fn load_tables(&self) -> Result<Tables> {
        stage("table", (|| {
            let levels = self.arch.num_levels();
            let costs = match &self.config.cost {
                CostSpec::Latency => None,
                _ => Some(self.static_costs()?),
            };
            let load = |name: &str| -> Result<EvalTable> {
                let t = EvalTable::load(self.artifact(name))?;
                if t.levels != levels {
                    return Err(Error::InvalidArgument(format!("{name} has {} levels, network has {levels}", t.levels)));
                }
                match &costs {
                    Some(c) => t.with_costs(c.clone()),
                    None => Ok(t),
                }
            };
            Ok(Tables {
                val: load(VAL_TABLE)?,
                test: load(TEST_TABLE)?,
            })
        })())
    }

    fn static_costs(&self) -> Result<CostProfile> {
        match &self.config.cost {
            CostSpec::Mac => CostProfile::analytic(&self.arch),
            CostSpec::Table(p) => {
                let path = match &self.base_dir {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                CostProfile::from_csv(path, self.arch.num_levels())
            }
            CostSpec::Latency => Err(Error::Cost("latency costs must be measured".into())),
        }
    }
}

pub fn tuned_row(mode: RowMode, lambda: f64, r: &BoResult, tables: &Tables) -> Result<ReportRow> {
    let test = tables.test.evaluate(&r.best_gamma, lambda)?;
    Ok(ReportRow {
        mode,
        lambda: Some(lambda),
        level: None,
        gamma: r.best_gamma.values().to_vec(),
        val_objective: r.best.objective,
        val_error_norm: r.best.error_norm,
        val_energy_norm: r.best.energy_norm,
        val_accuracy: r.best.accuracy(),
        test_objective: test.objective,
        test_accuracy: test.accuracy(),
        test_energy_norm: test.energy_norm,
        val_exit_histogram: r.best.exit_histogram.clone(),
        test_exit_histogram: test.exit_histogram.clone(),
        test_level_accuracy: test.level_accuracy(),
        evaluations: r.evaluations(),
    })
}

/// One row per level: that level classifies every example.
pub fn baseline_rows(tables: &Tables) -> Result<Vec<ReportRow>> {
    let levels = tables.val.levels;
    (0..levels)
        .map(|level| {
            let g = ThresholdVector::exit_at(levels, level);
            let val = tables.val.evaluate(&g, 1.0)?;
            let test = tables.test.evaluate(&g, 1.0)?;
            Ok(ReportRow {
                mode: RowMode::Baseline,
                lambda: None,
                level: Some(level + 1),
                gamma: Vec::new(),
                val_objective: val.objective,
                val_error_norm: val.error_norm,
                val_energy_norm: val.energy_norm,
                val_accuracy: val.accuracy(),
                test_objective: test.objective,
                test_accuracy: test.accuracy(),
                test_energy_norm: test.energy_norm,
                val_exit_histogram: val.exit_histogram,
                test_exit_histogram: test.exit_histogram.clone(),
                test_level_accuracy: test.level_accuracy(),
                evaluations: 0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaOutcome {
    pub multi: BoResult,
    pub single: Option<BoResult>,
}

/// Tunes one λ. The shared-threshold optimum (when computed) seeds the
/// per-level search, so the per-level result is never worse.
pub fn tune_lambda(tables: &Tables, lambda: f64, bo: &BoConfig, single: bool) -> Result<LambdaOutcome> {
    stage("tune", (|| {
        let single = if single && tables.val.levels > 1 {
            Some(optimize_shared_threshold(&tables.val, lambda, bo)?)
        } else {
            None
        };
        let mut cfg = bo.clone();
        if let Some(s) = &single {
            cfg.initial_points.push(s.best_gamma.values().to_vec());
        }
        let multi = optimize_thresholds(&tables.val, lambda, &cfg)?;
        Ok(LambdaOutcome { multi, single })
    })())
}

pub fn lambda_rows(tables: &Tables, lambda: f64, outcome: &LambdaOutcome) -> Result<Vec<ReportRow>> {
    let mut rows = vec![tuned_row(RowMode::MultiThreshold, lambda, &outcome.multi, tables)?];
    if let Some(s) = &outcome.single {
        rows.push(tuned_row(RowMode::SingleThreshold, lambda, s, tables)?);
    }
    Ok(rows)
}

/// History CSV file name for a tuned λ.
pub fn history_file(mode: RowMode, lambda: f64) -> String {
    format!("history_{}_lambda_{lambda}.csv", mode.tag())
}

impl Experiment {
    /// Assembles the report from tables and tuning outcomes.
    pub fn report(&self, tables: &Tables, outcomes: &[(f64, LambdaOutcome)], train_size: usize) -> Result<SweepReport> {
        let cfg = &self.config;
        let costs = &tables.val.costs;
        let mut rows = baseline_rows(tables)?;
        for (lambda, o) in outcomes {
            rows.extend(lambda_rows(tables, *lambda, o)?);
        }
        let last = tables.val.levels - 1;
        let never = ThresholdVector::never_exit(last);
        Ok(SweepReport {
            provenance: Provenance {
                config_hash: cfg.hash()?,
                config: cfg.canonical()?,
                seeds: cfg.seeds(),
                precision: match cfg.precision {
                    Precision::F32 => "f32".into(),
                    Precision::F64 => "f64".into(),
                },
                confidence: cfg.confidence.tag().into(),
                cost_provider: costs.provider.tag().into(),
                cost_assumptions: costs.assumptions.clone(),
                constant_power_edp_assumption: costs.uses_edp_proxy(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
            },
            levels: tables.val.levels,
            train_size,
            val_size: tables.val.len(),
            test_size: tables.test.len(),
            level_costs: costs.costs.clone(),
            level_costs_normalized: costs.normalized(),
            finest_val_accuracy: tables.val.level_accuracy(last),
            finest_test_accuracy: tables.test.level_accuracy(last),
            absolute_error: tables.val.evaluate(&never, 1.0)?.absolute_error,
            rows,
        })
    }

    /// Tunes every configured λ, writes histories, and emits the report.
    pub fn sweep(&self, tables: &Tables, train_size: usize) -> Result<SweepReport> {
        self.ensure_out_dir()?;
        let bo = self.config.effective_bo();
        let mut outcomes = Vec::new();
        for &lambda in &self.config.lambdas {
            let o = tune_lambda(tables, lambda, &bo, self.config.single_threshold)?;
            self.write_history(RowMode::MultiThreshold, lambda, &o.multi)?;
            if let Some(single) = &o.single {
                self.write_history(RowMode::SingleThreshold, lambda, single)?;
            }
            outcomes.push((lambda, o));
        }
        let report = stage("report", self.report(tables, &outcomes, train_size))?;
        stage("report", emit_report(&report, &self.out_dir))?;
        Ok(report)
    }

    pub fn write_history(&self, mode: RowMode, lambda: f64, r: &BoResult) -> Result<()> {
        stage("report", (|| {
            self.ensure_out_dir()?;
            let path = self.artifact(&history_file(mode, lambda));
            std::fs::write(&path, crate::bo::history_csv(&r.history)?).map_err(|e| Error::io(&path, e))
        })())
    }

    fn run_typed<T: Scalar>(&self, resume: bool) -> Result<SweepReport> {
        let splits = self.load_splits::<T>()?;
        let store = self.train(&splits, resume)?;
        let tables = self.tables(&store, &splits, resume)?;
        self.sweep(&tables, splits.train.len())
    }

    /// Runs every stage in order at the configured precision.
    pub fn run(&self, resume: bool) -> Result<SweepReport> {
        match self.config.precision {
            Precision::F64 => self.run_typed::<f64>(resume),
            Precision::F32 => self.run_typed::<f32>(resume),
        }
    }
}

/// Convenience wrapper: build the experiment and run all stages.
pub fn run_pipeline(config: ExperimentConfig, resume: bool) -> Result<SweepReport> {
    Experiment::new(config, None)?.run(resume)
}
