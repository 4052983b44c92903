//! Per-level inference cost.
//!
//! The primary provider counts multiply-accumulates analytically. A measured
//! latency provider squares median wall-clock time as an energy-delay proxy
//! (constant power assumed), and a user table lets callers supply calibrated
//! numbers.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cascade::{cascade_predict, ConfidenceKind, ThresholdVector};
use crate::error::{Error, Result};
use crate::model::{C2FArchitecture, WeightStore};
use crate::nn::LayerSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_LATENCY_REPS: usize = 3;
/// Coefficient of variation above which a latency measurement is flagged.
pub const LATENCY_CV_LIMIT: f64 = 0.2;
pub const EDP_ASSUMPTION: &str =
    "EDP proxy = latency^2 under a constant-power assumption (no power measurement)";
pub const MAC_ASSUMPTION: &str =
    "energy proxy = multiply-accumulate count with unit coefficient; pooling, activations, softmax and memory traffic cost 0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostProvider {
    AnalyticMac,
    MeasuredLatency,
    UserTable,
}

impl CostProvider {
    pub fn tag(self) -> &'static str {
        match self {
            CostProvider::AnalyticMac => "analytic_mac",
            CostProvider::MeasuredLatency => "measured_latency",
            CostProvider::UserTable => "user_table",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "analytic_mac" => Ok(CostProvider::AnalyticMac),
            "measured_latency" => Ok(CostProvider::MeasuredLatency),
            "user_table" => Ok(CostProvider::UserTable),
            other => Err(Error::Cost(format!("unknown cost provider {other:?}"))),
        }
    }
}

/// Cumulative cost of exiting at each level, in provider units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub costs: Vec<f64>,
    pub provider: CostProvider,
    pub assumptions: Vec<String>,
}

impl CostProfile {
    /// Validates `0 < c_1 <= ... <= c_T`.
    pub fn new(costs: Vec<f64>, provider: CostProvider, assumptions: Vec<String>) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::Cost("cost profile needs at least one level".into()));
        }
        if costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Cost(format!("costs must be finite and positive: {costs:?}")));
        }
        if costs.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Cost(format!(
                "cumulative costs must be non-decreasing in level: {costs:?}"
            )));
        }
        Ok(CostProfile {
            costs,
            provider,
            assumptions,
        })
    }

    pub fn analytic(arch: &C2FArchitecture) -> Result<Self> {
        let costs = (0..arch.num_levels())
            .map(|i| cumulative_level_cost(arch, i).map(|c| c.raw as f64))
            .collect::<Result<Vec<_>>>()?;
        Self::new(costs, CostProvider::AnalyticMac, vec![MAC_ASSUMPTION.into()])
    }

    /// Parses a `level,cost` CSV (1-based levels, header optional).
    pub fn from_csv_str(text: &str, levels: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut costs = vec![None; levels];
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Cost(format!(
                    "cost table row {} has {} fields, expected 2",
                    row + 1,
                    record.len()
                )));
            }
            let (Ok(level), Ok(cost)) = (record[0].parse::<usize>(), record[1].parse::<f64>()) else {
                if row == 0 {
                    continue;
                }
                return Err(Error::Cost(format!("cost table row {} is not numeric", row + 1)));
            };
            if level == 0 || level > levels {
                return Err(Error::Cost(format!(
                    "cost table names level {level}, network has {levels}"
                )));
            }
            costs[level - 1] = Some(cost);
        }
        let costs = costs
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Cost(format!("cost table lacks level {}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            costs,
            CostProvider::UserTable,
            vec!["per-level costs supplied by a user table".into()],
        )
    }

    pub fn from_csv(path: impl AsRef<Path>, levels: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, levels)
    }

    pub fn levels(&self) -> usize {
        self.costs.len()
    }

    /// `c_T`, the normalization reference.
    pub fn reference(&self) -> f64 {
        *self.costs.last().expect("validated non-empty")
    }

    pub fn normalized(&self) -> Vec<f64> {
        let r = self.reference();
        self.costs.iter().map(|c| c / r).collect()
    }

    pub fn uses_edp_proxy(&self) -> bool {
        self.provider == CostProvider::MeasuredLatency
    }
}

/// Multiply-accumulate count of one layer applied to `input_shape`.
pub fn layer_macs(layer: &LayerSpec, input_shape: &[usize]) -> Result<u64> {
    layer.output_shape(input_shape)?;
    Ok(match *layer {
        LayerSpec::Conv3x3 {
            in_channels,
            out_channels,
        } => (input_shape[0] * input_shape[1] * 9 * in_channels * out_channels) as u64,
        LayerSpec::Dense { in_dim, out_dim } => (in_dim * out_dim) as u64,
        _ => 0,
    })
}

/// Sums [`layer_macs`] along `layers`, returning the total and output shape.
pub fn path_macs<'a>(
    layers: impl IntoIterator<Item = &'a LayerSpec>,
    input_shape: &[usize],
) -> Result<(u64, Vec<usize>)> {
    let mut shape = input_shape.to_vec();
    let mut total = 0;
    for layer in layers {
        total += layer_macs(layer, &shape)?;
        shape = layer.output_shape(&shape)?;
    }
    Ok((total, shape))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCost {
    pub raw: u64,
    /// `raw / c_T`
    pub normalized: f64,
}

fn level_macs(arch: &C2FArchitecture, level: usize) -> Result<u64> {
    path_macs(arch.level_path(level), &arch.input_shape).map(|(m, _)| m)
}

/// Cost of exiting at `level` (0-based): transformers `0..=level` plus that
/// level's classifier.
pub fn cumulative_level_cost(arch: &C2FArchitecture, level: usize) -> Result<LevelCost> {
    if level >= arch.num_levels() {
        return Err(Error::InvalidArgument(format!(
            "level {level} out of range for {} levels",
            arch.num_levels()
        )));
    }
    let raw = level_macs(arch, level)?;
    let finest = level_macs(arch, arch.num_levels() - 1)?;
    Ok(LevelCost {
        raw,
        normalized: raw as f64 / finest as f64,
    })
}

/// MACs of the classifier head of `level` alone.
pub fn classifier_macs(arch: &C2FArchitecture, level: usize) -> Result<u64> {
    let features = arch.feature_shape(level)?;
    path_macs(&arch.levels[level].classifier, &features).map(|(m, _)| m)
}

/// What a latency measurement times.
#[derive(Debug, Clone, PartialEq)]
pub enum LatencyTarget {
    /// Full pass through a fixed level (0-based).
    Level(usize),
    Cascade(ThresholdVector, ConfidenceKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    /// 0-based level, or `None` for a cascade measurement.
    pub level: Option<usize>,
    /// Median seconds per example over the repetitions.
    pub seconds: f64,
    pub reps: usize,
    /// Seconds per example of every repetition, in run order.
    pub rep_seconds: Vec<f64>,
    pub coefficient_of_variation: f64,
    /// `seconds^2`
    pub edp_proxy: f64,
    pub warnings: Vec<String>,
}

/// Smallest observable non-zero step of the monotonic clock.
pub fn timer_tick() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if mean > 0.0 {
        var.sqrt() / mean
    } else {
        0.0
    }
}

/// Times `target` over `inputs`, once for warm-up and then `reps` times.
/// Run it on an otherwise idle machine; it is deliberately single-threaded.
/// Held while a latency measurement runs; a second concurrent measurement
/// is refused rather than allowed to perturb the first.
static MEASURING: std::sync::Mutex<()> = std::sync::Mutex::new(());

pub fn measure_latency_edp<T: Scalar>(
    arch: &C2FArchitecture,
    store: &WeightStore<T>,
    inputs: &[Tensor<T>],
    target: &LatencyTarget,
    reps: usize,
) -> Result<LatencySample> {
    if reps < MIN_LATENCY_REPS {
        return Err(Error::InvalidArgument(format!(
            "latency measurement needs at least {MIN_LATENCY_REPS} repetitions, got {reps}"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("latency measurement needs sample inputs".into()));
    }
    if let LatencyTarget::Level(level) = target {
        if *level >= arch.num_levels() {
            return Err(Error::InvalidArgument(format!("level {level} out of range")));
        }
    }
    let _exclusive = match MEASURING.try_lock() {
        Ok(guard) => guard,
        Err(std::sync::TryLockError::Poisoned(p)) => p.into_inner(),
        Err(std::sync::TryLockError::WouldBlock) => {
            return Err(Error::Cost("another latency measurement is already running".into()))
        }
    };
    let run_once = || -> Result<f64> {
        let start = Instant::now();
        for x in inputs {
            match target {
                LatencyTarget::Level(level) => {
                    std::hint::black_box(store.forward_to_level(arch, x, *level)?);
                }
                LatencyTarget::Cascade(gamma, kind) => {
                    std::hint::black_box(cascade_predict(x, arch, store, gamma, *kind)?);
                }
            }
        }
        Ok(start.elapsed().as_secs_f64() / inputs.len() as f64)
    };
    run_once()?;
    let rep_seconds = (0..reps).map(|_| run_once()).collect::<Result<Vec<_>>>()?;
    let seconds = median(&rep_seconds);
    let cv = coefficient_of_variation(&rep_seconds);
    let mut warnings = Vec::new();
    let tick = timer_tick().as_secs_f64();
    let per_rep = seconds * inputs.len() as f64;
    if per_rep < 100.0 * tick {
        warnings.push(format!(
            "median repetition ({per_rep:.3e} s) is under 100 timer ticks ({tick:.1e} s each)"
        ));
    }
    if cv > LATENCY_CV_LIMIT {
        warnings.push(format!("coefficient of variation {cv:.3} exceeds {LATENCY_CV_LIMIT}"));
    }
    for w in &warnings {
        log::warn!("latency: {w}");
    }
    Ok(LatencySample {
        level: match target {
            LatencyTarget::Level(l) => Some(*l),
            LatencyTarget::Cascade(..) => None,
        },
        seconds,
        reps,
        rep_seconds,
        coefficient_of_variation: cv,
        edp_proxy: seconds * seconds,
        warnings,
    })
}

/// Per-level EDP proxy profile built from measured latencies. Measurement
/// noise can break monotonicity, so each cost is raised to the running
/// maximum of the coarser levels (with a recorded note).
pub fn latency_profile<T: Scalar>(
    arch: &C2FArchitecture,
    store: &WeightStore<T>,
    inputs: &[Tensor<T>],
    reps: usize,
) -> Result<(CostProfile, Vec<LatencySample>)> {
    let samples = (0..arch.num_levels())
        .map(|l| measure_latency_edp(arch, store, inputs, &LatencyTarget::Level(l), reps))
        .collect::<Result<Vec<_>>>()?;
    let mut assumptions = vec![EDP_ASSUMPTION.to_string()];
    let mut costs = Vec::with_capacity(samples.len());
    let mut running = 0.0f64;
    for s in &samples {
        if s.edp_proxy < running {
            assumptions.push(format!(
                "level {} latency fell below a coarser level's and was raised to it",
                s.level.unwrap() + 1
            ));
        }
        running = running.max(s.edp_proxy);
        costs.push(running);
    }
    Ok((
        CostProfile::new(costs, CostProvider::MeasuredLatency, assumptions)?,
        samples,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    fn net_a() -> C2FArchitecture {
        C2FArchitecture::from_config(&ArchConfig::net_a()).unwrap()
    }

    #[test]
    fn conv_macs_hand_value() {
        let conv = LayerSpec::Conv3x3 {
            in_channels: 3,
            out_channels: 64,
        };
        assert_eq!(layer_macs(&conv, &[32, 32, 3]).unwrap(), 32 * 32 * 9 * 3 * 64);
        assert_eq!(layer_macs(&conv, &[32, 32, 3]).unwrap(), 1_769_472);
    }

    #[test]
    fn dense_and_free_layers() {
        let dense = LayerSpec::Dense {
            in_dim: 4096,
            out_dim: 256,
        };
        assert_eq!(layer_macs(&dense, &[4096]).unwrap(), 1_048_576);
        for l in [LayerSpec::Relu, LayerSpec::MaxPool2x2, LayerSpec::Flatten] {
            assert_eq!(layer_macs(&l, &[8, 8, 4]).unwrap(), 0);
        }
        assert_eq!(layer_macs(&LayerSpec::Softmax, &[10]).unwrap(), 0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let dense = LayerSpec::Dense { in_dim: 10, out_dim: 2 };
        assert!(layer_macs(&dense, &[9]).is_err());
    }

    #[test]
    fn net_a_level_costs_by_hand() {
        let arch = net_a();
        let block1 = 32 * 32 * 9 * 3 * 64 + 32 * 32 * 9 * 64 * 64;
        let block2 = 16 * 16 * 9 * 64 * 128 + 16 * 16 * 9 * 128 * 128;
        let block3 = 8 * 8 * 9 * 128 * 192 + 8 * 8 * 9 * 192 * 192;
        let head = |dim: u64| dim * 256 + 256 * 10;
        let c = |i| cumulative_level_cost(&arch, i).unwrap().raw;
        assert_eq!(c(0), block1 + head(8 * 8 * 64));
        assert_eq!(c(1), block1 + block2 + head(4 * 4 * 128));
        assert_eq!(c(2), block1 + block2 + block3 + head(4 * 4 * 192));
        assert_eq!(cumulative_level_cost(&arch, 2).unwrap().normalized, 1.0);
        assert!(cumulative_level_cost(&arch, 0).unwrap().normalized < 1.0);
        assert!(cumulative_level_cost(&arch, 3).is_err());
    }

    #[test]
    fn extra_pools_balance_classifier_cost() {
        let arch = net_a();
        let finest = classifier_macs(&arch, 2).unwrap() as f64;
        let pooled = classifier_macs(&arch, 0).unwrap() as f64;
        assert!(pooled / finest <= 2.0 && pooled / finest >= 0.5);

        let mut cfg = ArchConfig::net_a();
        cfg.levels[0].extra_pools = 0;
        let unpooled = classifier_macs(&C2FArchitecture::from_config(&cfg).unwrap(), 0).unwrap() as f64;
        let ratio = unpooled / finest;
        let expected = (16.0 * 16.0 * 64.0 * 256.0 + 2560.0) / (4.0 * 4.0 * 192.0 * 256.0 + 2560.0);
        assert!((ratio - expected).abs() < 1e-12);
        assert!(ratio > 5.0);
    }

    #[test]
    fn analytic_profile_is_monotone() {
        for cfg in [ArchConfig::net_a(), ArchConfig::desk_mnist(), ArchConfig::desk_mnist_4level()] {
            let arch = C2FArchitecture::from_config(&cfg).unwrap();
            let p = CostProfile::analytic(&arch).unwrap();
            assert!(p.costs.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*p.normalized().last().unwrap(), 1.0);
        }
    }

    #[test]
    fn profile_validation() {
        assert!(CostProfile::new(vec![], CostProvider::UserTable, vec![]).is_err());
        assert!(CostProfile::new(vec![0.0, 1.0], CostProvider::UserTable, vec![]).is_err());
        assert!(CostProfile::new(vec![2.0, 1.0], CostProvider::UserTable, vec![]).is_err());
        assert!(CostProfile::new(vec![1.0, 1.0], CostProvider::UserTable, vec![]).is_ok());
    }

    #[test]
    fn user_table_csv() {
        let p = CostProfile::from_csv_str("level,cost\n2, 5.5\n1,2\n3,8\n", 3).unwrap();
        assert_eq!(p.costs, vec![2.0, 5.5, 8.0]);
        assert_eq!(p.provider, CostProvider::UserTable);
        assert!(CostProfile::from_csv_str("1,2\n3,8\n", 3).is_err());
        assert!(CostProfile::from_csv_str("1,2\n2,1\n", 2).is_err());
        assert!(CostProfile::from_csv_str("1,2\n5,1\n", 2).is_err());
        assert!(CostProfile::from_csv_str("1,2\nx,1\n", 2).is_err());
    }

    #[test]
    fn provider_tags_round_trip() {
        for p in [CostProvider::AnalyticMac, CostProvider::MeasuredLatency, CostProvider::UserTable] {
            assert_eq!(CostProvider::from_tag(p.tag()).unwrap(), p);
        }
    }

    #[test]
    fn median_and_cv() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]), 0.0);
    }

    #[test]
    fn latency_rejects_too_few_reps() {
        let arch = C2FArchitecture::from_config(&ArchConfig::desk_mnist()).unwrap();
        let store = WeightStore::<f64>::build(&arch, 0).unwrap();
        let x = vec![Tensor::zeros(&[32, 32, 1])];
        assert!(measure_latency_edp(&arch, &store, &x, &LatencyTarget::Level(0), 2).is_err());
        assert!(measure_latency_edp(&arch, &store, &[], &LatencyTarget::Level(0), 3).is_err());
    }
}
