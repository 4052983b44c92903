//! Early-exit inference, confidence estimators and the evaluation table.
//!
//! Levels are 0-based here; reports add one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f64, put_u32, ByteReader};
use crate::cost::{CostProfile, CostProvider};
use crate::data::Dataset;
use crate::error::{Error, FormatError, Result};
use crate::model::{C2FArchitecture, WeightStore};
use crate::parallel::par_map;
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

/// Threshold value that no confidence can reach, disabling every early exit.
pub const NEVER_EXIT: f64 = 1.0 + 1e-9;
pub const TABLE_MAGIC: [u8; 4] = *b"C2FT";
pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    #[default]
    MaxProb,
    Margin,
    Entropy,
}

impl ConfidenceKind {
    pub fn tag(self) -> &'static str {
        match self {
            ConfidenceKind::MaxProb => "max_prob",
            ConfidenceKind::Margin => "margin",
            ConfidenceKind::Entropy => "entropy",
        }
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(code: u32) -> Option<Self> {
        [ConfidenceKind::MaxProb, ConfidenceKind::Margin, ConfidenceKind::Entropy]
            .into_iter()
            .find(|k| k.code() == code)
    }
}

impl std::str::FromStr for ConfidenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_prob" => Ok(ConfidenceKind::MaxProb),
            "margin" => Ok(ConfidenceKind::Margin),
            "entropy" => Ok(ConfidenceKind::Entropy),
            other => Err(Error::InvalidArgument(format!(
                "unknown confidence kind {other:?} (max_prob, margin, entropy)"
            ))),
        }
    }
}

/// Confidence in `[0, 1]` of a class distribution; larger is more certain.
///
/// Entropy confidence is `1 - H/ln K`.
pub fn confidence<T: Scalar>(dist: &[T], kind: ConfidenceKind) -> Result<f64> {
    let k = dist.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence needs at least 2 classes, got {k}"
        )));
    }
    let sum: f64 = dist.iter().map(|p| p.widen()).sum();
    if !((sum - 1.0).abs() <= 1e-6) {
        return Err(Error::NotNormalized { sum });
    }
    let score = match kind {
        ConfidenceKind::MaxProb => dist.iter().map(|p| p.widen()).fold(f64::MIN, f64::max),
        ConfidenceKind::Margin => {
            let (mut best, mut second) = (f64::MIN, f64::MIN);
            for p in dist.iter().map(|p| p.widen()) {
                if p > best {
                    second = best;
                    best = p;
                } else if p > second {
                    second = p;
                }
            }
            best - second
        }
        ConfidenceKind::Entropy => {
            let h: f64 = dist
                .iter()
                .map(|p| p.widen())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            1.0 - h / (k as f64).ln()
        }
    };
    Ok(score.clamp(0.0, 1.0))
}

/// Per-level exit thresholds `γ_1..γ_{T-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    /// Thresholds must lie in `[0, 1]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("threshold {v} outside [0, 1]")));
        }
        Ok(ThresholdVector(values))
    }

    /// `len` copies of the never-exit sentinel.
    pub fn never_exit(len: usize) -> Self {
        ThresholdVector(vec![NEVER_EXIT; len])
    }

    /// Thresholds that send every example to `level` (0-based) of a
    /// `levels`-level cascade.
    pub fn exit_at(levels: usize, level: usize) -> Self {
        let mut g = vec![NEVER_EXIT; levels.saturating_sub(1)];
        if let Some(t) = g.get_mut(level) {
            *t = 0.0;
        }
        ThresholdVector(g)
    }

    /// One shared threshold for every early exit.
    pub fn shared(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_levels(&self, levels: usize) -> Result<()> {
        if self.0.len() + 1 != levels {
            return Err(Error::InvalidArgument(format!(
                "{} thresholds given for a {levels}-level network (need {})",
                self.0.len(),
                levels.saturating_sub(1)
            )));
        }
        Ok(())
    }

    /// First level whose confidence meets its threshold, else the last.
    pub fn exit_level(&self, confidences: impl IntoIterator<Item = f64>) -> usize {
        let mut last = 0;
        for (i, t) in confidences.into_iter().enumerate() {
            last = i;
            if i == self.0.len() || t >= self.0[i] {
                return i;
            }
        }
        last
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelObservation<T> {
    pub dist: Vec<T>,
    pub confidence: f64,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace<T> {
    /// 0-based exit level.
    pub exit_level: usize,
    pub predicted: usize,
    /// One entry per evaluated level, `exit_level + 1` in total.
    pub per_level: Vec<LevelObservation<T>>,
}

/// Early-exit prediction: evaluate levels in order, reusing features, and
/// stop at the first level with `t_i >= γ_i` or at the finest level.
pub fn cascade_predict<T: Scalar>(
    input: &Tensor<T>,
    arch: &C2FArchitecture,
    store: &WeightStore<T>,
    gamma: &ThresholdVector,
    kind: ConfidenceKind,
) -> Result<PredictionTrace<T>> {
    gamma.check_levels(arch.num_levels())?;
    let last = arch.num_levels() - 1;
    let mut x = input.clone();
    let mut per_level = Vec::new();
    for level in 0..=last {
        x = store.transform(arch, level, &x)?;
        let dist = store.classify(arch, level, &x)?;
        let conf = confidence(&dist, kind)?;
        let predicted = argmax(&dist);
        per_level.push(LevelObservation {
            dist,
            confidence: conf,
            predicted,
        });
        if level == last || conf >= gamma.values()[level] {
            return Ok(PredictionTrace {
                exit_level: level,
                predicted,
                per_level,
            });
        }
    }
    unreachable!("the finest level always exits")
}

/// Every level's prediction and confidence for every example, plus the
/// per-level exit costs. Rows are examples; columns are levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub levels: usize,
    pub kind: ConfidenceKind,
    pub true_label: Vec<u32>,
    /// Row-major `[n][levels]`.
    pub predicted: Vec<u32>,
    /// Row-major `[n][levels]`.
    pub confidence: Vec<f64>,
    pub costs: CostProfile,
}

/// Error/energy trade-off of a threshold vector on a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub error_norm: f64,
    pub energy_norm: f64,
    /// Mean 0/1 error of the cascade.
    pub error: f64,
    /// Mean cost per example in provider units.
    pub mean_cost: f64,
    /// Examples exiting at each level.
    pub exit_histogram: Vec<usize>,
    /// Correct predictions among the examples exiting at each level.
    pub correct_by_level: Vec<usize>,
    /// The finest level made no errors, so `error_norm` is the absolute error.
    pub absolute_error: bool,
}

impl ObjectiveValue {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error
    }

    /// Accuracy among examples exiting at each level (`None` if none did).
    pub fn level_accuracy(&self) -> Vec<Option<f64>> {
        self.exit_histogram
            .iter()
            .zip(&self.correct_by_level)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Combines per-example outcomes into the normalized objective. Shared by
/// the table and by direct simulation so both sum in the same order.
pub fn aggregate_objective(
    exits: &[usize],
    correct: &[bool],
    finest_correct: &[bool],
    costs: &CostProfile,
    lambda: f64,
) -> Result<ObjectiveValue> {
    check_lambda(lambda)?;
    let t = costs.levels();
    let n = exits.len();
    let mut exit_histogram = vec![0usize; t];
    let mut correct_by_level = vec![0usize; t];
    let mut cost_sum = 0.0;
    let mut wrong = 0usize;
    for (&e, &ok) in exits.iter().zip(correct) {
        exit_histogram[e] += 1;
        correct_by_level[e] += usize::from(ok);
        wrong += usize::from(!ok);
        cost_sum += costs.costs[e];
    }
    let finest_wrong = finest_correct.iter().filter(|&&ok| !ok).count();
    let denom = n.max(1) as f64;
    let error = wrong as f64 / denom;
    let mean_cost = cost_sum / denom;
    let reference_error = finest_wrong as f64 / denom;
    let absolute_error = finest_wrong == 0;
    let error_norm = if absolute_error {
        error
    } else {
        error / reference_error
    };
    let energy_norm = if n == 0 { 1.0 } else { mean_cost / costs.reference() };
    Ok(ObjectiveValue {
        objective: lambda * error_norm + (1.0 - lambda) * energy_norm,
        error_norm,
        energy_norm,
        error,
        mean_cost,
        exit_histogram,
        correct_by_level,
        absolute_error,
    })
}

impl EvalTable {
    pub fn len(&self) -> usize {
        self.true_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_label.is_empty()
    }

    pub fn predicted_at(&self, n: usize, level: usize) -> u32 {
        self.predicted[n * self.levels + level]
    }

    pub fn confidence_at(&self, n: usize, level: usize) -> f64 {
        self.confidence[n * self.levels + level]
    }

    pub fn row_confidences(&self, n: usize) -> &[f64] {
        &self.confidence[n * self.levels..(n + 1) * self.levels]
    }

    pub fn exit_level(&self, n: usize, gamma: &ThresholdVector) -> usize {
        gamma.exit_level(self.row_confidences(n).iter().copied())
    }

    /// Accuracy of using `level` alone for every example.
    pub fn level_accuracy(&self, level: usize) -> f64 {
        let ok = (0..self.len())
            .filter(|&n| self.predicted_at(n, level) == self.true_label[n])
            .count();
        ok as f64 / self.len().max(1) as f64
    }

    pub fn evaluate(&self, gamma: &ThresholdVector, lambda: f64) -> Result<ObjectiveValue> {
        gamma.check_levels(self.levels)?;
        let last = self.levels - 1;
        let n = self.len();
        let mut exits = Vec::with_capacity(n);
        let mut correct = Vec::with_capacity(n);
        let mut finest = Vec::with_capacity(n);
        for i in 0..n {
            let e = self.exit_level(i, gamma);
            exits.push(e);
            correct.push(self.predicted_at(i, e) == self.true_label[i]);
            finest.push(self.predicted_at(i, last) == self.true_label[i]);
        }
        aggregate_objective(&exits, &correct, &finest, &self.costs, lambda)
    }

    pub fn with_costs(mut self, costs: CostProfile) -> Result<Self> {
        if costs.levels() != self.levels {
            return Err(Error::Cost(format!(
                "cost profile has {} levels, table has {}",
                costs.levels(),
                self.levels
            )));
        }
        self.costs = costs;
        Ok(self)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&TABLE_MAGIC);
        put_u32(&mut out, TABLE_VERSION);
        put_u32(&mut out, self.len() as u32);
        put_u32(&mut out, self.levels as u32);
        put_u32(&mut out, self.kind.code());
        let tag = self.costs.provider.tag().as_bytes();
        put_u32(&mut out, tag.len() as u32);
        out.extend_from_slice(tag);
        for &l in &self.true_label {
            put_u32(&mut out, l);
        }
        for &c in &self.costs.costs {
            put_f64(&mut out, c);
        }
        for &p in &self.predicted {
            put_u32(&mut out, p);
        }
        for &c in &self.confidence {
            put_f64(&mut out, c);
        }
        out
    }

    /// Decodes a table. Cost assumptions are not stored and come back empty.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = Error::TableFormat;
        let mut r = ByteReader::new(bytes);
        r.magic(&TABLE_MAGIC).map_err(fmt)?;
        let version = r.u32().map_err(fmt)?;
        if version != TABLE_VERSION {
            return Err(fmt(FormatError::UnsupportedVersion(version)));
        }
        let n = r.u32().map_err(fmt)? as usize;
        let levels = r.u32().map_err(fmt)? as usize;
        if levels == 0 {
            return Err(fmt(FormatError::Invalid("table has zero levels".into())));
        }
        let kind = ConfidenceKind::from_code(r.u32().map_err(fmt)?)
            .ok_or_else(|| fmt(FormatError::Invalid("unknown confidence kind".into())))?;
        let tag_len = r.u32().map_err(fmt)? as usize;
        let tag = std::str::from_utf8(r.take(tag_len).map_err(fmt)?)
            .map_err(|_| fmt(FormatError::Invalid("provider tag is not UTF-8".into())))?;
        let provider = CostProvider::from_tag(tag)?;
        let u32s = |r: &mut ByteReader, k: usize| (0..k).map(|_| r.u32()).collect::<Result<Vec<_>, _>>();
        let f64s = |r: &mut ByteReader, k: usize| (0..k).map(|_| r.f64()).collect::<Result<Vec<_>, _>>();
        let true_label = u32s(&mut r, n).map_err(fmt)?;
        let costs = f64s(&mut r, levels).map_err(fmt)?;
        let predicted = u32s(&mut r, n * levels).map_err(fmt)?;
        let confidence = f64s(&mut r, n * levels).map_err(fmt)?;
        if !r.is_empty() {
            return Err(fmt(FormatError::Invalid("trailing bytes after table".into())));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(fmt(FormatError::Invalid("confidence outside [0, 1]".into())));
        }
        Ok(EvalTable {
            levels,
            kind,
            true_label,
            predicted,
            confidence,
            costs: CostProfile::new(costs, provider, Vec::new())?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Runs every level on every example (no early exit) across `workers` threads.
pub fn build_eval_table<T: Scalar>(
    data: &Dataset<T>,
    arch: &C2FArchitecture,
    store: &WeightStore<T>,
    kind: ConfidenceKind,
    costs: &CostProfile,
    workers: usize,
) -> Result<EvalTable> {
    if costs.levels() != arch.num_levels() {
        return Err(Error::Cost(format!(
            "cost profile has {} levels, network has {}",
            costs.levels(),
            arch.num_levels()
        )));
    }
    let rows = par_map(data.len(), workers, |n| {
        let dists = store.forward_all_levels(arch, &data.inputs[n])?;
        dists
            .iter()
            .map(|d| Ok((argmax(d) as u32, confidence(d, kind)?)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut predicted = Vec::with_capacity(data.len() * arch.num_levels());
    let mut confidence = Vec::with_capacity(predicted.capacity());
    for row in rows {
        for (p, c) in row {
            predicted.push(p);
            confidence.push(c);
        }
    }
    Ok(EvalTable {
        levels: arch.num_levels(),
        kind,
        true_label: data.labels.iter().map(|&l| l as u32).collect(),
        predicted,
        confidence,
        costs: costs.clone(),
    })
}

/// Objective computed by running [`cascade_predict`] on every example.
pub fn simulate_objective<T: Scalar>(
    data: &Dataset<T>,
    arch: &C2FArchitecture,
    store: &WeightStore<T>,
    gamma: &ThresholdVector,
    kind: ConfidenceKind,
    costs: &CostProfile,
    lambda: f64,
) -> Result<ObjectiveValue> {
    let never = ThresholdVector::never_exit(gamma.len());
    let mut exits = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    let mut finest = Vec::with_capacity(data.len());
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        let trace = cascade_predict(x, arch, store, gamma, kind)?;
        exits.push(trace.exit_level);
        correct.push(trace.predicted == label);
        finest.push(cascade_predict(x, arch, store, &never, kind)?.predicted == label);
    }
    aggregate_objective(&exits, &correct, &finest, costs, lambda)
}
