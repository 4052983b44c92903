//! GP-UCB search for the thresholds that minimize the error/energy objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bo::direct::direct_maximize;
use crate::bo::gp::{gp_fit, GpConfig, GpModel};
use crate::cascade::{EvalTable, ObjectiveValue, ThresholdVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Fixed,
    LogGrowth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub ucb_beta: f64,
    pub schedule: BetaSchedule,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            ucb_beta: 4.0,
            schedule: BetaSchedule::Fixed,
        }
    }
}

impl AcquisitionConfig {
    /// Exploration weight for the query after `t` observations.
    pub fn beta(&self, t: usize) -> f64 {
        match self.schedule {
            BetaSchedule::Fixed => self.ucb_beta,
            BetaSchedule::LogGrowth => {
                let t1 = (t + 1) as f64;
                2.0 * (t1 * t1 * std::f64::consts::PI.powi(2) / 6.0).ln()
            }
        }
    }
}

/// `μ(g) + sqrt(β_t) σ(g)`
pub fn ucb_score(model: &GpModel, g: &[f64], cfg: &AcquisitionConfig, t: usize) -> f64 {
    let (mu, sd) = model.posterior(g);
    let beta = cfg.beta(t);
    if beta == 0.0 {
        mu
    } else {
        mu + beta.sqrt() * sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoBudget {
    pub init_random_evals: usize,
    /// Cap on objective evaluations, initial points included.
    pub max_iterations: usize,
    pub convergence_window: usize,
    pub convergence_tolerance: f64,
    /// DIRECT evaluations of the acquisition per query.
    pub direct_budget: usize,
    pub direct_eps: f64,
    /// Acquisitions stay at least this far (max-norm) from evaluated points.
    /// 0 allows repeats.
    pub min_separation: f64,
}

impl Default for BoBudget {
    fn default() -> Self {
        BoBudget {
            init_random_evals: 5,
            max_iterations: 100,
            convergence_window: 15,
            convergence_tolerance: 1e-4,
            direct_budget: 300,
            direct_eps: 1e-4,
            min_separation: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub budget: BoBudget,
    pub acquisition: AcquisitionConfig,
    pub gp: GpConfig,
    pub seed: u64,
    /// Points evaluated before the random design (e.g. a known good setting).
    #[serde(skip)]
    pub initial_points: Vec<Vec<f64>>,
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.budget;
        if b.init_random_evals == 0 {
            return Err(Error::InvalidArgument("init_random_evals must be at least 1".into()));
        }
        if b.max_iterations < b.init_random_evals {
            return Err(Error::InvalidArgument(
                "max_iterations must be at least init_random_evals".into(),
            ));
        }
        if !(self.acquisition.ucb_beta >= 0.0) {
            return Err(Error::InvalidArgument("ucb_beta must be non-negative".into()));
        }
        if b.direct_budget == 0 {
            return Err(Error::InvalidArgument("direct_budget must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&b.min_separation) {
            return Err(Error::InvalidArgument("min_separation must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Initial,
    LatinHypercube,
    Acquisition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// 1-based evaluation index.
    pub iteration: usize,
    pub source: PointSource,
    /// Search-space coordinates (one per level for multi-threshold search,
    /// a single shared value otherwise).
    pub point: Vec<f64>,
    pub gamma: Vec<f64>,
    pub value: ObjectiveValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// No thresholds to tune (single-level network).
    Trivial,
    Budget,
    Converged,
    /// Every candidate lies within `min_separation` of an evaluated point.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub best_gamma: ThresholdVector,
    pub best: ObjectiveValue,
    /// Index into `history` of the best evaluation.
    pub best_index: usize,
    pub history: Vec<HistoryEntry>,
    pub stop_reason: StopReason,
}

impl BoResult {
    pub fn evaluations(&self) -> usize {
        self.history.len()
    }
}

/// Acquisition value of points too close to an evaluated one.
const EXCLUDED_SCORE: f64 = -1e12;

/// `n` stratified points in `[0, 1]^dim`, one per stratum per dimension.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, s) in points.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    points
}

/// How search-space points map to thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Space {
    PerLevel,
    Shared,
}

fn gamma_for(point: &[f64], space: Space, len: usize) -> Result<ThresholdVector> {
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    match space {
        Space::PerLevel => ThresholdVector::new(point.iter().map(|&v| clamp(v)).collect()),
        Space::Shared => ThresholdVector::shared(clamp(point[0]), len),
    }
}

fn run(table: &EvalTable, lambda: f64, cfg: &BoConfig, space: Space) -> Result<BoResult> {
    cfg.validate()?;
    let len = table.levels - 1;
    if len == 0 {
        let gamma = ThresholdVector::new(Vec::new())?;
        let value = table.evaluate(&gamma, lambda)?;
        return Ok(BoResult {
            best_gamma: gamma,
            best: value,
            best_index: 0,
            history: Vec::new(),
            stop_reason: StopReason::Trivial,
        });
    }
    let dim = match space {
        Space::PerLevel => len,
        Space::Shared => 1,
    };
    if let Some(bad) = cfg.initial_points.iter().find(|p| p.len() != dim) {
        return Err(Error::InvalidArgument(format!(
            "initial point {bad:?} does not have {dim} coordinates"
        )));
    }
    let budget = &cfg.budget;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<HistoryEntry> = Vec::new();
    let evaluate = |point: Vec<f64>, source: PointSource, history: &mut Vec<HistoryEntry>| -> Result<()> {
        let gamma = gamma_for(&point, space, len)?;
        let value = table.evaluate(&gamma, lambda)?;
        history.push(HistoryEntry {
            iteration: history.len() + 1,
            source,
            point,
            gamma: gamma.values().to_vec(),
            value,
        });
        Ok(())
    };
    let best_of = |h: &[HistoryEntry]| h.iter().map(|e| e.value.objective).fold(f64::INFINITY, f64::min);

    let initial = cfg.initial_points.iter().cloned().map(|p| (p, PointSource::Initial));
    let design = latin_hypercube(budget.init_random_evals, dim, &mut rng)
        .into_iter()
        .map(|p| (p, PointSource::LatinHypercube));
    for (p, source) in initial.chain(design) {
        if history.len() >= budget.max_iterations {
            break;
        }
        evaluate(p, source, &mut history)?;
    }

    let mut stop_reason = StopReason::Budget;
    let seeded = history.len();
    while history.len() < budget.max_iterations {
        let acquired = history.len() - seeded;
        if acquired >= budget.convergence_window {
            let n = history.len();
            let gain = best_of(&history[..n - budget.convergence_window]) - best_of(&history);
            if gain < budget.convergence_tolerance {
                stop_reason = StopReason::Converged;
                break;
            }
        }
        let xs: Vec<Vec<f64>> = history.iter().map(|h| h.point.clone()).collect();
        let ys: Vec<f64> = history.iter().map(|h| -h.value.objective).collect();
        let model = gp_fit(&xs, &ys, &cfg.gp)?;
        let t = history.len();
        let separation = budget.min_separation;
        let next = direct_maximize(
            |g| {
                if xs.iter().any(|x| x.iter().zip(g).all(|(a, b)| (a - b).abs() < separation)) {
                    EXCLUDED_SCORE
                } else {
                    ucb_score(&model, g, &cfg.acquisition, t)
                }
            },
            dim,
            budget.direct_budget,
            budget.direct_eps,
        )?;
        if next.max_value <= EXCLUDED_SCORE {
            stop_reason = StopReason::Exhausted;
            break;
        }
        evaluate(next.argmax, PointSource::Acquisition, &mut history)?;
    }

    let best_index = history
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.objective.total_cmp(&b.1.value.objective).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one evaluation");
    let best = &history[best_index];
    Ok(BoResult {
        best_gamma: ThresholdVector::new(best.gamma.clone())?,
        best: best.value.clone(),
        best_index,
        history,
        stop_reason,
    })
}

/// Minimizes the objective over per-level thresholds `[0, 1]^(T-1)`.
pub fn optimize_thresholds(table: &EvalTable, lambda: f64, cfg: &BoConfig) -> Result<BoResult> {
    run(table, lambda, cfg, Space::PerLevel)
}

/// Minimizes the objective over one threshold shared by every level.
pub fn optimize_shared_threshold(table: &EvalTable, lambda: f64, cfg: &BoConfig) -> Result<BoResult> {
    run(table, lambda, cfg, Space::Shared)
}

/// Writes the search history as CSV: iteration, source, thresholds,
/// objective terms and the exit histogram.
pub fn history_csv(history: &[HistoryEntry]) -> Result<String> {
    let levels = history.first().map_or(0, |h| h.value.exit_histogram.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string(), "source".to_string()];
    header.extend((1..levels).map(|i| format!("gamma_{i}")));
    header.extend(["objective", "error_norm", "energy_norm"].map(String::from));
    header.extend((1..=levels).map(|i| format!("exits_level_{i}")));
    w.write_record(&header)?;
    for h in history {
        let mut row = vec![
            h.iteration.to_string(),
            serde_json::to_value(h.source)?.as_str().unwrap_or_default().to_string(),
        ];
        row.extend(h.gamma.iter().map(|g| format!("{g:?}")));
        row.extend(
            [h.value.objective, h.value.error_norm, h.value.energy_norm].map(|v| format!("{v:?}")),
        );
        row.extend(h.value.exit_histogram.iter().map(|n| n.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::ConfidenceKind;
    use crate::cost::{CostProfile, CostProvider};

    /// Synthetic table where coarse levels are right exactly when confident.
    fn table(levels: usize, n: usize, seed: u64) -> EvalTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut predicted = Vec::new();
        let mut confidence = Vec::new();
        let mut true_label = Vec::new();
        for _ in 0..n {
            let label = rng.gen_range(0..10u32);
            true_label.push(label);
            for l in 0..levels {
                let c: f64 = rng.gen_range(0.1..1.0);
                let p_right = 0.5 + 0.5 * c * (l + 1) as f64 / levels as f64;
                let right = rng.gen_bool(p_right.min(0.97));
                predicted.push(if right { label } else { (label + 1) % 10 });
                confidence.push(c);
            }
        }
        let costs = (1..=levels).map(|l| l as f64).collect();
        EvalTable {
            levels,
            kind: ConfidenceKind::MaxProb,
            true_label,
            predicted,
            confidence,
            costs: CostProfile::new(costs, CostProvider::UserTable, vec![]).unwrap(),
        }
    }

    fn gp_with_points(xs: &[f64], ys: &[f64]) -> GpModel {
        let x: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
        gp_fit(&x, ys, &GpConfig { noise_variance: 0.0, signal_variance: Some(1.0), ..Default::default() }).unwrap()
    }

    #[test]
    fn ucb_limits() {
        let m = gp_with_points(&[0.2, 0.8], &[1.0, -1.0]);
        let zero = AcquisitionConfig { ucb_beta: 0.0, ..Default::default() };
        assert_eq!(ucb_score(&m, &[0.5], &zero, 3), m.posterior(&[0.5]).0);
        let at_train = ucb_score(&m, &[0.2], &AcquisitionConfig::default(), 3);
        assert!((at_train - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exploration_prefers_uncertain_points() {
        let m = gp_with_points(&[0.5], &[0.0]);
        let cfg = AcquisitionConfig::default();
        // Equal prior-mean pull, larger distance means larger σ.
        let (ma, sa) = m.posterior(&[0.0]);
        let (mb, sb) = m.posterior(&[1.0]);
        assert!((ma - mb).abs() < 1e-12 && (sa - sb).abs() < 1e-12);
        let m2 = gp_with_points(&[0.5, 0.9], &[0.0, 0.0]);
        let (a, b) = (m2.posterior(&[0.1]), m2.posterior(&[0.7]));
        assert!((a.0 - b.0).abs() < 1e-6 && a.1 > b.1);
        assert!(ucb_score(&m2, &[0.1], &cfg, 2) > ucb_score(&m2, &[0.7], &cfg, 2));
    }

    #[test]
    fn log_growth_schedule() {
        let cfg = AcquisitionConfig { schedule: BetaSchedule::LogGrowth, ..Default::default() };
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((cfg.beta(0) - 2.0 * (pi2 / 6.0).ln()).abs() < 1e-15);
        assert!((cfg.beta(9) - 2.0 * (100.0 * pi2 / 6.0).ln()).abs() < 1e-12);
        assert!(cfg.beta(10) > cfg.beta(9));
    }

    #[test]
    fn latin_hypercube_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = latin_hypercube(5, 3, &mut rng);
        for d in 0..3 {
            let mut strata: Vec<usize> = pts.iter().map(|p| (p[d] * 5.0) as usize).collect();
            strata.sort_unstable();
            assert_eq!(strata, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn returns_best_of_history_and_reproduces_it() {
        let t = table(3, 300, 1);
        let r = optimize_thresholds(&t, 0.5, &BoConfig { seed: 2, ..Default::default() }).unwrap();
        let min = r.history.iter().map(|h| h.value.objective).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best.objective, min);
        assert!(r.evaluations() <= 100);
        for h in &r.history {
            let again = t.evaluate(&ThresholdVector::new(h.gamma.clone()).unwrap(), 0.5).unwrap();
            assert_eq!(again, h.value);
        }
    }

    #[test]
    fn search_is_seed_deterministic() {
        let t = table(3, 200, 7);
        let cfg = BoConfig { seed: 5, ..Default::default() };
        assert_eq!(optimize_thresholds(&t, 0.3, &cfg).unwrap(), optimize_thresholds(&t, 0.3, &cfg).unwrap());
    }

    #[test]
    fn lambda_zero_sends_everything_to_level_one() {
        let t = table(3, 200, 3);
        let r = optimize_thresholds(&t, 0.0, &BoConfig::default()).unwrap();
        assert_eq!(r.best.exit_histogram[0], 200);
        assert_eq!(r.best.objective, 1.0 / 3.0);
    }

    #[test]
    fn single_level_table_is_trivial() {
        let t = table(1, 10, 0);
        let r = optimize_thresholds(&t, 0.5, &BoConfig::default()).unwrap();
        assert!(r.best_gamma.is_empty());
        assert_eq!(r.stop_reason, StopReason::Trivial);
    }

    #[test]
    fn warm_start_bounds_the_result() {
        let t = table(3, 300, 9);
        let shared = optimize_shared_threshold(&t, 0.6, &BoConfig::default()).unwrap();
        assert!(shared.history.iter().all(|h| h.gamma[0] == h.gamma[1]));
        let cfg = BoConfig {
            initial_points: vec![shared.best_gamma.values().to_vec()],
            ..Default::default()
        };
        let multi = optimize_thresholds(&t, 0.6, &cfg).unwrap();
        assert_eq!(multi.history[0].source, PointSource::Initial);
        assert!(multi.best.objective <= shared.best.objective + 1e-9);
    }

    #[test]
    fn budget_and_convergence() {
        let t = table(2, 100, 2);
        let cfg = BoConfig {
            budget: BoBudget { max_iterations: 12, ..Default::default() },
            ..Default::default()
        };
        let r = optimize_thresholds(&t, 0.5, &cfg).unwrap();
        assert!(r.evaluations() <= 12);
        let bad = BoConfig {
            budget: BoBudget { max_iterations: 3, ..Default::default() },
            ..Default::default()
        };
        assert!(optimize_thresholds(&t, 0.5, &bad).is_err());
        let short = BoConfig {
            budget: BoBudget { convergence_window: 3, convergence_tolerance: 10.0, ..Default::default() },
            ..Default::default()
        };
        let r = optimize_thresholds(&t, 0.5, &short).unwrap();
        assert_eq!(r.stop_reason, StopReason::Converged);
        assert_eq!(r.evaluations(), 5 + 3);
    }

    #[test]
    fn acquisitions_keep_their_distance() {
        let t = table(3, 300, 4);
        let cfg = BoConfig { seed: 1, ..Default::default() };
        let r = optimize_thresholds(&t, 0.7, &cfg).unwrap();
        for (i, h) in r.history.iter().enumerate().filter(|(_, h)| h.source == PointSource::Acquisition) {
            for prev in &r.history[..i] {
                let d = h.point.iter().zip(&prev.point).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d >= cfg.budget.min_separation, "{:?} repeats {:?}", h.point, prev.point);
            }
        }
    }

    #[test]
    fn wide_separation_exhausts_the_space() {
        let t = table(2, 100, 5);
        let mut cfg = BoConfig::default();
        cfg.budget.min_separation = 0.3;
        cfg.budget.convergence_window = 1000;
        let r = optimize_thresholds(&t, 0.5, &cfg).unwrap();
        assert_eq!(r.stop_reason, StopReason::Exhausted);
        assert!(r.evaluations() < 12);
        cfg.budget.min_separation = 1.0;
        assert!(optimize_thresholds(&t, 0.5, &cfg).is_err());
    }

    #[test]
    fn history_csv_shape() {
        let t = table(3, 50, 2);
        let cfg = BoConfig {
            budget: BoBudget { max_iterations: 7, ..Default::default() },
            ..Default::default()
        };
        let r = optimize_thresholds(&t, 0.5, &cfg).unwrap();
        let text = history_csv(&r.history).unwrap();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(rd.headers().unwrap().len(), 2 + 2 + 3 + 3);
        let rows: Vec<_> = rd.records().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows.len(), 7);
        let o: f64 = rows[0][4].parse().unwrap();
        assert_eq!(o, r.history[0].value.objective);
    }
}
