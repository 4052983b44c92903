use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c2f_core::bo::{optimize_shared_threshold, optimize_thresholds, BoConfig};
use c2f_core::cascade::{ConfidenceKind, EvalTable, ThresholdVector};
use c2f_core::cost::{CostProfile, CostProvider};

/// Three-level table whose coarse levels are mostly right when confident.
fn table(n: usize, seed: u64) -> EvalTable {
    let levels = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut predicted, mut confidence, mut true_label) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let label = rng.gen_range(0..10u32);
        true_label.push(label);
        let hardness: f64 = rng.gen();
        for l in 0..levels {
            let skill = (l + 1) as f64 / levels as f64;
            let c: f64 = (1.0 - hardness * (1.2 - skill) + rng.gen_range(-0.15..0.15)).clamp(0.1, 0.999);
            let right = rng.gen_bool((0.35 + 0.6 * c).min(0.98));
            predicted.push(if right { label } else { (label + 1 + l as u32) % 10 });
            confidence.push(c);
        }
    }
    EvalTable {
        levels,
        kind: ConfidenceKind::MaxProb,
        true_label,
        predicted,
        confidence,
        costs: CostProfile::new(vec![1.0, 2.5, 6.0], CostProvider::UserTable, vec![]).unwrap(),
    }
}

fn grid_best(t: &EvalTable, lambda: f64, steps: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            let g = ThresholdVector::new(vec![i as f64 / steps as f64, j as f64 / steps as f64]).unwrap();
            best = best.min(t.evaluate(&g, lambda).unwrap().objective);
        }
    }
    best
}

/// Sixty evaluations without the early stop.
fn sixty() -> BoConfig {
    let mut cfg = BoConfig::default();
    cfg.budget.max_iterations = 60;
    cfg.budget.convergence_window = 60;
    cfg
}

#[test]
fn search_matches_the_coarse_grid() {
    let t = table(400, 3);
    for lambda in [0.3, 0.6] {
        let oracle = grid_best(&t, lambda, 10);
        let hits = (0..10)
            .filter(|&seed| {
                let r = optimize_thresholds(&t, lambda, &BoConfig { seed, ..sixty() }).unwrap();
                assert!(r.evaluations() <= 60);
                r.best.objective <= oracle + 0.01
            })
            .count();
        assert!(hits >= 9, "lambda {lambda}: {hits}/10");
    }
}

#[test]
fn accuracy_only_never_beats_finest_error() {
    let t = table(300, 8);
    let never = t.evaluate(&ThresholdVector::never_exit(2), 1.0).unwrap();
    assert_eq!(never.objective, 1.0);
    for seed in 0..10 {
        let mut cfg = BoConfig { seed, ..Default::default() };
        cfg.budget.convergence_window = cfg.budget.max_iterations;
        let r = optimize_thresholds(&t, 1.0, &cfg).unwrap();
        assert!(r.best.objective <= 1.0, "seed {seed}: {}", r.best.objective);
    }
}

#[test]
fn shared_search_matches_the_fine_grid() {
    let t = table(400, 5);
    for lambda in [0.25, 0.5, 0.75] {
        let oracle = (0..=100)
            .map(|i| {
                let g = ThresholdVector::shared(i as f64 / 100.0, 2).unwrap();
                t.evaluate(&g, lambda).unwrap().objective
            })
            .fold(f64::INFINITY, f64::min);
        let r = optimize_shared_threshold(&t, lambda, &BoConfig::default()).unwrap();
        assert!(r.best.objective <= oracle + 0.01, "lambda {lambda}: {} vs {oracle}", r.best.objective);
    }
}
