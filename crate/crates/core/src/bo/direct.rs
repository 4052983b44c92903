//! DIRECT (DIviding RECTangles) global maximization on the unit hypercube.
//!
//! Rectangles are stored by center and per-dimension trisection depth, so a
//! side has length `3^-depth`. Each iteration picks the potentially optimal
//! rectangles (lower-right convex hull of size versus value with slack
//! `eps`) and trisects them along their longest sides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectResult {
    pub argmax: Vec<f64>,
    pub max_value: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
struct Rect {
    center: Vec<f64>,
    depth: Vec<u32>,
    /// Objective negated: the search minimizes internally.
    value: f64,
}

impl Rect {
    /// Half-diagonal, computed from sorted depths so equal shapes compare equal.
    fn size(&self) -> f64 {
        let mut d = self.depth.clone();
        d.sort_unstable();
        0.5 * d.iter().map(|&k| 9f64.powi(-(k as i32))).sum::<f64>().sqrt()
    }

    fn min_depth(&self) -> u32 {
        *self.depth.iter().min().expect("dimension >= 1")
    }
}

struct Budgeted<F> {
    f: F,
    used: usize,
    budget: usize,
    best: Option<(Vec<f64>, f64)>,
}

impl<F: FnMut(&[f64]) -> f64> Budgeted<F> {
    fn exhausted(&self) -> bool {
        self.used >= self.budget
    }

    /// Negated objective at `x`; `None` once the budget is spent.
    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        if self.exhausted() {
            return None;
        }
        debug_assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        let v = (self.f)(x);
        self.used += 1;
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        if self.best.as_ref().map_or(true, |(_, b)| v > *b) {
            self.best = Some((x.to_vec(), v));
        }
        Some(-v)
    }
}

/// Indices of potentially optimal rectangles.
fn potentially_optimal(rects: &[Rect], eps: f64) -> Vec<usize> {
    let f_min = rects.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    // One representative per size: lowest value, then lowest index.
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        let s = r.size();
        match groups.iter_mut().find(|(gs, _)| *gs == s) {
            Some(g) => {
                if r.value < rects[g.1].value {
                    g.1 = i;
                }
            }
            None => groups.push((s, i)),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut chosen = Vec::new();
    for (j, &(dj, ij)) in groups.iter().enumerate() {
        let fj = rects[ij].value;
        let mut lower = f64::NEG_INFINITY;
        for &(di, ii) in &groups[..j] {
            lower = lower.max((fj - rects[ii].value) / (dj - di));
        }
        let mut upper = f64::INFINITY;
        for &(di, ii) in &groups[j + 1..] {
            upper = upper.min((rects[ii].value - fj) / (di - dj));
        }
        if lower > upper || upper <= 0.0 {
            continue;
        }
        if upper.is_finite() {
            let reach = fj - upper * dj;
            let target = if f_min != 0.0 {
                f_min - eps * f_min.abs()
            } else {
                0.0
            };
            if reach > target {
                continue;
            }
        }
        chosen.push(ij);
    }
    chosen
}

/// Maximizes `f` over `[0, 1]^dim` with at most `budget` evaluations.
/// Deterministic: the same inputs always produce the same query sequence.
pub fn direct_maximize<F>(mut f: F, dim: usize, budget: usize, eps: f64) -> Result<DirectResult>
where
    F: FnMut(&[f64]) -> f64,
{
    if dim == 0 || budget == 0 {
        return Err(Error::InvalidArgument(
            "DIRECT needs at least one dimension and one evaluation".into(),
        ));
    }
    let mut ev = Budgeted {
        f: &mut f,
        used: 0,
        budget,
        best: None,
    };
    let center = vec![0.5; dim];
    let value = ev.eval(&center).expect("budget >= 1");
    let mut rects = vec![Rect {
        center,
        depth: vec![0; dim],
        value,
    }];
    'search: while !ev.exhausted() {
        let selected = potentially_optimal(&rects, eps);
        for idx in selected {
            let parent = rects[idx].clone();
            let k = parent.min_depth();
            let delta = 3f64.powi(-(k as i32 + 1));
            let long: Vec<usize> = (0..dim).filter(|&i| parent.depth[i] == k).collect();
            let mut probes = Vec::with_capacity(long.len());
            for &i in &long {
                let mut lo = parent.center.clone();
                let mut hi = parent.center.clone();
                lo[i] -= delta;
                hi[i] += delta;
                let Some(vlo) = ev.eval(&lo) else { break 'search };
                let Some(vhi) = ev.eval(&hi) else { break 'search };
                probes.push((vlo.min(vhi), i, (lo, vlo), (hi, vhi)));
            }
            probes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut depth = parent.depth.clone();
            for (_, i, (lo, vlo), (hi, vhi)) in probes {
                depth[i] += 1;
                rects.push(Rect {
                    center: lo,
                    depth: depth.clone(),
                    value: vlo,
                });
                rects.push(Rect {
                    center: hi,
                    depth: depth.clone(),
                    value: vhi,
                });
            }
            rects[idx].depth = depth;
        }
    }
    let (argmax, max_value) = ev.best.expect("at least one evaluation");
    Ok(DirectResult {
        argmax,
        max_value,
        evaluations: ev.used,
    })
}
