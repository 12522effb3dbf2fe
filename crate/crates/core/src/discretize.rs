//! Fisher (Jenks) optimal discretization of a 1-D variable.
//!
//! Values are sorted and tied values merged into weighted groups; a dynamic
//! program then finds the contiguous partition into `k` classes with the
//! least within-class sum of squared deviations. Equal values never end up
//! in different classes, so every class is a closed interval of observed
//! values.
//!
//! Time is `O(k m^2)` and memory `O(k m)` for `m` distinct values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiscretizeError {
    #[error("no values to discretize")]
    Empty,
    #[error("k must be at least 1")]
    ZeroClasses,
    #[error("k = {k} exceeds the number of distinct values ({distinct})")]
    TooManyClasses { k: usize, distinct: usize },
    #[error("{weights} weights for {values} values")]
    Misaligned { weights: usize, values: usize },
    #[error("value {value} at index {index} is not finite")]
    NonFinite { index: usize, value: f64 },
    #[error("weight {value} at index {index} is not positive")]
    BadWeight { index: usize, value: f64 },
    #[error("invalid break set: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInterval {
    pub lo: f64,
    pub hi: f64,
    /// Observations in the class when the set was fitted (0 for fixed sets).
    pub count: usize,
}

impl ClassInterval {
    pub fn label(&self) -> String {
        format!("{}-{}", fmt_bound(self.lo), fmt_bound(self.hi))
    }
}

fn fmt_bound(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Ordered, disjoint class intervals bounded by observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakSet {
    pub k: usize,
    pub boundaries: Vec<ClassInterval>,
    /// Total (weighted) within-class sum of squared deviations.
    pub cost: f64,
}

/// Where a value fell relative to the fitted intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Inside,
    /// Strictly between two classes; mapped to the lower one.
    Gap,
    BelowRange,
    AboveRange,
}

impl BreakSet {
    /// A fixed break set, e.g. one frozen from an earlier fit. Cost is 0.
    pub fn from_intervals(intervals: &[(f64, f64)]) -> Result<Self, DiscretizeError> {
        let set = Self {
            k: intervals.len(),
            boundaries: intervals
                .iter()
                .map(|&(lo, hi)| ClassInterval { lo, hi, count: 0 })
                .collect(),
            cost: 0.0,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), DiscretizeError> {
        let bad = |m: String| Err(DiscretizeError::Invalid(m));
        if self.k == 0 || self.boundaries.len() != self.k {
            return bad(format!("k = {} with {} intervals", self.k, self.boundaries.len()));
        }
        if !(self.cost >= 0.0) {
            return bad(format!("cost {} is negative", self.cost));
        }
        for (i, c) in self.boundaries.iter().enumerate() {
            if !(c.lo.is_finite() && c.hi.is_finite() && c.lo <= c.hi) {
                return bad(format!("interval {} is [{}, {}]", i + 1, c.lo, c.hi));
            }
        }
        for (i, w) in self.boundaries.windows(2).enumerate() {
            if !(w[0].hi < w[1].lo) {
                return bad(format!("intervals {} and {} overlap", i + 1, i + 2));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.boundaries.iter().map(ClassInterval::label).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("break set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DiscretizeError> {
        let set: Self =
            serde_json::from_str(text).map_err(|e| DiscretizeError::Invalid(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

/// Class (1-based) for `value` under `breaks`, found by binary search.
pub fn assign_class(value: f64, breaks: &BreakSet) -> (usize, Placement) {
    let b = &breaks.boundaries;
    // number of intervals whose lower bound is <= value
    let idx = b.partition_point(|c| c.lo <= value);
    if idx == 0 {
        return (1, if value < b[0].lo { Placement::BelowRange } else { Placement::Inside });
    }
    let class = &b[idx - 1];
    let placement = if value <= class.hi {
        Placement::Inside
    } else if idx == b.len() {
        Placement::AboveRange
    } else {
        Placement::Gap
    };
    (idx, placement)
}

/// Distinct sorted values with their summed weights and counts.
struct Groups {
    values: Vec<f64>,
    weights: Vec<f64>,
    counts: Vec<usize>,
}

fn group(values: &[f64], weights: Option<&[f64]>) -> Result<Groups, DiscretizeError> {
    if let Some(w) = weights {
        if w.len() != values.len() {
            return Err(DiscretizeError::Misaligned {
                weights: w.len(),
                values: values.len(),
            });
        }
        if let Some((index, &value)) = w.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(DiscretizeError::BadWeight { index, value });
        }
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(DiscretizeError::NonFinite { index, value });
    }
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, weights.map_or(1.0, |w| w[i])))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut g = Groups {
        values: Vec::new(),
        weights: Vec::new(),
        counts: Vec::new(),
    };
    for (v, w) in pairs {
        if g.values.last() == Some(&v) {
            *g.weights.last_mut().unwrap() += w;
            *g.counts.last_mut().unwrap() += 1;
        } else {
            g.values.push(v);
            g.weights.push(w);
            g.counts.push(1);
        }
    }
    Ok(g)
}

/// Prefix sums of w, w*c, w*c^2 over groups, with c centered on the overall
/// weighted mean to limit cancellation.
struct Prefix {
    s0: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(g: &Groups) -> Self {
        let total: f64 = g.weights.iter().sum();
        let mean = g.values.iter().zip(&g.weights).map(|(v, w)| v * w).sum::<f64>() / total;
        let m = g.values.len();
        let mut p = Self {
            s0: vec![0.0; m + 1],
            s1: vec![0.0; m + 1],
            s2: vec![0.0; m + 1],
        };
        for i in 0..m {
            let c = g.values[i] - mean;
            let w = g.weights[i];
            p.s0[i + 1] = p.s0[i] + w;
            p.s1[i + 1] = p.s1[i] + w * c;
            p.s2[i + 1] = p.s2[i] + w * c * c;
        }
        p
    }

    /// Within-class SSQ of groups `a..b`.
    #[inline]
    fn cost(&self, a: usize, b: usize) -> f64 {
        let w = self.s0[b] - self.s0[a];
        let s = self.s1[b] - self.s1[a];
        let q = self.s2[b] - self.s2[a];
        (q - s * s / w).max(0.0)
    }
}

/// Two-pass SSQ of one class, used for the reported cost.
fn class_cost(g: &Groups, a: usize, b: usize) -> f64 {
    let w: f64 = g.weights[a..b].iter().sum();
    let mean = (a..b).map(|i| g.values[i] * g.weights[i]).sum::<f64>() / w;
    (a..b).map(|i| g.weights[i] * (g.values[i] - mean).powi(2)).sum()
}

/// Optimal contiguous partition of `values` into `k` classes. Among
/// equal-cost partitions the one with lexicographically smallest cut
/// positions is returned.
pub fn fisher_breaks(
    values: &[f64],
    k: usize,
    weights: Option<&[f64]>,
) -> Result<BreakSet, DiscretizeError> {
    if values.is_empty() {
        return Err(DiscretizeError::Empty);
    }
    if k == 0 {
        return Err(DiscretizeError::ZeroClasses);
    }
    let g = group(values, weights)?;
    let m = g.values.len();
    if k > m {
        return Err(DiscretizeError::TooManyClasses { k, distinct: m });
    }
    let prefix = Prefix::new(&g);

    // best[j][i]: least cost of splitting groups i..m into j + 1 classes
    let mut best = vec![vec![f64::INFINITY; m + 1]; k];
    for i in 0..m {
        best[0][i] = prefix.cost(i, m);
    }
    for j in 1..k {
        let (done, rest) = best.split_at_mut(j);
        let prev = &done[j - 1];
        let cur = &mut rest[0];
        // need at least j + 1 groups in i..m
        for i in 0..=(m - j - 1) {
            let mut min = f64::INFINITY;
            for c in (i + 1)..=(m - j) {
                let v = prefix.cost(i, c) + prev[c];
                if v < min {
                    min = v;
                }
            }
            cur[i] = min;
        }
    }

    let mut cuts = Vec::with_capacity(k - 1);
    let mut start = 0;
    for j in (1..k).rev() {
        let target = best[j][start];
        let slack = target.abs() * 1e-12;
        let c = ((start + 1)..=(m - j))
            .find(|&c| prefix.cost(start, c) + best[j - 1][c] <= target + slack)
            .expect("optimum is attained by some cut");
        cuts.push(c);
        start = c;
    }

    let mut edges = vec![0];
    edges.extend(&cuts);
    edges.push(m);
    let boundaries: Vec<ClassInterval> = edges
        .windows(2)
        .map(|e| ClassInterval {
            lo: g.values[e[0]],
            hi: g.values[e[1] - 1],
            count: g.counts[e[0]..e[1]].iter().sum(),
        })
        .collect();
    let cost = edges.windows(2).map(|e| class_cost(&g, e[0], e[1])).sum();
    Ok(BreakSet {
        k,
        boundaries,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ssq(xs: &[f64]) -> f64 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum()
    }

    /// Exhaustive minimum over all contiguous k-partitions of sorted values.
    fn brute_min(values: &[f64], k: usize) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        fn rec(v: &[f64], k: usize) -> f64 {
            if k == 1 {
                return ssq(v);
            }
            (1..=v.len() - (k - 1))
                .map(|c| ssq(&v[..c]) + rec(&v[c..], k - 1))
                .fold(f64::INFINITY, f64::min)
        }
        rec(&v, k)
    }

    #[test]
    fn single_class_is_total_ssq() {
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let b = fisher_breaks(&xs, 1, None).unwrap();
        assert_eq!(b.k, 1);
        assert_eq!((b.boundaries[0].lo, b.boundaries[0].hi), (1.0, 9.0));
        assert!((b.cost - ssq(&xs)).abs() < 1e-12);

        let w = [1.0, 2.0, 1.0, 1.0, 1.0, 3.0, 1.0, 1.0];
        let bw = fisher_breaks(&xs, 1, Some(&w)).unwrap();
        let total: f64 = w.iter().sum();
        let mean = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / total;
        let expected: f64 = xs.iter().zip(&w).map(|(x, w)| w * (x - mean).powi(2)).sum();
        assert!((bw.cost - expected).abs() < 1e-12);
    }

    #[test]
    fn two_clusters_split_cleanly() {
        let xs = [101.0, 1.0, 3.0, 100.0, 2.0, 102.0];
        let b = fisher_breaks(&xs, 2, None).unwrap();
        assert_eq!(b.labels(), ["1-3", "100-102"]);
        assert_eq!(b.cost, 4.0);
        assert_eq!(brute_min(&xs, 2), 4.0);
        assert_eq!(b.boundaries[0].count, 3);
    }

    #[test]
    fn errors() {
        assert_eq!(fisher_breaks(&[], 1, None), Err(DiscretizeError::Empty));
        assert_eq!(fisher_breaks(&[1.0], 0, None), Err(DiscretizeError::ZeroClasses));
        assert_eq!(
            fisher_breaks(&[1.0, 1.0, 2.0], 3, None),
            Err(DiscretizeError::TooManyClasses { k: 3, distinct: 2 })
        );
        assert!(matches!(
            fisher_breaks(&[1.0, 2.0], 1, Some(&[1.0])),
            Err(DiscretizeError::Misaligned { .. })
        ));
        assert!(matches!(
            fisher_breaks(&[1.0, 2.0], 1, Some(&[1.0, 0.0])),
            Err(DiscretizeError::BadWeight { index: 1, .. })
        ));
        assert!(matches!(
            fisher_breaks(&[1.0, f64::NAN], 1, None),
            Err(DiscretizeError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn ties_resolve_to_smallest_cuts() {
        // {0,1} | {2} | ... symmetric: cutting after 0 or after 1 costs the same for k = 2
        let xs = [0.0, 1.0, 2.0];
        let b = fisher_breaks(&xs, 2, None).unwrap();
        assert_eq!(b.labels(), ["0-0", "1-2"]);
    }

    #[test]
    fn optimal_on_random_small_arrays() {
        let mut rng = crate::rng::seeded(11);
        for _ in 0..60 {
            let n = rng.random_range(1..=14);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..30) as f64).collect();
            let distinct = {
                let mut d = xs.clone();
                d.sort_by(f64::total_cmp);
                d.dedup();
                d.len()
            };
            for k in 1..=distinct.min(5) {
                let b = fisher_breaks(&xs, k, None).unwrap();
                let brute = brute_min(&xs, k);
                assert!((b.cost - brute).abs() <= 1e-9 * brute.max(1.0), "{xs:?} k={k}");
            }
        }
    }

    fn table3() -> BreakSet {
        BreakSet::from_intervals(&[
            (0.0, 231.0),
            (232.0, 535.0),
            (536.0, 946.0),
            (947.0, 1612.0),
            (1613.0, 2891.0),
        ])
        .unwrap()
    }

    #[test]
    fn assignment_on_fixed_classes() {
        let b = table3();
        assert_eq!(assign_class(947.0, &b), (4, Placement::Inside));
        assert_eq!(assign_class(946.0, &b), (3, Placement::Inside));
        assert_eq!(assign_class(231.0, &b), (1, Placement::Inside));
        assert_eq!(assign_class(231.5, &b), (1, Placement::Gap));
        assert_eq!(assign_class(-1.0, &b), (1, Placement::BelowRange));
        assert_eq!(assign_class(5000.0, &b), (5, Placement::AboveRange));
        assert_eq!(assign_class(2891.0, &b), (5, Placement::Inside));
    }

    #[test]
    fn binary_search_matches_linear_scan() {
        let b = table3();
        let linear = |v: f64| -> usize {
            let mut class = 1;
            for (i, c) in b.boundaries.iter().enumerate() {
                if v >= c.lo {
                    class = i + 1;
                }
            }
            class
        };
        let mut rng = crate::rng::seeded(5);
        for _ in 0..1000 {
            let v = rng.random_range(-100.0..3200.0f64).round();
            assert_eq!(assign_class(v, &b).0, linear(v), "value {v}");
        }
    }

    #[test]
    fn break_set_validation_and_json() {
        assert!(BreakSet::from_intervals(&[(0.0, 5.0), (5.0, 9.0)]).is_err());
        assert!(BreakSet::from_intervals(&[(3.0, 1.0)]).is_err());
        assert!(BreakSet::from_intervals(&[]).is_err());
        let b = fisher_breaks(&[1.0, 2.0, 10.0, 11.0, 30.0], 3, None).unwrap();
        assert_eq!(BreakSet::from_json(&b.to_json()).unwrap(), b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn data() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec((0u32..500).prop_map(|v| v as f64), 2..40)
        }

        proptest! {
            #[test]
            fn cost_never_grows_with_k(xs in data()) {
                let mut d = xs.clone();
                d.sort_by(f64::total_cmp);
                d.dedup();
                let mut prev = f64::INFINITY;
                for k in 1..=d.len().min(6) {
                    let c = fisher_breaks(&xs, k, None).unwrap().cost;
                    prop_assert!(c <= prev + 1e-9 * prev.abs().max(1.0));
                    prev = c;
                }
            }

            #[test]
            fn input_order_is_irrelevant(xs in data(), seed in any::<u64>(), k in 1usize..4) {
                use rand::seq::SliceRandom;
                let mut shuffled = xs.clone();
                shuffled.shuffle(&mut crate::rng::seeded(seed));
                let distinct = { let mut d = xs.clone(); d.sort_by(f64::total_cmp); d.dedup(); d.len() };
                prop_assume!(k <= distinct);
                prop_assert_eq!(fisher_breaks(&xs, k, None).unwrap(), fisher_breaks(&shuffled, k, None).unwrap());
            }

            #[test]
            fn affine_maps_carry_through(xs in data(), a in 0.1f64..20.0, shift in -1000.0f64..1000.0, k in 1usize..4) {
                let distinct = { let mut d = xs.clone(); d.sort_by(f64::total_cmp); d.dedup(); d.len() };
                prop_assume!(k <= distinct);
                let base = fisher_breaks(&xs, k, None).unwrap();
                let mapped: Vec<f64> = xs.iter().map(|x| a * x + shift).collect();
                let moved = fisher_breaks(&mapped, k, None).unwrap();
                let scale = base.cost.max(1.0) * a * a;
                prop_assert!((moved.cost - a * a * base.cost).abs() <= 1e-9 * scale);
                // Cuts can differ only on exact cost ties; compare class costs instead of bounds then.
                if (moved.cost - a * a * base.cost).abs() <= 1e-12 * scale {
                    for (m, b) in moved.boundaries.iter().zip(&base.boundaries) {
                        if m.count == b.count {
                            prop_assert!((m.lo - (a * b.lo + shift)).abs() <= 1e-9 * (1.0 + m.lo.abs()));
                            prop_assert!((m.hi - (a * b.hi + shift)).abs() <= 1e-9 * (1.0 + m.hi.abs()));
                        }
                    }
                }
            }
        }
    }
}
