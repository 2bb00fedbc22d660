//! Hop-time and instantaneous-frequency detection scores.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, RGrid};
use crate::tf::FreqGrid;

/// A detected hop must lie strictly closer than this to its true instant.
pub const HOP_TOLERANCE: usize = 3;
/// Frequency detections may miss the true bin by this many bins.
pub const FREQ_TOLERANCE: usize = 1;

/// `Δ[n] = Σ_k (M[k,n+1] − M[k,n])²` over a magnitude TFR.
pub fn hop_statistic(magnitude: &RGrid) -> Result<Vec<f64>> {
    let t = magnitude.cols();
    if t < 2 {
        return invalid("hop statistic needs at least two columns");
    }
    Ok((0..t - 1)
        .map(|n| {
            (0..magnitude.rows())
                .map(|k| (magnitude[(k, n + 1)] - magnitude[(k, n)]).powi(2))
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "kebab-case")]
pub enum HopRule {
    /// The `K` largest local maxima.
    Count(usize),
    /// Local maxima above `threshold·max(Δ)`.
    Threshold(f64),
}

fn local_maxima(delta: &[f64]) -> Vec<usize> {
    (0..delta.len())
        .filter(|&i| {
            let v = delta[i];
            let left = if i == 0 { None } else { Some(delta[i - 1]) };
            let right = delta.get(i + 1).copied();
            let ok = match (left, right) {
                (Some(l), Some(r)) => v > l && v >= r,
                (None, Some(r)) => v > r,
                (Some(l), None) => v > l,
                (None, None) => true,
            };
            v > 0.0 && ok
        })
        .collect()
}

/// Hop instants (index of the first column after the change), sorted.
pub fn detect_hops(delta: &[f64], rule: HopRule) -> Result<Vec<usize>> {
    let mut peaks = local_maxima(delta);
    let mut picked = match rule {
        HopRule::Count(k) => {
            if k > delta.len() {
                return Err(Error::TooManyHops {
                    requested: k,
                    available: delta.len(),
                });
            }
            peaks.sort_by(|&a, &b| delta[b].total_cmp(&delta[a]).then(a.cmp(&b)));
            peaks.truncate(k);
            peaks
        }
        HopRule::Threshold(thr) => {
            let max = delta.iter().copied().fold(0.0, f64::max);
            peaks.retain(|&i| delta[i] > thr * max);
            peaks
        }
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| i + 1).collect())
}

/// Fraction of true hops matched one-to-one (nearest pairs first) by a
/// detection less than [`HOP_TOLERANCE`] samples away.
pub fn hop_detection_ratio(detected: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &t) in truth.iter().enumerate() {
        for (j, &d) in detected.iter().enumerate() {
            let dist = t.abs_diff(d);
            if dist < HOP_TOLERANCE {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_t = vec![false; truth.len()];
    let mut used_d = vec![false; detected.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !used_t[i] && !used_d[j] {
            used_t[i] = true;
            used_d[j] = true;
            matched += 1;
        }
    }
    matched as f64 / truth.len() as f64
}

/// Fraction of (column, true component) pairs with a detected bin within
/// [`FREQ_TOLERANCE`] (circular distance).
pub fn freq_detection_ratio(support: &Grid<bool>, truth: &Grid<bool>, grid: &FreqGrid) -> Result<f64> {
    if support.shape() != truth.shape() {
        return invalid(format!(
            "support {:?} and truth {:?} differ in shape",
            support.shape(),
            truth.shape()
        ));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for t in 0..truth.cols() {
        let detected: Vec<usize> = (0..support.rows()).filter(|&k| support[(k, t)]).collect();
        for k in (0..truth.rows()).filter(|&k| truth[(k, t)]) {
            total += 1;
            if detected.iter().any(|&d| grid.distance(d, k) <= FREQ_TOLERANCE) {
                hits += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub d_t: f64,
    pub d_f: f64,
    pub detected_hops: Vec<usize>,
    pub delta: Vec<f64>,
}

/// Score one estimate: `Δ` from the magnitudes, the `K = |hop_truth|`
/// largest maxima as hops, and the support for frequency detection.
pub fn score_trial(
    magnitude: &RGrid,
    support: &Grid<bool>,
    truth: &Grid<bool>,
    hop_truth: &[usize],
    grid: &FreqGrid,
) -> Result<TrialScore> {
    if magnitude.shape() != truth.shape() {
        return invalid("estimate and truth differ in shape");
    }
    let delta = hop_statistic(magnitude)?;
    let detected = detect_hops(&delta, HopRule::Count(hop_truth.len().min(delta.len())))?;
    Ok(TrialScore {
        d_t: hop_detection_ratio(&detected, hop_truth),
        d_f: freq_detection_ratio(support, truth, grid)?,
        detected_hops: detected,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub snr_db: f64,
    pub missing_rate: f64,
    pub seed: u64,
    pub d_t: f64,
    pub d_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_t: f64,
    pub e_f: f64,
    pub trials: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn d_t(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.d_t).collect()
    }

    pub fn d_f(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.d_f).collect()
    }
}

/// `p_t = mean(D_t)`, `e_f = 1 − mean(D_f)`.
pub fn aggregate(trials: Vec<TrialRecord>) -> Result<EvalReport> {
    if trials.is_empty() {
        return invalid("cannot aggregate zero trials");
    }
    let n = trials.len() as f64;
    let p_t = trials.iter().map(|t| t.d_t).sum::<f64>() / n;
    let e_f = 1.0 - trials.iter().map(|t| t.d_f).sum::<f64>() / n;
    Ok(EvalReport {
        p_t: p_t.clamp(0.0, 1.0),
        e_f: e_f.clamp(0.0, 1.0),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn support_from(rows: usize, bins: &[Option<usize>]) -> Grid<bool> {
        let mut g = Grid::<bool>::zeros(rows, bins.len());
        for (t, b) in bins.iter().enumerate() {
            if let Some(k) = b {
                g[(*k, t)] = true;
            }
        }
        g
    }

    fn as_magnitude(s: &Grid<bool>) -> RGrid {
        s.map(|&b| b as u8 as f64)
    }

    #[test]
    fn constant_support_gives_zero_delta() {
        let s = support_from(8, &[Some(3); 10]);
        assert!(hop_statistic(&as_magnitude(&s)).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_jump() {
        let mut bins = vec![Some(2); 8];
        bins.extend(vec![Some(5); 8]);
        let d = hop_statistic(&as_magnitude(&support_from(8, &bins))).unwrap();
        assert_eq!(d[7], 2.0);
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(detect_hops(&d, HopRule::Count(1)).unwrap(), vec![8]);
    }

    #[test]
    fn spikes_and_flat() {
        let mut d = vec![0.1; 40];
        d[5] = 3.0;
        d[20] = 2.0;
        d[33] = 4.0;
        assert_eq!(detect_hops(&d, HopRule::Count(3)).unwrap(), vec![6, 21, 34]);
        assert!(detect_hops(&[1.0; 10], HopRule::Threshold(0.5)).unwrap().is_empty());
        assert!(matches!(
            detect_hops(&d, HopRule::Count(41)),
            Err(Error::TooManyHops { .. })
        ));
        assert_eq!(detect_hops(&d, HopRule::Threshold(0.6)).unwrap(), vec![6, 34]);
    }

    #[test]
    fn hop_matching_rules() {
        assert_eq!(hop_detection_ratio(&[16, 32, 48], &[16, 32, 48]), 1.0);
        assert_eq!(hop_detection_ratio(&[20], &[16]), 0.0);
        assert_eq!(hop_detection_ratio(&[18], &[16]), 1.0);
        assert_eq!(hop_detection_ratio(&[19], &[16]), 0.0);
        // one detection cannot serve two truths
        assert_eq!(hop_detection_ratio(&[17], &[16, 18]), 0.5);
        assert_eq!(hop_detection_ratio(&[], &[16, 32]), 0.0);
        assert_eq!(hop_detection_ratio(&[], &[]), 1.0);
    }

    #[test]
    fn perfect_and_empty_estimates() {
        let grid = FreqGrid::new(16);
        let mut bins = vec![Some(2); 8];
        bins.extend(vec![Some(9); 8]);
        let truth = support_from(16, &bins);
        let s = score_trial(&as_magnitude(&truth), &truth, &truth, &[8], &grid).unwrap();
        assert_eq!((s.d_t, s.d_f), (1.0, 1.0));
        let empty = Grid::<bool>::zeros(16, 16);
        let s = score_trial(&as_magnitude(&empty), &empty, &truth, &[8], &grid).unwrap();
        assert_eq!((s.d_t, s.d_f), (0.0, 0.0));
    }

    #[test]
    fn frequency_tolerance_is_one_bin_circular() {
        let grid = FreqGrid::new(16);
        let truth = support_from(16, &[Some(0), Some(5), Some(5)]);
        let est = support_from(16, &[Some(15), Some(6), Some(7)]);
        assert!((freq_detection_ratio(&est, &truth, &grid).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregation() {
        let rec = |d_t, d_f| TrialRecord {
            snr_db: 0.0,
            missing_rate: 0.0,
            seed: 0,
            d_t,
            d_f,
        };
        let r = aggregate(vec![rec(1.0, 1.0), rec(1.0, 1.0)]).unwrap();
        assert_eq!((r.p_t, r.e_f), (1.0, 0.0));
        let r = aggregate(vec![rec(1.0, 0.5), rec(0.0, 0.5)]).unwrap();
        assert_eq!(r.p_t, 0.5);
        assert_eq!(r.e_f, 0.5);
        assert!(aggregate(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn delta_invariant_under_bin_permutation(seed in 0u64..1000, shift in 0usize..16) {
            let mag = Grid::from_fn(16, 12, |k, t| ((k * 31 + t * 17 + seed as usize) % 7) as f64);
            let perm = Grid::from_fn(16, 12, |k, t| mag[((k + shift) % 16, t)]);
            let a = hop_statistic(&mag).unwrap();
            let b = hop_statistic(&perm).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn scores_are_ratios(bins in proptest::collection::vec(proptest::option::of(0usize..16), 2..40),
                             est in proptest::collection::vec(proptest::option::of(0usize..16), 2..40)) {
            let n = bins.len().min(est.len());
            let grid = FreqGrid::new(16);
            let truth = support_from(16, &bins[..n]);
            let e = support_from(16, &est[..n]);
            let s = score_trial(&as_magnitude(&e), &e, &truth, &[n / 2], &grid).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.d_t));
            prop_assert!((0.0..=1.0).contains(&s.d_f));
        }

        #[test]
        fn scoring_commutes_with_time_shift(shift in 0usize..6) {
            let grid = FreqGrid::new(16);
            let mut bins = vec![None; 6];
            bins.extend(vec![Some(3); 10]);
            bins.extend(vec![Some(11); 10]);
            bins.extend(vec![None; 6]);
            let truth = support_from(16, &bins[6..26]);
            let shifted_bins: Vec<_> = bins[6 - shift..26 - shift].to_vec();
            let est = support_from(16, &bins[6..26]);
            let a = score_trial(&as_magnitude(&est), &est, &truth, &[10], &grid).unwrap();
            let truth_s = support_from(16, &shifted_bins);
            let est_s = support_from(16, &shifted_bins);
            let b = score_trial(&as_magnitude(&est_s), &est_s, &truth_s, &[10 + shift], &grid).unwrap();
            prop_assert_eq!(a.d_t, b.d_t);
            prop_assert_eq!(a.d_f, b.d_f);
        }
    }
}
