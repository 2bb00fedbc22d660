//! Pre-filter parameter search by adaptive differential evolution.

use rand::Rng as _;
use rand_distr::{Cauchy, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{apply_prefilter, concentration_measure, Concentration, EcskParams, SliceTransform};
use crate::par;
use crate::seed::Rng;
use crate::signal::{uniform, ObservedSignal};
use crate::tf::{short_time_af, FreqGrid, StAfSlice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub bounds: Vec<(f64, f64)>,
    /// Initial means of the mutation factor and crossover rate.
    pub f_init: f64,
    pub cr_init: f64,
    /// Learning rate of the success-history means.
    pub adapt_rate: f64,
    /// Cost is evaluated on every `stride`-th instant.
    pub stride: usize,
    pub measure: Concentration,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            pop_size: 20,
            generations: 50,
            bounds: EcskParams::bounds().to_vec(),
            f_init: 0.5,
            cr_init: 0.5,
            adapt_rate: 0.1,
            stride: 2,
            measure: Concentration::default(),
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 4 {
            return invalid(format!("population must be at least 4, got {}", self.pop_size));
        }
        if self.bounds.is_empty()
            || self
                .bounds
                .iter()
                .any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
        {
            return invalid("bounds must be finite with lo ≤ hi");
        }
        if !(0.0..=1.0).contains(&self.f_init) || !(0.0..=1.0).contains(&self.cr_init) {
            return invalid("initial F and CR must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.adapt_rate) {
            return invalid("adaptation rate must lie in [0, 1]");
        }
        if self.stride == 0 {
            return invalid("stride must be positive");
        }
        Ok(())
    }
}

/// Outcome of a generic minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeOutcome {
    pub best: Vec<f64>,
    pub best_cost: f64,
    /// Best cost after initialization and after each generation.
    pub history: Vec<f64>,
    pub population_final: Vec<Vec<f64>>,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeResult {
    pub best_params: EcskParams,
    pub best_cost: f64,
    pub history: Vec<f64>,
    pub population_final: Vec<EcskParams>,
}

fn clip(v: f64, (lo, hi): (f64, f64)) -> f64 {
    v.clamp(lo, hi)
}

fn distinct(rng: &mut Rng, n: usize, exclude: &[usize]) -> usize {
    loop {
        let r = rng.random_range(0..n);
        if !exclude.contains(&r) {
            return r;
        }
    }
}

/// Minimize `cost` over the box with current-to-best/1/bin mutation and
/// success-history adaptation of F and CR. Non-finite costs rank last.
pub fn minimize<F>(cost: F, cfg: &DeConfig, rng: &mut Rng) -> Result<DeOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    cfg.validate()?;
    let dim = cfg.bounds.len();
    let np = cfg.pop_size;
    let score = |x: &Vec<f64>| {
        let c = cost(x);
        if c.is_nan() {
            f64::INFINITY
        } else {
            c
        }
    };

    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| cfg.bounds.iter().map(|&(lo, hi)| uniform(rng, lo, hi)).collect())
        .collect();
    let mut costs: Vec<f64> = par::map_slice(&pop, score);
    let mut evaluations = np;
    let mut best_i = argmin(&costs);
    let mut best = pop[best_i].clone();
    let mut best_cost = costs[best_i];
    let mut history = vec![best_cost];
    let (mut mu_f, mut mu_cr) = (cfg.f_init, cfg.cr_init);

    for _ in 0..cfg.generations {
        let mut fs = Vec::with_capacity(np);
        let mut crs = Vec::with_capacity(np);
        let mut trials = Vec::with_capacity(np);
        let cauchy = Cauchy::new(mu_f, 0.1).map_err(|e| Error::Validation(e.to_string()))?;
        let normal = Normal::new(mu_cr, 0.1).map_err(|e| Error::Validation(e.to_string()))?;
        for i in 0..np {
            let f = loop {
                let f: f64 = cauchy.sample(rng);
                if f > 0.0 {
                    break f.min(1.0);
                }
            };
            let cr = normal.sample(rng).clamp(0.0, 1.0);
            let r1 = distinct(rng, np, &[i]);
            let r2 = distinct(rng, np, &[i, r1]);
            let jrand = rng.random_range(0..dim);
            let x = &pop[i];
            let trial: Vec<f64> = (0..dim)
                .map(|j| {
                    if j == jrand || rng.random::<f64>() < cr {
                        let v = x[j] + f * (best[j] - x[j]) + f * (pop[r1][j] - pop[r2][j]);
                        clip(v, cfg.bounds[j])
                    } else {
                        x[j]
                    }
                })
                .collect();
            fs.push(f);
            crs.push(cr);
            trials.push(trial);
        }
        let trial_costs = par::map_slice(&trials, score);
        evaluations += np;

        let (mut s_f, mut s_cr) = (Vec::new(), Vec::new());
        for (i, (trial, c)) in trials.into_iter().zip(trial_costs).enumerate() {
            if c <= costs[i] {
                if c < costs[i] {
                    s_f.push(fs[i]);
                    s_cr.push(crs[i]);
                }
                pop[i] = trial;
                costs[i] = c;
            }
        }
        if !s_f.is_empty() {
            let lehmer = s_f.iter().map(|f| f * f).sum::<f64>() / s_f.iter().sum::<f64>();
            let mean_cr = s_cr.iter().sum::<f64>() / s_cr.len() as f64;
            mu_f = (1.0 - cfg.adapt_rate) * mu_f + cfg.adapt_rate * lehmer;
            mu_cr = (1.0 - cfg.adapt_rate) * mu_cr + cfg.adapt_rate * mean_cr;
        }
        best_i = argmin(&costs);
        if costs[best_i] < best_cost {
            best_cost = costs[best_i];
            best = pop[best_i].clone();
        }
        history.push(best_cost);
    }
    Ok(DeOutcome {
        best,
        best_cost,
        history,
        population_final: pop,
        evaluations,
    })
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap_or(0)
}

/// Slices and transform shared by every cost evaluation on one signal.
#[derive(Debug, Clone)]
pub struct CostContext {
    slices: Vec<StAfSlice>,
    transform: SliceTransform,
    measure: Concentration,
}

impl CostContext {
    pub fn new(
        x: &ObservedSignal,
        w_len: usize,
        grid: &FreqGrid,
        stride: usize,
        measure: Concentration,
    ) -> Result<Self> {
        if w_len.is_multiple_of(2) || w_len < 3 {
            return invalid(format!("window length must be odd and ≥ 3, got {w_len}"));
        }
        let slices: Vec<StAfSlice> = (0..x.len())
            .step_by(stride.max(1))
            .map(|n| short_time_af(&x.samples, n, w_len))
            .filter(|s| s.energy() > 0.0)
            .collect();
        if slices.is_empty() {
            return Err(Error::AllSlicesSkipped);
        }
        Ok(Self {
            slices,
            transform: SliceTransform::new(w_len, grid),
            measure,
        })
    }

    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }

    /// Mean concentration of the pre-filtered slice TFDs.
    pub fn cost(&self, p: &EcskParams) -> Result<f64> {
        p.validate()?;
        let mut total = 0.0;
        let mut used = 0usize;
        for s in &self.slices {
            let f = apply_prefilter(s, p);
            let tfd = self.transform.tfd(&f.data);
            match concentration_measure(&tfd, self.measure) {
                Ok(m) => {
                    total += m;
                    used += 1;
                }
                Err(Error::ZeroEnergy) => {}
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::AllSlicesSkipped);
        }
        Ok(total / used as f64)
    }
}

/// Concentration cost of one parameter set on `x`.
pub fn cost(x: &ObservedSignal, p: &EcskParams, w_len: usize, grid: &FreqGrid) -> Result<f64> {
    CostContext::new(x, w_len, grid, 2, Concentration::default())?.cost(p)
}

/// Tune the pre-filter on `x`.
pub fn optimize(x: &ObservedSignal, cfg: &DeConfig, w_len: usize, grid: &FreqGrid, rng: &mut Rng) -> Result<DeResult> {
    if cfg.bounds.len() != 4 {
        return invalid("kernel search needs exactly four bounds");
    }
    let ctx = CostContext::new(x, w_len, grid, cfg.stride, cfg.measure)?;
    let out = minimize(
        |v| {
            ctx.cost(&EcskParams::from_array([v[0], v[1], v[2], v[3]]))
                .unwrap_or(f64::INFINITY)
        },
        cfg,
        rng,
    )?;
    let to_params = |v: &[f64]| EcskParams::from_array([v[0], v[1], v[2], v[3]]);
    Ok(DeResult {
        best_params: to_params(&out.best),
        best_cost: out.best_cost,
        history: out.history,
        population_final: out.population_final.iter().map(|v| to_params(v)).collect(),
    })
}

/// CSV with one `rho1,rho2,xi1,xi2,cost` row per run.
pub fn scatter_dump(results: &[DeResult]) -> Result<String> {
    if results.is_empty() {
        return invalid("scatter dump needs at least one result");
    }
    let mut out = String::from("rho1,rho2,xi1,xi2,cost\n");
    for r in results {
        let p = r.best_params;
        out.push_str(&format!("{},{},{},{},{}\n", p.rho1, p.rho2, p.xi1, p.xi2, r.best_cost));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use std::f64::consts::PI;
    use std::sync::Mutex;

    #[test]
    fn convex_oracle_converges() {
        let target = [3.7, 0.2, 0.123, 0.41];
        let mut hits = 0;
        for seed in 0..20 {
            let out = minimize(
                |v| v.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum(),
                &DeConfig::default(),
                &mut rng_from_seed(seed),
            )
            .unwrap();
            assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
            if out.best.iter().zip(target).all(|(a, b)| (a - b).abs() < 1e-3) {
                hits += 1;
            }
        }
        assert!(hits >= 19, "{hits}/20");
    }

    #[test]
    fn every_evaluation_is_inside_the_box() {
        let seen = Mutex::new(Vec::new());
        let cfg = DeConfig {
            generations: 10,
            ..DeConfig::default()
        };
        minimize(
            |v| {
                seen.lock().unwrap().push(v.to_vec());
                -v.iter().sum::<f64>()
            },
            &cfg,
            &mut rng_from_seed(3),
        )
        .unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen.len(), 20 * 11);
        for v in seen {
            for (x, (lo, hi)) in v.iter().zip(EcskParams::bounds()) {
                assert!((lo..=hi).contains(x));
            }
        }
    }

    #[test]
    fn flat_landscape_stays_feasible() {
        let out = minimize(|_| 1.0, &DeConfig::default(), &mut rng_from_seed(5)).unwrap();
        assert_eq!(out.best_cost, 1.0);
        assert!(EcskParams::from_array([out.best[0], out.best[1], out.best[2], out.best[3]]).in_bounds());
    }

    #[test]
    fn small_population_is_rejected() {
        let cfg = DeConfig {
            pop_size: 3,
            ..DeConfig::default()
        };
        assert!(minimize(|_| 0.0, &cfg, &mut rng_from_seed(0)).is_err());
    }

    fn tone_signal() -> ObservedSignal {
        let x: Vec<Complex64> = (0..64)
            .map(|t| Complex64::from_polar(1.0, 2.0 * PI * 0.203125 * t as f64))
            .collect();
        ObservedSignal::from_samples(x, 1.0)
    }

    #[test]
    fn tight_doppler_filter_concentrates_a_tone() {
        let grid = FreqGrid::new(64);
        let x = tone_signal();
        let tight = cost(&x, &EcskParams::new(1.0, 1.0, 0.1, 0.05), 15, &grid).unwrap();
        let loose = cost(&x, &EcskParams::new(0.01, 0.01, 0.5, 0.5), 15, &grid).unwrap();
        assert!(tight <= loose, "{tight} vs {loose}");
        assert_eq!(
            tight,
            cost(&x, &EcskParams::new(1.0, 1.0, 0.1, 0.05), 15, &grid).unwrap()
        );
    }

    #[test]
    fn silent_signal_is_an_error() {
        let x = ObservedSignal::from_samples(vec![Complex64::new(0.0, 0.0); 32], 1.0);
        let r = cost(&x, &EcskParams::new(1.0, 1.0, 0.1, 0.1), 15, &FreqGrid::new(32));
        assert!(matches!(r, Err(Error::AllSlicesSkipped)));
    }

    #[test]
    fn seeded_search_is_reproducible() {
        let grid = FreqGrid::new(64);
        let cfg = DeConfig {
            pop_size: 6,
            generations: 3,
            ..DeConfig::default()
        };
        let a = optimize(&tone_signal(), &cfg, 15, &grid, &mut rng_from_seed(9)).unwrap();
        let b = optimize(&tone_signal(), &cfg, 15, &grid, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.best_params.in_bounds());
        let csv = scatter_dump(&[a.clone(), b]).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(scatter_dump(&[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn search_stays_in_bounds(seed in any::<u64>(), c in proptest::collection::vec(-3.0f64..3.0, 2)) {
            let cfg = DeConfig {
                pop_size: 8,
                generations: 10,
                bounds: vec![(-1.0, 1.0), (0.0, 2.0)],
                ..DeConfig::default()
            };
            let f = |x: &[f64]| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            let out = minimize(f, &cfg, &mut rng_from_seed(seed)).unwrap();
            for x in out.population_final.iter().chain([&out.best]) {
                prop_assert!(x.iter().zip(&cfg.bounds).all(|(v, (lo, hi))| (lo..=hi).contains(&v)));
            }
            prop_assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(out.best_cost, *out.history.last().unwrap());
            prop_assert_eq!(out.evaluations, 8 * 11);
        }
    }
}
