//! End-to-end trial runner and Monte Carlo sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bcs::{reconstruct, BcsConfig, SpectrumEstimate};
use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, RGrid};
use crate::kernels::{kernelled_tfd, AokConfig, EcskParams, KernelConfig, KernelledRep};
use crate::metrics::{aggregate, score_trial, TrialRecord, TrialScore};
use crate::par;
use crate::prefopt::{optimize, DeConfig, DeResult};
use crate::seed::{stage_rng, trial_seed};
use crate::signal::{add_noise, apply_missing, ground_truth_support, synthesize, FhScenario, ObservedSignal};
use crate::tf::{iaf, spectrogram_with, wvd_from_iaf, FreqGrid, Taper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    SpectrogramBaseline,
    WvdRaw,
    AokOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Proposed,
        Method::SpectrogramBaseline,
        Method::WvdRaw,
        Method::AokOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::SpectrogramBaseline => "spectrogram-baseline",
            Method::WvdRaw => "wvd-raw",
            Method::AokOnly => "aok-only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Frequency bins `L`.
    pub bins: usize,
    /// Short-time window length (odd).
    pub w_len: usize,
    /// Per-lag gain correction of the kernelled IAF.
    pub lag_gain: bool,
    pub de: DeConfig,
    pub aok: AokConfig,
    pub bcs: BcsConfig,
    /// Baseline support keeps bins at or above this fraction of the column peak.
    pub baseline_threshold: f64,
    /// Spectrogram baseline window length (odd).
    pub spectrogram_len: usize,
    pub spectrogram_taper: Taper,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            w_len: 15,
            lag_gain: false,
            de: DeConfig::default(),
            aok: AokConfig::default(),
            bcs: BcsConfig::default(),
            baseline_threshold: 0.5,
            spectrogram_len: 15,
            spectrogram_taper: Taper::Rectangular,
        }
    }
}

impl PipelineConfig {
    pub fn grid(&self) -> FreqGrid {
        FreqGrid::new(self.bins)
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            w_len: self.w_len,
            aok: self.aok,
            lag_gain: self.lag_gain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return invalid("at least two frequency bins are required");
        }
        if self.w_len < 3 || self.w_len.is_multiple_of(2) {
            return invalid(format!("window length must be odd and ≥ 3, got {}", self.w_len));
        }
        if self.spectrogram_len == 0 || self.spectrogram_len.is_multiple_of(2) {
            return invalid(format!("spectrogram length must be odd, got {}", self.spectrogram_len));
        }
        if !(0.0..=1.0).contains(&self.baseline_threshold) {
            return invalid("baseline threshold must lie in [0, 1]");
        }
        self.de.validate()?;
        self.bcs.validate()
    }
}

/// Clean synthesis, then noise, then missing samples, each from its own stream.
pub fn prepare_signal(scenario: &FhScenario, snr_db: f64, missing_rate: f64, seed: u64) -> Result<ObservedSignal> {
    let clean = synthesize(scenario)?;
    let noisy = add_noise(&clean, snr_db, &mut stage_rng(seed, "noise"))?;
    apply_missing(&noisy, missing_rate, &mut stage_rng(seed, "mask"))
}

/// Per-column support of bins at or above `threshold·max` of that column.
pub fn threshold_support(magnitude: &RGrid, threshold: f64) -> Grid<bool> {
    let mut out = Grid::<bool>::zeros(magnitude.rows(), magnitude.cols());
    for t in 0..magnitude.cols() {
        let col = magnitude.column(t);
        let max = col.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for (k, v) in col.iter().enumerate() {
                out[(k, t)] = *v >= threshold * max;
            }
        }
    }
    out
}

/// Everything one trial produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialArtifacts {
    pub method: Method,
    pub seed: u64,
    pub observed: ObservedSignal,
    pub truth: Grid<bool>,
    pub hop_truth: Vec<usize>,
    /// Magnitude TFR used for hop detection.
    pub magnitude: RGrid,
    pub support: Grid<bool>,
    pub de: Option<DeResult>,
    pub kernelled: Option<KernelledRep>,
    pub estimate: Option<SpectrumEstimate>,
    pub score: TrialScore,
}

/// Pipeline stage names, used to report where a trial failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Signal,
    Prefopt,
    Kernels,
    Bcs,
    Metrics,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Signal => "signal",
            Stage::Prefopt => "prefopt",
            Stage::Kernels => "kernels",
            Stage::Bcs => "bcs",
            Stage::Metrics => "metrics",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {}

fn at<T>(stage: Stage, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError { stage, error })
}

/// Run one method on an already prepared observation.
pub fn run_method(
    scenario: &FhScenario,
    observed: ObservedSignal,
    method: Method,
    seed: u64,
    cfg: &PipelineConfig,
) -> std::result::Result<TrialArtifacts, StageError> {
    at(Stage::Signal, cfg.validate())?;
    let grid = cfg.grid();
    let truth = ground_truth_support(scenario, &grid);
    let hop_truth = scenario.hop_instants();
    let mut de = None;
    let mut kernelled = None;
    let mut estimate = None;

    let (magnitude, support) = match method {
        Method::SpectrogramBaseline => {
            let s = spectrogram_with(&observed.samples, cfg.spectrogram_len, cfg.spectrogram_taper, &grid);
            let mag = s.data.map(|v| v.re.max(0.0).sqrt());
            let sup = threshold_support(&mag, cfg.baseline_threshold);
            (mag, sup)
        }
        Method::WvdRaw => {
            let w = wvd_from_iaf(&iaf(&observed), &grid);
            let mag = w.data.map(|v| v.re.abs());
            let sup = threshold_support(&mag, cfg.baseline_threshold);
            (mag, sup)
        }
        Method::Proposed | Method::AokOnly => {
            let params: Option<EcskParams> = if method == Method::Proposed {
                let r = at(
                    Stage::Prefopt,
                    optimize(&observed, &cfg.de, cfg.w_len, &grid, &mut stage_rng(seed, "de")),
                )?;
                let p = r.best_params;
                de = Some(r);
                Some(p)
            } else {
                None
            };
            let k = at(
                Stage::Kernels,
                kernelled_tfd(&observed, params.as_ref(), &cfg.kernel(), &grid),
            )?;
            let est = at(Stage::Bcs, reconstruct(&k, &cfg.bcs, &mut stage_rng(seed, "bcs")))?;
            let out = (est.magnitude(), est.support.clone());
            kernelled = Some(k);
            estimate = Some(est);
            out
        }
    };
    let score = at(
        Stage::Metrics,
        score_trial(&magnitude, &support, &truth, &hop_truth, &grid),
    )?;
    Ok(TrialArtifacts {
        method,
        seed,
        observed,
        truth,
        hop_truth,
        magnitude,
        support,
        de,
        kernelled,
        estimate,
        score,
    })
}

/// Prepare the observation for `seed` and run `method` on it.
pub fn run_trial(
    scenario: &FhScenario,
    method: Method,
    snr_db: f64,
    missing_rate: f64,
    seed: u64,
    cfg: &PipelineConfig,
) -> std::result::Result<TrialArtifacts, StageError> {
    let observed = at(Stage::Signal, prepare_signal(scenario, snr_db, missing_rate, seed))?;
    run_method(scenario, observed, method, seed, cfg)
}

/// Identifies one Monte Carlo trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialKey {
    pub snr_db: f64,
    pub missing_rate: f64,
    pub method: Method,
    pub trial: u64,
}

impl TrialKey {
    pub fn seed(&self, root: u64) -> u64 {
        trial_seed(root, self.snr_db, self.missing_rate, self.method.name(), self.trial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub snr_db: Vec<f64>,
    pub missing_rates: Vec<f64>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub root_seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() || self.missing_rates.is_empty() || self.methods.is_empty() {
            return invalid("SNR, missing-rate and method lists must be non-empty");
        }
        if self.trials == 0 {
            return invalid("at least one trial is required");
        }
        if self.snr_db.iter().any(|s| s.is_nan()) {
            return invalid("SNR values must be numbers");
        }
        if self.missing_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return invalid("missing rates must lie in [0, 1)");
        }
        Ok(())
    }

    /// Every trial in output order: SNR, then rate, then method, then trial.
    pub fn keys(&self) -> Vec<TrialKey> {
        let mut out = Vec::new();
        for &snr_db in &self.snr_db {
            for &missing_rate in &self.missing_rates {
                for &method in &self.methods {
                    for trial in 0..self.trials as u64 {
                        out.push(TrialKey {
                            snr_db,
                            missing_rate,
                            method,
                            trial,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub missing_rate: f64,
    pub method: Method,
    pub p_t: f64,
    pub e_f: f64,
    pub n_trials: usize,
    /// Summed per-trial compute time.
    pub wall_time_s: f64,
}

/// One finished trial with its compute time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub key: TrialKey,
    pub record: TrialRecord,
    pub seconds: f64,
}

/// Run a sweep. `cached` returns earlier outcomes so they are not recomputed;
/// `on_done` sees every freshly computed outcome.
pub fn run_sweep_with<C, D>(
    scenario: &FhScenario,
    spec: &SweepSpec,
    cfg: &PipelineConfig,
    cached: C,
    on_done: D,
) -> std::result::Result<(Vec<SweepRow>, Vec<TrialOutcome>), StageError>
where
    C: Fn(&TrialKey) -> Option<TrialOutcome> + Sync + Send,
    D: Fn(&TrialOutcome) + Sync + Send,
{
    at(Stage::Signal, spec.validate())?;
    at(Stage::Signal, cfg.validate())?;
    at(Stage::Signal, scenario.validate())?;
    let keys = spec.keys();
    let outcomes: Vec<std::result::Result<TrialOutcome, StageError>> = par::map_slice(&keys, |key| {
        if let Some(o) = cached(key) {
            return Ok(o);
        }
        let seed = key.seed(spec.root_seed);
        let start = Instant::now();
        let art = run_trial(scenario, key.method, key.snr_db, key.missing_rate, seed, cfg)?;
        let o = TrialOutcome {
            key: *key,
            record: TrialRecord {
                snr_db: key.snr_db,
                missing_rate: key.missing_rate,
                seed,
                d_t: art.score.d_t,
                d_f: art.score.d_f,
            },
            seconds: start.elapsed().as_secs_f64(),
        };
        on_done(&o);
        Ok(o)
    });
    let outcomes: Vec<TrialOutcome> = outcomes.into_iter().collect::<std::result::Result<_, _>>()?;

    let mut rows = Vec::new();
    for chunk in outcomes.chunks(spec.trials) {
        let first = chunk[0].key;
        let report = at(
            Stage::Metrics,
            aggregate(chunk.iter().map(|o| o.record.clone()).collect()),
        )?;
        rows.push(SweepRow {
            snr_db: first.snr_db,
            missing_rate: first.missing_rate,
            method: first.method,
            p_t: report.p_t,
            e_f: report.e_f,
            n_trials: chunk.len(),
            wall_time_s: chunk.iter().map(|o| o.seconds).sum(),
        });
    }
    Ok((rows, outcomes))
}

pub fn run_sweep(
    scenario: &FhScenario,
    spec: &SweepSpec,
    cfg: &PipelineConfig,
) -> std::result::Result<Vec<SweepRow>, StageError> {
    run_sweep_with(scenario, spec, cfg, |_| None, |_| {}).map(|(rows, _)| rows)
}

/// Sweep table with a fixed column order. Wall time is omitted when
/// `with_time` is false so that repeated runs compare byte for byte.
pub fn sweep_csv(rows: &[SweepRow], with_time: bool) -> String {
    let mut out = String::from("snr_db,missing_rate,method,p_t,e_f,n_trials");
    out.push_str(if with_time { ",wall_time_s\n" } else { "\n" });
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.snr_db, r.missing_rate, r.method, r.p_t, r.e_f, r.n_trials
        ));
        if with_time {
            out.push_str(&format!(",{:.3}", r.wall_time_s));
        }
        out.push('\n');
    }
    out
}
