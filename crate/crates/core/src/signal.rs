//! Multi-emitter frequency-hopping signal synthesis, noise and sample loss.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::Grid;
use crate::seed::Rng;
use crate::tf::FreqGrid;

/// One dwell of one emitter: a constant tone on `[start_idx, end_idx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopSegment {
    pub emitter_id: u32,
    pub start_idx: usize,
    pub end_idx: usize,
    pub freq_hz: f64,
    pub amplitude: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhScenario {
    pub components: Vec<HopSegment>,
    pub fs: f64,
    pub n_samples: usize,
}

/// Scenario file layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub fs_hz: f64,
    pub n_samples: usize,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub emitter: u32,
    pub start: usize,
    pub end: usize,
    pub freq_hz: f64,
    #[serde(default = "one")]
    pub amp_re: f64,
    #[serde(default)]
    pub amp_im: f64,
}

fn one() -> f64 {
    1.0
}

impl FhScenario {
    /// Three emitters at 64 kHz over 64 samples: 13→18 kHz at 16,
    /// 28→23 kHz at 32 and 35→6 kHz at 48.
    pub fn reference() -> Self {
        let seg = |emitter_id, start_idx, end_idx, khz: f64| HopSegment {
            emitter_id,
            start_idx,
            end_idx,
            freq_hz: khz * 1e3,
            amplitude: Complex64::new(1.0, 0.0),
        };
        Self {
            components: vec![
                seg(1, 0, 16, 13.0),
                seg(1, 16, 64, 18.0),
                seg(2, 0, 32, 28.0),
                seg(2, 32, 64, 23.0),
                seg(3, 0, 48, 35.0),
                seg(3, 48, 64, 6.0),
            ],
            fs: 64e3,
            n_samples: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return invalid(format!("sampling rate must be positive, got {}", self.fs));
        }
        for s in &self.components {
            if s.start_idx >= s.end_idx {
                return invalid(format!(
                    "segment of emitter {} has empty range [{}, {})",
                    s.emitter_id, s.start_idx, s.end_idx
                ));
            }
            if s.end_idx > self.n_samples {
                return invalid(format!(
                    "segment of emitter {} ends at {} beyond N = {}",
                    s.emitter_id, s.end_idx, self.n_samples
                ));
            }
            if !(s.freq_hz.is_finite() && s.freq_hz >= 0.0) {
                return invalid(format!("carrier frequency {} is not valid", s.freq_hz));
            }
            if !(s.amplitude.re.is_finite() && s.amplitude.im.is_finite()) {
                return invalid("non-finite amplitude");
            }
        }
        for (i, a) in self.components.iter().enumerate() {
            for b in &self.components[i + 1..] {
                if a.emitter_id == b.emitter_id && a.start_idx < b.end_idx && b.start_idx < a.end_idx {
                    return invalid(format!(
                        "emitter {} has overlapping segments [{}, {}) and [{}, {})",
                        a.emitter_id, a.start_idx, a.end_idx, b.start_idx, b.end_idx
                    ));
                }
            }
        }
        Ok(())
    }

    /// Sample indices where some emitter changes carrier, sorted and unique.
    pub fn hop_instants(&self) -> Vec<usize> {
        let mut hops: Vec<usize> = self
            .components
            .iter()
            .filter(|s| {
                s.start_idx > 0
                    && self
                        .components
                        .iter()
                        .any(|p| p.emitter_id == s.emitter_id && p.end_idx == s.start_idx)
            })
            .map(|s| s.start_idx)
            .collect();
        hops.sort_unstable();
        hops.dedup();
        hops
    }

    pub fn from_file(file: &ScenarioFile) -> Result<Self> {
        let sc = Self {
            fs: file.fs_hz,
            n_samples: file.n_samples,
            components: file
                .segments
                .iter()
                .map(|s| HopSegment {
                    emitter_id: s.emitter,
                    start_idx: s.start,
                    end_idx: s.end,
                    freq_hz: s.freq_hz,
                    amplitude: Complex64::new(s.amp_re, s.amp_im),
                })
                .collect(),
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            fs_hz: self.fs,
            n_samples: self.n_samples,
            segments: self
                .components
                .iter()
                .map(|s| SegmentRecord {
                    emitter: s.emitter_id,
                    start: s.start_idx,
                    end: s.end_idx,
                    freq_hz: s.freq_hz,
                    amp_re: s.amplitude.re,
                    amp_im: s.amplitude.im,
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSignal {
    pub samples: Vec<Complex64>,
    pub fs: f64,
    /// Sorted indices of lost samples.
    pub missing: Vec<usize>,
    /// Complex noise power σ² (0 for clean signals).
    pub noise_var: f64,
}

impl ObservedSignal {
    pub fn from_samples(samples: Vec<Complex64>, fs: f64) -> Self {
        Self {
            samples,
            fs,
            missing: Vec::new(),
            noise_var: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Boolean mask, true where the sample was lost.
    pub fn missing_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &i in &self.missing {
            m[i] = true;
        }
        m
    }

    /// CSV with columns `n,re,im,missing`.
    pub fn to_csv(&self) -> String {
        let mask = self.missing_mask();
        let mut out = String::from("n,re,im,missing\n");
        for (n, (z, m)) in self.samples.iter().zip(mask).enumerate() {
            out.push_str(&format!("{n},{:e},{:e},{}\n", z.re, z.im, u8::from(m)));
        }
        out
    }
}

/// Noise-free samples of the scenario.
pub fn synthesize(scenario: &FhScenario) -> Result<ObservedSignal> {
    scenario.validate()?;
    let mut samples = vec![Complex64::new(0.0, 0.0); scenario.n_samples];
    for seg in &scenario.components {
        let w = 2.0 * PI * seg.freq_hz / scenario.fs;
        for (n, s) in samples.iter_mut().enumerate().take(seg.end_idx).skip(seg.start_idx) {
            *s += seg.amplitude * Complex64::from_polar(1.0, w * n as f64);
        }
    }
    Ok(ObservedSignal::from_samples(samples, scenario.fs))
}

/// Noise power giving `snr_db` for this signal: ‖x‖² / (N·10^(snr/10)).
pub fn noise_power(sig: &ObservedSignal, snr_db: f64) -> f64 {
    sig.energy() / (sig.len() as f64 * 10f64.powf(snr_db / 10.0))
}

/// Add circular complex white Gaussian noise at the requested input SNR.
///
/// `f64::INFINITY` disables noise.
pub fn add_noise(sig: &ObservedSignal, snr_db: f64, rng: &mut Rng) -> Result<ObservedSignal> {
    if !sig.missing.is_empty() {
        return invalid("noise must be added before masking");
    }
    if snr_db == f64::INFINITY {
        return Ok(sig.clone());
    }
    if !snr_db.is_finite() {
        return invalid(format!("SNR must be finite or +inf, got {snr_db}"));
    }
    let var = noise_power(sig, snr_db);
    let sd = (var / 2.0).sqrt();
    let samples = sig
        .samples
        .iter()
        .map(|&s| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            s + Complex64::new(sd * re, sd * im)
        })
        .collect();
    Ok(ObservedSignal {
        samples,
        fs: sig.fs,
        missing: Vec::new(),
        noise_var: var,
    })
}

/// Zero `round(rate·N)` samples chosen uniformly without replacement.
pub fn apply_missing(sig: &ObservedSignal, rate: f64, rng: &mut Rng) -> Result<ObservedSignal> {
    if !(0.0..1.0).contains(&rate) {
        return invalid(format!("missing rate must lie in [0, 1), got {rate}"));
    }
    let n = sig.len();
    let m = (rate * n as f64).round() as usize;
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(mask_samples(sig, &idx))
}

/// Zero the given indices (merged with any existing mask).
pub fn mask_samples(sig: &ObservedSignal, indices: &[usize]) -> ObservedSignal {
    let mut out = sig.clone();
    for &i in indices {
        out.samples[i] = Complex64::new(0.0, 0.0);
    }
    out.missing.extend_from_slice(indices);
    out.missing.sort_unstable();
    out.missing.dedup();
    out
}

/// Binary freq×time support of the true components on `grid`.
pub fn ground_truth_support(scenario: &FhScenario, grid: &FreqGrid) -> Grid<bool> {
    let mut support = Grid::zeros(grid.bins, scenario.n_samples);
    for seg in &scenario.components {
        let k = grid.bin_of(seg.freq_hz / scenario.fs);
        for n in seg.start_idx..seg.end_idx.min(scenario.n_samples) {
            support[(k, n)] = true;
        }
    }
    support
}

/// Uniform random draw in `[lo, hi)`.
pub(crate) fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
