use std::path::{Path, PathBuf};

use clap::Args;
use fhspec::pipeline::{Method, PipelineConfig, SweepSpec};
use fhspec::signal::FhScenario;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Run configuration as read from JSON. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scenario JSON file; the built-in reference scenario when absent.
    pub scenario: Option<PathBuf>,
    pub snr_db: Vec<f64>,
    pub missing_rate: Vec<f64>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub root_seed: u64,
    pub pipeline: PipelineConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            snr_db: vec![0.0, 5.0, 10.0, 15.0],
            missing_rate: vec![0.0, 0.1, 0.25],
            methods: vec![Method::Proposed, Method::SpectrogramBaseline],
            trials: 50,
            root_seed: 1,
            pipeline: PipelineConfig::default(),
            output_dir: None,
        }
    }
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (overrides FHSPEC_OUT and the config file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Scenario JSON file.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// SNR values in dB, comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    pub snr: Option<Vec<f64>>,
    /// Missing-sample rates, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub rate: Option<Vec<f64>>,
    /// Methods, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Monte Carlo trials per condition.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Use the long 1000-trial setting.
    #[arg(long, global = true)]
    pub full: bool,
    /// Root seed (single runs use it directly as the trial seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parameter-search population size.
    #[arg(long, global = true)]
    pub de_pop: Option<usize>,
    /// Parameter-search generations.
    #[arg(long, global = true)]
    pub de_gens: Option<usize>,
    /// Seed of the parameter search; derived from the trial seed otherwise.
    #[arg(long, global = true)]
    pub de_seed: Option<u64>,
    /// Short-time window length (odd).
    #[arg(long, global = true)]
    pub w_len: Option<usize>,
    /// Volume bound of the adaptive kernel.
    #[arg(long, global = true)]
    pub alpha_volume: Option<f64>,
    /// Gibbs sweeps over the whole grid.
    #[arg(long, global = true)]
    pub bcs_sweeps: Option<usize>,
    /// Discarded samples per column and sweep.
    #[arg(long, global = true)]
    pub bcs_burn_in: Option<usize>,
    /// Kept samples per column and sweep.
    #[arg(long, global = true)]
    pub bcs_samples: Option<usize>,
}

pub const FULL_TRIALS: usize = 1000;

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::validation(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &self.scenario {
            cfg.scenario = Some(v.clone());
        }
        if let Some(v) = &self.snr {
            cfg.snr_db = v.clone();
        }
        if let Some(v) = &self.rate {
            cfg.missing_rate = v.clone();
        }
        if let Some(v) = &self.method {
            cfg.methods = v
                .iter()
                .map(|m| m.parse::<Method>().map_err(|e| Failure::validation(e.to_string())))
                .collect::<Result<_, _>>()?;
        }
        if self.full {
            cfg.trials = FULL_TRIALS;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.seed {
            cfg.root_seed = v;
        }
        let p = &mut cfg.pipeline;
        if let Some(v) = self.de_pop {
            p.de.pop_size = v;
        }
        if let Some(v) = self.de_gens {
            p.de.generations = v;
        }
        if let Some(v) = self.w_len {
            p.w_len = v;
        }
        if let Some(v) = self.alpha_volume {
            p.aok.alpha_volume = v;
        }
        if let Some(v) = self.bcs_sweeps {
            p.bcs.sweeps = v;
        }
        if let Some(v) = self.bcs_burn_in {
            p.bcs.burn_in = v;
        }
        if let Some(v) = self.bcs_samples {
            p.bcs.samples_kept = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--out`, then `FHSPEC_OUT`, then the config file, then `./fhspec-out`.
    pub fn output_root(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("FHSPEC_OUT").map(PathBuf::from))
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("fhspec-out"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        self.sweep_spec().validate().map_err(Failure::from_core)?;
        self.pipeline.validate().map_err(Failure::from_core)
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            snr_db: self.snr_db.clone(),
            missing_rates: self.missing_rate.clone(),
            methods: self.methods.clone(),
            trials: self.trials,
            root_seed: self.root_seed,
        }
    }

    pub fn scenario(&self) -> Result<FhScenario, Failure> {
        match &self.scenario {
            None => Ok(FhScenario::reference()),
            Some(p) => load_scenario(p),
        }
    }

    /// The first SNR, rate and method: the condition of a single run.
    pub fn single(&self) -> (f64, f64, Method) {
        (self.snr_db[0], self.missing_rate[0], self.methods[0])
    }
}

pub fn load_scenario(p: &Path) -> Result<FhScenario, Failure> {
    let text = std::fs::read_to_string(p)
        .map_err(|e| Failure::validation(format!("cannot read scenario {}: {e}", p.display())))?;
    FhScenario::from_json(&text).map_err(Failure::from_core)
}
