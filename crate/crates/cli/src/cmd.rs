use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use fhspec::bcs::reconstruct as bcs_reconstruct;
use fhspec::grid::{Grid, RGrid};
use fhspec::io::{self, Part};
use fhspec::kernels::{kernelled_tfd, EcskParams, KernelledRep};
use fhspec::metrics::{aggregate, score_trial, TrialRecord};
use fhspec::pipeline::{
    prepare_signal, run_sweep_with, run_trial, sweep_csv, threshold_support, Method, TrialKey, TrialOutcome,
};
use fhspec::prefopt::{optimize as de_optimize, scatter_dump, DeResult};
use fhspec::seed::{derive, rng_from_seed, stage_rng, Rng};
use fhspec::signal::{ground_truth_support, synthesize, FhScenario, ObservedSignal};
use fhspec::tf::{af_from_iaf, iaf, spectrogram_with, wvd_from_iaf, Axis, JointRep};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::out::{sha256_hex, Output, Status};
use crate::Failure;

pub struct Context {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

impl Context {
    /// Digest of everything that determines a trial's result.
    fn digest(&self, scenario: &FhScenario) -> String {
        let v = serde_json::json!({
            "scenario": scenario.to_file(),
            "pipeline": self.cfg.pipeline,
            "root_seed": self.cfg.root_seed,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    fn open(&self, command: &str, scenario: &FhScenario) -> Result<Output, Failure> {
        let keep: &[&str] = if command == "sweep" { &[JOURNAL] } else { &[] };
        Output::open(self.root.join(command), command, self.digest(scenario), keep)
    }
}

/// Map a core error to a failure attributed to `stage`.
fn at<T>(stage: &str, r: fhspec::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = Failure::from_core(e);
        f.stage = Some(stage.to_string());
        f
    })
}

fn finish(out: Output, r: Result<(), Failure>) -> Result<PathBuf, Failure> {
    match r {
        Ok(()) => out.finish(),
        Err(f) => Err(out.fail(&f)),
    }
}

#[derive(Deserialize)]
struct SignalRow {
    n: usize,
    re: f64,
    im: f64,
    missing: u8,
}

/// Read a `n,re,im,missing` CSV.
pub fn read_signal(path: &Path, fs: f64) -> Result<ObservedSignal, Failure> {
    let bad = |e: String| Failure::validation(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut samples = Vec::new();
    let mut missing = Vec::new();
    for (i, row) in rdr.deserialize::<SignalRow>().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.n != i {
            return Err(bad(format!("row {i} has index {}", row.n)));
        }
        samples.push(Complex64::new(row.re, row.im));
        if row.missing != 0 {
            missing.push(i);
        }
    }
    if samples.is_empty() {
        return Err(bad("no samples".into()));
    }
    let mut s = ObservedSignal::from_samples(samples, fs);
    s.missing = missing;
    Ok(s)
}

fn observed(ctx: &Context, scenario: &FhScenario, input: Option<&Path>) -> Result<ObservedSignal, Failure> {
    match input {
        Some(p) => read_signal(p, scenario.fs),
        None => {
            let (snr, rate, _) = ctx.cfg.single();
            at("signal", prepare_signal(scenario, snr, rate, ctx.cfg.root_seed))
        }
    }
}

fn write_rep(out: &mut Output, stem: &str, rep: &JointRep, part: Part) -> Result<(), Failure> {
    let m = rep.data.map(|z| match part {
        Part::Re => z.re,
        Part::Im => z.im,
        Part::Abs => z.norm(),
    });
    out.matrix(stem, &m, &rep.row_axis, &rep.col_axis)
}

fn write_support(out: &mut Output, stem: &str, s: &Grid<bool>, rows: &Axis) -> Result<(), Failure> {
    out.matrix(stem, &io::support_grid(s), rows, &Axis::time(s.cols()))
}

fn write_transforms(out: &mut Output, x: &ObservedSignal, ctx: &Context) -> Result<JointRep, Failure> {
    let p = &ctx.cfg.pipeline;
    let grid = p.grid();
    let c = iaf(x);
    write_rep(out, "iaf_re", &c, Part::Re)?;
    write_rep(out, "iaf_im", &c, Part::Im)?;
    write_rep(out, "af_abs", &af_from_iaf(&c), Part::Abs)?;
    let w = wvd_from_iaf(&c, &grid);
    write_rep(out, "wvd", &w, Part::Re)?;
    Ok(w)
}

fn write_kernelled(out: &mut Output, k: &KernelledRep) -> Result<(), Failure> {
    write_rep(out, "tfr", &k.tfr_rep(), Part::Re)?;
    write_rep(out, "kernelled_iaf_re", &k.iaf, Part::Re)?;
    write_rep(out, "kernelled_iaf_im", &k.iaf, Part::Im)?;
    out.write(
        "aok_diagnostics.csv",
        io::aok_diagnostics_csv(&k.diagnostics).as_bytes(),
    )
}

fn de_rng(seed: u64, de_seed: Option<u64>) -> Rng {
    match de_seed {
        Some(s) => rng_from_seed(s),
        None => stage_rng(seed, "de"),
    }
}

fn write_de(out: &mut Output, r: &DeResult) -> Result<(), Failure> {
    out.json("de_result.json", r)?;
    out.write("de_history.csv", io::trace_csv("best_cost", &r.history).as_bytes())
}

pub fn generate(ctx: &Context) -> Result<PathBuf, Failure> {
    let scenario = ctx.cfg.scenario()?;
    let mut out = ctx.open("generate", &scenario)?;
    let r = (|| {
        let grid = ctx.cfg.pipeline.grid();
        out.write("scenario.json", scenario.to_json().as_bytes())?;
        let clean = at("signal", synthesize(&scenario))?;
        out.write("signal_clean.csv", clean.to_csv().as_bytes())?;
        let x = observed(ctx, &scenario, None)?;
        out.write("signal.csv", x.to_csv().as_bytes())?;
        write_support(
            &mut out,
            "truth",
            &ground_truth_support(&scenario, &grid),
            &Axis::frequency(&grid),
        )
    })();
    finish(out, r)
}

pub fn transform(ctx: &Context, input: Option<&Path>) -> Result<PathBuf, Failure> {
    let scenario = ctx.cfg.scenario()?;
    let mut out = ctx.open("transform", &scenario)?;
    let r = (|| {
        let p = &ctx.cfg.pipeline;
        let x = observed(ctx, &scenario, input)?;
        out.write("signal.csv", x.to_csv().as_bytes())?;
        write_transforms(&mut out, &x, ctx)?;
        let s = spectrogram_with(&x.samples, p.spectrogram_len, p.spectrogram_taper, &p.grid());
        write_rep(&mut out, "spectrogram", &s, Part::Re)
    })();
    finish(out, r)
}

pub fn kernel(ctx: &Context, input: Option<&Path>, ecsk: Option<&[f64]>) -> Result<PathBuf, Failure> {
    let scenario = ctx.cfg.scenario()?;
    if ecsk.is_some_and(|v| v.len() != 4) {
        return Err(Failure::validation(
            "--ecsk takes four values: rho1,rho2,xi1,xi2".into(),
        ));
    }
    let params = ecsk.map(|v| EcskParams::new(v[0], v[1], v[2], v[3]));
    if let Some(p) = &params {
        p.validate().map_err(Failure::from_core)?;
    }
    let mut out = ctx.open("kernel", &scenario)?;
    let r = (|| {
        let p = &ctx.cfg.pipeline;
        let x = observed(ctx, &scenario, input)?;
        let k = at("kernels", kernelled_tfd(&x, params.as_ref(), &p.kernel(), &p.grid()))?;
        write_kernelled(&mut out, &k)
    })();
    finish(out, r)
}

pub fn optimize(ctx: &Context, input: Option<&Path>, runs: usize, de_seed: Option<u64>) -> Result<PathBuf, Failure> {
    if runs == 0 {
        return Err(Failure::validation("at least one run is required".into()));
    }
    let scenario = ctx.cfg.scenario()?;
    let mut out = ctx.open("optimize", &scenario)?;
    let r = (|| {
        let p = &ctx.cfg.pipeline;
        let grid = p.grid();
        let x = observed(ctx, &scenario, input)?;
        let seed = ctx.cfg.root_seed;
        let results: Vec<fhspec::Result<DeResult>> = fhspec::par::map_range(runs, |i| {
            let mut rng = if i == 0 {
                de_rng(seed, de_seed)
            } else {
                rng_from_seed(derive(de_seed.unwrap_or(seed), "de-run", &[i as u64]))
            };
            de_optimize(&x, &p.de, p.w_len, &grid, &mut rng)
        });
        let results = at("prefopt", results.into_iter().collect::<fhspec::Result<Vec<_>>>())?;
        write_de(&mut out, &results[0])?;
        out.write("de_scatter.csv", at("prefopt", scatter_dump(&results))?.as_bytes())
    })();
    finish(out, r)
}

#[derive(Serialize)]
struct Report<'a> {
    method: Method,
    seed: u64,
    snr_db: f64,
    missing_rate: f64,
    d_t: f64,
    d_f: f64,
    hop_truth: &'a [usize],
    detected_hops: &'a [usize],
}

pub fn reconstruct(ctx: &Context, input: Option<&Path>, de_seed: Option<u64>) -> Result<PathBuf, Failure> {
    let scenario = ctx.cfg.scenario()?;
    let mut out = ctx.open("reconstruct", &scenario)?;
    let r = bundle(ctx, &scenario, input, de_seed, &mut out);
    finish(out, r)
}

/// One trial, stage by stage, writing each intermediate as it is produced.
fn bundle(
    ctx: &Context,
    scenario: &FhScenario,
    input: Option<&Path>,
    de_seed: Option<u64>,
    out: &mut Output,
) -> Result<(), Failure> {
    let p = &ctx.cfg.pipeline;
    let grid = p.grid();
    let (snr, rate, method) = ctx.cfg.single();
    let seed = ctx.cfg.root_seed;
    let freq = Axis::frequency(&grid);

    let x = observed(ctx, scenario, input)?;
    out.write("signal.csv", x.to_csv().as_bytes())?;
    let truth = ground_truth_support(scenario, &grid);
    write_support(out, "truth", &truth, &freq)?;
    let wvd = write_transforms(out, &x, ctx)?;

    let (magnitude, support): (RGrid, Grid<bool>) = match method {
        Method::SpectrogramBaseline => {
            let s = spectrogram_with(&x.samples, p.spectrogram_len, p.spectrogram_taper, &grid);
            write_rep(out, "spectrogram", &s, Part::Re)?;
            let mag = s.data.map(|v| v.re.max(0.0).sqrt());
            let sup = threshold_support(&mag, p.baseline_threshold);
            (mag, sup)
        }
        Method::WvdRaw => {
            let mag = wvd.data.map(|v| v.re.abs());
            let sup = threshold_support(&mag, p.baseline_threshold);
            (mag, sup)
        }
        Method::Proposed | Method::AokOnly => {
            let params = if method == Method::Proposed {
                let r = at(
                    "prefopt",
                    de_optimize(&x, &p.de, p.w_len, &grid, &mut de_rng(seed, de_seed)),
                )?;
                write_de(out, &r)?;
                Some(r.best_params)
            } else {
                None
            };
            let k = at("kernels", kernelled_tfd(&x, params.as_ref(), &p.kernel(), &grid))?;
            write_kernelled(out, &k)?;
            let est = at("bcs", bcs_reconstruct(&k, &p.bcs, &mut stage_rng(seed, "bcs")))?;
            out.write(
                "chain_trace.csv",
                io::trace_csv("log_posterior", &est.log_posterior_trace).as_bytes(),
            )?;
            (est.magnitude(), est.support)
        }
    };
    out.matrix("estimate", &magnitude, &freq, &Axis::time(magnitude.cols()))?;
    write_support(out, "estimate_support", &support, &freq)?;
    let hops = scenario.hop_instants();
    let score = at("metrics", score_trial(&magnitude, &support, &truth, &hops, &grid))?;
    out.write("delta.csv", io::trace_csv("delta", &score.delta).as_bytes())?;
    out.json(
        "report.json",
        &Report {
            method,
            seed,
            snr_db: snr,
            missing_rate: rate,
            d_t: score.d_t,
            d_f: score.d_f,
            hop_truth: &hops,
            detected_hops: &score.detected_hops,
        },
    )
}

#[derive(Serialize)]
struct EvalSummary {
    snr_db: f64,
    missing_rate: f64,
    method: Method,
    p_t: f64,
    e_f: f64,
    n_trials: usize,
}

fn records_csv(records: &[TrialRecord]) -> String {
    let mut s = String::from("trial,seed,d_t,d_f\n");
    for (i, r) in records.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{}\n", r.seed, r.d_t, r.d_f));
    }
    s
}

pub fn evaluate(ctx: &Context) -> Result<PathBuf, Failure> {
    let scenario = ctx.cfg.scenario()?;
    let mut out = ctx.open("evaluate", &scenario)?;
    let r = (|| {
        let (snr, rate, method) = ctx.cfg.single();
        let keys: Vec<TrialKey> = (0..ctx.cfg.trials as u64)
            .map(|trial| TrialKey {
                snr_db: snr,
                missing_rate: rate,
                method,
                trial,
            })
            .collect();
        let done = fhspec::par::map_slice(&keys, |k| {
            let seed = k.seed(ctx.cfg.root_seed);
            run_trial(&scenario, method, snr, rate, seed, &ctx.cfg.pipeline).map(|a| TrialRecord {
                snr_db: snr,
                missing_rate: rate,
                seed,
                d_t: a.score.d_t,
                d_f: a.score.d_f,
            })
        });
        let records = done
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::from_stage)?;
        out.write("trials.csv", records_csv(&records).as_bytes())?;
        let report = at("metrics", aggregate(records))?;
        out.json(
            "report.json",
            &EvalSummary {
                snr_db: snr,
                missing_rate: rate,
                method,
                p_t: report.p_t,
                e_f: report.e_f,
                n_trials: report.trials.len(),
            },
        )
    })();
    finish(out, r)
}

pub const JOURNAL: &str = "trials.jsonl";

#[derive(Serialize, Deserialize)]
struct JournalLine {
    config_sha256: String,
    outcome: TrialOutcome,
}

type CacheKey = (u64, u64, Method, u64);

fn cache_key(k: &TrialKey) -> CacheKey {
    (k.snr_db.to_bits(), k.missing_rate.to_bits(), k.method, k.trial)
}

/// Finished trials from an earlier journal that used the same configuration.
/// A journal that a completed manifest recorded but that has since changed
/// is ignored.
fn load_journal(out: &Output, digest: &str) -> HashMap<CacheKey, TrialOutcome> {
    let path = out.path(JOURNAL);
    if let Some((m, stale)) = &out.previous {
        if m.status == Status::Complete && stale.iter().any(|p| p == JOURNAL) {
            eprintln!("warning: {JOURNAL} changed since it was recorded; recomputing every trial");
            return HashMap::new();
        }
    }
    let Ok(f) = std::fs::File::open(&path) else {
        return HashMap::new();
    };
    std::io::BufReader::new(f)
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| serde_json::from_str::<JournalLine>(&l).ok())
        .filter(|j| j.config_sha256 == digest)
        .map(|j| (cache_key(&j.outcome.key), j.outcome))
        .collect()
}

#[derive(Serialize)]
struct Timing {
    reused_trials: usize,
    computed_trials: usize,
    rows: Vec<(f64, f64, Method, f64)>,
}

pub fn sweep(ctx: &Context) -> Result<PathBuf, Failure> {
    let scenario = ctx.cfg.scenario()?;
    let digest = ctx.digest(&scenario);
    let mut out = ctx.open("sweep", &scenario)?;
    let cache = load_journal(&out, &digest);
    let spec = ctx.cfg.sweep_spec();
    let reused = spec.keys().iter().filter(|k| cache.contains_key(&cache_key(k))).count();
    if reused > 0 {
        eprintln!("resuming: {reused} finished trials reused");
    }

    // Rewrite the journal with the reusable entries only, then append.
    let r = (|| {
        let mut text = String::new();
        for k in spec.keys() {
            if let Some(o) = cache.get(&cache_key(&k)) {
                let line = JournalLine {
                    config_sha256: digest.clone(),
                    outcome: o.clone(),
                };
                text.push_str(&serde_json::to_string(&line).expect("journal line serializes"));
                text.push('\n');
            }
        }
        let io_err = |e: std::io::Error| Failure::stage("output", e.to_string());
        std::fs::write(out.path(JOURNAL), text).map_err(io_err)?;
        let journal = std::fs::OpenOptions::new()
            .append(true)
            .open(out.path(JOURNAL))
            .map_err(io_err)?;
        let journal = Mutex::new(journal);

        let (rows, _) = run_sweep_with(
            &scenario,
            &spec,
            &ctx.cfg.pipeline,
            |k| cache.get(&cache_key(k)).cloned(),
            |o| {
                let line = JournalLine {
                    config_sha256: digest.clone(),
                    outcome: o.clone(),
                };
                let mut s = serde_json::to_string(&line).expect("journal line serializes");
                s.push('\n');
                let mut f = journal.lock().expect("journal lock");
                if let Err(e) = f.write_all(s.as_bytes()).and_then(|_| f.flush()) {
                    eprintln!("warning: journal write failed: {e}");
                }
            },
        )
        .map_err(Failure::from_stage)?;
        out.write("sweep.csv", sweep_csv(&rows, false).as_bytes())?;
        out.register(JOURNAL)?;
        out.json(
            "timing.json",
            &Timing {
                reused_trials: reused,
                computed_trials: spec.keys().len() - reused,
                rows: rows
                    .iter()
                    .map(|r| (r.snr_db, r.missing_rate, r.method, r.wall_time_s))
                    .collect(),
            },
        )
    })();
    finish(out, r)
}
