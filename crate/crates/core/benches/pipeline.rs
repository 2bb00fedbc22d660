//! Parallel core against its sequential fallback.
//!
//! With the default `parallel` feature each workload runs twice: on the
//! global rayon pool and inside a one-thread pool. `cargo bench -p
//! fhspec-core --no-default-features` builds the plain sequential code path
//! and reports it under the `sequential` label.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fhspec::kernels::{kernelled_tfd, EcskParams};
use fhspec::par;
use fhspec::pipeline::{prepare_signal, run_trial, Method, PipelineConfig};
use fhspec::prefopt::cost;
use fhspec::signal::FhScenario;

fn light_pipeline() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.de.pop_size = 8;
    cfg.de.generations = 4;
    cfg.bcs.burn_in = 20;
    cfg.bcs.samples_kept = 20;
    cfg
}

/// Run `f` under each available execution mode.
fn modes(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    let label = if par::is_parallel() { "rayon" } else { "sequential" };
    g.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(&f));
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::from_parameter("rayon-1-thread"), |b| {
            b.iter(|| single.install(&f))
        });
    }
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let scenario = FhScenario::reference();
    let cfg = light_pipeline();
    let x = prepare_signal(&scenario, 10.0, 0.25, 7).unwrap();
    let p = EcskParams::new(1.0, 1.0, 0.3, 0.1);
    let (kcfg, grid) = (cfg.kernel(), cfg.grid());
    modes(c, "kernelled_tfd", || {
        black_box(kernelled_tfd(&x, Some(&p), &kcfg, &grid).unwrap());
    });
    modes(c, "de_cost_x16", || {
        let ps: Vec<EcskParams> = (0..16)
            .map(|i| EcskParams::new(0.5 + i as f64 * 0.3, 1.0, 0.2, 0.05 + i as f64 * 0.01))
            .collect();
        black_box(par::map_slice(&ps, |p| cost(&x, p, cfg.w_len, &grid).unwrap()));
    });
}

fn trials(c: &mut Criterion) {
    let scenario = FhScenario::reference();
    let cfg = light_pipeline();
    let seeds: Vec<u64> = (1..=4).collect();
    modes(c, "proposed_trials_x4", || {
        black_box(par::map_slice(&seeds, |&s| {
            run_trial(&scenario, Method::Proposed, 10.0, 0.25, s, &cfg)
                .unwrap()
                .score
                .d_t
        }));
    });
}

criterion_group!(benches, kernels, trials);
criterion_main!(benches);
