use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use flowmc_core::bench::{
    appendix_b_gradients, builtin_target, density_grid, estimator_variance, pss_synthetic_target,
    write_pfm, EstimatorStats, MetricSet, BUILTIN_TARGETS,
};
use flowmc_core::flow::{build_flow, NormalizingFlow};
use flowmc_core::mis::{run_guiding, GuidingReport, MisVariant};
use flowmc_core::rng::{sub_stream_rng, Stream};
use flowmc_core::training::{
    online_loop_with, ExperimentReport, Integrand, IterationReport, TrainConfig,
};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AppendixBConfig, GuidingBenchConfig, PssBenchConfig, TrainImageConfig};

/// What the caller needs to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub rejected_fraction: f64,
    pub failure_threshold: f64,
}

impl Outcome {
    pub fn clean() -> Self {
        Self {
            rejected_fraction: 0.0,
            failure_threshold: 1.0,
        }
    }

    pub fn failed(&self) -> bool {
        self.rejected_fraction > self.failure_threshold
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn save_flow(flow: &NormalizingFlow, dir: &Path) -> Result<()> {
    let mut w = create(dir, "flow.ckpt")?;
    flow.save(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_report(report: &ExperimentReport, dir: &Path, timing: bool) -> Result<()> {
    let mut w = create(dir, "report.csv")?;
    report.write_csv(&mut w, timing)?;
    w.flush()?;
    Ok(())
}

fn metric_row<W: Write>(w: &mut W, label: &str, seen: u64, m: &MetricSet) -> std::io::Result<()> {
    writeln!(
        w,
        "{label},{seen},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
        m.mape,
        m.cross_entropy,
        m.estimator.mean,
        m.estimator.variance,
        m.estimator.weight_p99,
        m.estimator.weight_p9999
    )
}

fn progress(quiet: bool, it: &IterationReport) {
    if !quiet {
        eprintln!(
            "iteration {:>2}: {:>8} samples, loss {:.4e}, estimate {:.6e}, variance {:.4e}",
            it.iteration, it.samples, it.loss, it.estimate, it.variance
        );
    }
}

pub fn train_image(
    cfg: &TrainImageConfig,
    base: &Path,
    out: &Path,
    quiet: bool,
) -> Result<Outcome> {
    cfg.validate()?;
    let target = cfg.target.load(base)?;
    let mut flow = build_flow(&cfg.flow, cfg.seed)?;
    let train = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let (res, n_eval) = (cfg.metrics.resolution, cfg.metrics.samples);
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let mut metrics = create(out, "metrics.csv")?;
    writeln!(metrics, "iteration,samples_seen,mape,cross_entropy,estimator_mean,estimator_variance,weight_p99,weight_p9999")?;
    metric_row(
        &mut metrics,
        "initial",
        0,
        &MetricSet::image(&flow, &target, res, n_eval, cfg.seed)?,
    )?;
    let mut seen = 0;
    let mut integrand = target.clone();
    let report = online_loop_with(
        &mut flow,
        &mut integrand,
        &cfg.schedule,
        &train,
        &[],
        cfg.proposal,
        |it, flow| {
            progress(quiet, it);
            seen += it.samples;
            let m = MetricSet::image(flow, &target, res, n_eval, cfg.seed)?;
            metric_row(&mut metrics, &it.iteration.to_string(), seen, &m)?;
            let grid = density_grid(flow, res, &[])?;
            let mut pfm = BufWriter::new(File::create(
                out.join(format!("density_iter{}.pfm", it.iteration)),
            )?);
            write_pfm(&mut pfm, grid.view())?;
            pfm.flush()?;
            Ok(())
        },
    )?;
    metrics.flush()?;
    write_report(&report, out, cfg.record_timing)?;
    save_flow(&flow, out)?;

    let final_metrics = MetricSet::image(&flow, &target, res, n_eval, cfg.seed)?;
    let mut summary = create(out, "summary.csv")?;
    writeln!(summary, "target,reference_integral,combined_estimate,final_cross_entropy,final_mape,train_steps,rejected_steps")?;
    writeln!(
        summary,
        "{},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
        cfg.target.name(),
        target.integral(),
        report.combined_estimate().unwrap_or(f64::NAN),
        final_metrics.cross_entropy,
        final_metrics.mape,
        report.train_steps,
        report.rejected_steps
    )?;
    summary.flush()?;
    if let Some(e) = &report.error {
        bail!("target evaluation failed: {e}");
    }
    Ok(Outcome {
        rejected_fraction: report.rejected_fraction(),
        failure_threshold: cfg.failure_threshold,
    })
}

pub fn guiding_bench(cfg: &GuidingBenchConfig, out: &Path, quiet: bool) -> Result<Outcome> {
    cfg.validate()?;
    let scenario = cfg.scenario()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("scenario.toml"), scenario.to_toml()?)?;

    let jobs: Vec<(MisVariant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| (0..cfg.runs).map(move |r| (v, cfg.seed + r)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let r = run_guiding(&scenario, variant, seed);
            if !quiet {
                if let Ok(r) = &r {
                    eprintln!(
                        "{:<13} seed {seed}: final c {:.4}, final variance {:.4e}",
                        variant.name(),
                        r.final_selection,
                        r.final_variance()
                    );
                }
            }
            r
        })
        .collect::<flowmc_core::Result<Vec<_>>>()?;

    let mut csv = create(out, "guiding.csv")?;
    GuidingReport::write_csv_header(&mut csv)?;
    for r in &reports {
        r.write_csv_rows(&mut csv)?;
    }
    csv.flush()?;
    let mut summary = create(out, "summary.csv")?;
    writeln!(
        summary,
        "variant,seed,final_selection,final_variance,train_steps,rejected_steps"
    )?;
    for r in &reports {
        writeln!(
            summary,
            "{},{},{:.9e},{:.9e},{},{}",
            r.variant.name(),
            r.seed,
            r.final_selection,
            r.final_variance(),
            r.train_steps,
            r.rejected_steps
        )?;
    }
    summary.flush()?;

    let steps: u64 = reports.iter().map(|r| r.train_steps).sum();
    let rejected: u64 = reports.iter().map(|r| r.rejected_steps).sum();
    let rejected_fraction = if steps == 0 {
        0.0
    } else {
        rejected as f64 / steps as f64
    };
    Ok(Outcome {
        rejected_fraction,
        failure_threshold: cfg.failure_threshold,
    })
}

pub fn diagnose_appendix_b(cfg: &AppendixBConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut csv = create(out, "appendix_b.csv")?;
    writeln!(csv, "theta,density_normalized,mass_normalized")?;
    for i in 1..=99 {
        let theta = i as f64 / 100.0;
        let g = appendix_b_gradients(theta, cfg.q1, cfg.q2, |x| cfg.density.eval(x))?;
        writeln!(
            csv,
            "{theta:.2},{:.12e},{:.12e}",
            g.density_normalized, g.mass_normalized
        )?;
    }
    csv.flush()?;
    Ok(Outcome::clean())
}

fn uniform_stats<I: Integrand>(target: &mut I, n: usize, seed: u64) -> Result<EstimatorStats> {
    let mut rng = sub_stream_rng(seed, Stream::Eval, 1);
    let d = target.dim();
    let mut weights = Vec::with_capacity(n);
    while weights.len() < n {
        let m = (n - weights.len()).min(8192);
        let x = Array2::from_shape_simple_fn((m, d), || rng.random::<f64>());
        weights.extend(target.evaluate(x.view())?);
    }
    Ok(EstimatorStats::from_weights(&weights))
}

pub fn pss_bench(cfg: &PssBenchConfig, out: &Path, quiet: bool) -> Result<Outcome> {
    cfg.validate()?;
    let mut target = cfg.target()?;
    let mut flow = build_flow(&cfg.flow, cfg.seed)?;
    let train = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let report = online_loop_with(
        &mut flow,
        &mut target,
        &cfg.schedule,
        &train,
        &[],
        cfg.proposal,
        |it, _| {
            progress(quiet, it);
            Ok(())
        },
    )?;
    write_report(&report, out, cfg.record_timing)?;
    save_flow(&flow, out)?;
    if let Some(e) = &report.error {
        bail!("target evaluation failed: {e}");
    }

    let uniform = uniform_stats(&mut target, cfg.eval_samples, cfg.seed)?;
    let learned = estimator_variance(&flow, &[], &mut target, cfg.eval_samples, cfg.seed)?;
    let reduction = uniform.variance / learned.variance;
    if !quiet {
        eprintln!(
            "variance: uniform {:.4e}, flow {:.4e}, reduction {reduction:.2}x",
            uniform.variance, learned.variance
        );
    }
    let mut csv = create(out, "summary.csv")?;
    writeln!(
        csv,
        "method,samples,mean,variance,weight_p99,weight_p9999,variance_reduction"
    )?;
    for (name, s) in [("uniform", &uniform), ("flow", &learned)] {
        writeln!(
            csv,
            "{name},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            s.samples,
            s.mean,
            s.variance,
            s.weight_p99,
            s.weight_p9999,
            uniform.variance / s.variance
        )?;
    }
    csv.flush()?;
    Ok(Outcome {
        rejected_fraction: report.rejected_fraction(),
        failure_threshold: cfg.failure_threshold,
    })
}

#[derive(Serialize)]
struct MixtureFile<'a> {
    dim: usize,
    integral: f64,
    components: &'a [flowmc_core::bench::MixtureComponent],
}

/// Writes the shipped image targets as 16-bit PGM and the synthetic
/// mixtures as TOML.
pub fn export_targets(out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for name in BUILTIN_TARGETS {
        let mut w = create(out, &format!("{name}.pgm"))?;
        builtin_target(name)?.write_pgm(&mut w)?;
        w.flush()?;
    }
    for d in [4, 6, 8] {
        let m = pss_synthetic_target(d)?;
        let file = MixtureFile {
            dim: d,
            integral: m.integral(),
            components: m.components(),
        };
        fs::write(out.join(format!("pss_d{d}.toml")), toml::to_string(&file)?)?;
    }
    Ok(Outcome::clean())
}
