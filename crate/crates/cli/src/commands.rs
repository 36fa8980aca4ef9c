//! One function per subcommand. Each writes its outputs under `cfg.out` and
//! returns the paths written, in order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dmdenkf::evaluation::{mean, modulus_argument_errors, outlier_rate_iqr, MetricRow};
use dmdenkf::ili::{gen_ili_fixture, load_census_csv, load_ili_csv, rank_sweep, run_ili_experiment, weekly_series, write_census_csv, write_ili_csv, Census};
use dmdenkf::linalg::percentile;
use dmdenkf::rng::derive_seed;
use dmdenkf::synthetic::{gen_pandemic, gen_rotation, PandemicSeriesSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::experiments::{filter_compare_run, pandemic_run, rotation_run, rotation_series_spec, Method};
use crate::CliError;

/// Bins of the argument-error histogram over `[-ARG_HIST_RANGE, ARG_HIST_RANGE]`.
pub const ARG_HIST_BINS: usize = 200;
pub const ARG_HIST_RANGE: f64 = std::f64::consts::PI / 8.0;

/// Runs `f` for every run index on a pool of `workers` threads and returns
/// the results in run order.
pub fn par_runs<T, F>(workers: usize, runs: usize, f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..runs).into_par_iter().map(&f).collect())
}

/// CSV writer whose first line is `# config: <json>`.
pub struct EchoCsv {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl EchoCsv {
    pub fn create(dir: &Path, name: &str, echo: &str, header: &[&str]) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        let mut file = BufWriter::new(File::create(&path)?);
        writeln!(file, "# config: {echo}")?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(header).map_err(csv_err)?;
        Ok(Self { path, inner })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(csv_err)
    }

    pub fn serialize<T: Serialize>(&mut self, row: &T) -> Result<(), CliError> {
        self.inner.serialize(row).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.inner.flush()?;
        Ok(self.path)
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

fn metric_header() -> [&'static str; 6] {
    ["method", "sigma", "metric", "value", "n_runs", "seed_base"]
}

fn metric(method: &str, sigma: f64, name: &str, value: f64, n_runs: usize, seed: u64) -> MetricRow {
    MetricRow {
        method: method.into(),
        sigma,
        metric: name.into(),
        value,
        n_runs,
        seed_base: seed,
    }
}

fn histogram(values: &[f64]) -> (usize, Vec<usize>, usize) {
    let mut bins = vec![0; ARG_HIST_BINS];
    let (mut below, mut above) = (0, 0);
    for &v in values {
        if v < -ARG_HIST_RANGE {
            below += 1;
        } else if v >= ARG_HIST_RANGE {
            above += 1;
        } else {
            let pos = (v / ARG_HIST_RANGE + 1.0) * (ARG_HIST_BINS / 2) as f64;
            bins[(pos as usize).min(ARG_HIST_BINS - 1)] += 1;
        }
    }
    (below, bins, above)
}

/// Rotation study: eigenvalue modulus and argument errors per method.
pub fn cmd_synth_eig(cfg: &RunConfig, tracks: bool) -> Result<Vec<PathBuf>, CliError> {
    let echo = cfg.echo();
    let mut summary = EchoCsv::create(&cfg.out, "synth_eig_summary.csv", &echo, &metric_header())?;
    let mut per_run = EchoCsv::create(&cfg.out, "synth_eig_runs.csv", &echo, &["method", "sigma", "run", "seed", "metric", "value"])?;
    let mut dist = EchoCsv::create(&cfg.out, "synth_eig_argument_hist.csv", &echo, &["method", "sigma", "bin_lo", "bin_hi", "count"])?;
    let mut track_out = if tracks {
        Some(EchoCsv::create(
            &cfg.out,
            "synth_eig_tracks.csv",
            &echo,
            &["method", "sigma", "run", "step", "true_argument", "est_modulus", "est_argument", "pair_detected"],
        )?)
    } else {
        None
    };
    for &sigma in &cfg.sigma {
        log::info!("synth-eig: sigma {sigma}, {} runs", cfg.runs);
        let runs = par_runs(cfg.workers, cfg.runs, |r| Ok(rotation_run(&cfg.rotation, sigma, r, cfg.seed, &cfg.methods)?))?;
        for &method in &cfg.methods {
            let mut mod_errs = Vec::with_capacity(runs.len());
            let mut arg_errs = Vec::new();
            let mut spin_up_failures = 0;
            for run in &runs {
                let recs = &run.tracks[&method];
                let (me, args) = modulus_argument_errors(recs)?;
                mod_errs.push(me);
                per_run.row([method.name(), &sigma.to_string(), &run.run.to_string(), &run.seed.to_string(), "mean_modulus_error", &me.to_string()])?;
                arg_errs.extend(args);
                if run.spin_up_pair.get(&method) == Some(&false) {
                    spin_up_failures += 1;
                }
                if let Some(t) = track_out.as_mut() {
                    for rec in recs {
                        t.row([
                            method.name(),
                            &sigma.to_string(),
                            &run.run.to_string(),
                            &rec.step.to_string(),
                            &rec.true_argument.to_string(),
                            &rec.est_modulus.to_string(),
                            &rec.est_argument.to_string(),
                            &rec.pair_detected.to_string(),
                        ])?;
                    }
                }
            }
            let n = runs.len();
            summary.serialize(&metric(method.name(), sigma, "mean_modulus_error", mean(&mod_errs), n, cfg.seed))?;
            summary.serialize(&metric(method.name(), sigma, "median_modulus_error", percentile(&mod_errs, 50.0), n, cfg.seed))?;
            let abs_arg: Vec<f64> = arg_errs.iter().map(|a| a.abs()).collect();
            summary.serialize(&metric(method.name(), sigma, "mean_abs_argument_error", mean(&abs_arg), n, cfg.seed))?;
            summary.serialize(&metric(method.name(), sigma, "mean_argument_error", mean(&arg_errs), n, cfg.seed))?;
            if matches!(method, Method::Dmdenkf | Method::Hankel) {
                summary.serialize(&metric(method.name(), sigma, "spin_up_pair_failure_rate", spin_up_failures as f64 / n as f64, n, cfg.seed))?;
            }
            let (below, bins, above) = histogram(&arg_errs);
            let width = 2.0 * ARG_HIST_RANGE / ARG_HIST_BINS as f64;
            dist.row([method.name(), &sigma.to_string(), "-inf", &(-ARG_HIST_RANGE).to_string(), &below.to_string()])?;
            for (i, c) in bins.iter().enumerate() {
                let lo = -ARG_HIST_RANGE + i as f64 * width;
                dist.row([method.name(), &sigma.to_string(), &lo.to_string(), &(lo + width).to_string(), &c.to_string()])?;
            }
            dist.row([method.name(), &sigma.to_string(), &ARG_HIST_RANGE.to_string(), "inf", &above.to_string()])?;
        }
    }
    let mut out = vec![summary.finish()?, per_run.finish()?, dist.finish()?];
    if let Some(t) = track_out {
        out.push(t.finish()?);
    }
    Ok(out)
}

/// DMDEnKF argument MSE against ensemble size, with a particle filter on
/// the same spin-up model as reference.
pub fn cmd_enkf_vs_pf(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let echo = cfg.echo();
    let mut per_run = EchoCsv::create(&cfg.out, "enkf_vs_pf_runs.csv", &echo, &["sigma", "run", "filter", "pair_detected", "mse"])?;
    let mut summary = EchoCsv::create(&cfg.out, "enkf_vs_pf_summary.csv", &echo, &["sigma", "filter", "subset", "mean_mse", "n_runs"])?;
    for &sigma in &cfg.sigma {
        log::info!("enkf-vs-pf: sigma {sigma}, {} runs, {} particles", cfg.runs, cfg.pf.particles);
        let runs = par_runs(cfg.workers, cfg.runs, |r| {
            Ok(filter_compare_run(&cfg.rotation, sigma, r, cfg.seed, &cfg.pf.ensemble_sizes, cfg.pf.particles)?)
        })?;
        let mut all: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut ok: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in &runs {
            for (label, mse) in &run.mse {
                per_run.row([&sigma.to_string(), &run.run.to_string(), label, &run.pair_detected.to_string(), &mse.to_string()])?;
                all.entry(label.clone()).or_default().push(*mse);
                if run.pair_detected {
                    ok.entry(label.clone()).or_default().push(*mse);
                }
            }
        }
        for label in filter_order(all.keys()) {
            for (subset, map) in [("all", &all), ("pair_detected", &ok)] {
                let v = map.get(&label).map(|v| v.as_slice()).unwrap_or(&[]);
                summary.row([&sigma.to_string(), &label, subset, &mean(v).to_string(), &v.len().to_string()])?;
            }
        }
    }
    Ok(vec![per_run.finish()?, summary.finish()?])
}

/// `enkf_N` labels by increasing N, then `pf`.
fn filter_order<'a>(labels: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut v: Vec<String> = labels.cloned().collect();
    v.sort_by_key(|l| l.strip_prefix("enkf_").and_then(|n| n.parse::<usize>().ok()).unwrap_or(usize::MAX));
    v
}

/// Pandemic study: mean-run relative errors of 50-step forecasts.
pub fn cmd_synth_pandemic(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let echo = cfg.echo();
    let mut per_run = EchoCsv::create(&cfg.out, "pandemic_runs.csv", &echo, &["method", "sigma", "run", "seed", "mean_relative_error"])?;
    let mut summary = EchoCsv::create(&cfg.out, "pandemic_summary.csv", &echo, &metric_header())?;
    for &sigma in &cfg.sigma {
        log::info!("synth-pandemic: sigma {sigma}, {} runs", cfg.runs);
        let runs = par_runs(cfg.workers, cfg.runs, |r| Ok(pandemic_run(&cfg.pandemic, sigma, r, cfg.seed, &cfg.methods)?))?;
        for &method in &cfg.methods {
            let errs: Vec<f64> = runs.iter().map(|r| r.mean_error[&method]).collect();
            for run in &runs {
                per_run.row([method.name(), &sigma.to_string(), &run.run.to_string(), &run.seed.to_string(), &run.mean_error[&method].to_string()])?;
            }
            let n = errs.len();
            summary.serialize(&metric(method.name(), sigma, "mean_error", mean(&errs), n, cfg.seed))?;
            summary.serialize(&metric(method.name(), sigma, "median_error", percentile(&errs, 50.0), n, cfg.seed))?;
            if n >= 4 {
                summary.serialize(&metric(method.name(), sigma, "outlier_rate_iqr", outlier_rate_iqr(&errs)?, n, cfg.seed))?;
            }
        }
    }
    Ok(vec![per_run.finish()?, summary.finish()?])
}

#[derive(Serialize)]
struct IliMetricsFile<'a> {
    config: serde_json::Value,
    source: String,
    weeks: usize,
    forward_filled_weeks: usize,
    spin_up_weeks: usize,
    alpha1: f64,
    alpha2: f64,
    meas_var: f64,
    clamped_values: usize,
    metrics: &'a [dmdenkf::ili::IliMetricRow],
}

/// ILI forecasting experiment on a data file or the synthetic fixture.
pub fn cmd_ili(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let ili = &cfg.ili;
    let (records, census, source) = match &ili.data {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Data(format!("data file {} not found", path.display())));
            }
            let load = load_ili_csv(path)?;
            let census = ili.census.as_deref().map(load_census_csv).transpose()?;
            (load.records, census, path.display().to_string())
        }
        None => {
            let spec = dmdenkf::ili::IliFixtureSpec {
                seed: cfg.seed,
                ..ili.fixture.clone()
            };
            let fx = gen_ili_fixture(&spec)?;
            (fx.records, Some(Census::new(&fx.census)?), "fixture".to_string())
        }
    };
    let series = weekly_series(&records, census.as_ref())?;
    let exp_cfg = dmdenkf::ili::IliExperimentConfig {
        seed: cfg.seed,
        ..ili.experiment.clone()
    };
    let result = run_ili_experiment(&series, &exp_cfg)?;
    let echo = cfg.echo();
    let mut fc = EchoCsv::create(
        &cfg.out,
        "ili_forecasts.csv",
        &echo,
        &["method", "horizon", "year", "week", "truth", "point", "lower", "upper", "prob_within"],
    )?;
    for row in &result.forecasts {
        fc.serialize(row)?;
    }
    let mut out = vec![fc.finish()?];
    out.push(write_json(
        &cfg.out,
        "ili_metrics.json",
        &IliMetricsFile {
            config: cfg.echo_value(),
            source,
            weeks: series.len(),
            forward_filled_weeks: series.filled.len(),
            spin_up_weeks: result.spin_up_weeks,
            alpha1: result.alpha1,
            alpha2: result.alpha2,
            meas_var: result.meas_var,
            clamped_values: result.clamped_values,
            metrics: &result.metrics,
        },
    )?);
    if !ili.rank_sweep.is_empty() {
        let ranks = &ili.rank_sweep;
        let rows = par_runs(cfg.workers, ranks.len(), |i| Ok(rank_sweep(&series, &exp_cfg, &ranks[i..=i])?))?;
        let mut sweep = EchoCsv::create(&cfg.out, "ili_rank_sweep.csv", &echo, &["method", "rank", "horizon", "log_score", "mse", "n_weeks"])?;
        for row in rows.iter().flatten().filter(|r| r.horizon == exp_cfg.max_horizon) {
            sweep.serialize(row)?;
        }
        out.push(sweep.finish()?);
    }
    Ok(out)
}

/// Writes one rotation and one pandemic series per sigma (run 0).
pub fn cmd_export_synthetic(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut out = Vec::new();
    for &sigma in &cfg.sigma {
        let seed = derive_seed(cfg.seed, 0);
        let rot = gen_rotation(&rotation_series_spec(&cfg.rotation, sigma, derive_seed(seed, 1)));
        let path = cfg.out.join(format!("rotation_sigma{sigma}.csv"));
        rot.write_csv(BufWriter::new(File::create(&path)?))?;
        out.push(path);
        let pan = gen_pandemic(&PandemicSeriesSpec {
            steps: cfg.pandemic.steps,
            gamma_start: cfg.pandemic.gamma_start,
            gamma_end: cfg.pandemic.gamma_end,
            seed_a: derive_seed(seed, 10),
            seed_noise: derive_seed(seed, 11),
            sigma,
            ..Default::default()
        });
        let path = cfg.out.join(format!("pandemic_sigma{sigma}.csv"));
        pan.series.write_csv(BufWriter::new(File::create(&path)?))?;
        out.push(path);
    }
    Ok(out)
}

/// Writes the synthetic ILI fixture and its census table.
pub fn cmd_export_ili_fixture(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(&cfg.out)?;
    let fx = gen_ili_fixture(&dmdenkf::ili::IliFixtureSpec {
        seed: cfg.seed,
        ..cfg.ili.fixture.clone()
    })?;
    let data = cfg.out.join("ili_fixture.csv");
    write_ili_csv(&fx.records, BufWriter::new(File::create(&data)?))?;
    let census = cfg.out.join("ili_fixture_census.csv");
    write_census_csv(&fx.census, BufWriter::new(File::create(&census)?))?;
    Ok(vec![data, census])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let v = [-1.0, 0.0, 0.1, ARG_HIST_RANGE, -ARG_HIST_RANGE];
        let (below, bins, above) = histogram(&v);
        assert_eq!(below, 1);
        assert_eq!(above, 1);
        assert_eq!(bins.iter().sum::<usize>(), 3);
        assert_eq!(bins[0], 1);
        assert_eq!(bins[ARG_HIST_BINS / 2], 1);
    }

    #[test]
    fn filters_sorted_by_size() {
        let labels = ["pf", "enkf_50", "enkf_5", "enkf_10"].map(String::from);
        assert_eq!(filter_order(labels.iter()), vec!["enkf_5", "enkf_10", "enkf_50", "pf"]);
    }

    #[test]
    fn par_runs_keeps_order() {
        let v = par_runs(3, 50, |i| Ok(i * 2)).unwrap();
        assert_eq!(v, (0..50).map(|i| i * 2).collect::<Vec<_>>());
    }
}
