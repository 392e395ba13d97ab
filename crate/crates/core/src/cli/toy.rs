//! `toy` and `sweep`: guided sampling of the analytic mixture.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use crate::analytic::{ComponentDenoiser, GaussianMixture, MixtureDenoiser};
use crate::sampler::{
    calibrate_radius, mode_drift, run_mixture_batch, sample, trajectory_seed, BatchItem,
    DriftSummary, SamplerConfig,
};

use super::config::{ExperimentConfig, Radius, StrategyKind, StrategySpec};
use super::output::{num, opt_num, OutputSet};
use super::svg::{Plot, Series, Style};
use super::CliError;

/// Runs with more failed trajectories than this fraction exit with an error.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// One strategy sampled over the configured number of trajectories.
#[derive(Debug)]
pub struct StrategyRun {
    pub spec: StrategySpec,
    pub label: String,
    /// Rescale radius actually used; 0 for CFG and unguided runs.
    pub radius: f64,
    pub items: Vec<BatchItem>,
    pub drift: Option<DriftSummary>,
    pub failures: usize,
}

impl StrategyRun {
    pub fn terminals(&self) -> impl Iterator<Item = (&BatchItem, &[f64])> {
        self.items
            .iter()
            .filter_map(|it| it.result.as_ref().ok().map(|s| (it, s.z.as_slice())))
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub runs: Vec<StrategyRun>,
}

impl RunOutcome {
    pub fn total(&self) -> usize {
        self.runs.iter().map(|r| r.items.len()).sum()
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().map(|r| r.failures).sum()
    }

    /// Errors when too many trajectories failed.
    pub fn check_failures(&self) -> Result<(), CliError> {
        let (failed, total) = (self.failures(), self.total());
        if total > 0 && failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
            return Err(CliError::runtime(format!(
                "{failed} of {total} trajectories failed (limit {}%)",
                MAX_FAILURE_FRACTION * 100.0
            )));
        }
        Ok(())
    }
}

fn resolve_radius(
    spec: &StrategySpec,
    mix: &GaussianMixture,
    sampler: &SamplerConfig,
    cfg: &ExperimentConfig,
) -> Result<f64, CliError> {
    if spec.kind != StrategyKind::Apg {
        return Ok(0.0);
    }
    match spec.r {
        Radius::Fixed(r) => Ok(r),
        Radius::Auto => {
            let params = match spec.to_strategy(0.0) {
                crate::sampler::GuidanceStrategy::Apg(p) => p,
                _ => unreachable!("apg spec"),
            };
            let r = calibrate_radius(mix, &params, sampler, cfg.seed, cfg.calibration_samples)?;
            log::info!("{}: calibrated r = {r}", spec.label());
            Ok(r)
        }
    }
}

pub fn run_strategy(
    spec: &StrategySpec,
    mix: &GaussianMixture,
    sampler: &SamplerConfig,
    cfg: &ExperimentConfig,
) -> Result<StrategyRun, CliError> {
    let radius = resolve_radius(spec, mix, sampler, cfg)?;
    let strategy = spec.to_strategy(radius);
    strategy.validate()?;
    let items = run_mixture_batch(mix, &strategy, sampler, cfg.seed, cfg.samples);
    let mut failures = 0;
    for it in &items {
        if let Err(e) = &it.result {
            failures += 1;
            log::warn!("{}: trajectory {} failed: {e}", spec.label(), it.index);
        }
    }
    let terminals: Vec<Vec<f64>> = items
        .iter()
        .filter_map(|it| it.result.as_ref().ok().map(|s| s.z.clone()))
        .collect();
    let drift = if terminals.is_empty() {
        None
    } else {
        Some(mode_drift(&terminals, mix)?)
    };
    Ok(StrategyRun {
        spec: *spec,
        label: spec.label(),
        radius,
        items,
        drift,
        failures,
    })
}

fn drift_header(components: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "label",
        "kind",
        "w",
        "eta",
        "r",
        "beta",
        "count",
        "failures",
        "mean",
        "median",
        "max",
        "mean_normalized",
        "fraction_within",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..components).map(|k| format!("nearest_{k}")));
    h
}

fn drift_row(run: &StrategyRun, components: usize) -> Vec<String> {
    let s = &run.spec;
    let mut row = vec![
        run.label.clone(),
        s.kind.as_str().to_owned(),
        num(s.w),
        num(s.eta),
        num(run.radius),
        num(s.beta),
    ];
    match &run.drift {
        Some(d) => {
            row.push(d.count.to_string());
            row.push(run.failures.to_string());
            row.extend([d.mean, d.median, d.max, d.mean_normalized, d.fraction_within].map(num));
            row.extend(d.nearest_counts.iter().map(|c| c.to_string()));
        }
        None => {
            row.push("0".into());
            row.push(run.failures.to_string());
            row.extend(std::iter::repeat_n(String::new(), 5 + components));
        }
    }
    row
}

fn unique_names(runs: &[StrategyRun]) -> Vec<String> {
    let mut seen = HashSet::new();
    runs.iter()
        .enumerate()
        .map(|(i, r)| {
            let name = if seen.insert(r.label.clone()) {
                r.label.clone()
            } else {
                format!("{}_{i}", r.label)
            };
            seen.insert(name.clone());
            name
        })
        .collect()
}

fn write_samples(out: &mut OutputSet, name: &str, run: &StrategyRun, dim: usize) -> Result<(), CliError> {
    let mut header: Vec<String> = ["trajectory", "class", "seed", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("x{i}")));
    let rows: Vec<Vec<String>> = run
        .items
        .iter()
        .map(|it| {
            let mut row = vec![it.index.to_string(), it.class_index.to_string()];
            match &it.result {
                Ok(s) => {
                    row.push(s.seed.to_string());
                    row.push("ok".into());
                    row.extend(s.z.iter().map(|&v| num(v)));
                }
                Err(_) => {
                    row.push(String::new());
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), dim));
                }
            }
            row
        })
        .collect();
    out.write_csv(&format!("samples_{name}.csv"), &header, &rows)?;
    Ok(())
}

fn write_scatter(out: &mut OutputSet, name: &str, run: &StrategyRun, components: usize) -> Result<(), CliError> {
    let mut series: Vec<Series> = (0..components)
        .map(|k| Series {
            name: format!("class {k}"),
            points: Vec::new(),
        })
        .collect();
    for (it, z) in run.terminals() {
        let y = z.get(1).copied().unwrap_or(0.0);
        series[it.class_index].points.push((z[0], y));
    }
    let plot = Plot {
        title: format!("terminal samples, {}", run.label),
        x_label: "x0".into(),
        y_label: "x1".into(),
        style: Style::Markers,
        series,
    };
    out.write(&format!("scatter_{name}.svg"), plot.render().as_bytes())?;
    Ok(())
}

fn write_trajectory(
    out: &mut OutputSet,
    name: &str,
    run: &StrategyRun,
    mix: &GaussianMixture,
    sampler: &SamplerConfig,
    cfg: &ExperimentConfig,
) -> Result<(), CliError> {
    let cond = ComponentDenoiser::new(mix, 0)?;
    let uncond = MixtureDenoiser { mixture: mix };
    let strategy = run.spec.to_strategy(run.radius);
    let traj = match sample(&cond, &uncond, &strategy, sampler, trajectory_seed(cfg.seed, 0)) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("{}: trajectory dump skipped: {e}", run.label);
            return Ok(());
        }
    };
    let k = cfg.dump_coords.min(mix.dim());
    let mut header = vec!["step".to_string(), "sigma".to_string()];
    header.extend((0..k).map(|i| format!("z{i}")));
    header.push("delta_norm".into());
    header.push("gain_factor".into());
    let rows: Vec<Vec<String>> = traj
        .states
        .iter()
        .enumerate()
        .map(|(i, (sigma, z))| {
            let mut row = vec![i.to_string(), num(*sigma)];
            row.extend(z[..k].iter().map(|&v| num(v)));
            let d = traj.diagnostics.get(i);
            row.push(opt_num(d.and_then(|d| d.delta_norm)));
            row.push(opt_num(d.and_then(|d| d.gain_factor)));
            row
        })
        .collect();
    out.write_csv(&format!("trajectory_{name}.csv"), &header, &rows)?;
    Ok(())
}

fn prepare(cfg: &ExperimentConfig) -> Result<(GaussianMixture, SamplerConfig, OutputSet), CliError> {
    cfg.validate()?;
    let mix = cfg.mixture.build()?;
    let sampler = cfg.sampler.build()?;
    let out = OutputSet::create(&cfg.out)?;
    out.write_untracked(RESOLVED_CONFIG, cfg.to_toml().as_bytes())?;
    Ok((mix, sampler, out))
}

fn print_drift(runs: &[StrategyRun]) {
    println!("{:<40} {:>10} {:>10} {:>8} {:>9}", "strategy", "mean", "median", "within", "failures");
    for r in runs {
        match &r.drift {
            Some(d) => println!(
                "{:<40} {:>10.5} {:>10.5} {:>8.3} {:>9}",
                r.label, d.mean, d.median, d.fraction_within, r.failures
            ),
            None => println!("{:<40} {:>10} {:>10} {:>8} {:>9}", r.label, "-", "-", "-", r.failures),
        }
    }
}

/// Samples every configured strategy and writes samples, drift statistics,
/// scatter plots, one trajectory dump per strategy and a manifest.
pub fn cmd_toy(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let (mix, sampler, mut out) = prepare(cfg)?;
    if cfg.strategies.is_empty() {
        return Err(CliError::validation("strategies: at least one strategy is required"));
    }
    let runs = cfg
        .strategies
        .iter()
        .map(|s| run_strategy(s, &mix, &sampler, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let names = unique_names(&runs);
    let k = mix.components();
    for (run, name) in runs.iter().zip(&names) {
        write_samples(&mut out, name, run, mix.dim())?;
        write_scatter(&mut out, name, run, k)?;
        write_trajectory(&mut out, name, run, &mix, &sampler, cfg)?;
    }
    let rows: Vec<Vec<String>> = runs.iter().map(|r| drift_row(r, k)).collect();
    out.write_csv("drift.csv", &drift_header(k), &rows)?;
    let dir = out.dir().to_path_buf();
    let manifest = out.finish("toy", cfg, Some(RESOLVED_CONFIG))?;
    print_drift(&runs);
    Ok(RunOutcome {
        out: dir,
        manifest,
        runs,
    })
}

fn series_key(spec: &StrategySpec) -> String {
    match spec.kind {
        StrategyKind::None => "none".into(),
        StrategyKind::Cfg => "cfg".into(),
        StrategyKind::Apg => format!("apg eta={} r={} beta={}", spec.eta, spec.r, spec.beta),
    }
}

/// Runs every cell of the sweep grid and writes one table row per cell plus
/// a plot of mean nearest-mode distance against `w`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let cells = cfg.sweep.cells()?;
    let (mix, sampler, mut out) = prepare(cfg)?;
    let k = mix.components();
    let mut runs = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        log::info!("sweep cell {}/{}: {}", i + 1, cells.len(), cell.label());
        runs.push(run_strategy(cell, &mix, &sampler, cfg)?);
    }
    let rows: Vec<Vec<String>> = runs.iter().map(|r| drift_row(r, k)).collect();
    out.write_csv("sweep.csv", &drift_header(k), &rows)?;

    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &runs {
        let y = r.drift.as_ref().map_or(f64::NAN, |d| d.mean);
        groups.entry(series_key(&r.spec)).or_default().push((r.spec.w, y));
    }
    let series = groups
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect();
    let plot = Plot {
        title: "mean distance to nearest mode".into(),
        x_label: "guidance scale w".into(),
        y_label: "mean distance".into(),
        style: Style::Lines,
        series,
    };
    out.write("sweep.svg", plot.render().as_bytes())?;
    let dir = out.dir().to_path_buf();
    let manifest = out.finish("sweep", cfg, Some(RESOLVED_CONFIG))?;
    print_drift(&runs);
    Ok(RunOutcome {
        out: dir,
        manifest,
        runs,
    })
}
