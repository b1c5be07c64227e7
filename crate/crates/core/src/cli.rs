//! The experiment commands behind the `eki` binary.
//!
//! Each command runs one experiment family and writes CSV tables (and, unless
//! disabled, SVG charts) into an output directory. Commands return their
//! in-memory results so tests can inspect them without re-reading files.

use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::config::ExperimentConfig;
use crate::diagnostics::{bound_thm2, bound_thm3, c_constant, rate_slope, DiagnosticsRecord};
use crate::error::{EkiError, Result};
use crate::montecarlo::{run_on_problem, ExperimentOutput, MomentSeries, MomentSummary, Problem};
use crate::output::{fmt_f64, CsvTable, LineChart, Series};

/// Settings shared by every command.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
    pub svg: bool,
    /// Replaces the config's base seed.
    pub seed: Option<u64>,
}

/// Built-in experiment definitions, also shipped under `configs/`.
pub mod presets {
    pub const COLLAPSE: &str = include_str!("../configs/collapse_j5.json");
    pub const COLLAPSE_J15: &str = include_str!("../configs/collapse_j15.json");
    /// Euler–Maruyama run of the continuous-time dynamics at unit noise level.
    pub const COLLAPSE_SDE: &str = include_str!("../configs/collapse_sde_j5.json");
    pub const PATHS: &str = include_str!("../configs/paths_j5.json");
    pub const PATHS_J15: &str = include_str!("../configs/paths_j15.json");
    pub const INFLATION: &str = include_str!("../configs/inflation_j15.json");
    pub const LOWDIM: &str = include_str!("../configs/lowdim.json");
}

/// Reads the config at `path`, or parses `preset` when no path is given, and
/// applies the seed override.
pub fn load_config(path: Option<&Path>, preset: &str, options: &RunOptions) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::from_json_str(preset)?,
    };
    if let Some(seed) = options.seed {
        config.base_seed = seed;
    }
    Ok(config)
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn series_points(times: &[f64], values: &[f64]) -> Vec<(f64, f64)> {
    times.iter().copied().zip(values.iter().copied()).collect()
}

/// Result of [`cmd_collapse`].
#[derive(Debug, Clone)]
pub struct CollapseReport {
    pub summary: MomentSummary,
    pub bound_second: Vec<f64>,
    /// `None` when `p` is outside the admissible range for the `p`-moment bound.
    pub bound_p: Option<Vec<f64>>,
    pub files: Vec<PathBuf>,
}

/// Collapse experiment: Monte Carlo spread moments against both bounds, with
/// the initial constants taken from the Monte Carlo means at `t = 0`.
pub fn cmd_collapse(config: &ExperimentConfig, out: &Path, options: &RunOptions) -> Result<CollapseReport> {
    if config.checkpoint_steps()?.first() != Some(&0) {
        return Err(EkiError::Config {
            field: "checkpoints".into(),
            message: "the collapse bounds need a checkpoint at t = 0".into(),
        });
    }
    let problem = Problem::from_config(config)?;
    let k = problem.model.obs_dim();
    let output = run_on_problem(config, problem, options.threads)?;
    let s = output.summary;
    let j = config.ensemble_size;
    let c0 = s.v_obs.mean[0];
    let v0 = s.v_obs_p.mean[0];
    let bound_second: Vec<f64> = s.times.iter().map(|&t| bound_thm2(t, j, c0)).collect();
    let bound_p: Option<Vec<f64>> = s
        .times
        .iter()
        .map(|&t| bound_thm3(t, config.p, j, k, v0).ok())
        .collect();

    prepare_out_dir(out)?;
    let mut table = CsvTable::new(&[
        "t",
        "mean_V_obs",
        "se_V_obs",
        "bound_thm2",
        "mean_V_obs_p",
        "se_V_obs_p",
        "bound_thm3",
        "mean_V_param",
        "se_V_param",
    ]);
    for (i, &t) in s.times.iter().enumerate() {
        table.push(&[
            t,
            s.v_obs.mean[i],
            s.v_obs.se[i],
            bound_second[i],
            s.v_obs_p.mean[i],
            s.v_obs_p.se[i],
            bound_p.as_ref().map_or(f64::NAN, |b| b[i]),
            s.v_param.mean[i],
            s.v_param.se[i],
        ]);
    }
    let mut files = vec![out.join("moments.csv")];
    table.write(&files[0])?;
    if options.svg {
        let mut chart = LineChart::new(format!("Ensemble collapse, J = {j}"), "t", "moment")
            .log_log()
            .with(Series::new("mean V_obs", series_points(&s.times, &s.v_obs.mean)))
            .with(Series::new("second-moment bound", series_points(&s.times, &bound_second)).dashed())
            .with(Series::new(
                format!("mean p-moment (p = {})", config.p),
                series_points(&s.times, &s.v_obs_p.mean),
            ));
        if let Some(b) = &bound_p {
            chart = chart.with(Series::new("p-moment bound", series_points(&s.times, b)).dashed());
        }
        let path = out.join("collapse.svg");
        chart.write(&path)?;
        files.push(path);
    }
    Ok(CollapseReport {
        summary: s,
        bound_second,
        bound_p,
        files,
    })
}

/// Least-squares log-log slope of each path's `V_obs` over `window`; `NaN`
/// when the fit is undefined (for example a zero-spread path).
pub fn path_slopes(paths: &[Vec<DiagnosticsRecord>], window: (f64, f64)) -> Vec<f64> {
    paths
        .iter()
        .map(|recs| {
            let times: Vec<f64> = recs.iter().map(|r| r.t).collect();
            let values: Vec<f64> = recs.iter().map(|r| r.v_obs).collect();
            rate_slope(&times, &values, window).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Result of [`cmd_paths`].
#[derive(Debug, Clone)]
pub struct PathsReport {
    pub window: (f64, f64),
    pub slopes: Vec<f64>,
    pub files: Vec<PathBuf>,
}

/// Individual path trajectories of the spread and their late-window rates.
pub fn cmd_paths(config: &ExperimentConfig, out: &Path, options: &RunOptions) -> Result<PathsReport> {
    let mut config = config.clone();
    config.keep_paths = true;
    let problem = Problem::from_config(&config)?;
    let output = run_on_problem(&config, problem, options.threads)?;
    let records: Vec<Vec<DiagnosticsRecord>> = output
        .paths
        .expect("paths kept")
        .into_iter()
        .map(|p| p.records)
        .collect();
    let window = config.rate_window();
    let slopes = path_slopes(&records, window);

    prepare_out_dir(out)?;
    let mut table = CsvTable::new(&["path", "t", "norm_e", "V_obs"]);
    for (i, recs) in records.iter().enumerate() {
        for r in recs {
            table.push_cells(vec![
                i.to_string(),
                fmt_f64(r.t),
                fmt_f64(r.v_obs.sqrt()),
                fmt_f64(r.v_obs),
            ]);
        }
    }
    let mut files = vec![out.join("paths.csv"), out.join("slopes.csv")];
    table.write(&files[0])?;
    let mut slope_table = CsvTable::new(&["path", "window_lo", "window_hi", "slope_V_obs"]);
    for (i, &s) in slopes.iter().enumerate() {
        slope_table.push_cells(vec![i.to_string(), fmt_f64(window.0), fmt_f64(window.1), fmt_f64(s)]);
    }
    slope_table.write(&files[1])?;
    if options.svg {
        let mut chart = LineChart::new(
            format!("Spread paths, J = {}", config.ensemble_size),
            "t",
            "root mean square |e|",
        )
        .log_log();
        for (i, recs) in records.iter().enumerate() {
            chart = chart.with(Series::new(
                format!("path {i}"),
                recs.iter().map(|r| (r.t, r.v_obs.sqrt())).collect(),
            ));
        }
        let path = out.join("paths.svg");
        chart.write(&path)?;
        files.push(path);
    }
    Ok(PathsReport { window, slopes, files })
}

/// Result of [`cmd_inflation`]: matched runs without and with inflation.
#[derive(Debug, Clone)]
pub struct InflationReport {
    pub baseline: ExperimentOutput,
    pub inflated: ExperimentOutput,
    pub window: (f64, f64),
    /// Late-window log-log slope of the Monte Carlo mean of `R_obs`.
    pub slope_r_obs_baseline: f64,
    pub slope_r_obs_inflated: f64,
    pub files: Vec<PathBuf>,
}

impl InflationReport {
    pub fn final_r_obs(&self) -> (f64, f64) {
        let last = |o: &ExperimentOutput| o.summary.r_obs.as_ref().map_or(f64::NAN, MomentSeries::last_mean);
        (last(&self.baseline), last(&self.inflated))
    }
}

/// The config of the non-inflated arm paired with an inflated config.
pub fn baseline_arm(config: &ExperimentConfig) -> ExperimentConfig {
    let mut base = config.clone();
    base.scheme = config.scheme.without_inflation();
    base.inflation = None;
    base
}

/// Runs the inflated config and its non-inflated twin with shared seeds and a
/// shared problem, then writes residual, spread and estimate comparisons.
pub fn cmd_inflation(config: &ExperimentConfig, out: &Path, options: &RunOptions) -> Result<InflationReport> {
    if !config.scheme.is_inflated() {
        return Err(EkiError::Config {
            field: "scheme".into(),
            message: "the inflation comparison needs an inflated scheme".into(),
        });
    }
    let problem = Problem::from_config(config)?;
    if problem.setup.u_truth.is_none() {
        return Err(EkiError::Config {
            field: "truth_mode".into(),
            message: "residual comparisons need a synthetic truth".into(),
        });
    }
    let baseline = run_on_problem(&baseline_arm(config), problem.clone(), options.threads)?;
    let inflated = run_on_problem(config, problem, options.threads)?;
    let window = config.rate_window();
    let slope = |o: &ExperimentOutput| {
        let r = o.summary.r_obs.as_ref().expect("truth known");
        rate_slope(&o.summary.times, &r.mean, window).unwrap_or(f64::NAN)
    };
    let slope_r_obs_baseline = slope(&baseline);
    let slope_r_obs_inflated = slope(&inflated);

    prepare_out_dir(out)?;
    let (b, v) = (&baseline.summary, &inflated.summary);
    let (br, vr) = (b.r_obs.as_ref().expect("truth"), v.r_obs.as_ref().expect("truth"));
    let (bp, vp) = (b.r_param.as_ref().expect("truth"), v.r_param.as_ref().expect("truth"));

    let mut residuals = CsvTable::new(&[
        "t",
        "mean_R_obs_no_vi",
        "se_R_obs_no_vi",
        "mean_R_obs_vi",
        "se_R_obs_vi",
        "mean_R_param_no_vi",
        "se_R_param_no_vi",
        "mean_R_param_vi",
        "se_R_param_vi",
    ]);
    let mut spread = CsvTable::new(&[
        "t",
        "mean_V_obs_no_vi",
        "se_V_obs_no_vi",
        "mean_V_obs_vi",
        "se_V_obs_vi",
        "mean_V_param_no_vi",
        "se_V_param_no_vi",
        "mean_V_param_vi",
        "se_V_param_vi",
    ]);
    for (i, &t) in b.times.iter().enumerate() {
        residuals.push(&[
            t, br.mean[i], br.se[i], vr.mean[i], vr.se[i], bp.mean[i], bp.se[i], vp.mean[i], vp.se[i],
        ]);
        spread.push(&[
            t,
            b.v_obs.mean[i],
            b.v_obs.se[i],
            v.v_obs.mean[i],
            v.v_obs.se[i],
            b.v_param.mean[i],
            b.v_param.se[i],
            v.v_param.mean[i],
            v.v_param.se[i],
        ]);
    }

    let problem = &inflated.problem;
    let truth = problem.setup.u_truth.as_ref().expect("truth");
    let mut estimates_param = CsvTable::new(&["x", "truth", "mean_estimate_no_vi", "mean_estimate_vi"]);
    for (i, x) in problem.fem.nodes().into_iter().enumerate() {
        estimates_param.push(&[
            x,
            truth[i],
            baseline.mean_final_estimate[i],
            inflated.mean_final_estimate[i],
        ]);
    }
    let image = |u: &DVector<f64>| problem.model.apply(u);
    let (img_b, img_v) = (
        image(&baseline.mean_final_estimate),
        image(&inflated.mean_final_estimate),
    );
    let mut estimates_obs = CsvTable::new(&["x", "data", "mean_estimate_no_vi", "mean_estimate_vi"]);
    for (i, &x) in problem.fem.obs_points().iter().enumerate() {
        estimates_obs.push(&[x, problem.setup.y[i], img_b[i], img_v[i]]);
    }
    let mut summary = CsvTable::new(&["arm", "final_R_obs", "final_R_param", "final_V_obs", "slope_R_obs"]);
    for (name, o, s) in [
        ("no_vi", &baseline, slope_r_obs_baseline),
        ("vi", &inflated, slope_r_obs_inflated),
    ] {
        let sm = &o.summary;
        summary.push_cells(vec![
            name.to_string(),
            fmt_f64(sm.r_obs.as_ref().expect("truth").last_mean()),
            fmt_f64(sm.r_param.as_ref().expect("truth").last_mean()),
            fmt_f64(sm.v_obs.last_mean()),
            fmt_f64(s),
        ]);
    }

    let mut files = Vec::new();
    for (name, table) in [
        ("residuals.csv", &residuals),
        ("spread.csv", &spread),
        ("estimates_param.csv", &estimates_param),
        ("estimates_obs.csv", &estimates_obs),
        ("inflation_summary.csv", &summary),
    ] {
        let path = out.join(name);
        table.write(&path)?;
        files.push(path);
    }
    if options.svg {
        let chart = LineChart::new(
            format!("With and without inflation, J = {}", config.ensemble_size),
            "t",
            "Monte Carlo mean",
        )
        .log_log()
        .with(Series::new(
            "R_obs without inflation",
            series_points(&b.times, &br.mean),
        ))
        .with(Series::new("R_obs with inflation", series_points(&v.times, &vr.mean)))
        .with(Series::new("V_obs without inflation", series_points(&b.times, &b.v_obs.mean)).dashed())
        .with(Series::new("V_obs with inflation", series_points(&v.times, &v.v_obs.mean)).dashed());
        let path = out.join("inflation.svg");
        chart.write(&path)?;
        files.push(path);
        let nodes = problem.fem.nodes();
        let chart = LineChart::new("Final estimates in parameter space", "x", "u")
            .with(Series::new("truth", series_points(&nodes, truth.as_slice())))
            .with(Series::new(
                "without inflation",
                series_points(&nodes, baseline.mean_final_estimate.as_slice()),
            ))
            .with(Series::new(
                "with inflation",
                series_points(&nodes, inflated.mean_final_estimate.as_slice()),
            ));
        let path = out.join("estimates.svg");
        chart.write(&path)?;
        files.push(path);
    }
    Ok(InflationReport {
        baseline,
        inflated,
        window,
        slope_r_obs_baseline,
        slope_r_obs_inflated,
        files,
    })
}

/// Grids of the collapse constants and bounds as one long-format table.
pub fn bounds_table() -> CsvTable {
    let mut table = CsvTable::new(&["quantity", "J", "K", "p", "t", "initial_moment", "value"]);
    let row = |q: &str, j: usize, k: usize, p: f64, t: f64, m: f64, v: f64| {
        vec![
            q.to_string(),
            j.to_string(),
            k.to_string(),
            fmt_f64(p),
            fmt_f64(t),
            fmt_f64(m),
            fmt_f64(v),
        ]
    };
    for j in 2..=20 {
        for p in 2..=(j + 3) {
            let p = p as f64;
            table.push_cells(row("c_constant", j, 0, p, f64::NAN, f64::NAN, c_constant(p, j)));
        }
    }
    let times = [0.0, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0];
    for j in [5, 15] {
        for &t in &times {
            table.push_cells(row("bound_thm2", j, 0, 2.0, t, 1.0, bound_thm2(t, j, 1.0)));
        }
        let p = ((j + 3) / 2 - 1) as f64;
        for &t in &times {
            let v = bound_thm3(t, p, j, 15, 1.0).expect("admissible p");
            table.push_cells(row("bound_thm3", j, 15, p, t, 1.0, v));
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(times: &[f64], f: impl Fn(f64) -> f64) -> Vec<DiagnosticsRecord> {
        times
            .iter()
            .map(|&t| DiagnosticsRecord {
                t,
                v_obs: f(t),
                v_param: 0.0,
                v_obs_p: 0.0,
                r_obs: None,
                r_param: None,
                v_lyap: 0.0,
            })
            .collect()
    }

    #[test]
    fn slope_pipeline_recovers_power_law() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let slopes = path_slopes(&[synthetic(&times, |t| 2.0 / t)], (1.0, 10.0));
        assert!((slopes[0] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn slope_pipeline_reports_nan_for_zero_spread() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let slopes = path_slopes(&[synthetic(&times, |_| 0.0)], (1.0, 10.0));
        assert!(slopes[0].is_nan());
    }

    #[test]
    fn presets_parse() {
        for text in [
            presets::COLLAPSE,
            presets::COLLAPSE_J15,
            presets::COLLAPSE_SDE,
            presets::PATHS,
            presets::PATHS_J15,
            presets::INFLATION,
            presets::LOWDIM,
        ] {
            ExperimentConfig::from_json_str(text).unwrap();
        }
    }

    #[test]
    fn bounds_table_shape() {
        let t = bounds_table();
        let c_rows: usize = (2..=20).map(|j| j + 2).sum();
        assert_eq!(t.len(), c_rows + 2 * 2 * 7);
        assert!(t.render().starts_with("quantity,J,K,p,t,initial_moment,value\n"));
    }
}
