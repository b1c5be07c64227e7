//! Monte Carlo experiments: many independent paths of one configured problem,
//! aggregated into means and standard errors at checkpoint times.
//!
//! Path `i` draws everything (initial ensemble, then all step noise) from its
//! own stream, so results do not depend on the worker count. Aggregation runs
//! single-threaded in path-index order.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::diagnostics::{record, DiagnosticsContext, DiagnosticsRecord};
use crate::dynamics::Stepper;
use crate::error::{EkiError, Result};
use crate::forward::{kl_initial_ensemble, FemModel, KlPrior};
use crate::model::{LinearForwardModel, NoiseCovariance, ObservationSetup};
use crate::rng::{path_stream, stream, SHARED_ENSEMBLE_STREAM, TRUTH_STREAM};
use crate::Ensemble;

pub use crate::config::{ExperimentConfig, TruthMode};

/// The inverse problem an experiment solves, built once from its config.
#[derive(Debug, Clone)]
pub struct Problem {
    pub fem: FemModel,
    pub model: LinearForwardModel,
    pub prior: KlPrior,
    pub setup: ObservationSetup,
}

impl Problem {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let fem = FemModel::assemble(config.forward.n_cells(), config.forward.observations.points())?;
        let noise = NoiseCovariance::isotropic(fem.obs_points().len(), config.forward.noise_std)?;
        let model = LinearForwardModel::new(fem.build_a(), noise)?;
        let prior = KlPrior::new(&fem, config.prior.beta, config.modes())?;
        let setup = match config.truth_mode {
            TruthMode::SyntheticTruth => {
                let truth = prior.draw(&mut stream(config.base_seed, TRUTH_STREAM));
                ObservationSetup::noise_free(&model, truth)?
            }
            TruthMode::GivenData => {
                let y = config.data.clone().expect("validated");
                ObservationSetup::new(&model, DVector::from_vec(y), None, false)?
            }
        };
        Ok(Self {
            fem,
            model,
            prior,
            setup,
        })
    }
}

/// Across-path mean and standard error of one diagnostic at each checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl MomentSeries {
    /// Builds the series from `values[path][checkpoint]`. The standard error is
    /// the sample standard deviation over `√Q`, and zero when `Q = 1`.
    pub fn from_paths(values: &[Vec<f64>]) -> Self {
        let q = values.len();
        let n = values.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; n];
        let mut se = vec![0.0; n];
        for c in 0..n {
            let m = values.iter().map(|v| v[c]).sum::<f64>() / q as f64;
            mean[c] = m;
            if q > 1 {
                let var = values.iter().map(|v| (v[c] - m).powi(2)).sum::<f64>() / (q - 1) as f64;
                se[c] = (var / q as f64).sqrt();
            }
        }
        Self { mean, se }
    }

    pub fn last_mean(&self) -> f64 {
        *self.mean.last().expect("nonempty series")
    }
}

/// Monte Carlo summary of every diagnostic at the checkpoint times.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub times: Vec<f64>,
    pub q_effective: usize,
    pub v_obs: MomentSeries,
    pub v_param: MomentSeries,
    pub v_obs_p: MomentSeries,
    pub r_obs: Option<MomentSeries>,
    pub r_param: Option<MomentSeries>,
    pub v_lyap: MomentSeries,
}

impl MomentSummary {
    /// Aggregates `paths[i]` (the records of path `i`), which must all share
    /// the same checkpoint times.
    pub fn aggregate(paths: &[Vec<DiagnosticsRecord>]) -> Self {
        assert!(!paths.is_empty(), "need at least one path");
        let field = |f: &dyn Fn(&DiagnosticsRecord) -> f64| {
            let values: Vec<Vec<f64>> = paths.iter().map(|p| p.iter().map(f).collect()).collect();
            MomentSeries::from_paths(&values)
        };
        let has_truth = paths[0].first().is_some_and(|r| r.r_obs.is_some());
        Self {
            times: paths[0].iter().map(|r| r.t).collect(),
            q_effective: paths.len(),
            v_obs: field(&|r| r.v_obs),
            v_param: field(&|r| r.v_param),
            v_obs_p: field(&|r| r.v_obs_p),
            r_obs: has_truth.then(|| field(&|r| r.r_obs.unwrap_or(f64::NAN))),
            r_param: has_truth.then(|| field(&|r| r.r_param.unwrap_or(f64::NAN))),
            v_lyap: field(&|r| r.v_lyap),
        }
    }
}

/// Records and final ensemble mean of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub records: Vec<DiagnosticsRecord>,
    pub final_mean: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: MomentSummary,
    /// Per-path records, kept when the config asks for them.
    pub paths: Option<Vec<PathOutcome>>,
    /// Monte Carlo mean of the final ensemble mean `ū(T)`.
    pub mean_final_estimate: DVector<f64>,
    pub problem: Problem,
}

/// Builds the problem described by `config` and runs it. `threads` caps the
/// worker count; `None` uses every available core.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentOutput> {
    let problem = Problem::from_config(config)?;
    run_on_problem(config, problem, threads)
}

/// Runs `config` on an already built problem, so that paired experiments can
/// share the same forward model and data.
pub fn run_on_problem(config: &ExperimentConfig, problem: Problem, threads: Option<usize>) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| EkiError::InvalidParameter {
        name: "threads".into(),
        message: e.to_string(),
    })?;
    let outcomes = pool.install(|| run_paths(config, &problem, 0..config.paths))?;
    let records: Vec<Vec<DiagnosticsRecord>> = outcomes.iter().map(|o| o.records.clone()).collect();
    let summary = MomentSummary::aggregate(&records);
    let mut mean_final_estimate = DVector::zeros(problem.model.param_dim());
    for o in &outcomes {
        mean_final_estimate += &o.final_mean;
    }
    mean_final_estimate /= outcomes.len() as f64;
    Ok(ExperimentOutput {
        summary,
        paths: config.keep_paths.then_some(outcomes),
        mean_final_estimate,
        problem,
    })
}

/// Runs the given path indices in parallel on the current rayon pool and
/// returns their outcomes in index order. The first failing path by index
/// determines the returned error.
pub fn run_paths(
    config: &ExperimentConfig,
    problem: &Problem,
    paths: std::ops::Range<usize>,
) -> Result<Vec<PathOutcome>> {
    let step_config = config.step_config()?;
    let stepper = Stepper::new(&problem.model, &problem.setup.y, &step_config)?;
    let ctx = DiagnosticsContext::new(
        &problem.model,
        &problem.setup.y,
        problem.setup.u_truth.clone(),
        config.p,
    )?;
    let checkpoints = config.checkpoint_steps()?;
    let total = config.total_steps()?;
    let shared = if config.fix_initial_ensemble {
        let mut rng = stream(config.base_seed, SHARED_ENSEMBLE_STREAM);
        Some(kl_initial_ensemble(&problem.prior, config.ensemble_size, &mut rng)?)
    } else {
        None
    };
    let results: Vec<Result<PathOutcome>> = paths
        .into_par_iter()
        .map(|i| {
            let run = PathRun {
                index: i,
                config,
                problem,
                stepper: &stepper,
                ctx: &ctx,
                checkpoints: &checkpoints,
                total,
            };
            run.execute(shared.as_ref())
        })
        .collect();
    results.into_iter().collect()
}

struct PathRun<'a> {
    index: usize,
    config: &'a ExperimentConfig,
    problem: &'a Problem,
    stepper: &'a Stepper<'a>,
    ctx: &'a DiagnosticsContext<'a>,
    checkpoints: &'a [usize],
    total: usize,
}

impl PathRun<'_> {
    fn execute(&self, shared: Option<&Ensemble>) -> Result<PathOutcome> {
        let mut rng = path_stream(self.config.base_seed, self.index);
        let mut ens = match shared {
            Some(e) => e.clone(),
            None => kl_initial_ensemble(&self.problem.prior, self.config.ensemble_size, &mut rng)?,
        };
        let dt = self.config.dt;
        let mut records = Vec::with_capacity(self.checkpoints.len());
        let mut next = self.checkpoints.iter().peekable();
        for n in 0..=self.total {
            let t = n as f64 * dt;
            if next.peek() == Some(&&n) {
                next.next();
                let rec = record(&ens, self.ctx, t)?;
                if !record_is_finite(&rec) {
                    return Err(self.abort(n, &rec, "non-finite diagnostics".into()));
                }
                records.push(rec);
            }
            if n == self.total {
                break;
            }
            ens = match self.stepper.step(&ens, t, &mut rng) {
                Ok(e) => e,
                Err(e @ (EkiError::NonFinite(_) | EkiError::Cholesky(_))) => {
                    let rec = record(&ens, self.ctx, t)?;
                    return Err(self.abort(n, &rec, e.to_string()));
                }
                Err(e) => return Err(e),
            };
        }
        Ok(PathOutcome {
            records,
            final_mean: ens.mean(),
        })
    }

    fn abort(&self, step: usize, rec: &DiagnosticsRecord, cause: String) -> EkiError {
        EkiError::NumericalAbort {
            path: self.index,
            step,
            snapshot: format!(
                "{cause}; state at t = {}: V_obs = {:e}, V_param = {:e}, R_obs = {:?}",
                rec.t, rec.v_obs, rec.v_param, rec.r_obs
            ),
        }
    }
}

fn record_is_finite(r: &DiagnosticsRecord) -> bool {
    [
        r.v_obs,
        r.v_param,
        r.v_obs_p,
        r.v_lyap,
        r.r_obs.unwrap_or(0.0),
        r.r_param.unwrap_or(0.0),
    ]
    .iter()
    .all(|x| x.is_finite())
}
