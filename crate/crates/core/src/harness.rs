//! Experiment runner: JSON configs, seeded multi-trial runs, CSV/JSON output
//! and summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acb::{run_acb, AcbConfig, EpochTrace, RateMode};
use crate::alb_dim::{
    bitmask_hex, compute_t0, nested_second_moment, run_alb_dim_continuum, run_alb_dim_finite, run_oful_prefix,
    run_oful_restricted, AlbConfig, EigenSource, PhaseTrace,
};
use crate::domain::RunOutcome;
use crate::envs::{build_separated_ladder, FiniteLadder, LadderSpec, NestedFeatureInstance, SparseLinearInstance};
use crate::error::{Error, Result};
use crate::etc_algo::run_etc;
use crate::falcon::{run_falcon, FitWindow};
use crate::linear_base::feature_scale_b;
use crate::oracle::LinearLadder;
use crate::rng::{Purpose, RngStream, TrialRng};

pub const CSV_HEADER: &str = "trial,algorithm,t,inst_regret,cum_regret,epoch,selected";

/// Environment family and instance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    FiniteLadder {
        #[serde(flatten)]
        ladder: LadderSpec,
    },
    SparseLinear {
        d: usize,
        d_star: usize,
        gamma: f64,
        noise_sigma2: f64,
    },
    NestedFeature {
        num_actions: usize,
        dims: Vec<usize>,
        m_star: usize,
        gamma: f64,
        noise_sigma2: f64,
    },
}

impl EnvironmentSpec {
    fn kind(&self) -> &'static str {
        match self {
            EnvironmentSpec::FiniteLadder { .. } => "finite-ladder",
            EnvironmentSpec::SparseLinear { .. } => "sparse-linear",
            EnvironmentSpec::NestedFeature { .. } => "nested-feature",
        }
    }
}

/// One algorithm entry of a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    FalconOracle {
        #[serde(default)]
        label: Option<String>,
    },
    Acb {
        #[serde(default)]
        label: Option<String>,
        /// Defaults to `finite-cardinality` on finite ladders and `xi` on
        /// nested features.
        #[serde(default)]
        rate_mode: Option<RateMode>,
        #[serde(default)]
        known_horizon_delta: bool,
    },
    Etc {
        #[serde(default)]
        label: Option<String>,
    },
    AlbDimContinuum {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        t0: Option<usize>,
        #[serde(default = "default_eps_base")]
        eps_base: f64,
    },
    AlbDimFinite {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        t0: Option<usize>,
        #[serde(default = "default_eps_base")]
        eps_base: f64,
    },
    OfulFullDim {
        #[serde(default)]
        label: Option<String>,
    },
    OracleRestrictedOful {
        #[serde(default)]
        label: Option<String>,
    },
}

fn default_eps_base() -> f64 {
    2.0
}

impl AlgorithmSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            AlgorithmSpec::FalconOracle { .. } => "falcon-oracle",
            AlgorithmSpec::Acb { .. } => "acb",
            AlgorithmSpec::Etc { .. } => "etc",
            AlgorithmSpec::AlbDimContinuum { .. } => "alb-dim-continuum",
            AlgorithmSpec::AlbDimFinite { .. } => "alb-dim-finite",
            AlgorithmSpec::OfulFullDim { .. } => "oful-full-dim",
            AlgorithmSpec::OracleRestrictedOful { .. } => "oracle-restricted-oful",
        }
    }

    /// Name in the CSV `algorithm` column and in RNG stream ids.
    pub fn label(&self) -> String {
        let custom = match self {
            AlgorithmSpec::FalconOracle { label }
            | AlgorithmSpec::Acb { label, .. }
            | AlgorithmSpec::Etc { label }
            | AlgorithmSpec::AlbDimContinuum { label, .. }
            | AlgorithmSpec::AlbDimFinite { label, .. }
            | AlgorithmSpec::OfulFullDim { label }
            | AlgorithmSpec::OracleRestrictedOful { label } => label,
        };
        custom.clone().unwrap_or_else(|| self.kind().to_string())
    }

    fn supports(&self, env: &EnvironmentSpec) -> bool {
        use AlgorithmSpec as A;
        use EnvironmentSpec as E;
        matches!(
            (self, env),
            (A::FalconOracle { .. } | A::Etc { .. }, E::FiniteLadder { .. })
                | (A::Acb { .. }, E::FiniteLadder { .. } | E::NestedFeature { .. })
                | (A::AlbDimContinuum { .. }, E::SparseLinear { .. })
                | (A::AlbDimFinite { .. }, E::NestedFeature { .. })
                | (A::OfulFullDim { .. } | A::OracleRestrictedOful { .. }, E::SparseLinear { .. } | E::NestedFeature { .. })
        )
    }
}

fn default_trials() -> usize {
    25
}
fn default_delta() -> f64 {
    0.05
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}
fn default_subsample() -> usize {
    1
}
fn default_t0_max() -> usize {
    200
}
fn default_t0_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub environment: EnvironmentSpec,
    pub algorithms: Vec<AlgorithmSpec>,
    pub horizon: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Keep every `k`-th round in the CSV (rounds `T/4`, `T/2`, `T` are
    /// always kept).
    #[serde(default = "default_subsample")]
    pub subsample: usize,
    /// Cap on the analytic `T₀` used when an ALB-Dim entry sets none.
    #[serde(default = "default_t0_max")]
    pub t0_max: usize,
    /// Contexts drawn for the second-moment estimate of nested features.
    #[serde(default = "default_t0_samples")]
    pub t0_samples: usize,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Validation(vec![format!("config: {e}")]))
    }

    /// Every violated constraint, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            errs.push(format!("name: `{}` must be nonempty and contain no path separators", self.name));
        }
        if self.trials == 0 {
            errs.push("trials: must be >= 1".into());
        }
        if self.horizon == 0 {
            errs.push("horizon: must be >= 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errs.push(format!("delta: {} outside (0, 1)", self.delta));
        }
        if self.subsample == 0 {
            errs.push("subsample: must be >= 1".into());
        }
        if self.t0_max == 0 {
            errs.push("t0_max: must be >= 1".into());
        }
        self.validate_environment(&mut errs);
        if self.algorithms.is_empty() {
            errs.push("algorithms: at least one required".into());
        }
        let mut seen = BTreeMap::new();
        for (i, alg) in self.algorithms.iter().enumerate() {
            let at = format!("algorithms[{i}] ({})", alg.kind());
            if let Some(j) = seen.insert(alg.label(), i) {
                errs.push(format!("{at}: label `{}` already used by algorithms[{j}]", alg.label()));
            }
            if alg.label().is_empty() || alg.label().contains([',', '"', '\n']) {
                errs.push(format!("{at}: label must be nonempty and CSV-safe"));
            }
            if !alg.supports(&self.environment) {
                errs.push(format!("{at}: not applicable to a {} environment", self.environment.kind()));
            }
            match alg {
                AlgorithmSpec::Etc { .. } if self.horizon < 9 => {
                    errs.push(format!("{at}: horizon must be >= 9"));
                }
                AlgorithmSpec::AlbDimContinuum { t0, eps_base, .. } | AlgorithmSpec::AlbDimFinite { t0, eps_base, .. } => {
                    if !(*eps_base > 1.0) {
                        errs.push(format!("{at}: eps_base must exceed 1"));
                    }
                    if let Some(t0) = t0 {
                        if *t0 == 0 {
                            errs.push(format!("{at}: t0 must be >= 1"));
                        } else if self.horizon < t0 + crate::alb_dim::ceil_sqrt(*t0) {
                            errs.push(format!("{at}: horizon shorter than the first phase (t0 + ceil(sqrt(t0)))"));
                        }
                    }
                }
                _ => {}
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    fn validate_environment(&self, errs: &mut Vec<String>) {
        match &self.environment {
            EnvironmentSpec::FiniteLadder { ladder } => {
                let m = ladder.class_sizes.len();
                if m == 0 {
                    errs.push("environment.class_sizes: at least one class required".into());
                }
                if ladder.class_sizes.first() == Some(&0) || ladder.class_sizes.windows(2).any(|w| w[0] >= w[1]) {
                    errs.push("environment.class_sizes: must be positive and strictly increasing".into());
                }
                if ladder.num_actions == 0 {
                    errs.push("environment.num_actions: must be >= 1".into());
                }
                if ladder.grid_size == 0 {
                    errs.push("environment.grid_size: must be >= 1".into());
                }
                if !(ladder.target_gap > 0.0) {
                    errs.push("environment.target_gap: must be > 0".into());
                }
                if let Some(d) = ladder.d_star {
                    if !(1..=m).contains(&d) {
                        errs.push(format!("environment.d_star: {d} outside [1, {m}]"));
                    }
                }
            }
            EnvironmentSpec::SparseLinear {
                d,
                d_star,
                gamma,
                noise_sigma2,
            } => {
                if *d == 0 {
                    errs.push("environment.d: must be >= 1".into());
                }
                if *d_star == 0 || d_star > d {
                    errs.push(format!("environment.d_star: {d_star} outside [1, d = {d}]"));
                }
                check_gamma(*gamma, *d_star, errs);
                check_noise(*noise_sigma2, errs);
            }
            EnvironmentSpec::NestedFeature {
                num_actions,
                dims,
                m_star,
                gamma,
                noise_sigma2,
            } => {
                if *num_actions == 0 {
                    errs.push("environment.num_actions: must be >= 1".into());
                }
                if dims.is_empty() || dims[0] == 0 || dims.windows(2).any(|w| w[0] >= w[1]) {
                    errs.push("environment.dims: must be positive and strictly increasing".into());
                }
                if !(1..=dims.len()).contains(m_star) {
                    errs.push(format!("environment.m_star: {m_star} outside [1, {}]", dims.len()));
                } else {
                    check_gamma(*gamma, dims[m_star - 1], errs);
                }
                check_noise(*noise_sigma2, errs);
            }
        }
    }
}

fn check_gamma(gamma: f64, support: usize, errs: &mut Vec<String>) {
    if support > 0 && !(gamma > 0.0 && gamma <= 1.0 / (support as f64).sqrt()) {
        errs.push(format!("environment.gamma: {gamma} outside (0, 1/sqrt({support})]"));
    }
}

fn check_noise(s2: f64, errs: &mut Vec<String>) {
    if !(s2 >= 0.0 && s2.is_finite()) {
        errs.push(format!("environment.noise_sigma2: {s2} must be finite and >= 0"));
    }
}

/// The environment instance shared by every trial and algorithm.
#[derive(Debug, Clone)]
pub enum Instance {
    Finite(FiniteLadder),
    Sparse(SparseLinearInstance),
    Nested(NestedFeatureInstance),
}

impl Instance {
    /// Builds the instance from the construction stream of `seed`.
    pub fn build(spec: &EnvironmentSpec, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0, "instance", Purpose::Construction).rng();
        Ok(match spec {
            EnvironmentSpec::FiniteLadder { ladder } => Instance::Finite(build_separated_ladder(ladder, &mut rng)?),
            EnvironmentSpec::SparseLinear {
                d,
                d_star,
                gamma,
                noise_sigma2,
            } => Instance::Sparse(SparseLinearInstance::random(*d, *d_star, *gamma, *noise_sigma2, &mut rng)?),
            EnvironmentSpec::NestedFeature {
                num_actions,
                dims,
                m_star,
                gamma,
                noise_sigma2,
            } => Instance::Nested(NestedFeatureInstance::random(
                *num_actions,
                dims.clone(),
                *m_star,
                *gamma,
                *noise_sigma2,
                &mut rng,
            )?),
        })
    }

    /// Value of the `selected` column a correct algorithm should settle on.
    pub fn selection_target(&self, alg: &AlgorithmSpec) -> Option<usize> {
        match (self, alg) {
            (Instance::Finite(l), AlgorithmSpec::Acb { .. } | AlgorithmSpec::Etc { .. } | AlgorithmSpec::FalconOracle { .. }) => {
                Some(l.d_star)
            }
            (Instance::Nested(n), AlgorithmSpec::Acb { .. }) => Some(n.m_star),
            (Instance::Nested(n), AlgorithmSpec::AlbDimFinite { .. }) => Some(n.dims[n.m_star - 1]),
            (Instance::Sparse(s), AlgorithmSpec::AlbDimContinuum { .. }) => Some(s.d_star),
            _ => None,
        }
    }
}

/// `T₀` for an ALB-Dim entry: the override if given, else the analytic rule
/// capped at `t0_max`.
pub fn resolve_t0(config: &ExperimentConfig, instance: &Instance, alg: &AlgorithmSpec) -> Result<usize> {
    let explicit = match alg {
        AlgorithmSpec::AlbDimContinuum { t0, .. } | AlgorithmSpec::AlbDimFinite { t0, .. } => *t0,
        _ => return Err(Error::contract("T0 requested for a non-ALB algorithm")),
    };
    if let Some(t0) = explicit {
        return Ok(t0);
    }
    let analytic = match instance {
        Instance::Sparse(s) => compute_t0(s.d, config.delta, s.noise_sigma2, EigenSource::Sphere, 1.0).map(|r| r.t0),
        Instance::Nested(n) => {
            let mut rng = RngStream::new(config.seed, 0, "t0", Purpose::Construction).rng();
            let source = nested_second_moment(n, config.t0_samples.max(1), &mut rng)?;
            let b = feature_scale_b(n.tau2, config.horizon, n.num_actions, config.delta);
            compute_t0(n.ambient_dim(), config.delta, n.noise_sigma2, source, b).map(|r| r.t0)
        }
        Instance::Finite(_) => return Err(Error::contract("ALB-Dim needs a linear environment")),
    };
    match analytic {
        Ok(t0) if t0 <= config.t0_max => Ok(t0),
        Ok(t0) => {
            log::warn!("{}: analytic T0 = {t0} exceeds t0_max; using {}", alg.label(), config.t0_max);
            Ok(config.t0_max)
        }
        Err(e) => {
            log::warn!("{}: analytic T0 unavailable ({e}); using {}", alg.label(), config.t0_max);
            Ok(config.t0_max)
        }
    }
}

/// Everything one (algorithm, trial) run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub algorithm: String,
    pub trial: usize,
    pub outcome: RunOutcome,
    pub epochs: Vec<EpochTrace>,
    pub phases: Vec<PhaseTrace>,
    pub unresolved_singular: Option<(usize, usize)>,
}

/// Runs one (algorithm, trial) pair.
pub fn run_trial(
    config: &ExperimentConfig,
    instance: &Instance,
    alg: &AlgorithmSpec,
    t0: Option<usize>,
    trial: usize,
) -> Result<TrialResult> {
    let label = alg.label();
    let mut rng = TrialRng::new(config.seed, trial as u64, &label);
    let horizon = config.horizon;
    let delta = config.delta;
    let mut result = TrialResult {
        algorithm: label.clone(),
        trial,
        outcome: RunOutcome::default(),
        epochs: Vec::new(),
        phases: Vec::new(),
        unresolved_singular: None,
    };
    let alb_config = |eps_base: f64| AlbConfig {
        delta,
        t0: t0.expect("resolved before the trial"),
        eps_base,
    };
    result.outcome = match (alg, instance) {
        (AlgorithmSpec::FalconOracle { .. }, Instance::Finite(l)) => {
            run_falcon(l, l, l.d_star, horizon, delta, FitWindow::FullEpoch, &mut rng)?
        }
        (
            AlgorithmSpec::Acb {
                rate_mode,
                known_horizon_delta,
                ..
            },
            Instance::Finite(l),
        ) => {
            let cfg = AcbConfig {
                delta,
                rate_mode: rate_mode.unwrap_or(RateMode::FiniteCardinality),
                known_horizon_delta: *known_horizon_delta,
            };
            let run = run_acb(l, l, horizon, &cfg, &mut rng)?;
            result.epochs = run.trace;
            run.outcome
        }
        (
            AlgorithmSpec::Acb {
                rate_mode,
                known_horizon_delta,
                ..
            },
            Instance::Nested(n),
        ) => {
            let cfg = AcbConfig {
                delta,
                rate_mode: rate_mode.unwrap_or(RateMode::Xi),
                known_horizon_delta: *known_horizon_delta,
            };
            let run = run_acb(n, &LinearLadder::new(n.dims.clone()), horizon, &cfg, &mut rng)?;
            result.epochs = run.trace;
            run.outcome
        }
        (AlgorithmSpec::Etc { .. }, Instance::Finite(l)) => run_etc(l, l, horizon, delta, &mut rng)?.outcome,
        (AlgorithmSpec::AlbDimContinuum { eps_base, .. }, Instance::Sparse(s)) => {
            let run = run_alb_dim_continuum(s, horizon, &alb_config(*eps_base), &mut rng)?;
            result.phases = run.phases;
            result.unresolved_singular = run.unresolved_singular;
            run.outcome
        }
        (AlgorithmSpec::AlbDimFinite { eps_base, .. }, Instance::Nested(n)) => {
            let run = run_alb_dim_finite(n, horizon, &alb_config(*eps_base), &mut rng)?;
            result.phases = run.phases;
            result.unresolved_singular = run.unresolved_singular;
            run.outcome
        }
        (AlgorithmSpec::OfulFullDim { .. }, Instance::Sparse(s)) => {
            run_oful_restricted(s, &(0..s.d).collect::<Vec<_>>(), horizon, delta, &mut rng)?
        }
        (AlgorithmSpec::OracleRestrictedOful { .. }, Instance::Sparse(s)) => {
            run_oful_restricted(s, &s.support(), horizon, delta, &mut rng)?
        }
        (AlgorithmSpec::OfulFullDim { .. }, Instance::Nested(n)) => run_oful_prefix(n, n.ambient_dim(), horizon, delta, &mut rng)?,
        (AlgorithmSpec::OracleRestrictedOful { .. }, Instance::Nested(n)) => {
            run_oful_prefix(n, n.dims[n.m_star - 1], horizon, delta, &mut rng)?
        }
        _ => {
            return Err(Error::contract(format!("{} cannot run on this environment", alg.kind())));
        }
    };
    Ok(result)
}

/// All trials of a config, in canonical (algorithm, trial) order.
pub fn run_trials(config: &ExperimentConfig, workers: usize) -> Result<(Instance, Vec<TrialResult>)> {
    config.validate()?;
    let instance = Instance::build(&config.environment, config.seed)?;
    let t0s = config
        .algorithms
        .iter()
        .map(|alg| match alg {
            AlgorithmSpec::AlbDimContinuum { .. } | AlgorithmSpec::AlbDimFinite { .. } => {
                resolve_t0(config, &instance, alg).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(t0) = t0s.iter().flatten().find(|&&t0| config.horizon < t0 + crate::alb_dim::ceil_sqrt(t0)) {
        return Err(Error::Validation(vec![format!(
            "horizon: {} shorter than the first ALB-Dim phase with T0 = {t0}",
            config.horizon
        )]));
    }
    let jobs: Vec<(usize, usize)> = (0..config.algorithms.len())
        .flat_map(|a| (0..config.trials).map(move |t| (a, t)))
        .collect();
    let run_job = |&(a, trial): &(usize, usize)| {
        let alg = &config.algorithms[a];
        log::info!("{} trial {trial}", alg.label());
        run_trial(config, &instance, alg, t0s[a], trial).map_err(|e| Error::Trial {
            trial,
            algorithm: alg.label(),
            seed: config.seed,
            source: Box::new(e),
        })
    };
    let results = if workers <= 1 {
        jobs.iter().map(run_job).collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        // collect preserves job order
        pool.install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>>>())?
    };
    Ok((instance, results))
}

fn kept_round(t: usize, horizon: usize, k: usize) -> bool {
    t % k == 0 || t == horizon || t == (horizon / 4).max(1) || t == (horizon / 2).max(1)
}

/// Writes the result CSV in (algorithm, trial, t) order.
pub fn write_results_csv<W: Write>(out: W, results: &[TrialResult], horizon: usize, subsample: usize) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{CSV_HEADER}")?;
    let mut line = String::new();
    for r in results {
        let inst = r.outcome.ledger.instantaneous();
        let cum = r.outcome.ledger.cumulative();
        let mut segs = r.outcome.segments.iter().peekable();
        for t in 1..=inst.len() {
            while segs.peek().is_some_and(|s| s.end < t) {
                segs.next();
            }
            if !kept_round(t, horizon, subsample) {
                continue;
            }
            let seg = segs.peek().filter(|s| s.start <= t);
            line.clear();
            write!(
                line,
                "{},{},{},{},{},{},{}",
                r.trial,
                r.algorithm,
                t,
                inst[t - 1],
                cum[t - 1],
                seg.map_or(String::new(), |s| s.index.to_string()),
                seg.and_then(|s| s.selected).map_or(String::new(), |v| v.to_string()),
            )
            .expect("string write");
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-epoch selection trace: `trial,algorithm,epoch,stats,threshold,selected,rho`
/// with `stats` joined by `;`.
pub fn write_epoch_trace<W: Write>(out: W, results: &[TrialResult]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "trial,algorithm,epoch,stats,threshold,selected,rho")?;
    for r in results {
        for e in &r.epochs {
            let stats: Vec<String> = e.stats.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.trial,
                r.algorithm,
                e.epoch,
                stats.join(";"),
                e.threshold.map_or(String::new(), |v| v.to_string()),
                e.selected,
                e.rho.map_or(String::new(), |v| v.to_string()),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-phase support trace: `trial,algorithm,phase,regret_len,active_size,active_mask,theta_error,model`.
pub fn write_phase_trace<W: Write>(out: W, results: &[TrialResult], dim: usize) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "trial,algorithm,phase,regret_len,active_size,active_mask,theta_error,model")?;
    for r in results {
        for p in &r.phases {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.trial,
                r.algorithm,
                p.phase,
                p.regret_len,
                p.active.len(),
                bitmask_hex(&p.active, dim),
                p.theta_error,
                p.model.map_or(String::new(), |m| m.to_string()),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: usize,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub trials: usize,
    pub horizon: usize,
    /// Cumulative regret at `T/4`, `T/2` and `T`.
    pub checkpoints: Vec<Checkpoint>,
    /// Final `selected` value → number of trials.
    pub final_selected: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    /// Fraction of trials whose final `selected` equals `target`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_accuracy: Option<f64>,
    /// First epoch/phase with `selected == target` → number of trials
    /// (`"never"` when it is not reached).
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub recovery_phase: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithms: BTreeMap<String, AlgorithmSummary>,
}

/// Mean and population standard deviation.
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Default)]
struct TrialAcc {
    rows: Vec<(usize, f64)>,
    last_selected: Option<String>,
    first_hit: Option<String>,
}

/// Summary statistics recomputed from a result CSV. `targets` maps an
/// algorithm label to the `selected` value counted as correct.
pub fn summarize_reader<R: BufRead>(reader: R, targets: &BTreeMap<String, usize>) -> Result<Summary> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                row: 1,
                message: "empty file, expected header".into(),
            })
        }
    };
    if header.trim_end() != CSV_HEADER {
        return Err(Error::Parse {
            row: 1,
            message: format!("header `{}` != `{CSV_HEADER}`", header.trim_end()),
        });
    }
    let mut per: BTreeMap<String, BTreeMap<usize, TrialAcc>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |message: String| Error::Parse { row, message };
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", f.len())));
        }
        let trial: usize = f[0].parse().map_err(|e| bad(format!("trial `{}`: {e}", f[0])))?;
        let t: usize = f[2].parse().map_err(|e| bad(format!("t `{}`: {e}", f[2])))?;
        let _inst: f64 = f[3].parse().map_err(|e| bad(format!("inst_regret `{}`: {e}", f[3])))?;
        let cum: f64 = f[4].parse().map_err(|e| bad(format!("cum_regret `{}`: {e}", f[4])))?;
        if !f[5].is_empty() {
            f[5].parse::<u32>().map_err(|e| bad(format!("epoch `{}`: {e}", f[5])))?;
        }
        if !f[6].is_empty() {
            f[6].parse::<usize>().map_err(|e| bad(format!("selected `{}`: {e}", f[6])))?;
        }
        let alg = f[1].to_string();
        if !per.contains_key(&alg) {
            order.push(alg.clone());
        }
        let acc = per.entry(alg.clone()).or_default().entry(trial).or_default();
        if acc.rows.last().is_some_and(|&(prev, _)| prev >= t) {
            return Err(bad(format!("t = {t} not increasing within trial {trial}")));
        }
        acc.rows.push((t, cum));
        acc.last_selected = Some(f[6].to_string());
        if acc.first_hit.is_none() {
            if let Some(&target) = targets.get(&alg) {
                if f[6] == target.to_string() {
                    acc.first_hit = Some(f[5].to_string());
                }
            }
        }
    }
    if per.is_empty() {
        return Err(Error::Parse {
            row: 2,
            message: "no data rows".into(),
        });
    }
    let mut algorithms = BTreeMap::new();
    for (alg, trials) in per {
        let horizon = trials.values().filter_map(|a| a.rows.last().map(|r| r.0)).max().unwrap_or(0);
        let mut checkpoints = Vec::new();
        let mut marks = vec![(horizon / 4).max(1), (horizon / 2).max(1), horizon];
        marks.dedup();
        for t in marks {
            let values: Vec<f64> = trials
                .values()
                .map(|a| {
                    a.rows
                        .iter()
                        .rev()
                        .find(|r| r.0 <= t)
                        .map_or(0.0, |r| r.1)
                })
                .collect();
            let (mean, stddev) = mean_stddev(&values);
            checkpoints.push(Checkpoint { t, mean, stddev });
        }
        let mut final_selected = BTreeMap::new();
        for a in trials.values() {
            let key = a.last_selected.clone().filter(|s| !s.is_empty()).unwrap_or_else(|| "none".into());
            *final_selected.entry(key).or_insert(0) += 1;
        }
        let target = targets.get(&alg).copied();
        let selection_accuracy = target.map(|tg| {
            let hits = trials
                .values()
                .filter(|a| a.last_selected.as_deref() == Some(tg.to_string().as_str()))
                .count();
            hits as f64 / trials.len() as f64
        });
        let mut recovery_phase = BTreeMap::new();
        if target.is_some() {
            for a in trials.values() {
                let key = a.first_hit.clone().unwrap_or_else(|| "never".into());
                *recovery_phase.entry(key).or_insert(0) += 1;
            }
        }
        algorithms.insert(
            alg,
            AlgorithmSummary {
                trials: trials.len(),
                horizon,
                checkpoints,
                final_selected,
                target,
                selection_accuracy,
                recovery_phase,
            },
        );
    }
    Ok(Summary { algorithms })
}

pub fn summarize(path: &Path, targets: &BTreeMap<String, usize>) -> Result<Summary> {
    summarize_reader(BufReader::new(fs::File::open(path)?), targets)
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
    pub epoch_trace_csv: Option<PathBuf>,
    pub phase_trace_csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct SummaryDocument<'a> {
    config: &'a ExperimentConfig,
    targets: &'a BTreeMap<String, usize>,
    /// Trials whose last pooled ALB-Dim fit was singular, per algorithm.
    unresolved_singular: BTreeMap<String, usize>,
    summary: Summary,
}

/// Runs every trial and writes `<name>.csv`, `<name>.summary.json` and the
/// epoch/phase traces (when any algorithm produced them) to the output
/// directory.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentOutput> {
    let (instance, results) = run_trials(config, workers)?;
    fs::create_dir_all(&config.output_dir)?;
    let dir = &config.output_dir;
    let results_csv = dir.join(format!("{}.csv", config.name));
    write_results_csv(fs::File::create(&results_csv)?, &results, config.horizon, config.subsample)?;

    let epoch_trace_csv = if results.iter().any(|r| !r.epochs.is_empty()) {
        let p = dir.join(format!("{}.epochs.csv", config.name));
        write_epoch_trace(fs::File::create(&p)?, &results)?;
        Some(p)
    } else {
        None
    };
    let phase_trace_csv = if results.iter().any(|r| !r.phases.is_empty()) {
        let dim = match &instance {
            Instance::Sparse(s) => s.d,
            Instance::Nested(n) => n.ambient_dim(),
            Instance::Finite(_) => 0,
        };
        let p = dir.join(format!("{}.phases.csv", config.name));
        write_phase_trace(fs::File::create(&p)?, &results, dim)?;
        Some(p)
    } else {
        None
    };

    let targets: BTreeMap<String, usize> = config
        .algorithms
        .iter()
        .filter_map(|a| instance.selection_target(a).map(|t| (a.label(), t)))
        .collect();
    let mut unresolved_singular = BTreeMap::new();
    for r in &results {
        if r.unresolved_singular.is_some() {
            *unresolved_singular.entry(r.algorithm.clone()).or_insert(0) += 1;
        }
    }
    for (alg, n) in &unresolved_singular {
        log::warn!("{alg}: {n} trial(s) ended with a singular pooled exploration design");
    }
    let summary = summarize(&results_csv, &targets)?;
    let summary_json = dir.join(format!("{}.summary.json", config.name));
    let doc = SummaryDocument {
        config,
        targets: &targets,
        unresolved_singular,
        summary,
    };
    fs::write(&summary_json, serde_json::to_string_pretty(&doc).expect("serializable") + "\n")?;
    Ok(ExperimentOutput {
        results_csv,
        summary_json,
        epoch_trace_csv,
        phase_trace_csv,
    })
}

/// Named configs shipped with the CLI.
pub fn presets() -> Vec<ExperimentConfig> {
    let sparse = |name: &str, d: usize, d_star: usize, gamma: f64, t0: Option<usize>, algs: Vec<AlgorithmSpec>| ExperimentConfig {
        name: name.into(),
        environment: EnvironmentSpec::SparseLinear {
            d,
            d_star,
            gamma,
            noise_sigma2: 0.5,
        },
        algorithms: algs
            .into_iter()
            .map(|a| match a {
                AlgorithmSpec::AlbDimContinuum { label, eps_base, .. } => AlgorithmSpec::AlbDimContinuum { label, t0, eps_base },
                other => other,
            })
            .collect(),
        horizon: 20_000,
        trials: 25,
        seed: 0,
        delta: 0.05,
        output_dir: default_out(),
        subsample: 1,
        t0_max: default_t0_max(),
        t0_samples: default_t0_samples(),
    };
    let alb = || AlgorithmSpec::AlbDimContinuum {
        label: None,
        t0: None,
        eps_base: 2.0,
    };
    let panel = || vec![alb(), AlgorithmSpec::OfulFullDim { label: None }, AlgorithmSpec::OracleRestrictedOful { label: None }];
    vec![
        sparse("panel-a", 500, 20, 0.12, None, panel()),
        sparse("panel-b", 200, 20, 0.12, None, panel()),
        sparse("panel-c", 50, 5, 0.2, Some(200), vec![alb()]),
        ExperimentConfig {
            name: "finite-ladder".into(),
            environment: EnvironmentSpec::FiniteLadder {
                ladder: LadderSpec::standard(),
            },
            algorithms: vec![
                AlgorithmSpec::FalconOracle { label: None },
                AlgorithmSpec::Acb {
                    label: None,
                    rate_mode: None,
                    known_horizon_delta: false,
                },
                AlgorithmSpec::Etc { label: None },
            ],
            horizon: 1 << 15,
            trials: 25,
            seed: 0,
            delta: 0.05,
            output_dir: default_out(),
            subsample: 1,
            t0_max: default_t0_max(),
            t0_samples: default_t0_samples(),
        },
        ExperimentConfig {
            name: "nested-feature".into(),
            environment: EnvironmentSpec::NestedFeature {
                num_actions: 4,
                dims: vec![5, 20, 50],
                m_star: 1,
                gamma: 0.2,
                noise_sigma2: 0.5,
            },
            algorithms: vec![
                AlgorithmSpec::AlbDimFinite {
                    label: None,
                    t0: Some(200),
                    eps_base: 2.0,
                },
                AlgorithmSpec::Acb {
                    label: None,
                    rate_mode: None,
                    known_horizon_delta: false,
                },
                AlgorithmSpec::OfulFullDim { label: None },
                AlgorithmSpec::OracleRestrictedOful { label: None },
            ],
            horizon: 20_000,
            trials: 25,
            seed: 0,
            delta: 0.05,
            output_dir: default_out(),
            subsample: 1,
            t0_max: default_t0_max(),
            t0_samples: default_t0_samples(),
        },
    ]
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    presets().into_iter().find(|p| p.name == name)
}

/// Loads `source` as a preset name or a config file path.
pub fn load_config(source: &str) -> Result<ExperimentConfig> {
    if let Some(p) = preset(source) {
        return Ok(p);
    }
    let text = fs::read_to_string(source).map_err(|e| Error::Validation(vec![format!("config `{source}`: {e}")]))?;
    ExperimentConfig::from_json(&text)
}
