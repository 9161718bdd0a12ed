//! ALB-Dim: phased support estimation from pooled random exploration, with a
//! linear base learner restricted to the estimated support in between.
//!
//! Phase `i` runs a regret block of `36^i·T₀` rounds and then an exploration
//! block of `6^i·⌈√T₀⌉` uniformly random arms. The active set for phase `i`
//! is `D_i = {k : |θ̂_i[k]| ≥ ε_i/2}` with `ε_i = 2^{-i}` and `θ̂_0 = 1`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{pseudo_regret_increment, ActionIndex, RegretLedger, RunOutcome};
use crate::envs::{Environment, NestedFeatureInstance, SparseLinearInstance};
use crate::error::{Error, Result};
use crate::linear_base::{feature_scale_b, scale_features, ConfidenceParams, OfulState, SupLinRelState};
use crate::oracle::least_squares;
use crate::rng::TrialRng;

const REGRET_GROWTH: usize = 36;
const EXPLORE_GROWTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlbConfig {
    pub delta: f64,
    pub t0: usize,
    /// `C` in `ε_i = C^{-i}`.
    pub eps_base: f64,
}

impl AlbConfig {
    pub fn new(delta: f64, t0: usize) -> Self {
        Self {
            delta,
            t0,
            eps_base: 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::contract(format!("delta = {} outside (0, 1)", self.delta)));
        }
        if self.t0 == 0 {
            return Err(Error::contract("T0 must be >= 1"));
        }
        if !(self.eps_base > 1.0) {
            return Err(Error::contract("epsilon base must exceed 1"));
        }
        Ok(())
    }
}

/// Lengths and parameters of phase `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: u32,
    pub regret_len: usize,
    pub explore_len: usize,
    pub eps: f64,
    pub delta: f64,
}

pub fn ceil_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r
}

pub fn phase_plan(i: u32, config: &AlbConfig) -> PhasePlan {
    PhasePlan {
        phase: i,
        regret_len: REGRET_GROWTH.saturating_pow(i).saturating_mul(config.t0),
        explore_len: EXPLORE_GROWTH.saturating_pow(i).saturating_mul(ceil_sqrt(config.t0)),
        eps: config.eps_base.powi(-(i as i32)),
        delta: config.delta / 2f64.powi(i as i32),
    }
}

/// Exploration rows pooled after phase `i`: `⌈√T₀⌉·(6^{i+1} − 1)/5`.
pub fn pooled_exploration_count(i: u32, t0: usize) -> usize {
    ceil_sqrt(t0) * (EXPLORE_GROWTH.pow(i + 1) - 1) / 5
}

/// `{k : |θ̂_k| ≥ ε/2}`, 0-based and sorted.
pub fn active_set(theta_hat: &[f64], eps: f64) -> Vec<usize> {
    theta_hat
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() >= eps / 2.0)
        .map(|(k, _)| k)
        .collect()
}

/// Coordinates the base learner actually plays on: `D_i`, or the single
/// coordinate of largest `|θ̂|` (coordinate 0 if `θ̂ = 0`) when `D_i` is empty.
pub fn play_coordinates(active: &[usize], theta_hat: &[f64]) -> Vec<usize> {
    if !active.is_empty() {
        return active.to_vec();
    }
    let mut best = 0;
    for (k, v) in theta_hat.iter().enumerate() {
        if v.abs() > theta_hat[best].abs() {
            best = k;
        }
    }
    vec![best]
}

/// Hex bitmask of a coordinate set, most significant coordinate first.
pub fn bitmask_hex(coords: &[usize], dim: usize) -> String {
    let nibbles = dim.div_ceil(4).max(1);
    let mut bits = vec![0u8; nibbles];
    for &c in coords {
        bits[nibbles - 1 - c / 4] |= 1 << (c % 4);
    }
    bits.iter().map(|b| format!("{b:x}")).collect()
}

fn inf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// One row of the per-phase support trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    pub phase: u32,
    /// First round of the phase, 1-based.
    pub start: usize,
    /// Planned regret-block length `T_i`.
    pub regret_len: usize,
    /// `D_i`, 0-based.
    pub active: Vec<usize>,
    /// `‖θ̂_i − θ*‖∞`.
    pub theta_error: f64,
    /// Feature-map index `M_i` (finite-arm variant only).
    pub model: Option<usize>,
    /// Scaled feature rows clipped to norm 1 during the regret block.
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlbRun {
    pub outcome: RunOutcome,
    pub phases: Vec<PhaseTrace>,
    /// `(rank, cols)` when the last attempted pooled fit was singular.
    pub unresolved_singular: Option<(usize, usize)>,
}

/// Pooled exploration data and the current estimate.
struct Explorer {
    rows: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    theta_hat: Vec<f64>,
    last_singular: Option<(usize, usize)>,
}

impl Explorer {
    fn new(dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            rewards: Vec::new(),
            theta_hat: vec![1.0; dim],
            last_singular: None,
        }
    }

    /// Least squares on every pooled row; a singular design keeps `θ̂`.
    fn refit(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.theta_hat.len()).collect();
        match least_squares(&self.rows, &self.rewards, &all) {
            Ok(fit) => {
                self.theta_hat = fit.theta().expect("linear fit").to_vec();
                self.last_singular = None;
                Ok(())
            }
            Err(Error::SingularDesign { rank, cols }) => {
                log::debug!("pooled exploration design singular (rank {rank} of {cols}); keeping previous estimate");
                self.last_singular = Some((rank, cols));
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Uniform draw from the unit sphere in `R^d`.
pub fn sphere_arm<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Exploration round against the continuum instance. Uses only the
/// exploration streams.
fn explore_continuum(inst: &SparseLinearInstance, rng: &mut TrialRng, explorer: &mut Explorer) -> f64 {
    let x = sphere_arm(inst.d, &mut rng.exploration);
    let y = inst.sample_reward(&x, &mut rng.exploration_noise);
    let regret = inst.regret_of(&x);
    explorer.rows.push(x);
    explorer.rewards.push(y);
    regret
}

/// Exploration round against the nested-feature instance: fresh context and
/// uniform arm from the exploration stream, full `φ^M` row pooled.
fn explore_finite(env: &NestedFeatureInstance, rng: &mut TrialRng, explorer: &mut Explorer) -> f64 {
    let ctx = env.sample_context(&mut rng.exploration);
    let a = ActionIndex(rng.exploration.random_range(0..env.num_actions));
    let y = env.sample_reward(&ctx, a, &mut rng.exploration_noise);
    let regret = pseudo_regret_increment(&env.mean_rewards(&ctx), a);
    explorer.rows.push(ctx.features[a.0].clone());
    explorer.rewards.push(y);
    regret
}

fn check_horizon(horizon: usize, t0: usize) -> Result<()> {
    if horizon < t0 + ceil_sqrt(t0) {
        return Err(Error::contract(format!(
            "horizon {horizon} shorter than the first phase ({} rounds)",
            t0 + ceil_sqrt(t0)
        )));
    }
    Ok(())
}

/// Continuum-arm ALB-Dim with OFUL on the unit ball as base learner.
pub fn run_alb_dim_continuum(
    inst: &SparseLinearInstance,
    horizon: usize,
    config: &AlbConfig,
    rng: &mut TrialRng,
) -> Result<AlbRun> {
    config.validate()?;
    check_horizon(horizon, config.t0)?;
    let sigma = inst.noise_sigma2.sqrt();
    let mut outcome = RunOutcome {
        ledger: RegretLedger::with_capacity(horizon),
        segments: Vec::new(),
    };
    let mut explorer = Explorer::new(inst.d);
    let mut phases = Vec::new();
    for i in 0.. {
        if outcome.ledger.len() >= horizon {
            break;
        }
        let plan = phase_plan(i, config);
        let active = active_set(&explorer.theta_hat, plan.eps);
        let play = play_coordinates(&active, &explorer.theta_hat);
        phases.push(PhaseTrace {
            phase: i,
            start: outcome.ledger.len() + 1,
            regret_len: plan.regret_len,
            theta_error: inf_distance(&explorer.theta_hat, &inst.theta_star),
            active,
            model: None,
            clipped: 0,
        });
        outcome.open_segment(i, Some(phases[phases.len() - 1].active.len()));

        let mut oful = OfulState::new(play.len(), ConfidenceParams::new(sigma, plan.delta))?;
        for _ in 0..plan.regret_len {
            if outcome.ledger.len() >= horizon {
                break;
            }
            let xr = oful.choose_ball()?;
            let mut x = vec![0.0; inst.d];
            for (&k, &v) in play.iter().zip(&xr) {
                x[k] = v;
            }
            let y = inst.sample_reward(&x, &mut rng.noise);
            outcome.record(inst.regret_of(&x));
            oful.update(&xr, y);
        }
        let mut complete = true;
        for _ in 0..plan.explore_len {
            if outcome.ledger.len() >= horizon {
                complete = false;
                break;
            }
            let r = explore_continuum(inst, rng, &mut explorer);
            outcome.record(r);
        }
        if complete {
            explorer.refit()?;
        }
    }
    Ok(AlbRun {
        outcome: outcome.finish(),
        phases,
        unresolved_singular: explorer.last_singular,
    })
}

/// Finite-arm ALB-Dim with SupLinRel on the `d_{M_i}` feature prefix,
/// features divided by `b(δ)`.
pub fn run_alb_dim_finite(
    env: &NestedFeatureInstance,
    horizon: usize,
    config: &AlbConfig,
    rng: &mut TrialRng,
) -> Result<AlbRun> {
    config.validate()?;
    check_horizon(horizon, config.t0)?;
    let d = env.ambient_dim();
    let k = env.num_actions;
    let sigma = env.noise_sigma2.sqrt();
    let b = feature_scale_b(env.tau2, horizon, k, config.delta);
    let mut outcome = RunOutcome {
        ledger: RegretLedger::with_capacity(horizon),
        segments: Vec::new(),
    };
    let mut explorer = Explorer::new(d);
    let mut phases: Vec<PhaseTrace> = Vec::new();
    for i in 0.. {
        if outcome.ledger.len() >= horizon {
            break;
        }
        let plan = phase_plan(i, config);
        let active = active_set(&explorer.theta_hat, plan.eps);
        let model = env.model_for(&active);
        let dm = env.dims[model - 1];
        outcome.open_segment(i, Some(active.len()));
        let mut trace = PhaseTrace {
            phase: i,
            start: outcome.ledger.len() + 1,
            regret_len: plan.regret_len,
            theta_error: inf_distance(&explorer.theta_hat, &env.theta_star),
            active,
            model: Some(model),
            clipped: 0,
        };
        // the scaled parameter is b·θ*, so its norm bound is b
        let params = ConfidenceParams {
            bound: b,
            ..ConfidenceParams::new(sigma, plan.delta)
        };
        let mut learner = SupLinRelState::new(dm, plan.regret_len, params)?;
        for step in 0..plan.regret_len {
            if outcome.ledger.len() >= horizon {
                break;
            }
            let ctx = env.sample_context(&mut rng.contexts);
            let prefixes: Vec<&[f64]> = ctx.features.iter().map(|f| &f[..dm]).collect();
            let (scaled, clipped) = scale_features(&prefixes, b);
            trace.clipped += clipped;
            let choice = learner.choose(&scaled)?;
            let y = env.sample_reward(&ctx, choice.action, &mut rng.noise);
            outcome.record(pseudo_regret_increment(&env.mean_rewards(&ctx), choice.action));
            learner.record(step, choice, &scaled[choice.action.0], y);
        }
        if trace.clipped > 0 {
            log::debug!("phase {i}: {} scaled feature rows clipped to norm 1", trace.clipped);
        }
        phases.push(trace);
        let mut complete = true;
        for _ in 0..plan.explore_len {
            if outcome.ledger.len() >= horizon {
                complete = false;
                break;
            }
            let r = explore_finite(env, rng, &mut explorer);
            outcome.record(r);
        }
        if complete {
            explorer.refit()?;
        }
    }
    Ok(AlbRun {
        outcome: outcome.finish(),
        phases,
        unresolved_singular: explorer.last_singular,
    })
}

/// Instance an exploration-only support trace runs against.
pub enum TraceInstance<'a> {
    Continuum(&'a SparseLinearInstance),
    Finite(&'a NestedFeatureInstance),
}

/// `D_0..D_{phases}` computed from the exploration blocks alone. Because
/// exploration draws come from their own streams, this equals the trace of
/// a full run with the same seed for every phase the run reaches.
pub fn support_trace(instance: TraceInstance<'_>, config: &AlbConfig, phases: u32, rng: &mut TrialRng) -> Result<Vec<PhaseTrace>> {
    config.validate()?;
    let (d, theta_star, nested) = match &instance {
        TraceInstance::Continuum(inst) => (inst.d, &inst.theta_star, None),
        TraceInstance::Finite(env) => (env.ambient_dim(), &env.theta_star, Some(*env)),
    };
    let mut explorer = Explorer::new(d);
    let mut out = Vec::new();
    let mut start = 1;
    for i in 0..=phases {
        let plan = phase_plan(i, config);
        let active = active_set(&explorer.theta_hat, plan.eps);
        out.push(PhaseTrace {
            phase: i,
            start,
            regret_len: plan.regret_len,
            theta_error: inf_distance(&explorer.theta_hat, theta_star),
            model: nested.map(|env| env.model_for(&active)),
            active,
            clipped: 0,
        });
        if i == phases {
            break;
        }
        for _ in 0..plan.explore_len {
            match &instance {
                TraceInstance::Continuum(inst) => explore_continuum(inst, rng, &mut explorer),
                TraceInstance::Finite(env) => explore_finite(env, rng, &mut explorer),
            };
        }
        explorer.refit()?;
        start += plan.regret_len + plan.explore_len;
    }
    Ok(out)
}

/// OFUL on the unit ball restricted to `coords` for the whole horizon
/// (all coordinates: the full-dimensional baseline; the true support: the
/// oracle baseline).
pub fn run_oful_restricted(
    inst: &SparseLinearInstance,
    coords: &[usize],
    horizon: usize,
    delta: f64,
    rng: &mut TrialRng,
) -> Result<RunOutcome> {
    if coords.is_empty() {
        return Err(Error::contract("OFUL restricted to no coordinates"));
    }
    let mut oful = OfulState::new(coords.len(), ConfidenceParams::new(inst.noise_sigma2.sqrt(), delta))?;
    let mut outcome = RunOutcome {
        ledger: RegretLedger::with_capacity(horizon),
        segments: Vec::new(),
    };
    outcome.open_segment(0, Some(coords.len()));
    for _ in 0..horizon {
        let xr = oful.choose_ball()?;
        let mut x = vec![0.0; inst.d];
        for (&k, &v) in coords.iter().zip(&xr) {
            x[k] = v;
        }
        let y = inst.sample_reward(&x, &mut rng.noise);
        outcome.record(inst.regret_of(&x));
        oful.update(&xr, y);
    }
    Ok(outcome.finish())
}

/// Finite-arm OFUL on the first `dim` features of a nested instance.
pub fn run_oful_prefix(
    env: &NestedFeatureInstance,
    dim: usize,
    horizon: usize,
    delta: f64,
    rng: &mut TrialRng,
) -> Result<RunOutcome> {
    if dim == 0 || dim > env.ambient_dim() {
        return Err(Error::contract(format!("prefix dimension {dim} out of range")));
    }
    let b = feature_scale_b(env.tau2, horizon, env.num_actions, delta);
    let params = ConfidenceParams {
        bound: b,
        ..ConfidenceParams::new(env.noise_sigma2.sqrt(), delta)
    };
    let mut oful = OfulState::new(dim, params)?;
    let mut outcome = RunOutcome {
        ledger: RegretLedger::with_capacity(horizon),
        segments: Vec::new(),
    };
    outcome.open_segment(0, Some(dim));
    for _ in 0..horizon {
        let ctx = env.sample_context(&mut rng.contexts);
        let prefixes: Vec<&[f64]> = ctx.features.iter().map(|f| &f[..dim]).collect();
        let (scaled, _) = scale_features(&prefixes, b);
        let a = oful.choose_finite(&scaled)?;
        let y = env.sample_reward(&ctx, a, &mut rng.noise);
        outcome.record(pseudo_regret_increment(&env.mean_rewards(&ctx), a));
        oful.update(&scaled[a.0], y);
    }
    Ok(outcome.finish())
}

/// Where the eigenvalues of the exploration second-moment matrix come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EigenSource {
    /// Uniform rows on the unit sphere: `λ_min = λ_max = 1/d`.
    Sphere,
    /// Extremes of an estimated per-sample second-moment matrix.
    Empirical { lambda_min: f64, lambda_max: f64 },
}

/// Result of the `T₀` rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T0Rule {
    pub t0: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Right-hand side the rule compares `√T₀` against.
    pub bound: f64,
}

/// `scale·max(32σ²/λ_min²·ln(2d/δ), (4/3)(6λ_max+λ_min)(d+λ_max)/λ_min²·ln(2d/δ))`.
pub fn t0_bound(dim: usize, delta: f64, sigma2: f64, lambda_min: f64, lambda_max: f64, scale: f64) -> f64 {
    let d = dim as f64;
    let log = (2.0 * d / delta).ln();
    let l2 = lambda_min * lambda_min;
    let first = 32.0 * sigma2 / l2 * log;
    let second = 4.0 / 3.0 * (6.0 * lambda_max + lambda_min) * (d + lambda_max) / l2 * log;
    scale * first.max(second)
}

/// Smallest integer `T₀ ≥ d` with `√T₀ ≥ bound`. `scale` is `b(δ)` for the
/// finite-arm rule and `1` otherwise.
pub fn compute_t0(dim: usize, delta: f64, sigma2: f64, source: EigenSource, scale: f64) -> Result<T0Rule> {
    if dim == 0 || !(delta > 0.0 && delta < 1.0) || !(sigma2 >= 0.0) || !(scale > 0.0) {
        return Err(Error::contract("T0 rule needs d >= 1, delta in (0,1), sigma2 >= 0, scale > 0"));
    }
    let (lambda_min, lambda_max) = match source {
        EigenSource::Sphere => (1.0 / dim as f64, 1.0 / dim as f64),
        EigenSource::Empirical { lambda_min, lambda_max } => (lambda_min, lambda_max),
    };
    if !(lambda_min > 0.0) || lambda_max < lambda_min {
        return Err(Error::contract(format!(
            "second-moment eigenvalues ({lambda_min}, {lambda_max}) violate 0 < λ_min ≤ λ_max"
        )));
    }
    let bound = t0_bound(dim, delta, sigma2, lambda_min, lambda_max, scale);
    if !bound.is_finite() || bound * bound > 1e18 {
        return Err(Error::contract(format!("T0 bound {bound:e} exceeds the supported range")));
    }
    let passes = |t: usize| t >= dim && (t as f64).sqrt() >= bound;
    let mut hi = dim.max(1);
    while !passes(hi) {
        hi *= 2;
    }
    let mut lo = dim.saturating_sub(1);
    // invariant: !passes(lo) or lo < dim, passes(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if passes(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(T0Rule {
        t0: hi,
        lambda_min,
        lambda_max,
        bound,
    })
}

/// Extreme eigenvalues of `(1/N) Σ x xᵀ`.
pub fn second_moment_extremes<X: AsRef<[f64]>>(rows: &[X]) -> Result<(f64, f64)> {
    let Some(first) = rows.first() else {
        return Err(Error::contract("no rows for the second-moment estimate"));
    };
    let d = first.as_ref().len();
    let mut m = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let x = nalgebra::DVector::from_column_slice(r.as_ref());
        m.ger(1.0, &x, &x, 1.0);
    }
    m /= rows.len() as f64;
    let eig = m.symmetric_eigen().eigenvalues;
    Ok((eig.min(), eig.max()))
}

/// Monte-Carlo eigenvalue estimate for a nested-feature instance:
/// `(1/K)·Σ_a E[φ(x,a)φ(x,a)ᵀ]` from `samples` contexts.
pub fn nested_second_moment<R: Rng + ?Sized>(env: &NestedFeatureInstance, samples: usize, rng: &mut R) -> Result<EigenSource> {
    let rows: Vec<Vec<f64>> = (0..samples)
        .flat_map(|_| env.sample_context(rng).features)
        .collect();
    let (lambda_min, lambda_max) = second_moment_extremes(&rows)?;
    Ok(EigenSource::Empirical { lambda_min, lambda_max })
}
