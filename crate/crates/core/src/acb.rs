//! Adaptive contextual bandits: FALCON epochs with a held-out model-selection
//! test at the start of every epoch.

use serde::{Deserialize, Serialize};

use crate::domain::{InteractionRecord, PolicyDistribution, RegretLedger, RunOutcome};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::falcon::{epoch_delta, play_round, EpochSchedule};
use crate::igw::{falcon_learning_rate, igw_distribution, xi_learning_rate, LearningRate};
use crate::oracle::{ComplexityProfile, FittedRegressor, ModelLadder};
use crate::rng::TrialRng;

/// How `ρ_m` is set from the selected class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// `ρ_m` from `ln|F_ℓ|`.
    #[default]
    FiniteCardinality,
    /// `ρ_m = (1/30)·sqrt(K/ξ_ℓ(n))`.
    Xi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcbConfig {
    pub delta: f64,
    pub rate_mode: RateMode,
    /// Use `δ_m = δ/ln T` for every epoch instead of `δ/2^m`.
    pub known_horizon_delta: bool,
}

impl Default for AcbConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            rate_mode: RateMode::FiniteCardinality,
            known_horizon_delta: false,
        }
    }
}

/// What the selection step of epoch `m` saw and decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: u32,
    /// `S_1..S_M`; empty for epoch 1.
    pub stats: Vec<f64>,
    /// `γ_m`; `None` for epoch 1.
    pub threshold: Option<f64>,
    /// Selected class `ℓ`, 1-based.
    pub selected: usize,
    /// `ρ_m`; `None` while playing uniformly.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcbRun {
    pub outcome: RunOutcome,
    pub trace: Vec<EpochTrace>,
}

impl AcbRun {
    pub fn ledger(&self) -> &RegretLedger {
        &self.outcome.ledger
    }

    pub fn final_selection(&self) -> usize {
        self.trace.last().map_or(0, |e| e.selected)
    }
}

/// Chronological split: first `⌈n/2⌉` records to fit, the rest to test.
pub fn split_epoch_data<C>(records: &[InteractionRecord<C>]) -> Result<(&[InteractionRecord<C>], &[InteractionRecord<C>])> {
    if records.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: records.len(),
        });
    }
    Ok(records.split_at(records.len().div_ceil(2)))
}

/// Mean squared prediction error on held-out records.
pub fn test_statistic<C, L: ModelLadder<C>>(
    ladder: &L,
    regressor: &FittedRegressor,
    test: &[InteractionRecord<C>],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("test statistic on an empty test half"));
    }
    let sum: f64 = test
        .iter()
        .map(|r| {
            let e = ladder.predict(regressor, &r.context, r.action) - r.reward;
            e * e
        })
        .sum();
    Ok(sum / test.len() as f64)
}

/// `√m / 2^{m/2}`.
pub fn threshold_addend(m: u32) -> f64 {
    f64::from(m).sqrt() / 2f64.powf(f64::from(m) / 2.0)
}

/// Smallest 1-based `j` with `stats[j] ≤ stats[M] + addend`.
pub fn select_with_addend(stats: &[f64], addend: f64) -> usize {
    let Some(&last) = stats.last() else {
        return 0;
    };
    let threshold = last + addend;
    stats.iter().position(|&s| s <= threshold).map_or(stats.len(), |j| j + 1)
}

/// `ℓ = min{ j : S_j ≤ S_M + √m/2^{m/2} }`.
pub fn select_class(stats: &[f64], m: u32) -> usize {
    select_with_addend(stats, threshold_addend(m))
}

/// Regressors and test statistics computed from one previous epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSelection {
    pub regressors: Vec<FittedRegressor>,
    pub stats: Vec<f64>,
    pub threshold: f64,
    pub selected: usize,
}

/// Fits every class on the first half of `prev` and tests on the second.
pub fn select_on_epoch<C, L: ModelLadder<C>>(
    ladder: &L,
    prev: &[InteractionRecord<C>],
    m: u32,
) -> Result<EpochSelection> {
    let (fit, test) = split_epoch_data(prev)?;
    let regressors = ladder.fit_all(fit)?;
    let stats = regressors
        .iter()
        .map(|f| test_statistic(ladder, f, test))
        .collect::<Result<Vec<_>>>()?;
    let threshold = stats[stats.len() - 1] + threshold_addend(m);
    let selected = select_class(&stats, m);
    Ok(EpochSelection {
        regressors,
        stats,
        threshold,
        selected,
    })
}

fn learning_rate(
    mode: RateMode,
    complexity: ComplexityProfile,
    num_actions: usize,
    n_prev: usize,
    m: u32,
    delta_m: f64,
) -> Result<LearningRate> {
    match (mode, complexity) {
        (RateMode::FiniteCardinality, ComplexityProfile::Finite { log_cardinality }) => {
            falcon_learning_rate(num_actions, n_prev, log_cardinality, m, delta_m)
        }
        (RateMode::Xi, profile @ ComplexityProfile::Linear { .. }) => {
            let xi = profile.xi(n_prev).expect("linear profile has a rate");
            Ok(xi_learning_rate(num_actions, xi)?.with_provenance(m, 0, delta_m))
        }
        (mode, profile) => Err(Error::contract(format!(
            "rate mode {mode:?} does not apply to {profile:?}"
        ))),
    }
}

/// Runs ACB for `horizon` rounds.
pub fn run_acb<E, L>(env: &E, ladder: &L, horizon: usize, config: &AcbConfig, rng: &mut TrialRng) -> Result<AcbRun>
where
    E: Environment,
    L: ModelLadder<E::Context>,
{
    if horizon < 2 {
        return Err(Error::contract("ACB needs T >= 2"));
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(Error::contract(format!("delta = {} outside (0, 1)", config.delta)));
    }
    let num_classes = ladder.num_classes();
    if num_classes == 0 {
        return Err(Error::contract("ladder has no classes"));
    }
    let k = env.num_actions();
    let mut outcome = RunOutcome {
        ledger: RegretLedger::with_capacity(horizon),
        segments: Vec::new(),
    };
    let mut trace = Vec::new();
    let mut prev: Vec<InteractionRecord<E::Context>> = Vec::new();

    for (m, start, end) in EpochSchedule::new(horizon).epochs() {
        let mut current = Vec::with_capacity(end + 1 - start);
        let selection = if m == 1 { None } else { Some(select_on_epoch(ladder, &prev, m)) };
        match selection {
            None | Some(Err(Error::InsufficientData { .. })) => {
                outcome.open_segment(m, Some(num_classes));
                trace.push(EpochTrace {
                    epoch: m,
                    stats: Vec::new(),
                    threshold: None,
                    selected: num_classes,
                    rho: None,
                });
                let uniform = PolicyDistribution::uniform(k);
                for _ in start..=end {
                    let x = env.sample_context(&mut rng.contexts);
                    current.push(play_round(env, x, &uniform, rng, &mut outcome));
                }
            }
            Some(Err(e)) => return Err(e),
            Some(Ok(sel)) => {
                let delta_m = if config.known_horizon_delta {
                    config.delta / (horizon as f64).ln().max(1.0)
                } else {
                    epoch_delta(config.delta, m)
                };
                let ell = sel.selected;
                let rate = learning_rate(config.rate_mode, ladder.complexity(ell), k, prev.len(), m, delta_m)?
                    .with_provenance(m, ell, delta_m);
                outcome.open_segment(m, Some(ell));
                trace.push(EpochTrace {
                    epoch: m,
                    stats: sel.stats,
                    threshold: Some(sel.threshold),
                    selected: ell,
                    rho: Some(rate.rho),
                });
                let regressor = &sel.regressors[ell - 1];
                for _ in start..=end {
                    let x = env.sample_context(&mut rng.contexts);
                    let policy = igw_distribution(&ladder.predictions(regressor, &x, k), rate)?;
                    current.push(play_round(env, x, &policy, rng, &mut outcome));
                }
            }
        }
        prev = current;
    }
    Ok(AcbRun {
        outcome: outcome.finish(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionIndex;
    use crate::envs::{build_separated_ladder, FiniteLadder, GridCell, LadderSpec, NestedFeatureInstance};
    use crate::falcon::{run_falcon, FitWindow};
    use crate::oracle::LinearLadder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ladder(seed: u64) -> FiniteLadder {
        build_separated_ladder(&LadderSpec::standard(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn records(env: &FiniteLadder, n: usize, seed: u64) -> Vec<InteractionRecord<GridCell>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = env.sample_context(&mut rng);
                let a = ActionIndex(rng.random_range(0..env.num_actions));
                env.observe(&x, a, &mut rng)
            })
            .collect()
    }

    #[test]
    fn split_examples() {
        let env = ladder(0);
        let r = records(&env, 8, 1);
        let (a, b) = split_epoch_data(&r).unwrap();
        assert_eq!((a, b), (&r[..4], &r[4..]));
        let (a, b) = split_epoch_data(&r[..2]).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        let (a, b) = split_epoch_data(&r[..7]).unwrap();
        assert_eq!((a.len(), b.len()), (4, 3));
        assert!(matches!(
            split_epoch_data(&r[..1]),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn test_statistic_examples() {
        let env = ladder(0);
        let f = FittedRegressor::Finite {
            class: 1,
            member: 0,
            training_loss: 0.0,
        };
        let table = &env.members[0];
        let residuals = [0.1, -0.2, 0.3];
        let test: Vec<_> = residuals
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let (x, a) = (GridCell(i), ActionIndex(i % 3));
                InteractionRecord::new(x, a, table.eval(3, x, a) - e).unwrap()
            })
            .collect();
        let s = test_statistic(&env, &f, &test).unwrap();
        assert!((s - 0.14 / 3.0).abs() < 1e-12, "{s}");
        let exact: Vec<_> = test
            .iter()
            .map(|r| InteractionRecord::new(r.context, r.action, table.eval(3, r.context, r.action)).unwrap())
            .collect();
        assert_eq!(test_statistic(&env, &f, &exact).unwrap(), 0.0);
        assert!(test_statistic(&env, &f, &[]).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_with_addend(&[0.9, 0.3, 0.31], 0.05), 2);
        assert_eq!(select_class(&[0.4], 3), 1);
        assert_eq!(select_class(&[0.2, 0.2, 0.2], 7), 1);
        // the two written forms of the addend agree
        for m in 1..40 {
            let alt = (f64::from(m) / 2f64.powi(m as i32)).sqrt();
            assert!((threshold_addend(m) - alt).abs() < 1e-15);
        }
    }

    #[test]
    fn last_class_always_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let m = rng.random_range(1..60);
            let stats: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random()).collect();
            let ell = select_class(&stats, m);
            assert!((1..=stats.len()).contains(&ell));
            assert!(stats[ell - 1] <= stats[stats.len() - 1] + threshold_addend(m));
            assert!(stats[..ell - 1].iter().all(|&s| s > stats[stats.len() - 1] + threshold_addend(m)));
        }
    }

    #[test]
    fn fits_never_see_the_test_half() {
        let env = ladder(2);
        let prev = records(&env, 64, 3);
        let clean = select_on_epoch(&env, &prev, 6).unwrap();
        let mut poisoned = prev.clone();
        for r in &mut poisoned[32..] {
            r.reward = 1.0 - r.reward;
        }
        let dirty = select_on_epoch(&env, &poisoned, 6).unwrap();
        assert_eq!(clean.regressors, dirty.regressors);
        assert_ne!(clean.stats, dirty.stats);
    }

    #[test]
    fn single_class_matches_falcon_on_first_half() {
        let full = ladder(4);
        let env = FiniteLadder::from_parts(
            full.num_actions,
            full.grid_size,
            vec![full.class_sizes[1]],
            full.class(2).to_vec(),
            full.context_weights.clone(),
            1,
            full.f_star,
            full.noise,
        )
        .unwrap();
        let horizon = 1000;
        let acb = run_acb(&env, &env, horizon, &AcbConfig::default(), &mut TrialRng::new(3, 1, "x")).unwrap();
        let falcon = run_falcon(&env, &env, 1, horizon, 0.05, FitWindow::FirstHalf, &mut TrialRng::new(3, 1, "x")).unwrap();
        assert_eq!(acb.outcome.ledger, falcon.ledger);
        assert!(acb.trace.iter().all(|e| e.selected == 1));
    }

    #[test]
    fn trace_covers_every_epoch() {
        let env = ladder(6);
        let run = run_acb(&env, &env, 300, &AcbConfig::default(), &mut TrialRng::new(1, 0, "acb")).unwrap();
        assert_eq!(run.ledger().len(), 300);
        let epochs: Vec<u32> = run.trace.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, (1..=9).collect::<Vec<_>>());
        assert_eq!(run.trace[0].selected, 3);
        assert!(run.trace[1..].iter().all(|e| e.stats.len() == 3 && e.rho.unwrap() > 0.0));
        let again = run_acb(&env, &env, 300, &AcbConfig::default(), &mut TrialRng::new(1, 0, "acb")).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn known_horizon_delta_changes_rates_only() {
        let env = ladder(6);
        let cfg = AcbConfig {
            known_horizon_delta: true,
            ..AcbConfig::default()
        };
        let run = run_acb(&env, &env, 300, &cfg, &mut TrialRng::new(1, 0, "acb")).unwrap();
        let base = run_acb(&env, &env, 300, &AcbConfig::default(), &mut TrialRng::new(1, 0, "acb")).unwrap();
        for (a, b) in run.trace.iter().zip(&base.trace).skip(1) {
            assert_eq!(a.stats, b.stats);
            // δ/ln 300 ≈ δ/5.7 sits between δ/2^2 and δ/2^3
            if a.epoch >= 3 {
                assert!(a.rho.unwrap() > b.rho.unwrap());
            } else {
                assert!(a.rho.unwrap() < b.rho.unwrap());
            }
        }
    }

    #[test]
    fn xi_mode_runs_on_linear_ladders() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let env = NestedFeatureInstance::random(3, vec![2, 4, 8], 2, 0.3, 0.1, &mut rng).unwrap();
        let lad = LinearLadder::new(env.dims.clone());
        let cfg = AcbConfig {
            rate_mode: RateMode::Xi,
            ..AcbConfig::default()
        };
        let run = run_acb(&env, &lad, 512, &cfg, &mut TrialRng::new(2, 0, "acb")).unwrap();
        assert_eq!(run.ledger().len(), 512);
        assert!(matches!(
            run_acb(&env, &lad, 512, &AcbConfig::default(), &mut TrialRng::new(2, 0, "acb")),
            Err(Error::Contract(_))
        ));
    }
}
