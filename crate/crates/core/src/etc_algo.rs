//! Explore-then-commit model selection: two uniform exploration blocks of
//! `⌈√T⌉` rounds, one selection test, then IGW play on the chosen class.

use serde::{Deserialize, Serialize};

use crate::acb::{select_with_addend, test_statistic};
use crate::domain::{InteractionRecord, PolicyDistribution, RegretLedger, RunOutcome};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::falcon::play_round;
use crate::igw::{falcon_learning_rate, igw_distribution};
use crate::oracle::{ComplexityProfile, FittedRegressor, ModelLadder};
use crate::rng::TrialRng;

/// Block lengths and threshold for a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtcPlan {
    pub horizon: usize,
    /// `n_e = ⌈√T⌉` rounds per exploration block.
    pub explore_len: usize,
    /// `sqrt(ln T / √T)`.
    pub addend: f64,
}

impl EtcPlan {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon < 9 {
            return Err(Error::contract(format!("ETC needs T >= 9, got {horizon}")));
        }
        let t = horizon as f64;
        let explore_len = ceil_sqrt(horizon);
        Ok(Self {
            horizon,
            explore_len,
            addend: (t.ln() / t.sqrt()).sqrt(),
        })
    }
}

fn ceil_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r
}

/// The single selection step: statistics, threshold and chosen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtcSelection {
    pub stats: Vec<f64>,
    pub threshold: f64,
    /// Chosen class `ℓ`, 1-based.
    pub selected: usize,
    /// Fixed commit-phase `ρ`.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtcRun {
    pub outcome: RunOutcome,
    pub selection: EtcSelection,
}

/// Fits every class on `fit` and scores them on `test`.
pub fn etc_select<C, L: ModelLadder<C>>(
    ladder: &L,
    fit: &[InteractionRecord<C>],
    test: &[InteractionRecord<C>],
    addend: f64,
) -> Result<(Vec<FittedRegressor>, Vec<f64>, usize)> {
    let regressors = ladder.fit_all(fit)?;
    let stats = regressors
        .iter()
        .map(|f| test_statistic(ladder, f, test))
        .collect::<Result<Vec<_>>>()?;
    let selected = select_with_addend(&stats, addend);
    Ok((regressors, stats, selected))
}

/// Runs ETC for `horizon` rounds. Segments: 1 and 2 are the exploration
/// blocks, 3 the commit phase.
pub fn run_etc<E, L>(env: &E, ladder: &L, horizon: usize, delta: f64, rng: &mut TrialRng) -> Result<EtcRun>
where
    E: Environment,
    L: ModelLadder<E::Context>,
{
    let plan = EtcPlan::new(horizon)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::contract(format!("delta = {delta} outside (0, 1)")));
    }
    if ladder.num_classes() == 0 {
        return Err(Error::contract("ladder has no classes"));
    }
    let k = env.num_actions();
    let uniform = PolicyDistribution::uniform(k);
    let mut outcome = RunOutcome {
        ledger: RegretLedger::with_capacity(horizon),
        segments: Vec::new(),
    };
    let mut blocks = [Vec::new(), Vec::new()];
    for (b, block) in blocks.iter_mut().enumerate() {
        outcome.open_segment(b as u32 + 1, None);
        for _ in 0..plan.explore_len {
            let x = env.sample_context(&mut rng.contexts);
            block.push(play_round(env, x, &uniform, rng, &mut outcome));
        }
    }
    let (regressors, stats, selected) = etc_select(ladder, &blocks[0], &blocks[1], plan.addend)?;
    let ComplexityProfile::Finite { log_cardinality } = ladder.complexity(selected) else {
        return Err(Error::contract("ETC runs on finite classes"));
    };
    let rate = falcon_learning_rate(k, plan.explore_len, log_cardinality, 1, delta)?.with_provenance(1, selected, delta);
    let regressor = &regressors[selected - 1];
    outcome.open_segment(3, Some(selected));
    for _ in 2 * plan.explore_len..horizon {
        let x = env.sample_context(&mut rng.contexts);
        let policy = igw_distribution(&ladder.predictions(regressor, &x, k), rate)?;
        play_round(env, x, &policy, rng, &mut outcome);
    }
    let threshold = stats[stats.len() - 1] + plan.addend;
    Ok(EtcRun {
        outcome: outcome.finish(),
        selection: EtcSelection {
            stats,
            threshold,
            selected,
            rho: rate.rho,
        },
    })
}
