//! Offline regression oracles: exact ERM over finite function classes and
//! coordinate-restricted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{ActionIndex, InteractionRecord};
use crate::envs::{FeatureContext, FiniteLadder, FunctionTable, GridCell};
use crate::error::{Error, Result};

/// Output of an oracle call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedRegressor {
    /// Member `member` of class `class` (1-based) of a finite ladder.
    Finite {
        class: usize,
        member: usize,
        training_loss: f64,
    },
    /// `θ̂` in ambient coordinates, exactly zero off `active`.
    Linear {
        theta: Vec<f64>,
        active: Vec<usize>,
        training_loss: f64,
    },
}

impl FittedRegressor {
    pub fn training_loss(&self) -> f64 {
        match self {
            FittedRegressor::Finite { training_loss, .. } | FittedRegressor::Linear { training_loss, .. } => {
                *training_loss
            }
        }
    }

    pub fn theta(&self) -> Option<&[f64]> {
        match self {
            FittedRegressor::Linear { theta, .. } => Some(theta),
            FittedRegressor::Finite { .. } => None,
        }
    }
}

/// Statistical complexity of one class, as used by the learning-rate rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComplexityProfile {
    /// `log |F_j|`.
    Finite { log_cardinality: f64 },
    /// Linear class of dimension `dim` with rate `ξ(n) = c·dim·ln(max(n,3))/n`.
    Linear { dim: usize, multiplier: f64 },
}

impl ComplexityProfile {
    /// Excess-risk rate `ξ(n)`; `None` for finite classes.
    ///
    /// `ln(max(n, 3))` keeps `ξ` strictly decreasing for every `n >= 1`
    /// (`ln(n)/n` rises between 2 and 3).
    pub fn xi(&self, n: usize) -> Option<f64> {
        match *self {
            ComplexityProfile::Finite { .. } => None,
            ComplexityProfile::Linear { dim, multiplier } => {
                let n = n.max(1) as f64;
                Some(multiplier * dim as f64 * n.max(3.0).ln() / n)
            }
        }
    }
}

/// Squared-loss sums of every table against `data`, accumulated left to right.
pub fn member_losses(members: &[FunctionTable], num_actions: usize, data: &[InteractionRecord<GridCell>]) -> Vec<f64> {
    members
        .iter()
        .map(|f| {
            data.iter().fold(0.0, |acc, rec| {
                let e = f.eval(num_actions, rec.context, rec.action) - rec.reward;
                acc + e * e
            })
        })
        .collect()
}

/// Squared-loss ERM over an explicit class; ties go to the lowest member index.
pub fn erm_finite(
    class: usize,
    members: &[FunctionTable],
    num_actions: usize,
    data: &[InteractionRecord<GridCell>],
) -> Result<FittedRegressor> {
    if data.is_empty() {
        return Err(Error::contract("ERM on an empty data set"));
    }
    if members.is_empty() {
        return Err(Error::contract("ERM over an empty class"));
    }
    let losses = member_losses(members, num_actions, data);
    let (member, sum) = argmin_first(&losses);
    Ok(FittedRegressor::Finite {
        class,
        member,
        training_loss: sum / data.len() as f64,
    })
}

fn argmin_first(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// ERM for every class of a nested ladder from a single pass over the
/// largest class; class `j` takes the argmin over its prefix.
pub fn erm_all_classes(ladder: &FiniteLadder, data: &[InteractionRecord<GridCell>]) -> Result<Vec<FittedRegressor>> {
    if data.is_empty() {
        return Err(Error::contract("ERM on an empty data set"));
    }
    let losses = member_losses(&ladder.members, ladder.num_actions, data);
    let n = data.len() as f64;
    Ok(ladder
        .class_sizes
        .iter()
        .enumerate()
        .map(|(j, &size)| {
            let (member, sum) = argmin_first(&losses[..size]);
            FittedRegressor::Finite {
                class: j + 1,
                member,
                training_loss: sum / n,
            }
        })
        .collect())
}

/// Training loss of the ERM for each class, in class order.
pub fn erm_training_loss_profile(ladder: &FiniteLadder, data: &[InteractionRecord<GridCell>]) -> Result<Vec<f64>> {
    Ok(erm_all_classes(ladder, data)?
        .iter()
        .map(FittedRegressor::training_loss)
        .collect())
}

/// Least squares restricted to the `active` coordinates, embedded back into
/// `R^d` with exact zeros elsewhere.
///
/// Solved by SVD; a design whose numerical rank is below `|active|` is
/// rejected with [`Error::SingularDesign`].
pub fn least_squares<X: AsRef<[f64]>>(rows: &[X], rewards: &[f64], active: &[usize]) -> Result<FittedRegressor> {
    solve_restricted(rows, rewards, active, false)
}

/// Minimum-norm least squares: like [`least_squares`] but rank-deficient
/// designs resolve to the pseudo-inverse solution instead of an error.
pub fn least_squares_min_norm<X: AsRef<[f64]>>(
    rows: &[X],
    rewards: &[f64],
    active: &[usize],
) -> Result<FittedRegressor> {
    solve_restricted(rows, rewards, active, true)
}

fn solve_restricted<X: AsRef<[f64]>>(
    rows: &[X],
    rewards: &[f64],
    active: &[usize],
    allow_deficient: bool,
) -> Result<FittedRegressor> {
    let n = rows.len();
    let k = active.len();
    if k == 0 {
        return Err(Error::contract("least squares with an empty active set"));
    }
    if rewards.len() != n {
        return Err(Error::contract("rows and rewards differ in length"));
    }
    if n == 0 || (!allow_deficient && n < k) {
        return Err(Error::SingularDesign { rank: n.min(k), cols: k });
    }
    let d = rows[0].as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != d) || active.iter().any(|&c| c >= d) {
        return Err(Error::contract("ragged design or active coordinate out of range"));
    }
    let a = DMatrix::from_fn(n, k, |i, j| rows[i].as_ref()[active[j]]);
    let y = DVector::from_column_slice(rewards);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (n.max(k) as f64) * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < k && !allow_deficient {
        return Err(Error::SingularDesign { rank, cols: k });
    }
    let coef = svd
        .solve(&y, tol)
        .map_err(|e| Error::contract(format!("SVD solve failed: {e}")))?;
    let resid = &a * &coef - &y;
    let training_loss = resid.norm_squared() / n as f64;
    let mut theta = vec![0.0; d];
    for (j, &c) in active.iter().enumerate() {
        theta[c] = coef[j];
    }
    Ok(FittedRegressor::Linear {
        theta,
        active: active.to_vec(),
        training_loss,
    })
}

/// A nested sequence of hypothesis classes an algorithm selects among.
pub trait ModelLadder<C> {
    fn num_classes(&self) -> usize;

    /// Oracle fit of class `class` (1-based).
    fn fit(&self, class: usize, data: &[InteractionRecord<C>]) -> Result<FittedRegressor>;

    /// Oracle fit for every class `1..=M` on the same data.
    fn fit_all(&self, data: &[InteractionRecord<C>]) -> Result<Vec<FittedRegressor>> {
        (1..=self.num_classes()).map(|j| self.fit(j, data)).collect()
    }

    fn predict(&self, regressor: &FittedRegressor, context: &C, action: ActionIndex) -> f64;

    fn complexity(&self, class: usize) -> ComplexityProfile;

    fn predictions(&self, regressor: &FittedRegressor, context: &C, num_actions: usize) -> Vec<f64> {
        (0..num_actions)
            .map(|a| self.predict(regressor, context, ActionIndex(a)))
            .collect()
    }
}

impl ModelLadder<GridCell> for FiniteLadder {
    fn num_classes(&self) -> usize {
        self.class_sizes.len()
    }

    fn fit(&self, class: usize, data: &[InteractionRecord<GridCell>]) -> Result<FittedRegressor> {
        if !(1..=self.num_classes()).contains(&class) {
            return Err(Error::contract(format!("class {class} outside the ladder")));
        }
        erm_finite(class, self.class(class), self.num_actions, data)
    }

    fn fit_all(&self, data: &[InteractionRecord<GridCell>]) -> Result<Vec<FittedRegressor>> {
        erm_all_classes(self, data)
    }

    fn predict(&self, regressor: &FittedRegressor, context: &GridCell, action: ActionIndex) -> f64 {
        match regressor {
            FittedRegressor::Finite { member, .. } => self.members[*member].eval(self.num_actions, *context, action),
            FittedRegressor::Linear { .. } => panic!("linear regressor on a finite ladder"),
        }
    }

    fn complexity(&self, class: usize) -> ComplexityProfile {
        ComplexityProfile::Finite {
            log_cardinality: (self.class_sizes[class - 1] as f64).ln(),
        }
    }
}

/// Nested linear classes `{⟨θ, φ^m(x,a)⟩ : θ ∈ R^{d_m}}` over feature prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLadder {
    pub dims: Vec<usize>,
    /// Multiplier `c` in `ξ(n) = c·d·ln(n)/n`.
    pub xi_multiplier: f64,
}

impl LinearLadder {
    pub fn new(dims: Vec<usize>) -> Self {
        Self {
            dims,
            xi_multiplier: 1.0,
        }
    }
}

impl ModelLadder<FeatureContext> for LinearLadder {
    fn num_classes(&self) -> usize {
        self.dims.len()
    }

    /// Least squares on the class's feature prefix. Early epochs can have
    /// fewer samples than coordinates, so the minimum-norm minimizer is used.
    fn fit(&self, class: usize, data: &[InteractionRecord<FeatureContext>]) -> Result<FittedRegressor> {
        let Some(&dm) = class.checked_sub(1).and_then(|i| self.dims.get(i)) else {
            return Err(Error::contract(format!("class {class} outside the ladder")));
        };
        if data.is_empty() {
            return Err(Error::contract("least squares on an empty data set"));
        }
        let rows: Vec<&[f64]> = data.iter().map(|r| r.context.features[r.action.0].as_slice()).collect();
        let y: Vec<f64> = data.iter().map(|r| r.reward).collect();
        let active: Vec<usize> = (0..dm).collect();
        least_squares_min_norm(&rows, &y, &active)
    }

    fn predict(&self, regressor: &FittedRegressor, context: &FeatureContext, action: ActionIndex) -> f64 {
        match regressor {
            FittedRegressor::Linear { theta, active, .. } => {
                let phi = &context.features[action.0];
                active.iter().map(|&k| theta[k] * phi[k]).sum()
            }
            FittedRegressor::Finite { .. } => panic!("finite regressor on a linear ladder"),
        }
    }

    fn complexity(&self, class: usize) -> ComplexityProfile {
        ComplexityProfile::Linear {
            dim: self.dims[class - 1],
            multiplier: self.xi_multiplier,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_separated_ladder, Environment, LadderSpec, NoiseModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_table(rng: &mut ChaCha8Rng, cells: usize) -> FunctionTable {
        FunctionTable {
            values: (0..cells).map(|_| rng.random()).collect(),
        }
    }

    #[test]
    fn noiseless_member_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, grid) = (3, 8);
        let members: Vec<_> = (0..10).map(|_| random_table(&mut rng, k * grid)).collect();
        let data: Vec<_> = (0..200)
            .map(|_| {
                let c = GridCell(rng.random_range(0..grid));
                let a = ActionIndex(rng.random_range(0..k));
                InteractionRecord::new(c, a, members[3].eval(k, c, a)).unwrap()
            })
            .collect();
        let fit = erm_finite(2, &members, k, &data).unwrap();
        assert_eq!(
            fit,
            FittedRegressor::Finite {
                class: 2,
                member: 3,
                training_loss: 0.0
            }
        );
    }

    #[test]
    fn erm_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let (k, grid) = (rng.random_range(1..5), rng.random_range(1..6));
            let size = rng.random_range(1..=64);
            let members: Vec<_> = (0..size).map(|_| random_table(&mut rng, k * grid)).collect();
            let n = rng.random_range(1..40);
            let data: Vec<_> = (0..n)
                .map(|_| {
                    InteractionRecord::new(
                        GridCell(rng.random_range(0..grid)),
                        ActionIndex(rng.random_range(0..k)),
                        rng.random(),
                    )
                    .unwrap()
                })
                .collect();
            let FittedRegressor::Finite { member, .. } = erm_finite(1, &members, k, &data).unwrap() else {
                unreachable!()
            };
            let loss = |f: &FunctionTable| -> f64 {
                data.iter()
                    .map(|r| (f.values[r.context.0 * k + r.action.0] - r.reward).powi(2))
                    .sum()
            };
            let best = loss(&members[member]);
            for (i, f) in members.iter().enumerate() {
                let l = loss(f);
                assert!(l >= best, "member {i} beats the ERM");
                if i < member {
                    assert!(l > best, "tie not broken toward lowest index");
                }
            }
        }
    }

    #[test]
    fn singleton_class_and_empty_inputs() {
        let t = FunctionTable { values: vec![0.3; 4] };
        let rec = InteractionRecord::new(GridCell(1), ActionIndex(0), 0.9).unwrap();
        let fit = erm_finite(1, std::slice::from_ref(&t), 2, std::slice::from_ref(&rec)).unwrap();
        assert!(matches!(fit, FittedRegressor::Finite { member: 0, .. }));
        assert!(erm_finite(1, &[t.clone()], 2, &[]).is_err());
        assert!(erm_finite(1, &[], 2, &[rec]).is_err());
    }

    #[test]
    fn training_loss_is_recomputable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let members: Vec<_> = (0..20).map(|_| random_table(&mut rng, 6)).collect();
        let data: Vec<_> = (0..50)
            .map(|_| {
                InteractionRecord::new(GridCell(rng.random_range(0..3)), ActionIndex(rng.random_range(0..2)), rng.random())
                    .unwrap()
            })
            .collect();
        let FittedRegressor::Finite { member, training_loss, .. } = erm_finite(1, &members, 2, &data).unwrap() else {
            unreachable!()
        };
        let mse = data
            .iter()
            .map(|r| (members[member].eval(2, r.context, r.action) - r.reward).powi(2))
            .sum::<f64>()
            / 50.0;
        assert!((mse - training_loss).abs() < 1e-14);
    }

    #[test]
    fn loss_profile_examples() {
        let spec = LadderSpec {
            noise: NoiseModel::Uniform { half_width: 0.0 },
            ..LadderSpec::standard()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ladder = build_separated_ladder(&spec, &mut rng).unwrap();
        let data: Vec<_> = (0..300)
            .map(|_| {
                let x = ladder.sample_context(&mut rng);
                let a = ActionIndex(rng.random_range(0..3));
                ladder.observe(&x, a, &mut rng)
            })
            .collect();
        let profile = erm_training_loss_profile(&ladder, &data).unwrap();
        assert_eq!(profile.len(), 3);
        assert!(profile.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*profile.last().unwrap(), 0.0);

        let single = LadderSpec {
            class_sizes: vec![7],
            ..spec
        };
        let l1 = build_separated_ladder(&single, &mut rng).unwrap();
        let p1 = erm_training_loss_profile(&l1, &data).unwrap();
        let direct = erm_finite(1, l1.class(1), 3, &data).unwrap();
        assert_eq!(p1, vec![direct.training_loss()]);
    }

    #[test]
    fn least_squares_identity_design() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let y = [0.3, -1.2, 4.0];
        let fit = least_squares(&rows, &y, &[0, 1, 2]).unwrap();
        for (a, b) in fit.theta().unwrap().iter().zip(y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn least_squares_interpolates_noiseless_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.iter().zip(&theta).map(|(a, b)| a * b).sum()).collect();
        let fit = least_squares(&rows, &y, &[0, 1, 2, 3, 4, 5]).unwrap();
        for (a, b) in fit.theta().unwrap().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn restricted_fit_has_exact_zeros_and_matches_full_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.sample(StandardNormal)).collect();
        let fit = least_squares(&rows, &y, &[1, 3]).unwrap();
        let theta = fit.theta().unwrap();
        assert_eq!((theta[0], theta[2], theta[4]), (0.0, 0.0, 0.0));
        let restricted_rows: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[1], r[3]]).collect();
        let direct = least_squares(&restricted_rows, &y, &[0, 1]).unwrap();
        assert!((direct.theta().unwrap()[0] - theta[1]).abs() < 1e-12);
        assert!((direct.theta().unwrap()[1] - theta[3]).abs() < 1e-12);
    }

    #[test]
    fn full_active_set_equals_unrestricted_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
        let fit = least_squares(&rows, &y, &[0, 1, 2, 3]).unwrap();
        let a = DMatrix::from_fn(25, 4, |i, j| rows[i][j]);
        let normal = (a.transpose() * &a)
            .cholesky()
            .unwrap()
            .solve(&(a.transpose() * DVector::from_column_slice(&y)));
        for j in 0..4 {
            assert!((fit.theta().unwrap()[j] - normal[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficiency_reports_rank() {
        let rows = vec![vec![1.0, 2.0, 0.0], vec![2.0, 4.0, 0.0], vec![0.5, 1.0, 0.0], vec![3.0, 6.0, 0.0]];
        let y = [1.0, 2.0, 3.0, 4.0];
        match least_squares(&rows, &y, &[0, 1, 2]) {
            Err(Error::SingularDesign { rank, cols }) => assert_eq!((rank, cols), (1, 3)),
            other => panic!("expected singular design, got {other:?}"),
        }
        assert!(matches!(
            least_squares(&rows[..2], &y[..2], &[0, 1, 2]),
            Err(Error::SingularDesign { .. })
        ));
        let min_norm = least_squares_min_norm(&rows, &y, &[0, 1, 2]).unwrap();
        assert_eq!(min_norm.theta().unwrap()[2], 0.0);
    }

    #[test]
    fn xi_is_strictly_decreasing() {
        let p = ComplexityProfile::Linear { dim: 7, multiplier: 1.0 };
        let mut prev = f64::INFINITY;
        for n in 1..5000 {
            let xi = p.xi(n).unwrap();
            assert!(xi < prev, "n = {n}");
            prev = xi;
        }
        assert_eq!(ComplexityProfile::Finite { log_cardinality: 2.0 }.xi(10), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn residual_is_orthogonal_to_active_columns(seed in any::<u64>(), n in 8usize..60, d in 1usize..8) {
            prop_assume!(n >= d);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let active: Vec<usize> = (0..d).collect();
            let fit = least_squares(&rows, &y, &active).unwrap();
            let theta = fit.theta().unwrap();
            let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for j in 0..d {
                let g: f64 = rows.iter().zip(&y).map(|(r, yi)| {
                    let pred: f64 = r.iter().zip(theta).map(|(a, b)| a * b).sum();
                    r[j] * (pred - yi)
                }).sum();
                prop_assert!(g.abs() <= 1e-6 * (1.0 + ymax));
            }
        }
    }
}
