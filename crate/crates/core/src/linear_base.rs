//! Linear-bandit base learners: OFUL over the unit ball or a finite arm set,
//! and SupLinRel for finitely many arms.
//!
//! Confidence widths use the self-normalized bound
//! `β_t = σ·sqrt(d·ln((1 + t·L²/λ)/δ)) + √λ·L` with `λ = 1`, `L = 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::ActionIndex;
use crate::error::{Error, Result};

/// Regularization, norm bound, noise scale and confidence level of an
/// OFUL-style estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    pub lambda: f64,
    /// `L` with `‖θ*‖ ≤ L`.
    pub bound: f64,
    /// Sub-gaussian noise scale `σ`.
    pub sigma: f64,
    pub delta: f64,
}

impl ConfidenceParams {
    pub fn new(sigma: f64, delta: f64) -> Self {
        Self {
            lambda: 1.0,
            bound: 1.0,
            sigma,
            delta,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.bound >= 0.0 && self.sigma >= 0.0) {
            return Err(Error::contract("need lambda > 0, L >= 0, sigma >= 0"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::contract(format!("delta = {} outside (0, 1)", self.delta)));
        }
        Ok(())
    }

    /// `β_t` for dimension `dim` after `t` observations.
    pub fn beta(&self, dim: usize, t: usize) -> f64 {
        let l2 = self.bound * self.bound;
        let inner = (1.0 + t as f64 * l2 / self.lambda) / self.delta;
        self.sigma * (dim as f64 * inner.ln()).sqrt() + self.lambda.sqrt() * self.bound
    }
}

/// Ridge statistics `V = λI + Σ x xᵀ`, `V⁻¹` (Sherman-Morrison) and `b = Σ x y`.
#[derive(Debug, Clone, PartialEq)]
struct RidgeStats {
    v: DMatrix<f64>,
    v_inv: DMatrix<f64>,
    b: DVector<f64>,
    count: usize,
}

impl RidgeStats {
    fn new(dim: usize, lambda: f64) -> Self {
        Self {
            v: DMatrix::identity(dim, dim) * lambda,
            v_inv: DMatrix::identity(dim, dim) / lambda,
            b: DVector::zeros(dim),
            count: 0,
        }
    }

    fn update(&mut self, x: &DVector<f64>, y: f64) {
        self.v.ger(1.0, x, x, 1.0);
        let vx = &self.v_inv * x;
        let denom = 1.0 + x.dot(&vx);
        self.v_inv.ger(-1.0 / denom, &vx, &vx, 1.0);
        self.b.axpy(y, x, 1.0);
        self.count += 1;
    }

    fn theta_hat(&self) -> DVector<f64> {
        &self.v_inv * &self.b
    }

    fn inv_norm(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.v_inv * x)).max(0.0).sqrt()
    }
}

/// OFUL state over `dim` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct OfulState {
    params: ConfidenceParams,
    stats: RidgeStats,
}

impl OfulState {
    pub fn new(dim: usize, params: ConfidenceParams) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("OFUL over zero coordinates"));
        }
        params.validate()?;
        Ok(Self {
            params,
            stats: RidgeStats::new(dim, params.lambda),
        })
    }

    pub fn dim(&self) -> usize {
        self.stats.b.len()
    }

    pub fn rounds(&self) -> usize {
        self.stats.count
    }

    pub fn beta(&self) -> f64 {
        self.params.beta(self.dim(), self.stats.count)
    }

    pub fn theta_hat(&self) -> Vec<f64> {
        self.stats.theta_hat().as_slice().to_vec()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.stats.v
    }

    pub fn update(&mut self, x: &[f64], reward: f64) {
        assert_eq!(x.len(), self.dim(), "arm dimension mismatch");
        self.stats.update(&DVector::from_column_slice(x), reward);
    }

    /// `(θ̂ − θ)ᵀ V (θ̂ − θ) ≤ β²`.
    pub fn ellipsoid_contains(&self, theta: &[f64]) -> bool {
        let diff = self.stats.theta_hat() - DVector::from_column_slice(theta);
        let beta = self.beta();
        diff.dot(&(&self.stats.v * &diff)) <= beta * beta
    }

    /// Maximizer of `⟨x, θ̂⟩ + β‖x‖_{V⁻¹}` over the unit ball.
    pub fn choose_ball(&self) -> Result<Vec<f64>> {
        maximize_over_ball(&self.stats.v, &self.stats.theta_hat(), self.beta())
    }

    /// UCB index `⟨x, θ̂⟩ + β‖x‖_{V⁻¹}` maximized over `arms`, lowest index on ties.
    pub fn choose_finite<X: AsRef<[f64]>>(&self, arms: &[X]) -> Result<ActionIndex> {
        let theta = self.stats.theta_hat();
        let beta = self.beta();
        let index: Vec<f64> = arms
            .iter()
            .map(|a| {
                let x = DVector::from_column_slice(a.as_ref());
                x.dot(&theta) + beta * self.stats.inv_norm(&x)
            })
            .collect();
        crate::domain::argmax_with_ties(&index)
    }
}

/// Relative tolerance on the ellipsoid boundary condition `uᵀVu = β²`.
pub const BALL_TOL: f64 = 1e-10;

/// `argmax_{‖x‖≤1} ⟨x, θ̂⟩ + β‖x‖_{V⁻¹}`.
///
/// The optimum equals `max ‖θ‖` over the ellipsoid `(θ−θ̂)ᵀV(θ−θ̂) ≤ β²`,
/// attained at `x = θ/‖θ‖`. In the eigenbasis `V = QΛQᵀ`, `c = Qᵀθ̂`, the
/// maximizing offset is `u_i = c_i/(μλ_i − 1)` with `μ > 1/λ_min` solving
/// `Σ λ_i c_i²/(μλ_i − 1)² = β²`. When no such `μ` exists (`c` has no mass on
/// the bottom eigenspace) the remainder goes along a bottom eigenvector.
pub fn maximize_over_ball(v: &DMatrix<f64>, theta_hat: &DVector<f64>, beta: f64) -> Result<Vec<f64>> {
    let d = theta_hat.len();
    let unit_or_e1 = |t: &DVector<f64>| {
        let n = t.norm();
        if n > 0.0 {
            (t / n).as_slice().to_vec()
        } else {
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            e
        }
    };
    if beta <= 0.0 {
        return Ok(unit_or_e1(theta_hat));
    }
    let eig = v.clone().symmetric_eigen();
    let lam = &eig.eigenvalues;
    let (jmin, lmin) = lam.iter().copied().enumerate().fold((0, f64::INFINITY), |acc, (i, l)| {
        if l < acc.1 {
            (i, l)
        } else {
            acc
        }
    });
    if !(lmin > 0.0) || lam.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract(format!(
            "Gram matrix is not positive definite: eigenvalues {:?}",
            lam.as_slice()
        )));
    }
    let c = eig.eigenvectors.transpose() * theta_hat;
    let beta2 = beta * beta;
    // a_i(s) = μλ_i − 1 written with s = μ − 1/λ_min to avoid cancellation
    let gap: Vec<f64> = lam.iter().map(|&l| (l - lmin) / lmin).collect();
    let g = |s: f64| -> f64 {
        (0..d)
            .map(|i| {
                let a = s * lam[i] + gap[i];
                lam[i] * c[i] * c[i] / (a * a)
            })
            .sum()
    };
    let g0: f64 = (0..d)
        .map(|i| {
            if gap[i] > 0.0 {
                lam[i] * c[i] * c[i] / (gap[i] * gap[i])
            } else if c[i] != 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .sum();

    let mut w = DVector::zeros(d);
    if g0 <= beta2 {
        for i in 0..d {
            if gap[i] > 0.0 {
                w[i] = c[i] * (1.0 + 1.0 / gap[i]);
            }
        }
        w[jmin] = ((beta2 - g0) / lmin).sqrt();
    } else {
        let mut hi = 1.0 / lmin;
        while g(hi) > beta2 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..2000 {
            let mid = if lo > 0.0 { 0.5 * (lo + hi) } else { 0.5 * hi };
            if mid <= lo || mid >= hi {
                break;
            }
            let gm = g(mid);
            if gm > beta2 {
                lo = mid;
            } else {
                hi = mid;
            }
            if (gm - beta2).abs() <= BALL_TOL * beta2 {
                hi = mid;
                break;
            }
        }
        let s = hi;
        for i in 0..d {
            let a = s * lam[i] + gap[i];
            w[i] = c[i] * (1.0 + 1.0 / a);
        }
    }
    let theta = &eig.eigenvectors * w;
    Ok(unit_or_e1(&theta))
}

/// `b(δ) = τ·sqrt(2·ln(4TK/δ))`.
pub fn feature_scale_b(tau2: f64, horizon: usize, num_actions: usize, delta: f64) -> f64 {
    tau2.sqrt() * (2.0 * (4.0 * horizon as f64 * num_actions as f64 / delta).ln()).sqrt()
}

/// Divides features by `b` and clips any row whose norm still exceeds 1.
/// Returns the scaled rows and how many were clipped.
pub fn scale_features<X: AsRef<[f64]>>(features: &[X], b: f64) -> (Vec<Vec<f64>>, usize) {
    let mut clipped = 0;
    let rows = features
        .iter()
        .map(|f| {
            let mut row: Vec<f64> = f.as_ref().iter().map(|v| v / b).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1.0 {
                clipped += 1;
                row.iter_mut().for_each(|v| *v /= n);
            }
            row
        })
        .collect();
    (rows, clipped)
}

/// Where a SupLinRel round ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupLinRelChoice {
    pub action: ActionIndex,
    /// Level whose index set receives this round, if any.
    pub level: Option<usize>,
}

/// SupLinRel with `⌈log₂ T⌉` confidence levels, each estimated only from
/// the rounds in its own index set `Ψ_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupLinRelState {
    params: ConfidenceParams,
    horizon: usize,
    levels: Vec<RidgeStats>,
    index_sets: Vec<Vec<usize>>,
}

impl SupLinRelState {
    /// `params.delta` is split evenly across levels.
    pub fn new(dim: usize, horizon: usize, params: ConfidenceParams) -> Result<Self> {
        if dim == 0 || horizon == 0 {
            return Err(Error::contract("SupLinRel needs dim >= 1 and T >= 1"));
        }
        params.validate()?;
        let num_levels = (horizon as f64).log2().ceil().max(1.0) as usize;
        let params = ConfidenceParams {
            delta: params.delta / num_levels as f64,
            ..params
        };
        Ok(Self {
            params,
            horizon,
            levels: vec![RidgeStats::new(dim, params.lambda); num_levels],
            index_sets: vec![Vec::new(); num_levels],
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn index_sets(&self) -> &[Vec<usize>] {
        &self.index_sets
    }

    /// Chooses an arm for round `t` from features of norm ≤ 1.
    pub fn choose<X: AsRef<[f64]>>(&self, arms: &[X]) -> Result<SupLinRelChoice> {
        if arms.is_empty() {
            return Err(Error::contract("SupLinRel over an empty arm set"));
        }
        let dim = self.levels[0].b.len();
        let xs: Vec<DVector<f64>> = arms.iter().map(|a| DVector::from_column_slice(a.as_ref())).collect();
        if xs.iter().any(|x| x.len() != dim) {
            return Err(Error::contract("arm dimension mismatch"));
        }
        let floor = 1.0 / (self.horizon as f64).sqrt();
        let mut alive: Vec<usize> = (0..arms.len()).collect();
        for (s, level) in self.levels.iter().enumerate() {
            let theta = level.theta_hat();
            let beta = self.params.beta(dim, level.count);
            let scores: Vec<(f64, f64)> = alive
                .iter()
                .map(|&a| (xs[a].dot(&theta), beta * level.inv_norm(&xs[a])))
                .collect();
            let threshold = 0.5f64.powi(s as i32 + 1);
            let ucb_best = |alive: &[usize]| {
                let ucb: Vec<f64> = scores.iter().map(|(m, w)| m + w).collect();
                ActionIndex(alive[crate::domain::argmax_with_ties(&ucb).expect("nonempty").0])
            };
            if scores.iter().all(|&(_, w)| w <= floor) {
                return Ok(SupLinRelChoice {
                    action: ucb_best(&alive),
                    level: None,
                });
            }
            if let Some(pos) = scores.iter().position(|&(_, w)| w > threshold) {
                return Ok(SupLinRelChoice {
                    action: ActionIndex(alive[pos]),
                    level: Some(s),
                });
            }
            if s + 1 == self.levels.len() {
                return Ok(SupLinRelChoice {
                    action: ucb_best(&alive),
                    level: None,
                });
            }
            let top = scores.iter().map(|(m, w)| m + w).fold(f64::NEG_INFINITY, f64::max);
            let cut = top - 2.0 * threshold;
            alive = alive
                .iter()
                .zip(&scores)
                .filter(|(_, &(m, w))| m + w >= cut)
                .map(|(&a, _)| a)
                .collect();
        }
        unreachable!("the last level always returns")
    }

    /// Records round `t`'s observation in the chosen level, if any.
    pub fn record(&mut self, t: usize, choice: SupLinRelChoice, x: &[f64], reward: f64) {
        if let Some(s) = choice.level {
            self.levels[s].update(&DVector::from_column_slice(x), reward);
            self.index_sets[s].push(t);
        }
    }
}
