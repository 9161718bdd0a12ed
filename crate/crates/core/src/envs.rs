//! Synthetic environments with known ground truth.
//!
//! * [`FiniteLadder`]: nested explicit function classes over a finite context
//!   grid, with a certified separation between the realizable and the largest
//!   non-realizable class.
//! * [`SparseLinearInstance`]: a sparse `θ*` with the unit ball as arm set.
//! * [`NestedFeatureInstance`]: K arms with Gaussian features whose prefixes
//!   realize the nested feature maps `φ^1, …, φ^M`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{ActionIndex, InteractionRecord};
use crate::error::{Error, Result};

/// A stochastic contextual bandit with known mean rewards.
pub trait Environment {
    type Context: Clone;

    fn num_actions(&self) -> usize;

    fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Context;

    /// `f*(x, a)` for every action.
    fn mean_rewards(&self, context: &Self::Context) -> Vec<f64>;

    /// Noisy reward `r_t(a)` for the given context and action.
    fn sample_reward<R: Rng + ?Sized>(
        &self,
        context: &Self::Context,
        action: ActionIndex,
        rng: &mut R,
    ) -> f64;

    /// Plays `action` and packages the observation.
    fn observe<R: Rng + ?Sized>(
        &self,
        context: &Self::Context,
        action: ActionIndex,
        rng: &mut R,
    ) -> InteractionRecord<Self::Context> {
        let reward = self.sample_reward(context, action, rng);
        InteractionRecord {
            context: context.clone(),
            action,
            reward,
        }
    }
}

/// Additive reward noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    /// `uniform(-half_width, half_width)`, result clipped to `[0, 1]`.
    Uniform { half_width: f64 },
    /// `N(0, sigma2)`, optionally clipped to `[0, 1]`.
    Gaussian { sigma2: f64, clip: bool },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Uniform { half_width: 0.1 }
    }
}

impl NoiseModel {
    pub fn perturb<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        match *self {
            NoiseModel::Uniform { half_width } => {
                if half_width == 0.0 {
                    return mean;
                }
                let e = rng.random_range(-half_width..half_width);
                (mean + e).clamp(0.0, 1.0)
            }
            NoiseModel::Gaussian { sigma2, clip } => {
                let z: f64 = rng.sample(StandardNormal);
                let r = mean + sigma2.sqrt() * z;
                if clip {
                    r.clamp(0.0, 1.0)
                } else {
                    r
                }
            }
        }
    }

    /// Width kept free at each end of `[0, 1]` so that clipping never biases
    /// the mean.
    fn clip_margin(&self) -> f64 {
        match *self {
            NoiseModel::Uniform { half_width } => half_width,
            NoiseModel::Gaussian { .. } => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseModel::Uniform { half_width } => (0.0..0.5).contains(&half_width),
            NoiseModel::Gaussian { sigma2, .. } => sigma2.is_finite() && sigma2 >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid noise model {self:?}")))
        }
    }
}

/// Context of a finite-grid environment: the index of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell(pub usize);

/// Explicit mean-reward table over `(cell, action)`, stored row-major by cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionTable {
    pub values: Vec<f64>,
}

impl FunctionTable {
    #[inline]
    pub fn eval(&self, num_actions: usize, cell: GridCell, action: ActionIndex) -> f64 {
        self.values[cell.0 * num_actions + action.0]
    }

    pub fn row(&self, num_actions: usize, cell: GridCell) -> &[f64] {
        &self.values[cell.0 * num_actions..(cell.0 + 1) * num_actions]
    }
}

/// How table entries are drawn during ladder construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryDistribution {
    /// Each entry is one of the two extremes of the admissible range.
    #[default]
    TwoLevel,
    /// Each entry is uniform over the admissible range.
    Uniform,
}

/// Parameters of [`build_separated_ladder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    /// `|F_1| < |F_2| < … < |F_M|`.
    pub class_sizes: Vec<usize>,
    pub num_actions: usize,
    pub grid_size: usize,
    pub target_gap: f64,
    /// 1-based index of the smallest realizable class; defaults to `M - 1`.
    #[serde(default)]
    pub d_star: Option<usize>,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub entries: EntryDistribution,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

fn default_max_attempts() -> usize {
    10_000
}

impl LadderSpec {
    /// The M = 3 ladder with sizes (4, 16, 64), K = 3, a 16-cell grid and
    /// `Δ >= 0.05`.
    pub fn standard() -> Self {
        Self {
            class_sizes: vec![4, 16, 64],
            num_actions: 3,
            grid_size: 16,
            target_gap: 0.05,
            d_star: None,
            noise: NoiseModel::default(),
            entries: EntryDistribution::default(),
            max_attempts: default_max_attempts(),
        }
    }
}

/// Nested function classes `F_1 ⊂ … ⊂ F_M` over a finite context grid.
///
/// Class `j` consists of the first `class_sizes[j-1]` entries of `members`,
/// so every table of class `j` is bitwise present in class `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteLadder {
    pub num_actions: usize,
    pub grid_size: usize,
    pub class_sizes: Vec<usize>,
    pub members: Vec<FunctionTable>,
    /// Categorical distribution of the context cell.
    pub context_weights: Vec<f64>,
    /// 1-based index of the smallest class containing `f*`.
    pub d_star: usize,
    /// Position of `f*` within `members`.
    pub f_star: usize,
    /// Exact `inf_{f ∈ F_{d*-1}} min_a E_x (f - f*)^2`; `None` when `d* = 1`.
    pub separation: Option<f64>,
    pub noise: NoiseModel,
    #[serde(skip)]
    cdf: Vec<f64>,
}

impl FiniteLadder {
    /// Assembles a ladder from explicit parts, validating every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        num_actions: usize,
        grid_size: usize,
        class_sizes: Vec<usize>,
        members: Vec<FunctionTable>,
        context_weights: Vec<f64>,
        d_star: usize,
        f_star: usize,
        noise: NoiseModel,
    ) -> Result<Self> {
        let mut ladder = Self {
            num_actions,
            grid_size,
            class_sizes,
            members,
            context_weights,
            d_star,
            f_star,
            separation: None,
            noise,
            cdf: Vec::new(),
        };
        ladder.validate()?;
        ladder.separation = ladder.assumption_gap();
        ladder.rebuild_cdf();
        Ok(ladder)
    }

    /// Restores derived state after deserialization and re-checks invariants.
    pub fn from_json(json: &str) -> Result<Self> {
        let mut ladder: FiniteLadder = serde_json::from_str(json)?;
        ladder.validate()?;
        ladder.rebuild_cdf();
        Ok(ladder)
    }

    fn validate(&self) -> Result<()> {
        let m = self.class_sizes.len();
        if m == 0 {
            return Err(Error::contract("ladder needs at least one class"));
        }
        if self.class_sizes[0] == 0 || self.class_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("class sizes must be positive and strictly increasing"));
        }
        if self.members.len() != self.class_sizes[m - 1] {
            return Err(Error::contract("member count must equal the largest class size"));
        }
        if self.num_actions == 0 || self.grid_size == 0 {
            return Err(Error::contract("need K >= 1 and a nonempty grid"));
        }
        let cells = self.num_actions * self.grid_size;
        for (i, t) in self.members.iter().enumerate() {
            if t.values.len() != cells {
                return Err(Error::contract(format!("member {i} has the wrong table size")));
            }
            if t.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!("member {i} has entries outside [0, 1]")));
            }
        }
        if self.context_weights.len() != self.grid_size
            || self.context_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (self.context_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::contract("context weights must be a distribution over the grid"));
        }
        if !(1..=m).contains(&self.d_star) {
            return Err(Error::contract(format!("d* = {} outside [1, {m}]", self.d_star)));
        }
        let lo = if self.d_star == 1 { 0 } else { self.class_sizes[self.d_star - 2] };
        if !(lo..self.class_sizes[self.d_star - 1]).contains(&self.f_star) {
            return Err(Error::contract("f* must be a member of class d* but not of class d* - 1"));
        }
        let f_star = &self.members[self.f_star];
        if self.members[..lo].iter().any(|f| f == f_star) {
            return Err(Error::contract("f* also appears in class d* - 1"));
        }
        self.noise.validate()
    }

    fn rebuild_cdf(&mut self) {
        let mut acc = 0.0;
        self.cdf = self
            .context_weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
    }

    pub fn num_classes(&self) -> usize {
        self.class_sizes.len()
    }

    /// Members of class `j` (1-based).
    pub fn class(&self, j: usize) -> &[FunctionTable] {
        &self.members[..self.class_sizes[j - 1]]
    }

    pub fn true_function(&self) -> &FunctionTable {
        &self.members[self.f_star]
    }

    /// `E_x (f(x,a) - g(x,a))^2` under the context distribution.
    pub fn expected_sq_gap(&self, f: &FunctionTable, g: &FunctionTable, action: ActionIndex) -> f64 {
        (0..self.grid_size)
            .map(|c| {
                let d = f.eval(self.num_actions, GridCell(c), action)
                    - g.eval(self.num_actions, GridCell(c), action);
                self.context_weights[c] * d * d
            })
            .sum()
    }

    /// Exhaustive separation check: `min_{f ∈ F_{d*-1}} min_a E_x (f - f*)^2`.
    pub fn assumption_gap(&self) -> Option<f64> {
        if self.d_star == 1 {
            return None;
        }
        let f_star = self.true_function();
        Some(min_gap(self, self.class(self.d_star - 1), f_star))
    }
}

fn min_gap(ladder: &FiniteLadder, lower: &[FunctionTable], f_star: &FunctionTable) -> f64 {
    let mut gap = f64::INFINITY;
    for f in lower {
        for a in 0..ladder.num_actions {
            gap = gap.min(ladder.expected_sq_gap(f, f_star, ActionIndex(a)));
        }
    }
    gap
}

impl Environment for FiniteLadder {
    type Context = GridCell;

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> GridCell {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        GridCell(idx.min(self.grid_size - 1))
    }

    fn mean_rewards(&self, context: &GridCell) -> Vec<f64> {
        self.true_function().row(self.num_actions, *context).to_vec()
    }

    fn sample_reward<R: Rng + ?Sized>(&self, context: &GridCell, action: ActionIndex, rng: &mut R) -> f64 {
        let mean = self.true_function().eval(self.num_actions, *context, action);
        self.noise.perturb(mean, rng)
    }
}

/// Builds a nested ladder whose separation is certified by exhaustive check.
///
/// All tables are drawn first; `f*` is then rejection-sampled among fresh
/// candidates until `min_{f ∈ F_{d*-1}} min_a E_x (f - f*)^2 >= target_gap`.
pub fn build_separated_ladder<R: Rng + ?Sized>(spec: &LadderSpec, rng: &mut R) -> Result<FiniteLadder> {
    let m = spec.class_sizes.len();
    if m == 0 || spec.class_sizes[0] == 0 || spec.class_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("class sizes must be positive and strictly increasing"));
    }
    if !(spec.target_gap.is_finite() && spec.target_gap > 0.0) {
        return Err(Error::contract("target gap must be positive"));
    }
    if spec.num_actions == 0 || spec.grid_size == 0 {
        return Err(Error::contract("need K >= 1 and a nonempty grid"));
    }
    spec.noise.validate()?;
    let d_star = spec.d_star.unwrap_or(m.saturating_sub(1).max(1));
    if !(1..=m).contains(&d_star) {
        return Err(Error::contract(format!("d* = {d_star} outside [1, {m}]")));
    }

    let margin = spec.noise.clip_margin();
    let (lo, hi) = (margin, 1.0 - margin);
    let cells = spec.num_actions * spec.grid_size;
    let draw_table = |rng: &mut R| FunctionTable {
        values: (0..cells)
            .map(|_| match spec.entries {
                EntryDistribution::TwoLevel => {
                    if rng.random_bool(0.5) {
                        hi
                    } else {
                        lo
                    }
                }
                EntryDistribution::Uniform => lo + (hi - lo) * rng.random::<f64>(),
            })
            .collect(),
    };

    let raw: Vec<f64> = (0..spec.grid_size).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let context_weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let mut members: Vec<FunctionTable> = (0..spec.class_sizes[m - 1]).map(|_| draw_table(rng)).collect();
    let lower_size = if d_star == 1 { 0 } else { spec.class_sizes[d_star - 2] };
    let f_star = rng.random_range(lower_size..spec.class_sizes[d_star - 1]);

    let mut ladder = FiniteLadder {
        num_actions: spec.num_actions,
        grid_size: spec.grid_size,
        class_sizes: spec.class_sizes.clone(),
        members: Vec::new(),
        context_weights,
        d_star,
        f_star,
        separation: None,
        noise: spec.noise,
        cdf: Vec::new(),
    };

    if d_star > 1 {
        let lower = members[..lower_size].to_vec();
        let mut certified = None;
        for _ in 0..spec.max_attempts.max(1) {
            let candidate = draw_table(rng);
            if min_gap(&ladder, &lower, &candidate) >= spec.target_gap {
                certified = Some(candidate);
                break;
            }
        }
        match certified {
            Some(table) => members[f_star] = table,
            None => {
                return Err(Error::Construction {
                    attempts: spec.max_attempts.max(1),
                    reason: format!("no candidate f* reached separation {}", spec.target_gap),
                })
            }
        }
    }

    ladder.members = members;
    ladder.validate()?;
    ladder.separation = ladder.assumption_gap();
    ladder.rebuild_cdf();
    Ok(ladder)
}

/// Sparse `θ*` with the unit ball as (continuum) arm set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLinearInstance {
    pub d: usize,
    pub theta_star: Vec<f64>,
    pub d_star: usize,
    pub gamma: f64,
    pub noise_sigma2: f64,
}

impl SparseLinearInstance {
    /// Wraps an explicit `θ*`, deriving `d*` and `γ`.
    pub fn from_theta(theta_star: Vec<f64>, noise_sigma2: f64) -> Result<Self> {
        if theta_star.is_empty() || theta_star.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("θ* must be a nonempty finite vector"));
        }
        if norm(&theta_star) > 1.0 + 1e-12 {
            return Err(Error::contract("‖θ*‖ must be at most 1"));
        }
        if !(noise_sigma2.is_finite() && noise_sigma2 >= 0.0) {
            return Err(Error::contract("noise variance must be nonnegative"));
        }
        let nonzero: Vec<f64> = theta_star.iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
        let gamma = nonzero.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            d: theta_star.len(),
            d_star: nonzero.len(),
            gamma: if nonzero.is_empty() { 0.0 } else { gamma },
            theta_star,
            noise_sigma2,
        })
    }

    /// Random support of size `d_star`; magnitudes in `[gamma, 1/sqrt(d_star)]`
    /// with one coordinate exactly `gamma`; random signs.
    pub fn random<R: Rng + ?Sized>(
        d: usize,
        d_star: usize,
        gamma: f64,
        noise_sigma2: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d_star == 0 || d_star > d {
            return Err(Error::contract(format!("need 1 <= d* <= d, got d* = {d_star}, d = {d}")));
        }
        let mut coords: Vec<usize> = (0..d).collect();
        // partial Fisher-Yates
        for i in 0..d_star {
            let j = rng.random_range(i..d);
            coords.swap(i, j);
        }
        let mut support = coords[..d_star].to_vec();
        support.sort_unstable();
        let theta = sparse_magnitudes(d, &support, gamma, rng)?;
        Self::from_theta(theta, noise_sigma2)
    }

    pub fn support(&self) -> Vec<usize> {
        support_of(&self.theta_star)
    }

    pub fn mean_reward(&self, arm: &[f64]) -> f64 {
        dot(arm, &self.theta_star)
    }

    pub fn sample_reward<R: Rng + ?Sized>(&self, arm: &[f64], rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean_reward(arm) + self.noise_sigma2.sqrt() * z
    }

    pub fn optimal_reward(&self) -> f64 {
        norm(&self.theta_star)
    }

    /// `‖θ*‖ - ⟨x, θ*⟩`.
    pub fn regret_of(&self, arm: &[f64]) -> f64 {
        (self.optimal_reward() - self.mean_reward(arm)).max(0.0)
    }
}

/// Maximizer of `⟨x, θ*⟩` over the unit ball: `θ*/‖θ*‖`, or `e_1` when `θ* = 0`.
pub fn optimal_continuum_arm(instance: &SparseLinearInstance) -> Vec<f64> {
    let n = norm(&instance.theta_star);
    if n == 0.0 {
        let mut e1 = vec![0.0; instance.d];
        e1[0] = 1.0;
        return e1;
    }
    instance.theta_star.iter().map(|v| v / n).collect()
}

/// Per-round context of a [`NestedFeatureInstance`]: one `φ^M(x, a)` per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureContext {
    pub features: Vec<Vec<f64>>,
}

impl FeatureContext {
    /// `φ^m(x, a)`: the first `dim` coordinates of arm `a`'s feature.
    pub fn prefix(&self, action: ActionIndex, dim: usize) -> &[f64] {
        &self.features[action.0][..dim]
    }
}

/// Finite-arm linear contextual bandit with nested feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedFeatureInstance {
    pub num_actions: usize,
    /// `d_1 < d_2 < … < d_M = d`.
    pub dims: Vec<usize>,
    pub theta_star: Vec<f64>,
    /// 1-based index of the smallest feature map realizing `θ*`.
    pub m_star: usize,
    /// Sub-gaussian parameter of the features; coordinates are `N(0, tau2)`.
    pub tau2: f64,
    pub noise_sigma2: f64,
}

impl NestedFeatureInstance {
    /// `θ*` dense on the first `d_{m*}` coordinates with magnitudes in
    /// `[gamma, 1/sqrt(d_{m*})]`, one coordinate exactly `gamma`.
    pub fn random<R: Rng + ?Sized>(
        num_actions: usize,
        dims: Vec<usize>,
        m_star: usize,
        gamma: f64,
        noise_sigma2: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_actions == 0 {
            return Err(Error::contract("need K >= 1"));
        }
        if dims.is_empty() || dims[0] == 0 || dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("feature dimensions must be positive and strictly increasing"));
        }
        if !(1..=dims.len()).contains(&m_star) {
            return Err(Error::contract(format!("m* = {m_star} outside [1, {}]", dims.len())));
        }
        let d = *dims.last().unwrap();
        let support: Vec<usize> = (0..dims[m_star - 1]).collect();
        let theta_star = sparse_magnitudes(d, &support, gamma, rng)?;
        Ok(Self {
            num_actions,
            dims,
            theta_star,
            m_star,
            tau2: 1.0,
            noise_sigma2,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        *self.dims.last().expect("validated nonempty dims")
    }

    /// Smallest `m` (1-based) with `d_m >= max(coords) + 1`; 1 for an empty set.
    pub fn model_for(&self, coords: &[usize]) -> usize {
        match coords.iter().max() {
            None => 1,
            Some(&k) => self.dims.iter().position(|&dm| dm > k).map_or(self.dims.len(), |p| p + 1),
        }
    }
}

/// K i.i.d. `N(0, tau2 I_d)` feature vectors; prefixes realize the smaller maps.
pub fn sample_nested_features<R: Rng + ?Sized>(instance: &NestedFeatureInstance, rng: &mut R) -> FeatureContext {
    let d = instance.ambient_dim();
    let normal = Normal::new(0.0, instance.tau2.sqrt()).expect("finite nonnegative tau2");
    FeatureContext {
        features: (0..instance.num_actions)
            .map(|_| (0..d).map(|_| normal.sample(rng)).collect())
            .collect(),
    }
}

impl Environment for NestedFeatureInstance {
    type Context = FeatureContext;

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> FeatureContext {
        sample_nested_features(self, rng)
    }

    fn mean_rewards(&self, context: &FeatureContext) -> Vec<f64> {
        context.features.iter().map(|phi| dot(phi, &self.theta_star)).collect()
    }

    fn sample_reward<R: Rng + ?Sized>(&self, context: &FeatureContext, action: ActionIndex, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        dot(&context.features[action.0], &self.theta_star) + self.noise_sigma2.sqrt() * z
    }
}

fn sparse_magnitudes<R: Rng + ?Sized>(d: usize, support: &[usize], gamma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let k = support.len();
    let hi = 1.0 / (k as f64).sqrt();
    if !(gamma > 0.0 && gamma <= hi) {
        return Err(Error::contract(format!(
            "γ = {gamma} must lie in (0, 1/sqrt({k})] so that ‖θ*‖ <= 1"
        )));
    }
    let pinned = rng.random_range(0..k);
    let mut theta = vec![0.0; d];
    for (i, &c) in support.iter().enumerate() {
        let mag = if i == pinned { gamma } else { gamma + (hi - gamma) * rng.random::<f64>() };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        theta[c] = sign * mag;
    }
    Ok(theta)
}

pub(crate) fn support_of(v: &[f64]) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, _)| i).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
