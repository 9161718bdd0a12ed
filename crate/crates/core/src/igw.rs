//! Inverse-gap-weighted action distributions and the FALCON learning rates.

use serde::{Deserialize, Serialize};

use crate::domain::{argmax_with_ties, PolicyDistribution};
use crate::error::{Error, Result};

/// Where a learning rate came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateProvenance {
    pub epoch: u32,
    /// Selected class `ℓ` (1-based), `0` when not applicable.
    pub class: usize,
    pub delta_m: f64,
}

/// Exploration parameter `ρ ≥ 0` of the IGW distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRate {
    pub rho: f64,
    pub provenance: RateProvenance,
}

impl LearningRate {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::contract(format!("learning rate {rho} must be finite and >= 0")));
        }
        Ok(Self {
            rho,
            provenance: RateProvenance::default(),
        })
    }

    pub fn with_provenance(mut self, epoch: u32, class: usize, delta_m: f64) -> Self {
        self.provenance = RateProvenance { epoch, class, delta_m };
        self
    }
}

/// `p(a) = 1/(K + ρ·(ŷ(â) − ŷ(a)))` for `a ≠ â`, greedy action gets the rest.
pub fn igw_distribution(predictions: &[f64], rate: LearningRate) -> Result<PolicyDistribution> {
    let k = predictions.len();
    if predictions.iter().any(|p| !p.is_finite()) {
        return Err(Error::contract("IGW predictions must be finite"));
    }
    let greedy = argmax_with_ties(predictions)?.0;
    let kf = k as f64;
    let mut probs = vec![0.0; k];
    let mut others = 0.0;
    for (a, &pred) in predictions.iter().enumerate() {
        if a != greedy {
            let p = 1.0 / (kf + rate.rho * (predictions[greedy] - pred));
            probs[a] = p;
            others += p;
        }
    }
    let greedy_mass = 1.0 - others;
    debug_assert!(greedy_mass >= 1.0 / kf - 1e-12);
    probs[greedy] = greedy_mass.clamp(0.0, 1.0);
    PolicyDistribution::new(probs)
}

/// `ρ = (1/30)·sqrt(K·n / (ln|F| + ln n + ln m + ln(1/δ_m)))`.
pub fn falcon_learning_rate(
    num_actions: usize,
    n_prev: usize,
    log_class_size: f64,
    m: u32,
    delta_m: f64,
) -> Result<LearningRate> {
    if n_prev == 0 || m == 0 {
        return Err(Error::contract("falcon learning rate needs n_prev >= 1 and m >= 1"));
    }
    if !(delta_m > 0.0 && delta_m < 1.0) {
        return Err(Error::contract(format!("delta_m = {delta_m} outside (0, 1)")));
    }
    let n = n_prev as f64;
    let denom = log_class_size + n.ln() + f64::from(m).ln() - delta_m.ln();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::contract(format!("non-positive learning-rate denominator {denom}")));
    }
    let rho = (num_actions as f64 * n / denom).sqrt() / 30.0;
    Ok(LearningRate::new(rho)?.with_provenance(m, 0, delta_m))
}

/// `ρ = (1/30)·sqrt(K/ξ)`.
pub fn xi_learning_rate(num_actions: usize, xi_value: f64) -> Result<LearningRate> {
    if !(xi_value > 0.0 && xi_value.is_finite()) {
        return Err(Error::contract(format!("xi = {xi_value} must be positive")));
    }
    LearningRate::new((num_actions as f64 / xi_value).sqrt() / 30.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rate(rho: f64) -> LearningRate {
        LearningRate::new(rho).unwrap()
    }

    #[test]
    fn two_arm_example() {
        let p = igw_distribution(&[0.9, 0.4], rate(10.0)).unwrap();
        assert!((p.probs()[0] - 6.0 / 7.0).abs() < 1e-12);
        assert!((p.probs()[1] - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_cases() {
        for p in [
            igw_distribution(&[0.3; 5], rate(100.0)).unwrap(),
            igw_distribution(&[0.1, 0.9, 0.4, 0.2, 0.5], rate(0.0)).unwrap(),
        ] {
            for &x in p.probs() {
                assert!((x - 0.2).abs() < 1e-15);
            }
        }
        assert_eq!(igw_distribution(&[0.7], rate(5.0)).unwrap().probs(), &[1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(LearningRate::new(-1.0).is_err());
        assert!(LearningRate::new(f64::NAN).is_err());
        assert!(igw_distribution(&[], rate(1.0)).is_err());
        assert!(igw_distribution(&[0.1, f64::NAN], rate(1.0)).is_err());
    }

    #[test]
    fn falcon_rate_example() {
        let delta_m = 0.01 / 2048.0;
        let got = falcon_learning_rate(2, 1024, 16f64.ln(), 11, delta_m).unwrap();
        // ln(16·1024·11/δ_m) evaluated as one logarithm of the product
        let product: f64 = 16.0 * 1024.0 * 11.0 * 2048.0 / 0.01;
        let want = (2.0 * 1024.0 / product.ln()).sqrt() / 30.0;
        assert!((got.rho - want).abs() < 1e-12, "{} vs {want}", got.rho);
        assert_eq!(got.provenance.epoch, 11);
    }

    #[test]
    fn falcon_rate_monotonicity_and_guards() {
        let base = falcon_learning_rate(3, 500, 4f64.ln(), 4, 0.01).unwrap().rho;
        assert!(falcon_learning_rate(3, 1000, 4f64.ln(), 4, 0.01).unwrap().rho > base);
        assert!(falcon_learning_rate(3, 500, 4f64.ln(), 4, 0.001).unwrap().rho < base);
        assert!(falcon_learning_rate(3, 0, 1.0, 1, 0.1).is_err());
        assert!(falcon_learning_rate(3, 10, 1.0, 1, 1.0).is_err());
        assert!(falcon_learning_rate(3, 10, 1.0, 0, 0.1).is_err());
        // ln|F| = 0, n = 1, m = 1: denominator is ln(1/δ) > 0
        assert!(falcon_learning_rate(1, 1, 0.0, 1, 0.5).is_ok());
    }

    #[test]
    fn xi_rate_examples() {
        assert!((xi_learning_rate(4, 4.0 / 900.0).unwrap().rho - 1.0).abs() < 1e-12);
        let a = xi_learning_rate(3, 0.02).unwrap().rho;
        let b = xi_learning_rate(3, 0.01).unwrap().rho;
        assert!((b / a - 2f64.sqrt()).abs() < 1e-12);
        assert!((xi_learning_rate(1, 0.25).unwrap().rho - 2.0 / 30.0).abs() < 1e-15);
        assert!(xi_learning_rate(2, 0.0).is_err());
    }

    #[test]
    fn randomized_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let k = rng.random_range(1..=16);
            let preds: Vec<f64> = (0..k).map(|_| rng.random()).collect();
            let rho = rng.random_range(0.0..1000.0);
            let p = igw_distribution(&preds, rate(rho)).unwrap();
            let probs = p.probs();
            let greedy = argmax_with_ties(&preds).unwrap().0;
            assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (a, &x) in probs.iter().enumerate() {
                assert!((0.0..=1.0).contains(&x));
                assert!(x <= probs[greedy]);
                if a != greedy {
                    assert!(x <= 1.0 / k as f64);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(preds in prop::collection::vec(0.0f64..1.0, 1..12), shift in -5.0f64..5.0, rho in 0.0f64..1000.0) {
            let p = igw_distribution(&preds, rate(rho)).unwrap();
            let shifted: Vec<f64> = preds.iter().map(|x| x + shift).collect();
            let q = igw_distribution(&shifted, rate(rho)).unwrap();
            prop_assert_eq!(argmax_with_ties(&preds).unwrap(), argmax_with_ties(&shifted).unwrap());
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn larger_gap_never_raises_mass(preds in prop::collection::vec(0.0f64..1.0, 2..12), idx in 0usize..12, extra in 0.0f64..1.0, rho in 0.0f64..1000.0) {
            let greedy = argmax_with_ties(&preds).unwrap().0;
            let a = idx % preds.len();
            prop_assume!(a != greedy);
            let mut lowered = preds.clone();
            lowered[a] -= extra;
            let p = igw_distribution(&preds, rate(rho)).unwrap();
            let q = igw_distribution(&lowered, rate(rho)).unwrap();
            prop_assert!(q.probs()[a] <= p.probs()[a]);
        }
    }
}
