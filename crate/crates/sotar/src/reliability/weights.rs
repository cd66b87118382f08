//! Robustness weight vectors and the weighted aggregation of sorted
//! successor values.

use super::SolveError;
use serde::{Deserialize, Serialize};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Nonincreasing, nonnegative weights summing to one. The length must
/// match the maximum out-degree of the network being solved; shorter
/// successor lists are padded with zero values before weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RobustnessWeights {
    weights: Vec<f64>,
    prefix: Vec<f64>,
}

impl RobustnessWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, SolveError> {
        if weights.is_empty() {
            return Err(SolveError::EmptyWeights);
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 || (i > 0 && weights[i - 1] < w) {
                return Err(SolveError::NotNonincreasing(weights.clone()));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(SolveError::BadWeightSum(sum));
        }
        let mut prefix = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            prefix.push(acc);
        }
        Ok(Self { weights, prefix })
    }

    /// The weights (1, 0, ..., 0) under which the weighted aggregation
    /// collapses to the plain maximum.
    pub fn classic(lambda: usize) -> Self {
        assert!(lambda >= 1, "weight vectors cannot be empty");
        let mut weights = vec![0.0; lambda];
        weights[0] = 1.0;
        Self::new(weights).expect("classic weights are always valid")
    }

    /// Puts `leading` on the best successor and spreads the remainder
    /// evenly over the others. Requires `leading >= 1 / lambda` so the
    /// vector stays nonincreasing.
    pub fn from_leading(leading: f64, lambda: usize) -> Result<Self, SolveError> {
        if lambda == 0 {
            return Err(SolveError::EmptyWeights);
        }
        let mut weights = vec![leading];
        if lambda > 1 {
            let rest = (1.0 - leading) / (lambda - 1) as f64;
            weights.resize(lambda, rest);
        }
        Self::new(weights)
    }

    /// Number of ranks the vector covers; never zero.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Running sums of the weights; `prefix_sums()[q]` weighs the drop
    /// between the sorted values at ranks q and q+1.
    pub fn prefix_sums(&self) -> &[f64] {
        &self.prefix
    }

    /// True exactly when the vector is (1, 0, ..., 0).
    pub fn is_classic(&self) -> bool {
        self.weights[0] == 1.0 && self.weights[1..].iter().all(|&w| w == 0.0)
    }
}

impl TryFrom<Vec<f64>> for RobustnessWeights {
    type Error = SolveError;

    fn try_from(weights: Vec<f64>) -> Result<Self, SolveError> {
        Self::new(weights)
    }
}

impl From<RobustnessWeights> for Vec<f64> {
    fn from(w: RobustnessWeights) -> Vec<f64> {
        w.weights
    }
}

/// Weighted mean of the given values after sorting them in descending
/// order and zero-padding to the weight length.
///
/// The sum is evaluated in summation-by-parts form, accumulating from
/// the smallest rank upward: value = B(λ-1) + Σ_q prefix(q)·(B(q) -
/// B(q+1)). For inputs on the value lattice the rank differences are
/// exact, so exceeding the largest input is impossible and enlarging
/// any input never lowers the result.
pub fn robust_value(values: &[f64], weights: &RobustnessWeights) -> f64 {
    assert!(!values.is_empty(), "at least one successor value required");
    if weights.is_classic() {
        return values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|x, y| y.total_cmp(x));
    weighted_sorted(&sorted, weights)
}

/// Core of [`robust_value`] for values already sorted in descending
/// order. Shared with the solver, which keeps its own scratch buffers.
pub(crate) fn weighted_sorted(sorted_desc: &[f64], weights: &RobustnessWeights) -> f64 {
    let lambda = weights.len();
    let at = |p: usize| {
        if p < sorted_desc.len() {
            sorted_desc[p]
        } else {
            0.0
        }
    };
    let mut acc = at(lambda - 1);
    for q in (0..lambda - 1).rev() {
        acc += weights.prefix[q] * (at(q) - at(q + 1));
    }
    acc
}
