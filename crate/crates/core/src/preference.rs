//! Bradley–Terry preference mathematics and executable oracles for the
//! majority-voting and majority/minority deviation identities.
//!
//! The unconstrained reward fit decouples across comparison groups: samples
//! sharing a prompt and (unordered) response pair contribute votes to a
//! single scalar reward gap `s`, and the stationary point of the pairwise
//! log-likelihood puts `sigmoid(s)` at the empirical vote fraction.

use std::collections::HashMap;

use crate::corpus::{PreferenceDataset, Token};
use crate::error::{Error, Result};
use crate::num::{sigmoid, softplus};

/// Reward gaps for unanimous groups are clamped to this magnitude;
/// `sigmoid(30)` is within 1e-13 of 1.
pub const GAP_CLAMP: f64 = 30.0;

/// All samples sharing a prompt and an unordered response pair.
///
/// The pair is stored in canonical (lexicographic) order, so a sample with
/// the two responses swapped contributes to the same group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonGroup {
    pub prompt: Vec<Token>,
    pub first: Vec<Token>,
    pub second: Vec<Token>,
    pub votes_first: u64,
    pub votes_second: u64,
}

impl ComparisonGroup {
    pub fn total_votes(&self) -> u64 {
        self.votes_first + self.votes_second
    }

    /// Fraction of votes preferring the canonical first response.
    pub fn majority_vote_fraction(&self) -> Result<f64> {
        majority_vote_fraction(self)
    }
}

/// Result of the per-group maximum-likelihood reward fit.
#[derive(Clone, Debug)]
pub struct GroupPreferenceEstimate {
    pub group: ComparisonGroup,
    /// `s = r(x, first) - r(x, second)`.
    pub fitted_reward_gap: f64,
    /// `sigmoid(s)`.
    pub fitted_probability: f64,
}

/// Bradley–Terry win probability `sigma(r1 - r2)`.
pub fn bt_prob(reward_chosen: f64, reward_rejected: f64) -> Result<f64> {
    if !reward_chosen.is_finite() || !reward_rejected.is_finite() {
        return Err(Error::domain("bt_prob requires finite rewards"));
    }
    Ok(sigmoid(reward_chosen - reward_rejected))
}

/// Prompt plus canonically ordered response pair.
type GroupKey = (Vec<Token>, Vec<Token>, Vec<Token>);

/// Groups every sample of the dataset by (prompt, unordered response pair),
/// counting votes with respect to the canonical ordering. Groups appear in
/// first-seen order.
pub fn group_comparisons(dataset: &PreferenceDataset) -> Vec<ComparisonGroup> {
    let mut index: HashMap<GroupKey, usize> = HashMap::new();
    let mut groups: Vec<ComparisonGroup> = Vec::new();
    for sample in &dataset.samples {
        let (first, second, chose_first) = if sample.chosen <= sample.rejected {
            (sample.chosen.clone(), sample.rejected.clone(), true)
        } else {
            (sample.rejected.clone(), sample.chosen.clone(), false)
        };
        let key = (sample.prompt.clone(), first, second);
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            groups.push(ComparisonGroup {
                prompt: key.0,
                first: key.1,
                second: key.2,
                votes_first: 0,
                votes_second: 0,
            });
            groups.len() - 1
        });
        if chose_first {
            groups[slot].votes_first += 1;
        } else {
            groups[slot].votes_second += 1;
        }
    }
    groups
}

/// Empirical preference for the group's first response.
pub fn majority_vote_fraction(group: &ComparisonGroup) -> Result<f64> {
    let total = group.total_votes();
    if total == 0 {
        return Err(Error::domain("empty comparison group"));
    }
    Ok(group.votes_first as f64 / total as f64)
}

/// Per-group gradient descent on the scalar reward gap minimizing the
/// pairwise negative log-likelihood. At convergence `sigmoid(s)` equals the
/// majority-vote fraction; unanimous groups are clamped at `|s| = GAP_CLAMP`.
pub fn fit_vanilla_group_rewards(
    groups: &[ComparisonGroup],
    steps: usize,
    step_size: f64,
) -> Result<Vec<GroupPreferenceEstimate>> {
    groups
        .iter()
        .map(|group| {
            let fraction = majority_vote_fraction(group)?;
            let gap = if fraction == 1.0 {
                GAP_CLAMP
            } else if fraction == 0.0 {
                -GAP_CLAMP
            } else {
                let mut s = 0.0;
                for _ in 0..steps {
                    s -= step_size * (sigmoid(s) - fraction);
                    s = s.clamp(-GAP_CLAMP, GAP_CLAMP);
                }
                s
            };
            Ok(GroupPreferenceEstimate {
                group: group.clone(),
                fitted_reward_gap: gap,
                fitted_probability: sigmoid(gap),
            })
        })
        .collect()
}

/// Negative log-likelihood of one group at gap `s`; the quantity the fit
/// minimizes. Exposed for tests.
pub fn group_nll(group: &ComparisonGroup, gap: f64) -> f64 {
    let total = group.total_votes() as f64;
    (group.votes_first as f64 * softplus(-gap) + group.votes_second as f64 * softplus(gap)) / total
}

/// Marginal preference `sum_j w_j p_j` over user groups.
pub fn marginal_preference(group_probs: &[f64], group_weights: &[f64]) -> Result<f64> {
    if group_probs.len() != group_weights.len() {
        return Err(Error::domain("probability and weight lists differ in length"));
    }
    if group_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::domain("weights must be nonnegative"));
    }
    let total: f64 = group_weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("weights sum to {total}, expected 1")));
    }
    Ok(group_probs
        .iter()
        .zip(group_weights)
        .map(|(p, w)| w * p)
        .sum())
}

/// Deviations of each group's preference from the two-group marginal.
///
/// Returns `(dev_minority, dev_majority)`. For `p_majority_weight >= 0.5`
/// the minority deviation is never smaller, and strictly larger when the
/// preferences differ and the weight exceeds 0.5.
pub fn deviation_gap(
    p_majority_weight: f64,
    pref_majority: f64,
    pref_minority: f64,
) -> (f64, f64) {
    assert!(
        (0.5..=1.0).contains(&p_majority_weight),
        "majority weight must lie in [0.5, 1]"
    );
    assert!((0.0..=1.0).contains(&pref_majority));
    assert!((0.0..=1.0).contains(&pref_minority));
    let marginal =
        p_majority_weight * pref_majority + (1.0 - p_majority_weight) * pref_minority;
    ((marginal - pref_minority).abs(), (marginal - pref_majority).abs())
}
