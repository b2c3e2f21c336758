//! Synthetic-experiment generators and evaluation metrics.
//!
//! The conflicting-length generator reproduces the controlled setup: a
//! seeded majority of users prefers the longer of two responses, the rest
//! prefer the shorter one, and every label follows the user's ground truth
//! deterministically. The profile generator is the multi-dimension analog
//! with computable judges (length, distinct-token count, marker presence),
//! two opposite poles per dimension, one user per pole.
//!
//! Metrics: implicit-reward accuracies (top / generic / per-group average),
//! per-user sampled-length statistics, oracle-judge win-rates with ties
//! crediting both sides, and best-of-N reranking under a personalized RM.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PreferenceDataset, PreferenceSample, Token, UserInfo};
use crate::error::{Error, Result};
use crate::num::mean_and_stderr;
use crate::objectives::{implicit_reward, personalized_reward, RewardHead};
use crate::policy::{sample_response_with, PolicyParams, SoftPrompt};
use crate::usermodel::{embed_user, ExplicitUserModel, ImplicitUserModel};

/// Configuration of the conflicting-length simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub num_users: u32,
    /// Fraction of users preferring the longer response, in `[0.5, 1)`.
    pub majority_fraction: f64,
    pub samples_per_user: usize,
    pub vocab_size: u32,
    pub prompt_len: usize,
    pub len_short: usize,
    pub len_long: usize,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::config("num_users must be at least 1"));
        }
        if !(0.5..1.0).contains(&self.majority_fraction) {
            return Err(Error::config("majority_fraction must lie in [0.5, 1)"));
        }
        if self.len_short >= self.len_long {
            return Err(Error::config("len_short must be smaller than len_long"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.samples_per_user == 0 {
            return Err(Error::config("samples_per_user must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pole {
    High,
    Low,
}

/// A computable response statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeDimension {
    /// Measured response length `|y| - 1`.
    Length,
    /// Number of distinct non-EOS token ids.
    DistinctTokens,
    /// Whether a marker token occurs at all.
    MarkerPresence { marker: Token },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileJudge {
    pub dimension: JudgeDimension,
    pub pole: Pole,
}

/// A user's simulated ground-truth preference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreferenceKind {
    PrefersLonger,
    PrefersShorter,
    Profile(ProfileJudge),
}

impl PreferenceKind {
    /// Stable name used for grouping users in reports.
    pub fn label(&self) -> String {
        match self {
            PreferenceKind::PrefersLonger => "prefers-longer".into(),
            PreferenceKind::PrefersShorter => "prefers-shorter".into(),
            PreferenceKind::Profile(j) => {
                let dim = match j.dimension {
                    JudgeDimension::Length => "length".to_string(),
                    JudgeDimension::DistinctTokens => "distinct-tokens".to_string(),
                    JudgeDimension::MarkerPresence { marker } => format!("marker-{}", marker.0),
                };
                let pole = match j.pole {
                    Pole::High => "high",
                    Pole::Low => "low",
                };
                format!("profile-{dim}-{pole}")
            }
        }
    }
}

/// Ground truth for every simulated user id `1..=m`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserGroundTruth {
    pub prefs: BTreeMap<u32, PreferenceKind>,
}

impl UserGroundTruth {
    pub fn kind(&self, user_id: u32) -> Option<&PreferenceKind> {
        self.prefs.get(&user_id)
    }

    /// Users grouped by preference label, in label order.
    pub fn groups(&self) -> Vec<UserGroup> {
        let mut by_label: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for (&uid, kind) in &self.prefs {
            by_label.entry(kind.label()).or_default().push(uid);
        }
        by_label
            .into_iter()
            .map(|(name, user_ids)| UserGroup { name, user_ids })
            .collect()
    }
}

/// Measured response length: tokens before the terminal EOS.
pub fn measured_length(response: &[Token]) -> usize {
    response.len().saturating_sub(1)
}

/// The judge score a user's ground truth assigns to a response; higher is
/// better for that user.
pub fn judge_score(kind: &PreferenceKind, response: &[Token]) -> f64 {
    let raw = |dimension: &JudgeDimension| -> f64 {
        match dimension {
            JudgeDimension::Length => measured_length(response) as f64,
            JudgeDimension::DistinctTokens => {
                let mut seen: Vec<u32> = response
                    .iter()
                    .filter(|t| !t.is_eos())
                    .map(|t| t.0)
                    .collect();
                seen.sort_unstable();
                seen.dedup();
                seen.len() as f64
            }
            JudgeDimension::MarkerPresence { marker } => {
                response.iter().any(|t| t == marker) as u64 as f64
            }
        }
    };
    match kind {
        PreferenceKind::PrefersLonger => measured_length(response) as f64,
        PreferenceKind::PrefersShorter => -(measured_length(response) as f64),
        PreferenceKind::Profile(j) => match j.pole {
            Pole::High => raw(&j.dimension),
            Pole::Low => -raw(&j.dimension),
        },
    }
}

fn random_tokens(len: usize, vocab_size: u32, rng: &mut ChaCha12Rng) -> Vec<Token> {
    (0..len)
        .map(|_| Token(rng.random_range(1..vocab_size)))
        .collect()
}

fn random_response(len: usize, vocab_size: u32, rng: &mut ChaCha12Rng) -> Vec<Token> {
    let mut y = random_tokens(len, vocab_size, rng);
    y.push(Token::EOS);
    y
}

/// The controlled conflicting-preference setup: `ceil(m * majority_fraction)`
/// seeded users prefer the longer response, the rest the shorter one. Every
/// sample pairs a fresh long and short response under a random prompt, with
/// the chosen side following the user's ground truth.
pub fn gen_conflicting_length_dataset(
    spec: &SimSpec,
) -> Result<(PreferenceDataset, UserGroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let m = spec.num_users;
    let majority = (m as f64 * spec.majority_fraction).ceil() as usize;

    let mut ids: Vec<u32> = (1..=m).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    let mut truth = UserGroundTruth::default();
    for (i, uid) in ids.iter().enumerate() {
        let kind = if i < majority {
            PreferenceKind::PrefersLonger
        } else {
            PreferenceKind::PrefersShorter
        };
        truth.prefs.insert(*uid, kind);
    }

    let mut samples = Vec::with_capacity(m as usize * spec.samples_per_user);
    for uid in 1..=m {
        let kind = truth.prefs[&uid];
        for _ in 0..spec.samples_per_user {
            let prompt = random_tokens(spec.prompt_len, spec.vocab_size, &mut rng);
            let long = random_response(spec.len_long, spec.vocab_size, &mut rng);
            let short = random_response(spec.len_short, spec.vocab_size, &mut rng);
            let (chosen, rejected) = match kind {
                PreferenceKind::PrefersLonger => (long, short),
                _ => (short, long),
            };
            samples.push(PreferenceSample {
                prompt,
                chosen,
                rejected,
                user: UserInfo::with_id(uid),
            });
        }
    }
    let dataset = PreferenceDataset::new(samples, spec.vocab_size, m)?;
    Ok((dataset, truth))
}

/// The default three-dimension profile grid.
pub fn default_profile_dims(marker: Token) -> Vec<JudgeDimension> {
    vec![
        JudgeDimension::Length,
        JudgeDimension::DistinctTokens,
        JudgeDimension::MarkerPresence { marker },
    ]
}

const PROFILE_MAX_RESPONSE_LEN: usize = 8;

/// One user per pole of each dimension; pairs with tied judge scores are
/// resampled, so the chosen response always scores strictly higher under the
/// generating user's judge.
pub fn gen_profile_dataset(
    dims: &[JudgeDimension],
    samples_per_user: usize,
    vocab_size: u32,
    prompt_len: usize,
    seed: u64,
) -> Result<(PreferenceDataset, UserGroundTruth)> {
    if dims.is_empty() {
        return Err(Error::config("at least one judge dimension is required"));
    }
    if vocab_size < 3 {
        return Err(Error::config("profile generation needs vocab_size >= 3"));
    }
    if let Some(JudgeDimension::MarkerPresence { marker }) = dims
        .iter()
        .find(|d| matches!(d, JudgeDimension::MarkerPresence { marker } if marker.is_eos() || marker.0 >= vocab_size))
    {
        return Err(Error::config(format!(
            "marker token {} must be a non-EOS vocabulary item",
            marker.0
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut truth = UserGroundTruth::default();
    for (i, dim) in dims.iter().enumerate() {
        for (j, pole) in [Pole::High, Pole::Low].into_iter().enumerate() {
            let uid = (2 * i + j + 1) as u32;
            truth.prefs.insert(
                uid,
                PreferenceKind::Profile(ProfileJudge {
                    dimension: *dim,
                    pole,
                }),
            );
        }
    }
    let m = truth.prefs.len() as u32;
    let mut samples = Vec::with_capacity(m as usize * samples_per_user);
    for (&uid, kind) in &truth.prefs {
        for _ in 0..samples_per_user {
            let prompt = random_tokens(prompt_len, vocab_size, &mut rng);
            let (a, b) = loop {
                let la = rng.random_range(0..=PROFILE_MAX_RESPONSE_LEN);
                let lb = rng.random_range(0..=PROFILE_MAX_RESPONSE_LEN);
                let a = random_response(la, vocab_size, &mut rng);
                let b = random_response(lb, vocab_size, &mut rng);
                if judge_score(kind, &a) != judge_score(kind, &b) {
                    break (a, b);
                }
            };
            let (chosen, rejected) = if judge_score(kind, &a) > judge_score(kind, &b) {
                (a, b)
            } else {
                (b, a)
            };
            samples.push(PreferenceSample {
                prompt,
                chosen,
                rejected,
                user: UserInfo::with_id(uid),
            });
        }
    }
    let dataset = PreferenceDataset::new(samples, vocab_size, m)?;
    Ok((dataset, truth))
}

/// Seeded split into `(train, eval)` with `eval_fraction` of samples held
/// out; relative sample order is preserved within each split.
pub fn split_dataset(
    dataset: &PreferenceDataset,
    eval_fraction: f64,
    seed: u64,
) -> (PreferenceDataset, PreferenceDataset) {
    let n = dataset.len();
    let n_eval = ((n as f64) * eval_fraction).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    let mut eval_flags = vec![false; n];
    for &i in indices.iter().take(n_eval) {
        eval_flags[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_eval);
    let mut eval = Vec::with_capacity(n_eval);
    for (i, sample) in dataset.samples.iter().enumerate() {
        if eval_flags[i] {
            eval.push(sample.clone());
        } else {
            train.push(sample.clone());
        }
    }
    (
        PreferenceDataset {
            samples: train,
            vocab_size: dataset.vocab_size,
            num_users: dataset.num_users,
        },
        PreferenceDataset {
            samples: eval,
            vocab_size: dataset.vocab_size,
            num_users: dataset.num_users,
        },
    )
}

/// A named set of user ids; the groups of a report partition the seen users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserGroup {
    pub name: String,
    pub user_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
    pub per_user: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserLengthStat {
    pub user_id: u32,
    pub mean: f64,
    pub stderr: f64,
}

/// Evaluation metrics; `lengths` is filled by [`eval_lengths`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_top: f64,
    pub accuracy_generic: f64,
    pub accuracy_average: Vec<GroupAccuracy>,
    pub lengths: Vec<UserLengthStat>,
}

/// Implicit-reward accuracies: a sample counts as correct iff the chosen
/// response earns the strictly higher implicit reward (ties are incorrect).
/// `accuracy_generic` re-evaluates every sample with the identifier forced
/// to 0.
pub fn eval_accuracy(
    policy: &PolicyParams,
    sft: &PolicyParams,
    implicit: &ImplicitUserModel,
    beta: f64,
    dataset: &PreferenceDataset,
    groups: &[UserGroup],
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::domain("evaluation dataset is empty"));
    }
    let mut correct_top = 0usize;
    let mut correct_generic = 0usize;
    let mut per_user: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for sample in &dataset.samples {
        let gap = implicit_reward(
            policy,
            sft,
            implicit,
            beta,
            &sample.prompt,
            &sample.chosen,
            &sample.user,
        )? - implicit_reward(
            policy,
            sft,
            implicit,
            beta,
            &sample.prompt,
            &sample.rejected,
            &sample.user,
        )?;
        let ok = gap > 0.0;
        correct_top += ok as usize;
        let entry = per_user.entry(sample.user.user_id).or_insert((0, 0));
        entry.0 += ok as usize;
        entry.1 += 1;

        let generic = sample.user.id_forced_generic();
        let gap0 = implicit_reward(
            policy,
            sft,
            implicit,
            beta,
            &sample.prompt,
            &sample.chosen,
            &generic,
        )? - implicit_reward(
            policy,
            sft,
            implicit,
            beta,
            &sample.prompt,
            &sample.rejected,
            &generic,
        )?;
        correct_generic += (gap0 > 0.0) as usize;
    }
    let n = dataset.len() as f64;
    let accuracy_average = groups
        .iter()
        .map(|group| {
            let per_user_acc: Vec<(u32, f64)> = group
                .user_ids
                .iter()
                .filter_map(|uid| {
                    per_user
                        .get(uid)
                        .map(|(c, t)| (*uid, *c as f64 / *t as f64))
                })
                .collect();
            let values: Vec<f64> = per_user_acc.iter().map(|(_, a)| *a).collect();
            let (mean, stderr) = mean_and_stderr(&values);
            GroupAccuracy {
                name: group.name.clone(),
                mean,
                stderr,
                per_user: per_user_acc,
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy_top: correct_top as f64 / n,
        accuracy_generic: correct_generic as f64 / n,
        accuracy_average,
        lengths: Vec::new(),
    })
}

/// Per-user sampled-length statistics: `draws` responses per prompt per
/// user, measured length `|y| - 1`, mean and standard error over all draws.
/// Without a user model every user samples from the unconditioned policy.
pub fn eval_lengths(
    policy: &PolicyParams,
    implicit: Option<&ImplicitUserModel>,
    users: &[UserInfo],
    prompts: &[Vec<Token>],
    draws: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<UserLengthStat>> {
    if draws == 0 {
        return Err(Error::config("draws must be at least 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(users.len());
    for user in users {
        let soft = match implicit {
            Some(model) => {
                let emb = embed_user(model, &ExplicitUserModel::from_policy(policy), user)?;
                SoftPrompt::from_rows(emb.rows)
            }
            None => SoftPrompt::empty(policy.dim()),
        };
        let mut lengths = Vec::with_capacity(prompts.len() * draws);
        for prompt in prompts {
            for _ in 0..draws {
                let y = sample_response_with(policy, &soft, prompt, max_len, &mut rng);
                lengths.push(measured_length(&y) as f64);
            }
        }
        let (mean, stderr) = mean_and_stderr(&lengths);
        stats.push(UserLengthStat {
            user_id: user.user_id,
            mean,
            stderr,
        });
    }
    Ok(stats)
}

/// One sampled response per prompt for a (policy, user-model, user) bundle;
/// the comparison unit of the win-rate protocol.
pub fn sample_policy_responses(
    policy: &PolicyParams,
    implicit: Option<&ImplicitUserModel>,
    user: &UserInfo,
    prompts: &[Vec<Token>],
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<Token>>> {
    let soft = match implicit {
        Some(model) => {
            let emb = embed_user(model, &ExplicitUserModel::from_policy(policy), user)?;
            SoftPrompt::from_rows(emb.rows)
        }
        None => SoftPrompt::empty(policy.dim()),
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok(prompts
        .iter()
        .map(|p| sample_response_with(policy, &soft, p, max_len, &mut rng))
        .collect())
}

/// Probability that the policy emits EOS as the first response token,
/// averaged over the given prompts.
pub fn first_token_eos_probability(
    policy: &PolicyParams,
    implicit: Option<&ImplicitUserModel>,
    user: &UserInfo,
    prompts: &[Vec<Token>],
) -> Result<f64> {
    let soft = match implicit {
        Some(model) => {
            let emb = embed_user(model, &ExplicitUserModel::from_policy(policy), user)?;
            SoftPrompt::from_rows(emb.rows)
        }
        None => SoftPrompt::empty(policy.dim()),
    };
    let mut total = 0.0;
    for prompt in prompts {
        let logits = crate::policy::next_token_logits(policy, &soft, prompt);
        let mut probs = vec![0.0; logits.len()];
        crate::num::softmax_into(&logits, &mut probs);
        total += probs[Token::EOS.0 as usize];
    }
    Ok(total / prompts.len() as f64)
}

/// Fraction of prompts where `a`'s judge score is at least `b`'s; ties
/// credit both sides, so `winrate(a, b) + winrate(b, a) >= 1`.
pub fn oracle_winrate(
    responses_a: &[Vec<Token>],
    responses_b: &[Vec<Token>],
    judge: &PreferenceKind,
) -> Result<f64> {
    if responses_a.len() != responses_b.len() {
        return Err(Error::domain("response lists must have equal length"));
    }
    if responses_a.is_empty() {
        return Err(Error::domain("response lists are empty"));
    }
    let wins = responses_a
        .iter()
        .zip(responses_b)
        .filter(|(a, b)| judge_score(judge, a) >= judge_score(judge, b))
        .count();
    Ok(wins as f64 / responses_a.len() as f64)
}

/// Samples `n` responses from the unconditioned policy and returns the one
/// maximizing the personalized reward `r_P(x, y, u)`; ties break toward the
/// earliest sample.
#[allow(clippy::too_many_arguments)]
pub fn best_of_n(
    policy: &PolicyParams,
    head: &RewardHead,
    implicit: &ImplicitUserModel,
    user: &UserInfo,
    prompt: &[Token],
    n: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Token>> {
    assert!(n >= 1, "best-of-n needs n >= 1");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let empty = SoftPrompt::empty(policy.dim());
    let mut best: Option<(Vec<Token>, f64)> = None;
    for _ in 0..n {
        let y = sample_response_with(policy, &empty, prompt, max_len, &mut rng);
        let r = personalized_reward(head, policy, implicit, user, prompt, &y)?;
        match &best {
            Some((_, best_r)) if r <= *best_r => {}
            _ => best = Some((y, r)),
        }
    }
    Ok(best.expect("n >= 1").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn toks(ids: &[u32]) -> Vec<Token> {
        ids.iter().copied().map(Token).collect()
    }

    fn length_spec(m: u32, fraction: f64) -> SimSpec {
        SimSpec {
            num_users: m,
            majority_fraction: fraction,
            samples_per_user: 5,
            vocab_size: 8,
            prompt_len: 2,
            len_short: 1,
            len_long: 6,
            seed: 1234,
        }
    }

    #[test]
    fn majority_split_counts_match() {
        let (_, truth) = gen_conflicting_length_dataset(&length_spec(10, 0.7)).unwrap();
        let longer = truth
            .prefs
            .values()
            .filter(|k| **k == PreferenceKind::PrefersLonger)
            .count();
        assert_eq!((longer, truth.prefs.len() - longer), (7, 3));

        let (_, truth) = gen_conflicting_length_dataset(&length_spec(40, 0.65)).unwrap();
        let longer = truth
            .prefs
            .values()
            .filter(|k| **k == PreferenceKind::PrefersLonger)
            .count();
        assert_eq!((longer, truth.prefs.len() - longer), (26, 14));
    }

    #[test]
    fn short_preferring_users_always_choose_shorter() {
        let (dataset, truth) = gen_conflicting_length_dataset(&length_spec(10, 0.7)).unwrap();
        for sample in &dataset.samples {
            if truth.prefs[&sample.user.user_id] == PreferenceKind::PrefersShorter {
                assert!(sample.chosen.len() < sample.rejected.len());
            }
        }
    }

    #[test]
    fn generated_labels_are_judge_consistent() {
        let (dataset, truth) = gen_conflicting_length_dataset(&length_spec(6, 0.67)).unwrap();
        for sample in &dataset.samples {
            let kind = truth.prefs[&sample.user.user_id];
            assert!(judge_score(&kind, &sample.chosen) > judge_score(&kind, &sample.rejected));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = gen_conflicting_length_dataset(&length_spec(5, 0.6)).unwrap();
        let b = gen_conflicting_length_dataset(&length_spec(5, 0.6)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn profile_dataset_has_one_user_per_pole() {
        let dims = default_profile_dims(Token(1));
        let (dataset, truth) = gen_profile_dataset(&dims, 4, 8, 2, 5).unwrap();
        assert_eq!(truth.prefs.len(), 6);
        assert_eq!(dataset.num_users, 6);
        for sample in &dataset.samples {
            let kind = truth.prefs[&sample.user.user_id];
            assert!(
                judge_score(&kind, &sample.chosen) > judge_score(&kind, &sample.rejected),
                "no ties survive generation"
            );
        }
    }

    #[test]
    fn distinct_token_judge_counts_unique_ids() {
        let kind = PreferenceKind::Profile(ProfileJudge {
            dimension: JudgeDimension::DistinctTokens,
            pole: Pole::High,
        });
        assert_eq!(judge_score(&kind, &toks(&[2, 2, 3, 0])), 2.0);
        assert_eq!(judge_score(&kind, &toks(&[0])), 0.0);
    }

    #[test]
    fn split_is_seeded_and_complete() {
        let (dataset, _) = gen_conflicting_length_dataset(&length_spec(4, 0.75)).unwrap();
        let (train, eval) = split_dataset(&dataset, 0.1, 9);
        assert_eq!(train.len() + eval.len(), dataset.len());
        assert_eq!(eval.len(), 2);
        let (train2, eval2) = split_dataset(&dataset, 0.1, 9);
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
    }

    #[test]
    fn degenerate_bundle_scores_zero_accuracy() {
        let (dataset, truth) = gen_conflicting_length_dataset(&length_spec(4, 0.75)).unwrap();
        let policy = PolicyParams::zeros(8, 2);
        let implicit = ImplicitUserModel::Uniform {
            shared: Matrix::zeros(0, 2),
        };
        let report =
            eval_accuracy(&policy.clone(), &policy, &implicit, 0.5, &dataset, &truth.groups())
                .unwrap();
        assert_eq!(report.accuracy_top, 0.0, "reward ties count as incorrect");
        assert_eq!(report.accuracy_generic, 0.0);
    }

    #[test]
    fn constructed_oracle_bundle_reaches_full_accuracy() {
        // Hand-built optimum: the per-user soft prompt saturates the EOS
        // logit positively for short-preferring users and negatively for the
        // rest, so every implicit-reward comparison is decided correctly.
        let spec = length_spec(4, 0.75);
        let (dataset, truth) = gen_conflicting_length_dataset(&spec).unwrap();
        let vocab = spec.vocab_size as usize;
        let sft = PolicyParams::zeros(vocab, 2);
        let mut policy = PolicyParams::zeros(vocab, 2);
        policy.out_map.row_mut(0)[0] = 2.0;
        let mut offsets: Vec<Matrix> = (0..=4).map(|_| Matrix::zeros(1, 2)).collect();
        for (uid, kind) in &truth.prefs {
            offsets[*uid as usize].row_mut(0)[0] = match kind {
                PreferenceKind::PrefersShorter => 100.0,
                _ => -100.0,
            };
        }
        let implicit = ImplicitUserModel::Individualized {
            generic: Matrix::zeros(1, 2),
            offsets,
            include_generic: true,
        };
        let report =
            eval_accuracy(&policy, &sft, &implicit, 0.5, &dataset, &truth.groups()).unwrap();
        assert_eq!(report.accuracy_top, 1.0);
        for group in &report.accuracy_average {
            assert_eq!(group.mean, 1.0, "group {}", group.name);
            assert_eq!(group.stderr, 0.0);
        }
    }

    #[test]
    fn forced_eos_bundle_has_zero_lengths() {
        let mut policy = PolicyParams::zeros(6, 2);
        policy.out_bias[0] = 60.0;
        let stats = eval_lengths(
            &policy,
            None,
            &[UserInfo::with_id(1)],
            &[toks(&[2, 3])],
            50,
            8,
            7,
        )
        .unwrap();
        assert_eq!(stats[0].mean, 0.0);
        assert_eq!(stats[0].stderr, 0.0);
    }

    #[test]
    fn suppressed_eos_bundle_hits_the_truncation_ceiling() {
        let mut policy = PolicyParams::zeros(6, 2);
        policy.out_bias[0] = -60.0;
        let stats = eval_lengths(
            &policy,
            None,
            &[UserInfo::with_id(1)],
            &[toks(&[2])],
            20,
            5,
            7,
        )
        .unwrap();
        assert_eq!(stats[0].mean, 4.0, "max_len - 1");
        assert_eq!(stats[0].stderr, 0.0);
    }

    #[test]
    fn uniform_policy_lengths_match_enumeration_oracle() {
        // Uniform next-token distribution over vocab 4: the measured length
        // is geometric(1/4) truncated at max_len - 1 = 5.
        let policy = PolicyParams::zeros(4, 2);
        let max_len = 6usize;
        let mut expected = 0.0;
        for k in 0..=4usize {
            expected += k as f64 * 0.75f64.powi(k as i32) * 0.25;
        }
        expected += 5.0 * 0.75f64.powi(5);
        let draws = 40_000;
        let stats = eval_lengths(
            &policy,
            None,
            &[UserInfo::with_id(1)],
            &[toks(&[1])],
            draws,
            max_len,
            2024,
        )
        .unwrap();
        assert!(
            (stats[0].mean - expected).abs() <= 3.0 * stats[0].stderr,
            "mean {} vs exact {expected} (se {})",
            stats[0].mean,
            stats[0].stderr
        );
    }

    #[test]
    fn first_token_eos_probability_matches_bias() {
        let mut policy = PolicyParams::zeros(4, 2);
        policy.out_bias[0] = 50.0;
        let p = first_token_eos_probability(&policy, None, &UserInfo::with_id(1), &[toks(&[1])])
            .unwrap();
        assert!(p > 0.999999);
    }

    #[test]
    fn winrate_tie_rule_credits_both_sides() {
        let judge = PreferenceKind::PrefersLonger;
        let a = vec![toks(&[1, 0]), toks(&[1, 2, 0])];
        assert_eq!(oracle_winrate(&a, &a, &judge).unwrap(), 1.0);
    }

    #[test]
    fn winrate_strict_dominance() {
        let judge = PreferenceKind::PrefersLonger;
        let a = vec![toks(&[1, 2, 0]), toks(&[1, 2, 3, 0])];
        let b = vec![toks(&[1, 0]), toks(&[0])];
        assert_eq!(oracle_winrate(&a, &b, &judge).unwrap(), 1.0);
        assert_eq!(oracle_winrate(&b, &a, &judge).unwrap(), 0.0);
    }

    #[test]
    fn winrate_hand_counts() {
        let judge = PreferenceKind::PrefersLonger;
        // 3 wins and 1 tie out of 4.
        let a = vec![
            toks(&[1, 2, 0]),
            toks(&[1, 2, 0]),
            toks(&[1, 2, 0]),
            toks(&[1, 0]),
        ];
        let b = vec![toks(&[1, 0]), toks(&[1, 0]), toks(&[1, 0]), toks(&[2, 0])];
        assert_eq!(oracle_winrate(&a, &b, &judge).unwrap(), 1.0);
        // 2 wins, 1 tie, 1 loss.
        let b = vec![
            toks(&[1, 0]),
            toks(&[1, 0]),
            toks(&[1, 2, 3, 0]),
            toks(&[2, 0]),
        ];
        assert_eq!(oracle_winrate(&a, &b, &judge).unwrap(), 0.75);
    }

    #[test]
    fn winrate_rejects_length_mismatch() {
        let judge = PreferenceKind::PrefersLonger;
        assert!(oracle_winrate(&[toks(&[0])], &[], &judge).is_err());
    }

    #[test]
    fn best_of_one_returns_the_single_sample() {
        use rand::SeedableRng;
        let policy = PolicyParams::zeros(5, 2);
        let implicit = ImplicitUserModel::Uniform {
            shared: Matrix::zeros(1, 2),
        };
        let head = RewardHead::soft_prompt_zeros(2);
        let prompt = toks(&[2]);
        let picked =
            best_of_n(&policy, &head, &implicit, &UserInfo::with_id(0), &prompt, 1, 6, 55)
                .unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(55);
        let direct = sample_response_with(&policy, &SoftPrompt::empty(2), &prompt, 6, &mut rng);
        assert_eq!(picked, direct);
    }

    #[test]
    fn best_of_n_with_length_penalizing_reward_picks_shortest() {
        // embed[EOS] = e0, every other embedding zero, head v = e0: the
        // pooled reward is 1/(|x| + |y|), strictly decreasing in length.
        let mut policy = PolicyParams::zeros(5, 2);
        policy.embed.row_mut(0)[0] = 1.0;
        let implicit = ImplicitUserModel::Uniform {
            shared: Matrix::zeros(0, 2),
        };
        let head = RewardHead::SoftPrompt {
            v: vec![1.0, 0.0],
            c: 0.0,
        };
        let prompt = toks(&[2]);
        for seed in 0..10 {
            let picked =
                best_of_n(&policy, &head, &implicit, &UserInfo::with_id(0), &prompt, 8, 6, seed)
                    .unwrap();
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let shortest = (0..8)
                .map(|_| sample_response_with(&policy, &SoftPrompt::empty(2), &prompt, 6, &mut rng))
                .map(|y| y.len())
                .min()
                .unwrap();
            assert_eq!(picked.len(), shortest);
        }
    }
}
