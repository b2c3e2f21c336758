//! End-to-end training behaviors that go beyond single-loss unit tests.

use preflab_core::corpus::UserInfo;
use preflab_core::objectives::{ObjectiveConfig, RewardHead, RmAggregation};
use preflab_core::policy::{sample_response_with, PolicyParams, SoftPrompt};
use preflab_core::simlab::{
    best_of_n, gen_conflicting_length_dataset, measured_length, PreferenceKind, SimSpec,
};
use preflab_core::trainer::{train, ParamBundle, TrainConfig};
use preflab_core::usermodel::ImplicitUserModel;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// A personalized RM trained on conflicting length preferences must rerank
/// best-of-N draws toward each user's pole: selections for short-preferring
/// users sit at or below the median sampled length, and at or above it for
/// long-preferring users.
#[test]
fn best_of_n_reranks_toward_the_users_preference() {
    let spec = SimSpec {
        num_users: 4,
        majority_fraction: 0.75,
        samples_per_user: 80,
        vocab_size: 8,
        prompt_len: 2,
        len_short: 1,
        len_long: 5,
        seed: 4242,
    };
    let (dataset, truth) = gen_conflicting_length_dataset(&spec).unwrap();

    let d = 4usize;
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let user_model = ImplicitUserModel::individualized(4, 1, d, &mut rng);
    let bundle = ParamBundle {
        // Zero-initialized policy: PRM training moves the embedding table
        // only, so the sampling distribution stays uniform throughout.
        policy: PolicyParams::zeros(spec.vocab_size as usize, d),
        sft: None,
        user_model: Some(user_model),
        head: Some(RewardHead::soft_prompt_zeros(d)),
    };
    let report = train(
        &dataset,
        bundle,
        &TrainConfig {
            steps: 800,
            batch_size: 32,
            step_size: 0.05,
            seed: 6,
            objective: ObjectiveConfig::prm(0.5, RmAggregation::SoftPromptHead),
            log_every: 200,
        },
    )
    .unwrap();
    let policy = &report.bundle.policy;
    let head = report.bundle.head.as_ref().unwrap();
    let model = report.bundle.user_model.as_ref().unwrap();

    let shorter_user = *truth
        .prefs
        .iter()
        .find(|(_, k)| **k == PreferenceKind::PrefersShorter)
        .unwrap()
        .0;
    let longer_user = *truth
        .prefs
        .iter()
        .find(|(_, k)| **k == PreferenceKind::PrefersLonger)
        .unwrap()
        .0;

    let prompt = dataset.samples[0].prompt.clone();
    let n = 16usize;
    let max_len = 10usize;
    for seed in 0..20u64 {
        // Replay the same draw stream to recover the sampled lengths.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut lengths: Vec<usize> = (0..n)
            .map(|_| {
                let y = sample_response_with(
                    policy,
                    &SoftPrompt::empty(d),
                    &prompt,
                    max_len,
                    &mut rng,
                );
                measured_length(&y)
            })
            .collect();
        lengths.sort_unstable();
        let median = lengths[n / 2];

        let short_pick = best_of_n(
            policy,
            head,
            model,
            &UserInfo::with_id(shorter_user),
            &prompt,
            n,
            max_len,
            seed,
        )
        .unwrap();
        assert!(
            measured_length(&short_pick) <= median,
            "seed {seed}: picked length {} above median {median}",
            measured_length(&short_pick)
        );

        let long_pick = best_of_n(
            policy,
            head,
            model,
            &UserInfo::with_id(longer_user),
            &prompt,
            n,
            max_len,
            seed,
        )
        .unwrap();
        assert!(
            measured_length(&long_pick) >= median,
            "seed {seed}: picked length {} below median {median}",
            measured_length(&long_pick)
        );
    }
}

/// Joint P-DPO training on the profile dataset separates at least the
/// length dimension's two poles on implicit rewards.
#[test]
fn pdpo_learns_opposite_profile_poles() {
    use preflab_core::simlab::{default_profile_dims, eval_accuracy, gen_profile_dataset};
    use preflab_core::corpus::Token;

    let dims = default_profile_dims(Token(1));
    let (dataset, truth) = gen_profile_dataset(&dims[..1], 150, 8, 2, 99).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let sft = PolicyParams::seeded(8, 6, 0.1, &mut rng);
    let user_model = ImplicitUserModel::individualized(dataset.num_users, 2, 6, &mut rng);
    let report = train(
        &dataset,
        ParamBundle {
            policy: sft.clone(),
            sft: Some(sft.clone()),
            user_model: Some(user_model),
            head: None,
        },
        &TrainConfig {
            steps: 600,
            batch_size: 32,
            step_size: 0.05,
            seed: 2,
            objective: ObjectiveConfig::pdpo(0.5, 0.5),
            log_every: 200,
        },
    )
    .unwrap();
    let accuracy = eval_accuracy(
        &report.bundle.policy,
        &sft,
        report.bundle.user_model.as_ref().unwrap(),
        0.5,
        &dataset,
        &truth.groups(),
    )
    .unwrap();
    for group in &accuracy.accuracy_average {
        assert!(
            group.mean >= 0.85,
            "group {} accuracy {}",
            group.name,
            group.mean
        );
    }
}
