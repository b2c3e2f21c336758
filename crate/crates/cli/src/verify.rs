//! Self-verification suite behind `preflab verify` and `preflab gradcheck`.

use std::time::Instant;

use preflab_core::corpus::{PreferenceSample, Token, UserInfo};
use preflab_core::objectives::{
    dpo_loss, pdpo_loss, prm_loss, vanilla_rm_loss, ObjectiveConfig, ObjectiveKind, RewardHead,
    RmAggregation,
};
use preflab_core::policy::PolicyParams;
use preflab_core::preference::{
    deviation_gap, fit_vanilla_group_rewards, majority_vote_fraction, ComparisonGroup,
};
use preflab_core::tensor::Matrix;
use preflab_core::trainer::{grad_check, ParamBundle};
use preflab_core::usermodel::ImplicitUserModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs the selected check families; `only = None` runs everything.
pub fn run(only: Option<&str>, verbose_tables: bool) -> Result<Vec<Check>, String> {
    let mut checks = Vec::new();
    let want = |name: &str| only.is_none() || only == Some(name);
    let mut matched = false;
    if want("lemma1") {
        matched = true;
        checks.extend(lemma1_checks());
    }
    if want("lemma2") {
        matched = true;
        checks.extend(lemma2_checks(verbose_tables || only == Some("lemma2")));
    }
    if want("reductions") {
        matched = true;
        checks.extend(reduction_checks());
    }
    if want("gradcheck") {
        matched = true;
        checks.extend(gradient_checks(3, 1e-5));
    }
    if !matched {
        return Err(format!(
            "unknown check `{}`; expected one of lemma1, lemma2, reductions, gradcheck",
            only.unwrap_or_default()
        ));
    }
    Ok(checks)
}

fn toks(ids: &[u32]) -> Vec<Token> {
    ids.iter().copied().map(Token).collect()
}

fn mixed_groups() -> Vec<ComparisonGroup> {
    [(2, 1), (1, 1), (3, 2), (5, 1), (9, 4)]
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| ComparisonGroup {
            prompt: toks(&[i as u32 + 1]),
            first: toks(&[2, 0]),
            second: toks(&[3, 0]),
            votes_first: a,
            votes_second: b,
        })
        .collect()
}

/// The fitted per-group preference must match the majority-vote fraction.
fn lemma1_checks() -> Vec<Check> {
    let groups = mixed_groups();
    let start = Instant::now();
    let fits = match fit_vanilla_group_rewards(&groups, 20_000, 2.0) {
        Ok(f) => f,
        Err(e) => return vec![Check::new("lemma1", false, e.to_string())],
    };
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for fit in &fits {
        let frac = majority_vote_fraction(&fit.group).expect("votes >= 1");
        worst = worst.max((fit.fitted_probability - frac).abs());
    }
    vec![
        Check::new(
            "lemma1.majority-voting",
            worst < 1e-3,
            format!("worst |sigma(s) - vote fraction| = {worst:.2e} over 5 groups"),
        ),
        Check::new(
            "lemma1.runtime",
            elapsed.as_secs_f64() < 1.0,
            format!("fit took {elapsed:?}"),
        ),
    ]
}

/// Grid for the deviation sweep: 0.50 to 0.95 in steps of 0.05, plus 0.99.
pub fn lemma2_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..10).map(|k| 0.5 + 0.05 * k as f64).collect();
    grid.push(0.99);
    grid
}

fn lemma2_checks(print_table: bool) -> Vec<Check> {
    let grid = lemma2_grid();
    let mut monotone = true;
    let mut dominated = true;
    let mut last = f64::NEG_INFINITY;
    if print_table {
        println!("{:>6} {:>14} {:>14} {:>10}", "w", "dev_minority", "dev_majority", "increasing");
    }
    for &w in &grid {
        let (dev_min, dev_maj) = deviation_gap(w, 1.0, 0.0);
        let increasing = dev_min > last;
        if print_table {
            println!("{w:>6.2} {dev_min:>14.6} {dev_maj:>14.6} {increasing:>10}");
        }
        monotone &= increasing;
        dominated &= dev_min >= dev_maj;
        last = dev_min;
    }
    vec![
        Check::new(
            "lemma2.monotone",
            monotone,
            "minority deviation strictly increasing in the majority weight",
        ),
        Check::new(
            "lemma2.dominates",
            dominated,
            "minority deviation >= majority deviation at every grid point",
        ),
    ]
}

fn random_batch(rng: &mut ChaCha12Rng, vocab: u32, num_users: u32, with_text: bool) -> Vec<PreferenceSample> {
    let response = |rng: &mut ChaCha12Rng, len: usize| -> Vec<Token> {
        let mut y: Vec<Token> = (0..len).map(|_| Token(rng.random_range(1..vocab))).collect();
        y.push(Token::EOS);
        y
    };
    (0..3)
        .map(|_| {
            let prompt: Vec<Token> = (0..rng.random_range(1..3usize))
                .map(|_| Token(rng.random_range(1..vocab)))
                .collect();
            let la = rng.random_range(1..4usize);
            let lb = (la % 3) + 1 + (la == 1) as usize;
            let text_tokens = if with_text && rng.random::<f64>() < 0.5 {
                vec![Token(rng.random_range(1..vocab))]
            } else {
                Vec::new()
            };
            PreferenceSample {
                prompt,
                chosen: response(rng, la),
                rejected: response(rng, lb),
                user: UserInfo {
                    user_id: rng.random_range(0..=num_users),
                    text_tokens,
                },
            }
        })
        .collect()
}

/// P-DPO with an empty user model must equal vanilla DPO, and alpha = 0
/// P-RM must equal vanilla RM, on random batches.
fn reduction_checks() -> Vec<Check> {
    let mut rng = ChaCha12Rng::seed_from_u64(0xfeed);
    let mut worst_dpo = 0.0f64;
    let mut worst_rm = 0.0f64;
    for _ in 0..10 {
        let policy = PolicyParams::seeded(6, 4, 0.6, &mut rng);
        let sft = PolicyParams::seeded(6, 4, 0.6, &mut rng);
        let empty = ImplicitUserModel::Uniform {
            shared: Matrix::zeros(0, 4),
        };
        let batch = random_batch(&mut rng, 6, 4, false);
        let p = pdpo_loss(&policy, &sft, &empty, &ObjectiveConfig::pdpo(0.5, 0.5), &batch)
            .expect("pdpo");
        let v = dpo_loss(&policy, &sft, &ObjectiveConfig::vanilla_dpo(0.5), &batch).expect("dpo");
        worst_dpo = worst_dpo.max((p.loss - v.loss).abs());

        let head = RewardHead::SoftPrompt {
            v: (0..4).map(|_| rng.random::<f64>() - 0.5).collect(),
            c: rng.random::<f64>() - 0.5,
        };
        let pr = prm_loss(
            &head,
            &policy,
            &empty,
            &ObjectiveConfig::prm(0.0, RmAggregation::SoftPromptHead),
            &batch,
        )
        .expect("prm");
        let vr = vanilla_rm_loss(&head, &policy, &batch).expect("rm");
        worst_rm = worst_rm.max((pr.loss - vr.loss).abs());
    }
    vec![
        Check::new(
            "reduction.pdpo-to-dpo",
            worst_dpo <= 1e-12,
            format!("worst |P-DPO - DPO| = {worst_dpo:.2e} over 10 random batches"),
        ),
        Check::new(
            "reduction.prm-to-rm",
            worst_rm <= 1e-12,
            format!("worst |P-RM - RM| = {worst_rm:.2e} over 10 random batches"),
        ),
    ]
}

fn objective_label(kind: ObjectiveKind, agg: RmAggregation) -> String {
    match (kind, agg) {
        (ObjectiveKind::PRm, RmAggregation::LinearHead) => "p-rm/linear-head".into(),
        (ObjectiveKind::PRm, RmAggregation::SoftPromptHead) => "p-rm/soft-prompt-head".into(),
        (k, _) => serde_json::to_string(&k).unwrap().trim_matches('"').to_string(),
    }
}

fn bundle_for(kind: ObjectiveKind, agg: RmAggregation, variant: &str, rng: &mut ChaCha12Rng) -> ParamBundle {
    let policy = PolicyParams::seeded(5, 4, 0.6, rng);
    let sft = PolicyParams::seeded(5, 4, 0.6, rng);
    let t_u = if agg == RmAggregation::LinearHead { 1 } else { 2 };
    let user_model = match variant {
        "uniform" => ImplicitUserModel::uniform(t_u, 4, rng),
        "cluster" => {
            let mut m = ImplicitUserModel::cluster(3, 2, t_u, 4, rng);
            if let ImplicitUserModel::Cluster { weights, .. } = &mut m {
                for v in weights.data_mut() {
                    *v = rng.random::<f64>() - 0.5;
                }
            }
            m
        }
        _ => {
            let mut m = ImplicitUserModel::individualized(3, t_u, 4, rng);
            if let ImplicitUserModel::Individualized { offsets, .. } = &mut m {
                for o in offsets.iter_mut().skip(1) {
                    *o = Matrix::uniform(t_u, 4, 0.3, rng);
                }
            }
            m
        }
    };
    let head = match agg {
        RmAggregation::SoftPromptHead => RewardHead::SoftPrompt {
            v: (0..4).map(|_| rng.random::<f64>() - 0.5).collect(),
            c: rng.random::<f64>() - 0.5,
        },
        RmAggregation::LinearHead => RewardHead::Linear,
    };
    ParamBundle {
        policy,
        sft: if kind.uses_reference() { Some(sft) } else { None },
        user_model: if kind.uses_user_model() { Some(user_model) } else { None },
        head: if kind.uses_head() { Some(head) } else { None },
    }
}

/// Analytic-vs-finite-difference check for every objective; the personalized
/// losses rotate through all three implicit user-model variants.
pub fn gradient_checks(seeds: u64, epsilon: f64) -> Vec<Check> {
    let cases: Vec<(ObjectiveKind, RmAggregation, &str)> = vec![
        (ObjectiveKind::VanillaRm, RmAggregation::SoftPromptHead, "none"),
        (ObjectiveKind::VanillaDpo, RmAggregation::SoftPromptHead, "none"),
        (ObjectiveKind::PDpo, RmAggregation::SoftPromptHead, "uniform"),
        (ObjectiveKind::PDpo, RmAggregation::SoftPromptHead, "individualized"),
        (ObjectiveKind::PDpo, RmAggregation::SoftPromptHead, "cluster"),
        (ObjectiveKind::PIpoAsWritten, RmAggregation::SoftPromptHead, "individualized"),
        (ObjectiveKind::PIpoDifference, RmAggregation::SoftPromptHead, "individualized"),
        (ObjectiveKind::PRm, RmAggregation::SoftPromptHead, "individualized"),
        (ObjectiveKind::PRm, RmAggregation::LinearHead, "individualized"),
    ];
    let mut checks = Vec::new();
    for (kind, agg, variant) in cases {
        let mut worst = 0.0f64;
        let mut failure: Option<String> = None;
        for seed in 0..seeds {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
            let bundle = bundle_for(kind, agg, variant, &mut rng);
            let with_text = agg != RmAggregation::LinearHead;
            let batch = random_batch(&mut rng, 5, 3, with_text);
            let cfg = match kind {
                ObjectiveKind::VanillaRm => ObjectiveConfig::vanilla_rm(),
                ObjectiveKind::VanillaDpo => ObjectiveConfig::vanilla_dpo(0.5),
                ObjectiveKind::PDpo => ObjectiveConfig::pdpo(0.5, 0.4),
                ObjectiveKind::PIpoAsWritten => ObjectiveConfig::pipo_as_written(0.5, 0.4),
                ObjectiveKind::PIpoDifference => ObjectiveConfig::pipo_difference(0.5, 0.4),
                ObjectiveKind::PRm => ObjectiveConfig::prm(0.4, agg),
                ObjectiveKind::SftMle => ObjectiveConfig::sft_mle(),
            };
            match grad_check(&cfg, &bundle, &batch, epsilon) {
                Ok(err) => worst = worst.max(err),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        let label = format!("gradcheck.{}/{variant}", objective_label(kind, agg));
        match failure {
            Some(msg) => checks.push(Check::new(label, false, msg)),
            None => checks.push(Check::new(
                label,
                worst <= 1e-4,
                format!("max relative error {worst:.2e} over {seeds} seeds"),
            )),
        }
    }
    checks
}
