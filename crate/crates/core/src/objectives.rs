//! The preference-optimization losses, each with exact analytic gradients.
//!
//! ```text
//! vanilla RM   -E[ log sigma(r(x,y1) - r(x,y2)) ]
//! vanilla DPO  -E[ log sigma(beta [log pi(y1|x)/sft(y1|x) - log pi(y2|x)/sft(y2|x)]) ]
//! P-DPO        -E[ alpha log sigma(beta [...|x,ut,up]) + (1-alpha) log sigma(beta [...|x,ut,u0]) ]
//! P-IPO        E[ alpha (Q_s - (Q_ref + 1/(2 beta)))^2 + (1-alpha) (Q_a - ...)^2 ]
//! P-RM         -E[ alpha log sigma(r(x,y1,u) - r(x,y2,u)) + (1-alpha) log sigma(... u0 ...) ]
//! ```
//!
//! The user-identifier-specific term conditions the policy on the sample's
//! user; the agnostic term keeps the textual tokens but forces the
//! identifier to 0 (for P-RM it drops user information entirely). The SFT
//! denominators always use an empty soft prompt. P-IPO comes in two forms:
//! `Q` as a ratio of sequence log-probabilities (as printed in its source),
//! and `Q` as their difference. Batch terms are accumulated separately per
//! alpha component, so `loss(alpha) = alpha*loss(1) + (1-alpha)*loss(0)`
//! holds bitwise.

use serde::{Deserialize, Serialize};

use crate::corpus::{PreferenceSample, Token, UserInfo};
use crate::error::{Error, Result};
use crate::num::{sigmoid, softplus};
use crate::policy::{
    logprob_sequence, logprob_sequence_grad, PolicyGrad, PolicyParams, SoftPrompt,
};
use crate::tensor::{axpy, dot, Matrix};
use crate::usermodel::{
    accumulate_implicit_grad, embed_user, ExplicitUserModel, ImplicitGrad, ImplicitUserModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Maximum likelihood on chosen responses; produces the SFT reference.
    SftMle,
    VanillaRm,
    VanillaDpo,
    PDpo,
    PIpoAsWritten,
    PIpoDifference,
    PRm,
}

impl ObjectiveKind {
    pub fn uses_reference(self) -> bool {
        matches!(
            self,
            ObjectiveKind::VanillaDpo
                | ObjectiveKind::PDpo
                | ObjectiveKind::PIpoAsWritten
                | ObjectiveKind::PIpoDifference
        )
    }

    pub fn uses_user_model(self) -> bool {
        matches!(
            self,
            ObjectiveKind::PDpo
                | ObjectiveKind::PIpoAsWritten
                | ObjectiveKind::PIpoDifference
                | ObjectiveKind::PRm
        )
    }

    pub fn uses_head(self) -> bool {
        matches!(self, ObjectiveKind::VanillaRm | ObjectiveKind::PRm)
    }
}

/// How the personalized RM aggregates the user embedding into a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmAggregation {
    /// Prepend the embedding and score the pooled state with a learned
    /// linear layer.
    SoftPromptHead,
    /// Use the (single-row) user embedding itself as the linear head.
    LinearHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub alpha: f64,
    pub kind: ObjectiveKind,
    pub rm_aggregation: RmAggregation,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind, beta: f64, alpha: f64) -> Self {
        ObjectiveConfig {
            beta,
            alpha,
            kind,
            rm_aggregation: RmAggregation::SoftPromptHead,
        }
    }

    pub fn sft_mle() -> Self {
        Self::new(ObjectiveKind::SftMle, 1.0, 0.5)
    }

    pub fn vanilla_rm() -> Self {
        Self::new(ObjectiveKind::VanillaRm, 1.0, 0.5)
    }

    pub fn vanilla_dpo(beta: f64) -> Self {
        Self::new(ObjectiveKind::VanillaDpo, beta, 0.5)
    }

    pub fn pdpo(beta: f64, alpha: f64) -> Self {
        Self::new(ObjectiveKind::PDpo, beta, alpha)
    }

    pub fn pipo_as_written(beta: f64, alpha: f64) -> Self {
        Self::new(ObjectiveKind::PIpoAsWritten, beta, alpha)
    }

    pub fn pipo_difference(beta: f64, alpha: f64) -> Self {
        Self::new(ObjectiveKind::PIpoDifference, beta, alpha)
    }

    pub fn prm(alpha: f64, rm_aggregation: RmAggregation) -> Self {
        ObjectiveConfig {
            beta: 1.0,
            alpha,
            kind: ObjectiveKind::PRm,
            rm_aggregation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Reward-model head.
#[derive(Clone, Debug, PartialEq)]
pub enum RewardHead {
    /// `r = v . h + c` over the pooled state of (user embedding, x, y).
    SoftPrompt { v: Vec<f64>, c: f64 },
    /// `r = e_u . h` with the user embedding as the head; the pooled state
    /// covers (x, y) only and the embedding must be a single row.
    Linear,
}

impl RewardHead {
    pub fn soft_prompt_zeros(d: usize) -> Self {
        RewardHead::SoftPrompt {
            v: vec![0.0; d],
            c: 0.0,
        }
    }
}

/// Gradient of a [`RewardHead::SoftPrompt`] head.
#[derive(Clone, Debug)]
pub struct HeadGrad {
    pub v: Vec<f64>,
    pub c: f64,
}

impl HeadGrad {
    pub fn zeros(d: usize) -> Self {
        HeadGrad {
            v: vec![0.0; d],
            c: 0.0,
        }
    }
}

/// A loss value with gradients for every tensor the objective trains.
#[derive(Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub policy: PolicyGrad,
    pub user: Option<ImplicitGrad>,
    pub head: Option<HeadGrad>,
}

fn require_nonempty(batch: &[PreferenceSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    Ok(())
}

fn user_soft_prompt(
    implicit: &ImplicitUserModel,
    policy: &PolicyParams,
    user: &UserInfo,
) -> Result<(SoftPrompt, usize)> {
    let emb = embed_user(implicit, &ExplicitUserModel::from_policy(policy), user)?;
    let implicit_len = emb.implicit_len;
    Ok((SoftPrompt::from_rows(emb.rows), implicit_len))
}

/// Routes soft-prompt row gradients to their owners: implicit rows to the
/// user model, explicit rows to the shared token table.
fn backprop_soft_prompt(
    soft_grad: &Matrix,
    implicit: &ImplicitUserModel,
    user: &UserInfo,
    implicit_len: usize,
    user_grad: &mut ImplicitGrad,
    embed_grad: &mut Matrix,
) {
    accumulate_implicit_grad(implicit, user.user_id, soft_grad, 0, user_grad);
    for (i, t) in user.text_tokens.iter().enumerate() {
        axpy(1.0, soft_grad.row(implicit_len + i), embed_grad.row_mut(t.0 as usize));
    }
}

fn pooled_hidden(
    policy: &PolicyParams,
    soft_rows: &Matrix,
    x: &[Token],
    y: &[Token],
    include_soft: bool,
) -> (Vec<f64>, usize) {
    let d = policy.dim();
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    if include_soft {
        for r in 0..soft_rows.rows() {
            axpy(1.0, soft_rows.row(r), &mut sum);
            n += 1;
        }
    }
    for t in x.iter().chain(y) {
        axpy(1.0, policy.embed.row(t.0 as usize), &mut sum);
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        for s in sum.iter_mut() {
            *s *= inv;
        }
    }
    (sum, n)
}

/// Scalar reward of `(x, y)` under the head; see [`RewardHead`].
fn pooled_reward(
    head: &RewardHead,
    policy: &PolicyParams,
    soft_rows: &Matrix,
    x: &[Token],
    y: &[Token],
) -> Result<f64> {
    match head {
        RewardHead::SoftPrompt { v, c } => {
            let (h, _) = pooled_hidden(policy, soft_rows, x, y, true);
            Ok(dot(v, &h) + c)
        }
        RewardHead::Linear => {
            if soft_rows.rows() != 1 {
                return Err(Error::config(format!(
                    "linear head requires a single-row user embedding, got {} rows",
                    soft_rows.rows()
                )));
            }
            let (h, _) = pooled_hidden(policy, soft_rows, x, y, false);
            Ok(dot(soft_rows.row(0), &h))
        }
    }
}

/// Accumulates `scale` times the reward gradient; returns the reward.
#[allow(clippy::too_many_arguments)]
fn pooled_reward_grad(
    head: &RewardHead,
    policy: &PolicyParams,
    soft_rows: &Matrix,
    x: &[Token],
    y: &[Token],
    scale: f64,
    policy_grad: &mut PolicyGrad,
    soft_grad: Option<&mut Matrix>,
    head_grad: Option<&mut HeadGrad>,
) -> Result<f64> {
    match head {
        RewardHead::SoftPrompt { v, c } => {
            let (h, n) = pooled_hidden(policy, soft_rows, x, y, true);
            if let Some(hg) = head_grad {
                axpy(scale, &h, &mut hg.v);
                hg.c += scale;
            }
            if n > 0 {
                let row_scale = scale / n as f64;
                if let Some(sg) = soft_grad {
                    for r in 0..sg.rows() {
                        axpy(row_scale, v, sg.row_mut(r));
                    }
                }
                for t in x.iter().chain(y) {
                    axpy(row_scale, v, policy_grad.embed.row_mut(t.0 as usize));
                }
            }
            Ok(dot(v, &h) + c)
        }
        RewardHead::Linear => {
            if soft_rows.rows() != 1 {
                return Err(Error::config(format!(
                    "linear head requires a single-row user embedding, got {} rows",
                    soft_rows.rows()
                )));
            }
            let (h, n) = pooled_hidden(policy, soft_rows, x, y, false);
            if let Some(sg) = soft_grad {
                axpy(scale, &h, sg.row_mut(0));
            }
            if n > 0 {
                let row_scale = scale / n as f64;
                for t in x.iter().chain(y) {
                    axpy(row_scale, soft_rows.row(0), policy_grad.embed.row_mut(t.0 as usize));
                }
            }
            Ok(dot(soft_rows.row(0), &h))
        }
    }
}

/// Negative log-likelihood of the chosen responses; trains the SFT policy.
pub fn sft_mle_loss(policy: &PolicyParams, batch: &[PreferenceSample]) -> Result<LossGrads> {
    require_nonempty(batch)?;
    let inv = 1.0 / batch.len() as f64;
    let empty = SoftPrompt::empty(policy.dim());
    let mut grad = PolicyGrad::zeros_like(policy);
    let mut loss_sum = 0.0;
    for sample in batch {
        let lp = logprob_sequence_grad(
            policy,
            &empty,
            &sample.prompt,
            &sample.chosen,
            -inv,
            &mut grad,
            None,
        )?;
        loss_sum += -lp;
    }
    Ok(LossGrads {
        loss: loss_sum * inv,
        policy: grad,
        user: None,
        head: None,
    })
}

/// Vanilla reward-model loss over pooled-state rewards with an empty soft
/// prompt. Gradients flow into the head and the token table.
pub fn vanilla_rm_loss(
    head: &RewardHead,
    policy: &PolicyParams,
    batch: &[PreferenceSample],
) -> Result<LossGrads> {
    require_nonempty(batch)?;
    if !matches!(head, RewardHead::SoftPrompt { .. }) {
        return Err(Error::config("vanilla RM uses the soft-prompt head form"));
    }
    let inv = 1.0 / batch.len() as f64;
    let empty = Matrix::zeros(0, policy.dim());
    let mut policy_grad = PolicyGrad::zeros_like(policy);
    let mut head_grad = HeadGrad::zeros(policy.dim());
    let mut loss_sum = 0.0;
    for sample in batch {
        let r1 = pooled_reward(head, policy, &empty, &sample.prompt, &sample.chosen)?;
        let r2 = pooled_reward(head, policy, &empty, &sample.prompt, &sample.rejected)?;
        let z = r1 - r2;
        loss_sum += softplus(-z);
        let w = sigmoid(z) - 1.0;
        pooled_reward_grad(
            head,
            policy,
            &empty,
            &sample.prompt,
            &sample.chosen,
            inv * w,
            &mut policy_grad,
            None,
            Some(&mut head_grad),
        )?;
        pooled_reward_grad(
            head,
            policy,
            &empty,
            &sample.prompt,
            &sample.rejected,
            -inv * w,
            &mut policy_grad,
            None,
            Some(&mut head_grad),
        )?;
    }
    Ok(LossGrads {
        loss: loss_sum * inv,
        policy: policy_grad,
        user: None,
        head: Some(head_grad),
    })
}

/// Vanilla DPO with a frozen reference; gradients w.r.t. the policy only.
pub fn dpo_loss(
    policy: &PolicyParams,
    sft: &PolicyParams,
    cfg: &ObjectiveConfig,
    batch: &[PreferenceSample],
) -> Result<LossGrads> {
    cfg.validate()?;
    if cfg.kind != ObjectiveKind::VanillaDpo {
        return Err(Error::config("dpo_loss requires kind = vanilla-dpo"));
    }
    require_nonempty(batch)?;
    let inv = 1.0 / batch.len() as f64;
    let empty = SoftPrompt::empty(policy.dim());
    let sft_empty = SoftPrompt::empty(sft.dim());
    let mut grad = PolicyGrad::zeros_like(policy);
    let mut loss_sum = 0.0;
    for sample in batch {
        let lp1 = logprob_sequence(policy, &empty, &sample.prompt, &sample.chosen)?;
        let lp2 = logprob_sequence(policy, &empty, &sample.prompt, &sample.rejected)?;
        let lr1 = logprob_sequence(sft, &sft_empty, &sample.prompt, &sample.chosen)?;
        let lr2 = logprob_sequence(sft, &sft_empty, &sample.prompt, &sample.rejected)?;
        let z = cfg.beta * ((lp1 - lr1) - (lp2 - lr2));
        loss_sum += softplus(-z);
        let w = cfg.beta * (sigmoid(z) - 1.0);
        logprob_sequence_grad(
            policy,
            &empty,
            &sample.prompt,
            &sample.chosen,
            inv * w,
            &mut grad,
            None,
        )?;
        logprob_sequence_grad(
            policy,
            &empty,
            &sample.prompt,
            &sample.rejected,
            -inv * w,
            &mut grad,
            None,
        )?;
    }
    Ok(LossGrads {
        loss: loss_sum * inv,
        policy: grad,
        user: None,
        head: None,
    })
}

struct PersonalizedAccum<'a> {
    policy: &'a PolicyParams,
    implicit: &'a ImplicitUserModel,
    policy_grad: PolicyGrad,
    user_grad: ImplicitGrad,
}

impl<'a> PersonalizedAccum<'a> {
    fn new(policy: &'a PolicyParams, implicit: &'a ImplicitUserModel) -> Self {
        PersonalizedAccum {
            policy,
            implicit,
            policy_grad: PolicyGrad::zeros_like(policy),
            user_grad: ImplicitGrad::zeros_like(implicit),
        }
    }

    /// One personalized DPO term `-log sigma(beta [Delta1 - Delta2])` for the
    /// given user view; backpropagates with coefficient `coeff` when nonzero.
    fn dpo_term(
        &mut self,
        user: &UserInfo,
        sample: &PreferenceSample,
        lr1: f64,
        lr2: f64,
        beta: f64,
        coeff: f64,
    ) -> Result<f64> {
        let (soft, implicit_len) = user_soft_prompt(self.implicit, self.policy, user)?;
        let lp1 = logprob_sequence(self.policy, &soft, &sample.prompt, &sample.chosen)?;
        let lp2 = logprob_sequence(self.policy, &soft, &sample.prompt, &sample.rejected)?;
        let z = beta * ((lp1 - lr1) - (lp2 - lr2));
        if coeff != 0.0 {
            let w = beta * (sigmoid(z) - 1.0);
            let mut soft_grad = Matrix::zeros(soft.len(), self.policy.dim());
            logprob_sequence_grad(
                self.policy,
                &soft,
                &sample.prompt,
                &sample.chosen,
                coeff * w,
                &mut self.policy_grad,
                Some(&mut soft_grad),
            )?;
            logprob_sequence_grad(
                self.policy,
                &soft,
                &sample.prompt,
                &sample.rejected,
                -coeff * w,
                &mut self.policy_grad,
                Some(&mut soft_grad),
            )?;
            backprop_soft_prompt(
                &soft_grad,
                self.implicit,
                user,
                implicit_len,
                &mut self.user_grad,
                &mut self.policy_grad.embed,
            );
        }
        Ok(softplus(-z))
    }

    /// One P-IPO term `(Q - (Q_ref + 1/(2 beta)))^2`.
    fn ipo_term(
        &mut self,
        user: &UserInfo,
        sample: &PreferenceSample,
        q_ref: f64,
        as_written: bool,
        beta: f64,
        coeff: f64,
    ) -> Result<f64> {
        let (soft, implicit_len) = user_soft_prompt(self.implicit, self.policy, user)?;
        let lp1 = logprob_sequence(self.policy, &soft, &sample.prompt, &sample.chosen)?;
        let lp2 = logprob_sequence(self.policy, &soft, &sample.prompt, &sample.rejected)?;
        if as_written && (lp1 == 0.0 || lp2 == 0.0) {
            return Err(Error::domain(
                "as-written P-IPO is undefined when a sequence log-probability is zero",
            ));
        }
        let q = if as_written { lp1 / lp2 } else { lp1 - lp2 };
        let residual = (q - q_ref) - 1.0 / (2.0 * beta);
        if coeff != 0.0 {
            let (d1, d2) = if as_written {
                (2.0 * residual / lp2, -2.0 * residual * lp1 / (lp2 * lp2))
            } else {
                (2.0 * residual, -2.0 * residual)
            };
            let mut soft_grad = Matrix::zeros(soft.len(), self.policy.dim());
            logprob_sequence_grad(
                self.policy,
                &soft,
                &sample.prompt,
                &sample.chosen,
                coeff * d1,
                &mut self.policy_grad,
                Some(&mut soft_grad),
            )?;
            logprob_sequence_grad(
                self.policy,
                &soft,
                &sample.prompt,
                &sample.rejected,
                coeff * d2,
                &mut self.policy_grad,
                Some(&mut soft_grad),
            )?;
            backprop_soft_prompt(
                &soft_grad,
                self.implicit,
                user,
                implicit_len,
                &mut self.user_grad,
                &mut self.policy_grad.embed,
            );
        }
        Ok(residual * residual)
    }
}

/// Personalized DPO: the alpha-mixed user-identifier-specific and
/// user-identifier-agnostic terms. The agnostic term keeps the textual
/// tokens and forces the identifier to 0.
pub fn pdpo_loss(
    policy: &PolicyParams,
    sft: &PolicyParams,
    implicit: &ImplicitUserModel,
    cfg: &ObjectiveConfig,
    batch: &[PreferenceSample],
) -> Result<LossGrads> {
    cfg.validate()?;
    if cfg.kind != ObjectiveKind::PDpo {
        return Err(Error::config("pdpo_loss requires kind = p-dpo"));
    }
    require_nonempty(batch)?;
    let inv = 1.0 / batch.len() as f64;
    let sft_empty = SoftPrompt::empty(sft.dim());
    let mut acc = PersonalizedAccum::new(policy, implicit);
    let mut sum_specific = 0.0;
    let mut sum_agnostic = 0.0;
    for sample in batch {
        let lr1 = logprob_sequence(sft, &sft_empty, &sample.prompt, &sample.chosen)?;
        let lr2 = logprob_sequence(sft, &sft_empty, &sample.prompt, &sample.rejected)?;
        sum_specific +=
            acc.dpo_term(&sample.user, sample, lr1, lr2, cfg.beta, cfg.alpha * inv)?;
        let agnostic = sample.user.id_forced_generic();
        sum_agnostic +=
            acc.dpo_term(&agnostic, sample, lr1, lr2, cfg.beta, (1.0 - cfg.alpha) * inv)?;
    }
    Ok(LossGrads {
        loss: cfg.alpha * (sum_specific * inv) + (1.0 - cfg.alpha) * (sum_agnostic * inv),
        policy: acc.policy_grad,
        user: Some(acc.user_grad),
        head: None,
    })
}

/// Personalized IPO in both printed forms; see the module docs.
pub fn pipo_loss(
    policy: &PolicyParams,
    sft: &PolicyParams,
    implicit: &ImplicitUserModel,
    cfg: &ObjectiveConfig,
    batch: &[PreferenceSample],
) -> Result<LossGrads> {
    cfg.validate()?;
    let as_written = match cfg.kind {
        ObjectiveKind::PIpoAsWritten => true,
        ObjectiveKind::PIpoDifference => false,
        _ => return Err(Error::config("pipo_loss requires a p-ipo kind")),
    };
    require_nonempty(batch)?;
    let inv = 1.0 / batch.len() as f64;
    let sft_empty = SoftPrompt::empty(sft.dim());
    let mut acc = PersonalizedAccum::new(policy, implicit);
    let mut sum_specific = 0.0;
    let mut sum_agnostic = 0.0;
    for sample in batch {
        let lr1 = logprob_sequence(sft, &sft_empty, &sample.prompt, &sample.chosen)?;
        let lr2 = logprob_sequence(sft, &sft_empty, &sample.prompt, &sample.rejected)?;
        if as_written && (lr1 == 0.0 || lr2 == 0.0) {
            return Err(Error::domain(
                "as-written P-IPO is undefined when a sequence log-probability is zero",
            ));
        }
        let q_ref = if as_written { lr1 / lr2 } else { lr1 - lr2 };
        sum_specific += acc.ipo_term(
            &sample.user,
            sample,
            q_ref,
            as_written,
            cfg.beta,
            cfg.alpha * inv,
        )?;
        let agnostic = sample.user.id_forced_generic();
        sum_agnostic += acc.ipo_term(
            &agnostic,
            sample,
            q_ref,
            as_written,
            cfg.beta,
            (1.0 - cfg.alpha) * inv,
        )?;
    }
    Ok(LossGrads {
        loss: cfg.alpha * (sum_specific * inv) + (1.0 - cfg.alpha) * (sum_agnostic * inv),
        policy: acc.policy_grad,
        user: Some(acc.user_grad),
        head: None,
    })
}

/// Personalized reward modeling with either aggregation; the agnostic term
/// uses empty user information (identifier 0, no text).
pub fn prm_loss(
    head: &RewardHead,
    policy: &PolicyParams,
    implicit: &ImplicitUserModel,
    cfg: &ObjectiveConfig,
    batch: &[PreferenceSample],
) -> Result<LossGrads> {
    cfg.validate()?;
    if cfg.kind != ObjectiveKind::PRm {
        return Err(Error::config("prm_loss requires kind = p-rm"));
    }
    match (cfg.rm_aggregation, head) {
        (RmAggregation::SoftPromptHead, RewardHead::SoftPrompt { .. }) => {}
        (RmAggregation::LinearHead, RewardHead::Linear) => {
            if implicit.user_token_len() != 1 {
                return Err(Error::config(format!(
                    "linear-head aggregation requires T_u = 1, got {}",
                    implicit.user_token_len()
                )));
            }
        }
        _ => return Err(Error::config("reward head does not match rm_aggregation")),
    }
    require_nonempty(batch)?;
    let inv = 1.0 / batch.len() as f64;
    let explicit = ExplicitUserModel::from_policy(policy);
    let is_soft = matches!(head, RewardHead::SoftPrompt { .. });
    let mut policy_grad = PolicyGrad::zeros_like(policy);
    let mut user_grad = ImplicitGrad::zeros_like(implicit);
    let mut head_grad = HeadGrad::zeros(policy.dim());
    let mut sum_specific = 0.0;
    let mut sum_agnostic = 0.0;

    let term = |user: &UserInfo,
                    sample: &PreferenceSample,
                    coeff: f64,
                    policy_grad: &mut PolicyGrad,
                    user_grad: &mut ImplicitGrad,
                    head_grad: &mut HeadGrad|
     -> Result<f64> {
        let emb = embed_user(implicit, &explicit, user)?;
        let r1 = pooled_reward(head, policy, &emb.rows, &sample.prompt, &sample.chosen)?;
        let r2 = pooled_reward(head, policy, &emb.rows, &sample.prompt, &sample.rejected)?;
        let z = r1 - r2;
        if coeff != 0.0 {
            let w = sigmoid(z) - 1.0;
            let mut soft_grad = Matrix::zeros(emb.rows.rows(), policy.dim());
            pooled_reward_grad(
                head,
                policy,
                &emb.rows,
                &sample.prompt,
                &sample.chosen,
                coeff * w,
                policy_grad,
                Some(&mut soft_grad),
                Some(head_grad),
            )?;
            pooled_reward_grad(
                head,
                policy,
                &emb.rows,
                &sample.prompt,
                &sample.rejected,
                -coeff * w,
                policy_grad,
                Some(&mut soft_grad),
                Some(head_grad),
            )?;
            backprop_soft_prompt(
                &soft_grad,
                implicit,
                user,
                emb.implicit_len,
                user_grad,
                &mut policy_grad.embed,
            );
        }
        Ok(softplus(-z))
    };

    for sample in batch {
        sum_specific += term(
            &sample.user,
            sample,
            cfg.alpha * inv,
            &mut policy_grad,
            &mut user_grad,
            &mut head_grad,
        )?;
        sum_agnostic += term(
            &UserInfo::generic(),
            sample,
            (1.0 - cfg.alpha) * inv,
            &mut policy_grad,
            &mut user_grad,
            &mut head_grad,
        )?;
    }
    Ok(LossGrads {
        loss: cfg.alpha * (sum_specific * inv) + (1.0 - cfg.alpha) * (sum_agnostic * inv),
        policy: policy_grad,
        user: Some(user_grad),
        head: if is_soft { Some(head_grad) } else { None },
    })
}

/// The reward a DPO-trained personalized policy induces:
/// `beta log(pi(y|x,u) / sft(y|x))`.
///
/// The optimal-policy reparametrization also carries a y-independent
/// normalizer per prompt; it cancels in every reward comparison made here,
/// so it is never computed.
pub fn implicit_reward(
    policy: &PolicyParams,
    sft: &PolicyParams,
    implicit: &ImplicitUserModel,
    beta: f64,
    x: &[Token],
    y: &[Token],
    user: &UserInfo,
) -> Result<f64> {
    let (soft, _) = user_soft_prompt(implicit, policy, user)?;
    let lp = logprob_sequence(policy, &soft, x, y)?;
    let lr = logprob_sequence(sft, &SoftPrompt::empty(sft.dim()), x, y)?;
    Ok(beta * (lp - lr))
}

/// Personalized RM score `r_P(x, y, u)`; the quantity best-of-N ranks by.
pub fn personalized_reward(
    head: &RewardHead,
    policy: &PolicyParams,
    implicit: &ImplicitUserModel,
    user: &UserInfo,
    x: &[Token],
    y: &[Token],
) -> Result<f64> {
    let emb = embed_user(implicit, &ExplicitUserModel::from_policy(policy), user)?;
    pooled_reward(head, policy, &emb.rows, x, y)
}

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    kind: String,
    d: usize,
}

/// Writes a reward-head checkpoint: JSON header, then (for the soft-prompt
/// form) the weight row and the bias.
pub fn save_head(head: &RewardHead, path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    match head {
        RewardHead::SoftPrompt { v, c } => {
            let header = HeadHeader {
                kind: "soft-prompt".into(),
                d: v.len(),
            };
            writeln!(writer, "{}", serde_json::to_string(&header).expect("header json"))
                .map_err(|e| Error::io(path, e))?;
            let mut line = String::new();
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&format!("{x}"));
            }
            writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
            writeln!(writer, "{c}").map_err(|e| Error::io(path, e))?;
        }
        RewardHead::Linear => {
            let header = HeadHeader {
                kind: "linear".into(),
                d: 0,
            };
            writeln!(writer, "{}", serde_json::to_string(&header).expect("header json"))
                .map_err(|e| Error::io(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn load_head(path: impl AsRef<std::path::Path>) -> Result<RewardHead> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header_line = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing head header".into(),
    })?;
    let header: HeadHeader = serde_json::from_str(header_line).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    match header.kind.as_str() {
        "linear" => Ok(RewardHead::Linear),
        "soft-prompt" => {
            let v_line = lines.next().ok_or(Error::Parse {
                line: 2,
                message: "missing head weights".into(),
            })?;
            let v: std::result::Result<Vec<f64>, _> =
                v_line.split_whitespace().map(str::parse::<f64>).collect();
            let v = v.map_err(|e| Error::Parse {
                line: 2,
                message: e.to_string(),
            })?;
            if v.len() != header.d {
                return Err(Error::Parse {
                    line: 2,
                    message: format!("expected {} values, found {}", header.d, v.len()),
                });
            }
            let c_line = lines.next().ok_or(Error::Parse {
                line: 3,
                message: "missing head bias".into(),
            })?;
            let c: f64 = c_line.trim().parse().map_err(|e: std::num::ParseFloatError| {
                Error::Parse {
                    line: 3,
                    message: e.to_string(),
                }
            })?;
            Ok(RewardHead::SoftPrompt { v, c })
        }
        other => Err(Error::Parse {
            line: 1,
            message: format!("unknown head kind `{other}`"),
        }),
    }
}
