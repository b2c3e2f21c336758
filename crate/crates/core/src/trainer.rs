//! Deterministic first-order training over any objective, plus the
//! finite-difference gradient checker.
//!
//! The optimizer is gradient descent with per-parameter adaptive scaling by
//! a running root-mean-square of gradients (decay 0.999, damping 1e-8).
//! Batches come from seeded without-replacement shuffling per epoch, or the
//! full dataset when it fits in one batch. Identical inputs and seed give
//! bitwise-identical parameters and loss traces; the SFT reference is never
//! mutated.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::{PreferenceDataset, PreferenceSample};
use crate::error::{Error, Result};
use crate::objectives::{
    dpo_loss, pdpo_loss, pipo_loss, prm_loss, sft_mle_loss, vanilla_rm_loss, LossGrads,
    ObjectiveConfig, ObjectiveKind, RewardHead, RmAggregation,
};
use crate::policy::PolicyParams;
use crate::usermodel::{ImplicitGrad, ImplicitUserModel};

pub const RMS_DECAY: f64 = 0.999;
pub const RMS_DAMPING: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return Err(Error::config("step_size must be nonnegative"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        self.objective.validate()
    }
}

/// Everything an objective may train, plus the frozen reference.
#[derive(Clone, Debug)]
pub struct ParamBundle {
    pub policy: PolicyParams,
    /// Frozen reference policy; required by the DPO/IPO family.
    pub sft: Option<PolicyParams>,
    pub user_model: Option<ImplicitUserModel>,
    pub head: Option<RewardHead>,
}

impl ParamBundle {
    pub fn policy_only(policy: PolicyParams) -> Self {
        ParamBundle {
            policy,
            sft: None,
            user_model: None,
            head: None,
        }
    }

    fn check_compatible(&self, cfg: &ObjectiveConfig) -> Result<()> {
        let kind = cfg.kind;
        if kind.uses_reference() && self.sft.is_none() {
            return Err(Error::config("objective needs an SFT reference policy"));
        }
        if kind.uses_user_model() != self.user_model.is_some() {
            return Err(Error::config(
                "bundle user model does not match the objective",
            ));
        }
        if kind.uses_head() != self.head.is_some() {
            return Err(Error::config("bundle reward head does not match the objective"));
        }
        if kind == ObjectiveKind::PRm {
            match (cfg.rm_aggregation, self.head.as_ref()) {
                (RmAggregation::SoftPromptHead, Some(RewardHead::SoftPrompt { .. })) => {}
                (RmAggregation::LinearHead, Some(RewardHead::Linear)) => {}
                _ => return Err(Error::config("reward head does not match rm_aggregation")),
            }
        }
        Ok(())
    }

    /// Number of trainable scalars for the given objective.
    pub fn trainable_len(&self, cfg: &ObjectiveConfig) -> usize {
        let mut n = self.policy.embed.data().len()
            + self.policy.out_map.data().len()
            + self.policy.out_bias.len();
        if cfg.kind.uses_user_model() {
            n += match self.user_model.as_ref().expect("checked") {
                ImplicitUserModel::Uniform { shared } => shared.data().len(),
                ImplicitUserModel::Individualized { generic, offsets, .. } => {
                    // Offset slab 0 is pinned to zero and never trained.
                    generic.data().len()
                        + offsets.iter().skip(1).map(|o| o.data().len()).sum::<usize>()
                }
                ImplicitUserModel::Cluster { centers, weights } => {
                    centers.iter().map(|c| c.data().len()).sum::<usize>() + weights.data().len()
                }
            };
        }
        if cfg.kind.uses_head() {
            if let Some(RewardHead::SoftPrompt { v, .. }) = self.head.as_ref() {
                n += v.len() + 1;
            }
        }
        n
    }

    /// Flattened view of the trainable scalars, in a fixed order shared with
    /// [`flatten_grads`] and [`ParamBundle::assign_flat`].
    pub fn flatten(&self, cfg: &ObjectiveConfig) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len(cfg));
        out.extend_from_slice(self.policy.embed.data());
        out.extend_from_slice(self.policy.out_map.data());
        out.extend_from_slice(&self.policy.out_bias);
        if cfg.kind.uses_user_model() {
            match self.user_model.as_ref().expect("checked") {
                ImplicitUserModel::Uniform { shared } => out.extend_from_slice(shared.data()),
                ImplicitUserModel::Individualized { generic, offsets, .. } => {
                    out.extend_from_slice(generic.data());
                    for o in offsets.iter().skip(1) {
                        out.extend_from_slice(o.data());
                    }
                }
                ImplicitUserModel::Cluster { centers, weights } => {
                    for c in centers {
                        out.extend_from_slice(c.data());
                    }
                    out.extend_from_slice(weights.data());
                }
            }
        }
        if cfg.kind.uses_head() {
            if let Some(RewardHead::SoftPrompt { v, c }) = self.head.as_ref() {
                out.extend_from_slice(v);
                out.push(*c);
            }
        }
        out
    }

    /// Writes a flattened vector back into the trainable tensors.
    pub fn assign_flat(&mut self, cfg: &ObjectiveConfig, flat: &[f64]) {
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let slice = &flat[cursor..cursor + len];
            cursor += len;
            slice
        };
        let n = self.policy.embed.data().len();
        self.policy.embed.data_mut().copy_from_slice(take(n));
        let n = self.policy.out_map.data().len();
        self.policy.out_map.data_mut().copy_from_slice(take(n));
        let n = self.policy.out_bias.len();
        self.policy.out_bias.copy_from_slice(take(n));
        if cfg.kind.uses_user_model() {
            match self.user_model.as_mut().expect("checked") {
                ImplicitUserModel::Uniform { shared } => {
                    let n = shared.data().len();
                    shared.data_mut().copy_from_slice(take(n));
                }
                ImplicitUserModel::Individualized { generic, offsets, .. } => {
                    let n = generic.data().len();
                    generic.data_mut().copy_from_slice(take(n));
                    for o in offsets.iter_mut().skip(1) {
                        let n = o.data().len();
                        o.data_mut().copy_from_slice(take(n));
                    }
                }
                ImplicitUserModel::Cluster { centers, weights } => {
                    for c in centers.iter_mut() {
                        let n = c.data().len();
                        c.data_mut().copy_from_slice(take(n));
                    }
                    let n = weights.data().len();
                    weights.data_mut().copy_from_slice(take(n));
                }
            }
        }
        if cfg.kind.uses_head() {
            if let Some(RewardHead::SoftPrompt { v, c }) = self.head.as_mut() {
                let n = v.len();
                v.copy_from_slice(take(n));
                *c = take(1)[0];
            }
        }
        debug_assert_eq!(cursor, flat.len());
    }
}

/// Flattens objective gradients in the same order as [`ParamBundle::flatten`].
pub fn flatten_grads(cfg: &ObjectiveConfig, grads: &LossGrads) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(grads.policy.embed.data());
    out.extend_from_slice(grads.policy.out_map.data());
    out.extend_from_slice(&grads.policy.out_bias);
    if cfg.kind.uses_user_model() {
        match grads.user.as_ref().expect("objective returned user grads") {
            ImplicitGrad::Uniform { shared } => out.extend_from_slice(shared.data()),
            ImplicitGrad::Individualized { generic, offsets } => {
                out.extend_from_slice(generic.data());
                for o in offsets.iter().skip(1) {
                    out.extend_from_slice(o.data());
                }
            }
            ImplicitGrad::Cluster { centers, weights } => {
                for c in centers {
                    out.extend_from_slice(c.data());
                }
                out.extend_from_slice(weights.data());
            }
        }
    }
    if cfg.kind.uses_head() {
        if let Some(h) = grads.head.as_ref() {
            out.extend_from_slice(&h.v);
            out.push(h.c);
        }
    }
    out
}

/// Dispatches to the objective's loss-and-gradient evaluation.
pub fn evaluate_objective(
    cfg: &ObjectiveConfig,
    bundle: &ParamBundle,
    batch: &[PreferenceSample],
) -> Result<LossGrads> {
    bundle.check_compatible(cfg)?;
    match cfg.kind {
        ObjectiveKind::SftMle => sft_mle_loss(&bundle.policy, batch),
        ObjectiveKind::VanillaRm => {
            vanilla_rm_loss(bundle.head.as_ref().expect("checked"), &bundle.policy, batch)
        }
        ObjectiveKind::VanillaDpo => dpo_loss(
            &bundle.policy,
            bundle.sft.as_ref().expect("checked"),
            cfg,
            batch,
        ),
        ObjectiveKind::PDpo => pdpo_loss(
            &bundle.policy,
            bundle.sft.as_ref().expect("checked"),
            bundle.user_model.as_ref().expect("checked"),
            cfg,
            batch,
        ),
        ObjectiveKind::PIpoAsWritten | ObjectiveKind::PIpoDifference => pipo_loss(
            &bundle.policy,
            bundle.sft.as_ref().expect("checked"),
            bundle.user_model.as_ref().expect("checked"),
            cfg,
            batch,
        ),
        ObjectiveKind::PRm => prm_loss(
            bundle.head.as_ref().expect("checked"),
            &bundle.policy,
            bundle.user_model.as_ref().expect("checked"),
            cfg,
            batch,
        ),
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// `(step, loss)` pairs recorded every `log_every` steps, starting at 0;
    /// the loss is the batch loss before that step's update.
    pub loss_trace: Vec<(usize, f64)>,
    pub bundle: ParamBundle,
    pub wall_time: Duration,
}

struct Batcher<'a> {
    samples: &'a [PreferenceSample],
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha12Rng,
}

impl<'a> Batcher<'a> {
    fn new(samples: &'a [PreferenceSample], batch_size: usize, seed: u64) -> Self {
        Batcher {
            samples,
            batch_size,
            order: (0..samples.len()).collect(),
            cursor: samples.len(),
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    fn next_into(&mut self, out: &mut Vec<PreferenceSample>) {
        out.clear();
        if self.samples.len() <= self.batch_size {
            out.extend_from_slice(self.samples);
            return;
        }
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        for &i in &self.order[self.cursor..end] {
            out.push(self.samples[i].clone());
        }
        self.cursor = end;
    }
}

/// Mini-batch training of `init` on `dataset` under `cfg.objective`.
pub fn train(
    dataset: &PreferenceDataset,
    init: ParamBundle,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("training dataset is empty"));
    }
    init.check_compatible(&cfg.objective)?;
    let start = Instant::now();

    let mut bundle = init;
    let mut batcher = Batcher::new(&dataset.samples, cfg.batch_size, cfg.seed);
    let mut batch = Vec::with_capacity(cfg.batch_size.min(dataset.len()));
    let dim = bundle.trainable_len(&cfg.objective);
    let mut rms = vec![0.0f64; dim];
    let mut trace = Vec::with_capacity(cfg.steps / cfg.log_every + 1);

    for step in 0..cfg.steps {
        batcher.next_into(&mut batch);
        let grads = evaluate_objective(&cfg.objective, &bundle, &batch)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: grads.loss,
            });
        }
        if step % cfg.log_every == 0 {
            trace.push((step, grads.loss));
        }
        let g = flatten_grads(&cfg.objective, &grads);
        debug_assert_eq!(g.len(), dim);
        let mut theta = bundle.flatten(&cfg.objective);
        for i in 0..dim {
            rms[i] = RMS_DECAY * rms[i] + (1.0 - RMS_DECAY) * g[i] * g[i];
            theta[i] -= cfg.step_size * g[i] / (rms[i].sqrt() + RMS_DAMPING);
        }
        bundle.assign_flat(&cfg.objective, &theta);
    }

    Ok(TrainReport {
        loss_trace: trace,
        bundle,
        wall_time: start.elapsed(),
    })
}

/// Writes a loss trace as `step,loss` CSV with a header line.
pub fn write_trace_csv(trace: &[(usize, f64)], path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    writeln!(writer, "step,loss").map_err(|e| Error::io(path, e))?;
    for (step, loss) in trace {
        writeln!(writer, "{step},{loss}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Coordinates checked per tensor when the bundle exceeds this size.
const GRAD_CHECK_FULL_LIMIT: usize = 5000;
const GRAD_CHECK_SUBSAMPLE: usize = 256;

/// Compares the analytic gradient against central finite differences for
/// every trainable scalar (or a seeded subsample of 256 coordinates when the
/// bundle exceeds 5000 scalars) and returns the worst relative error
/// `|a - fd| / max(1, |a|, |fd|)`.
pub fn grad_check(
    objective: &ObjectiveConfig,
    bundle: &ParamBundle,
    batch: &[PreferenceSample],
    epsilon: f64,
) -> Result<f64> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::config("epsilon must be positive"));
    }
    let analytic = evaluate_objective(objective, bundle, batch)?;
    let analytic_flat = flatten_grads(objective, &analytic);
    let theta = bundle.flatten(objective);
    let dim = theta.len();

    let coords: Vec<usize> = if dim <= GRAD_CHECK_FULL_LIMIT {
        (0..dim).collect()
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(0x9e3779b97f4a7c15);
        let mut all: Vec<usize> = (0..dim).collect();
        all.shuffle(&mut rng);
        all.truncate(GRAD_CHECK_SUBSAMPLE);
        all
    };

    let mut scratch = bundle.clone();
    let mut worst = 0.0f64;
    for &i in &coords {
        let mut plus = theta.clone();
        plus[i] += epsilon;
        scratch.assign_flat(objective, &plus);
        let loss_plus = evaluate_objective(objective, &scratch, batch)?.loss;

        let mut minus = theta.clone();
        minus[i] -= epsilon;
        scratch.assign_flat(objective, &minus);
        let loss_minus = evaluate_objective(objective, &scratch, batch)?.loss;

        let fd = (loss_plus - loss_minus) / (2.0 * epsilon);
        let err = relative_error(analytic_flat[i], fd);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}
