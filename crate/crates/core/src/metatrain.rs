//! Reptile meta-training: inner-loop fitting on an episode, the first-order
//! meta-update, early stopping on validation macro-F1 and hard-negative
//! resampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::StaticEmbeddingTable;
use crate::episodes::{sample_episodes, CategoryPools, EpisodeSpec, EpisodeTask};
use crate::error::{Error, Result};
use crate::evalreport::macro_f1;
use crate::numerics::{SeedTree, Tensor};
use crate::protomodel::{LossBreakdown, Model, Objective, ParamKind, PredictRule};
use crate::spans::MarkedSpan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_epochs: usize,
    pub inner_lr: f64,
    pub meta_step: f64,
    pub clip_norm: f64,
    pub outer_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub objective: Objective,
    pub predict_rule: PredictRule,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_epochs: 5,
            inner_lr: 5e-4,
            meta_step: 0.4,
            clip_norm: 1.0,
            outer_epochs: 200,
            patience: 20,
            optimizer: OptimizerKind::Adam,
            objective: Objective::Contrastive,
            predict_rule: PredictRule::Max,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.meta_step) {
            return Err(Error::Config(format!("meta_step {} outside [0, 1]", self.meta_step)));
        }
        if self.inner_epochs == 0 || self.outer_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("inner_epochs, outer_epochs and patience must be positive".into()));
        }
        if !(self.inner_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("inner_lr and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardNegativeConfig {
    pub threshold: f64,
    /// target share of hard negatives in a resampled support pool
    pub rho: f64,
}

impl Default for HardNegativeConfig {
    fn default() -> Self {
        Self { threshold: 0.5, rho: 0.3 }
    }
}

/// `γ(1 + cos(π e / E)) / 2`.
pub fn cosine_lr(gamma: f64, epoch: usize, epochs: usize) -> f64 {
    gamma * (1.0 + (PI * epoch as f64 / epochs as f64).cos()) / 2.0
}

/// Scale all gradients so their joint ℓ2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.scale_in_place(s));
    }
    norm
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

enum Optimizer {
    Sgd,
    Adam { m: Vec<Option<Tensor>>, v: Vec<Option<Tensor>>, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam {
                m: vec![None; n],
                v: vec![None; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if let Self::Adam { t, .. } = self {
            *t += 1;
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let mut value = (*model.params[i].value).clone();
            match self {
                Self::Sgd => value.add_scaled(g, -lr)?,
                Self::Adam { m, v, t } => {
                    let mi = m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let vi = v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let (c1, c2) = (1.0 - BETA1.powi(*t), 1.0 - BETA2.powi(*t));
                    for (((w, &gr), mk), vk) in value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mi.data_mut())
                        .zip(vi.data_mut())
                    {
                        *mk = BETA1 * *mk + (1.0 - BETA1) * gr;
                        *vk = BETA2 * *vk + (1.0 - BETA2) * gr * gr;
                        *w -= lr * (*mk / c1) / ((*vk / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
            model.params[i].value = Arc::new(value);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InnerResult {
    pub model: Model,
    /// loss measured before each update
    pub losses: Vec<LossBreakdown>,
}

/// Fit a clone of the meta-model on one episode's support set.
pub fn inner_loop(
    model: &Model,
    task: &EpisodeTask,
    table: &StaticEmbeddingTable,
    cfg: &MetaConfig,
    epochs: usize,
    seeds: &SeedTree,
) -> Result<InnerResult> {
    if task.support.is_empty() {
        return Err(Error::invalid(format!("episode {} has no support spans", task.index)));
    }
    let mut clone = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, clone.params.len());
    let mut rng = seeds.stream("dropout");
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut out = clone
            .loss_and_gradients(&task.support, &task.categories, task.shots, table, cfg.objective, &mut rng)
            .map_err(|err| match err {
                Error::NonFinite(msg) => Error::NonFinite(format!("episode {} inner epoch {e}: {msg}", task.index)),
                other => other,
            })?;
        clip_global_norm(&mut out.grads, cfg.clip_norm);
        opt.step(&mut clone, &out.grads, cosine_lr(cfg.inner_lr, e, epochs))?;
        if let Some((mean, var)) = out.running {
            clone.set_running_stats(mean, var);
        }
        losses.push(out.loss);
    }
    Ok(InnerResult { model: clone, losses })
}

/// `θ ← θ + α(θ'₁ − θ'₀)` on every parameter, then ℓ2-normalise prototype rows.
///
/// Elements where `θ = θ'₀` and `α = 1` are copied from `θ'₁` exactly.
pub fn reptile_update(theta: &mut Model, start: &Model, end: &Model, alpha: f64) -> Result<()> {
    if theta.params.len() != start.params.len() || theta.params.len() != end.params.len() {
        return Err(Error::invalid("parameter sets differ in length"));
    }
    for ((p, a), b) in theta.params.iter_mut().zip(&start.params).zip(&end.params) {
        if p.name != a.name || p.name != b.name || p.value.shape() != a.value.shape() || p.value.shape() != b.value.shape() {
            return Err(Error::shape("reptile_update", p.value.shape(), b.value.shape()));
        }
        let mut value = (*p.value).clone();
        for ((x, &x0), &x1) in value.data_mut().iter_mut().zip(a.value.data()).zip(b.value.data()) {
            *x = if alpha == 1.0 && *x == x0 { x1 } else { *x + alpha * (x1 - x0) };
        }
        if p.kind == ParamKind::Prototype {
            value.normalize_rows();
        }
        p.value = Arc::new(value);
    }
    Ok(())
}

/// Macro-F1 of `model` on labelled spans, over the model's categories.
pub fn validation_f1(model: &Model, spans: &[MarkedSpan], table: &StaticEmbeddingTable, rule: PredictRule) -> Result<f64> {
    let gold: Vec<usize> = spans
        .iter()
        .map(|s| {
            model
                .category_index(&s.label)
                .ok_or_else(|| Error::invalid(format!("validation label `{}` not in model", s.label)))
        })
        .collect::<Result<_>>()?;
    let pred: Vec<usize> = model.predict_spans(spans, table, rule)?.into_iter().map(|p| p.0).collect();
    macro_f1(&pred, &gold, model.categories.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub round: usize,
    pub epoch: usize,
    pub task: usize,
    pub lr: f64,
    pub loss_first: f64,
    pub loss_last: f64,
    pub proto_loss: f64,
    pub span_loss: f64,
    pub ce_loss: f64,
    pub val_f1: f64,
    pub best_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_f1: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochLog>,
}

/// Outer Reptile loop with early stopping.
///
/// Tasks are visited in a seeded order, reshuffled on every pass. When
/// `start_best` is given, that model and score seed the best-so-far record.
#[allow(clippy::too_many_arguments)]
pub fn meta_train(
    model: Model,
    tasks: &[EpisodeTask],
    validation: &[MarkedSpan],
    table: &StaticEmbeddingTable,
    cfg: &MetaConfig,
    seeds: &SeedTree,
    round: usize,
    start_best: Option<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("meta-training needs at least one task"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("meta-training needs a non-empty validation set"));
    }
    let mut theta = model;
    let mut best = theta.clone();
    let mut best_f1 = start_best.unwrap_or(f64::NEG_INFINITY);
    let mut since = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.outer_epochs {
        let pass = epoch / tasks.len();
        if epoch % tasks.len() == 0 {
            order = (0..tasks.len()).collect();
            order.shuffle(&mut seeds.indexed(&format!("task-order-{round}"), pass as u64));
        }
        let task = &tasks[order[epoch % tasks.len()]];
        let epoch_seeds = SeedTree::new(seeds.seed() ^ crate::numerics::rng::stable_hash(format!("{round}/{epoch}").as_bytes()));
        let inner = inner_loop(&theta, task, table, cfg, cfg.inner_epochs, &epoch_seeds)?;
        let start = theta.clone();
        reptile_update(&mut theta, &start, &inner.model, cfg.meta_step)?;
        let f1 = validation_f1(&theta, validation, table, cfg.predict_rule)?;
        epochs_run = epoch + 1;
        if f1 > best_f1 {
            best_f1 = f1;
            best = theta.clone();
            since = 0;
        } else {
            since += 1;
        }
        let first = inner.losses.first().copied().unwrap_or_default();
        let last = inner.losses.last().copied().unwrap_or_default();
        let entry = EpochLog {
            round,
            epoch,
            task: task.index,
            lr: cfg.inner_lr,
            loss_first: first.total,
            loss_last: last.total,
            proto_loss: last.proto,
            span_loss: last.span,
            ce_loss: last.cross_entropy,
            val_f1: f1,
            best_f1,
        };
        log::info!(
            "round {round} epoch {epoch}: task {} loss {:.5} -> {:.5}, val F1 {f1:.4} (best {best_f1:.4})",
            task.index,
            first.total,
            last.total
        );
        history.push(entry);
        if since >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_f1,
        epochs_run,
        history,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HardNegativeReport {
    /// gold category → number of confidently misclassified support spans
    pub per_category: BTreeMap<String, usize>,
    pub total: usize,
}

/// Find support spans predicted as another category with score ≥ `threshold`
/// and resample each affected pool so they make up a share `rho` of it.
pub fn mine_hard_negatives(
    model: &Model,
    pools: &CategoryPools,
    table: &StaticEmbeddingTable,
    cfg: &HardNegativeConfig,
    min_support: usize,
    rule: PredictRule,
    seeds: &SeedTree,
) -> Result<(CategoryPools, HardNegativeReport)> {
    if !(cfg.rho > 0.0 && cfg.rho <= 1.0) {
        return Err(Error::Config(format!("hard-negative share {} outside (0, 1]", cfg.rho)));
    }
    let mut out = pools.clone();
    let mut report = HardNegativeReport::default();
    for pool in &mut out.categories {
        let Some(gold) = model.category_index(&pool.name) else { continue };
        let preds = model.predict_spans(&pool.support, table, rule)?;
        let (mut hard, mut rest): (Vec<MarkedSpan>, Vec<MarkedSpan>) = (Vec::new(), Vec::new());
        for (span, (pred, score)) in pool.support.iter().zip(preds) {
            if pred != gold && score >= cfg.threshold {
                hard.push(span.clone());
            } else {
                rest.push(span.clone());
            }
        }
        if hard.is_empty() {
            continue;
        }
        report.per_category.insert(pool.name.clone(), hard.len());
        report.total += hard.len();
        let target = ((hard.len() as f64 / cfg.rho).round() as usize)
            .max(min_support)
            .min(pool.support.len());
        let mut rng = seeds.stream(&format!("hard-negatives:{}", pool.name));
        rest.shuffle(&mut rng);
        rest.truncate(target.saturating_sub(hard.len()));
        hard.extend(rest);
        hard.shuffle(&mut rng);
        pool.support = hard;
    }
    if report.total == 0 {
        log::info!("no hard negatives found; support pools unchanged");
    }
    Ok((out, report))
}

/// Meta-training followed, when `hard_negatives` is set, by one more round on
/// episodes resampled from hard-negative-enriched pools.
#[derive(Clone, Debug)]
pub struct ProfileOutcome {
    pub first: TrainOutcome,
    pub second: Option<TrainOutcome>,
    pub hard_negatives: Option<HardNegativeReport>,
}

impl ProfileOutcome {
    pub fn best(&self) -> &Model {
        &self.second.as_ref().unwrap_or(&self.first).best
    }

    pub fn best_f1(&self) -> f64 {
        self.second.as_ref().unwrap_or(&self.first).best_f1
    }

    pub fn history(&self) -> Vec<EpochLog> {
        let mut h = self.first.history.clone();
        if let Some(s) = &self.second {
            h.extend(s.history.iter().cloned());
        }
        h
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train_profile(
    model: Model,
    tasks: &[EpisodeTask],
    pools: &CategoryPools,
    spec: EpisodeSpec,
    validation: &[MarkedSpan],
    table: &StaticEmbeddingTable,
    cfg: &MetaConfig,
    hard_negatives: Option<&HardNegativeConfig>,
    seeds: &SeedTree,
) -> Result<ProfileOutcome> {
    let first = meta_train(model, tasks, validation, table, cfg, seeds, 0, None)?;
    let Some(hn) = hard_negatives else {
        return Ok(ProfileOutcome {
            first,
            second: None,
            hard_negatives: None,
        });
    };
    let (resampled, report) = mine_hard_negatives(&first.best, pools, table, hn, spec.shots, cfg.predict_rule, seeds)?;
    if report.total == 0 {
        return Ok(ProfileOutcome {
            first,
            second: None,
            hard_negatives: Some(report),
        });
    }
    let tasks2 = sample_episodes(&resampled, spec, &SeedTree::new(seeds.seed() ^ 0x4841_5244))?;
    let second = meta_train(first.best.clone(), &tasks2, validation, table, cfg, seeds, 1, Some(first.best_f1))?;
    Ok(ProfileOutcome {
        first,
        second: Some(second),
        hard_negatives: Some(report),
    })
}
