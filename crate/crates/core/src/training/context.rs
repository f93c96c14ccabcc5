//! Adam training of relabel and add context models, generic and per-K.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::examples::ContextExample;
use crate::context::ensemble::{EnsembleModels, DEFAULT_K_SPLIT};
use crate::context::model::{ContextConfig, ContextModel, HeadKind, Target};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Parameters};
use crate::proposal::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextTrainConfig {
    pub model: ContextConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a tuning improvement before a run stops.
    pub patience: usize,
    pub k_split: usize,
    pub per_k: bool,
    pub seed: u64,
}

impl Default for ContextTrainConfig {
    fn default() -> Self {
        ContextTrainConfig {
            model: ContextConfig::default(),
            adam: AdamConfig::default(),
            epochs: 50,
            finetune_epochs: 10,
            batch_size: 256,
            patience: 5,
            k_split: DEFAULT_K_SPLIT,
            per_k: true,
            seed: 0,
        }
    }
}

/// Mean loss, and accuracy for relabel heads (add heads report the fraction
/// of examples on the right side of 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

pub fn evaluate(model: &ContextModel, examples: &[&ContextExample]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Ok(Evaluation { loss: 0.0, accuracy: 0.0, count: 0 });
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in examples {
        let trace = model.forward_trace(&e.x_p, &e.x_fix)?;
        loss += model.loss(&e.x_p, &e.x_fix, e.target.as_target(), None)?;
        let right = match e.target.as_target() {
            Target::Class(c) => argmax(&trace.logits) == c,
            Target::Present(y) => (trace.logits[0] > 0.0) == y,
        };
        correct += right as usize;
    }
    let n = examples.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: correct as f64 / n, count: examples.len() })
}

/// Higher is better: accuracy with loss as tie-break for relabel heads, the
/// negated loss for add heads.
fn selection_key(head: HeadKind, e: &Evaluation) -> (f64, f64) {
    match head {
        HeadKind::Relabel => (e.accuracy, -e.loss),
        HeadKind::Add => (-e.loss, e.accuracy),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub tuning: Vec<Evaluation>,
    pub best_epoch: usize,
}

/// Minibatch Adam from `init`, keeping the epoch with the best tuning score.
/// Epoch 0 is `init` itself, so the result never scores below it on `tune`.
pub fn fit(
    init: ContextModel,
    train: &[&ContextExample],
    tune: &[&ContextExample],
    epochs: usize,
    cfg: &ContextTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ContextModel, FitReport)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let head = init.head_kind;
    let mut model = init;
    let mut adam = AdamState::for_params(cfg.adam, &model.param_slices());
    let mut grads = model.zero_grads();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let first = evaluate(&model, tune)?;
    let mut best = (selection_key(head, &first), model.clone(), 0usize);
    let mut report = FitReport { train_loss: Vec::new(), tuning: vec![first], best_epoch: 0 };
    let mut stale = 0;
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zeroed();
            for &i in batch {
                let e = train[i];
                total += model.loss(&e.x_p, &e.x_fix, e.target.as_target(), Some(&mut grads))?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model.param_slices_mut(), &grads.slices());
        }
        report.train_loss.push(total / train.len().max(1) as f64);
        let eval = evaluate(&model, tune)?;
        report.tuning.push(eval);
        let key = selection_key(head, &eval);
        if tune.is_empty() || key > best.0 {
            best = (key, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    report.best_epoch = best.2;
    log::info!(
        "{} head: best tuning epoch {} of {} ({} train examples)",
        head.name(),
        best.2,
        report.tuning.len() - 1,
        train.len()
    );
    Ok((best.1, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub generic: FitReport,
    pub per_k: BTreeMap<usize, FitReport>,
}

/// Trains the generic model on every example, then, when `cfg.per_k` is
/// set, one fine-tuned copy for each `K <= k_split` on the examples with
/// exactly `K` fixed segments. Empty buckets fall back to the generic model.
pub fn train_context(
    head: HeadKind,
    num_classes: usize,
    train: &[ContextExample],
    tune: &[ContextExample],
    cfg: &ContextTrainConfig,
) -> Result<(EnsembleModels, EnsembleReport)> {
    if train.is_empty() {
        return Err(Error::Config(format!("no {} training examples", head.name())));
    }
    if let Some(e) = train.iter().chain(tune).find(|e| e.target.head_kind() != head) {
        return Err(Error::InvalidData(format!("example {}/{} targets another head", e.image_id, e.segment_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = ContextModel::new(head, num_classes, &cfg.model, &mut rng)?;
    let all: Vec<&ContextExample> = train.iter().collect();
    let all_tune: Vec<&ContextExample> = tune.iter().collect();
    let (generic, generic_report) = fit(init, &all, &all_tune, cfg.epochs, cfg, &mut rng)?;
    let mut ensemble = EnsembleModels::generic_only(generic.clone(), cfg.k_split);
    let mut report = EnsembleReport { generic: generic_report, per_k: BTreeMap::new() };
    if cfg.per_k {
        for k in 0..=cfg.k_split {
            let bucket: Vec<&ContextExample> = train.iter().filter(|e| e.k() == k).collect();
            if bucket.is_empty() {
                log::warn!("no {} examples with {k} fixed segments; the generic model covers it", head.name());
                continue;
            }
            let bucket_tune: Vec<&ContextExample> = tune.iter().filter(|e| e.k() == k).collect();
            let mut k_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            k_rng.set_stream(k as u64 + 1);
            let (m, r) = fit(generic.clone(), &bucket, &bucket_tune, cfg.finetune_epochs, cfg, &mut k_rng)?;
            ensemble.per_k.insert(k, m);
            report.per_k.insert(k, r);
        }
    }
    Ok((ensemble, report))
}
