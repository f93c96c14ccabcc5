//! Initialization-assistant examples, hard negative mining, and training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::logs::EpisodeLog;
use crate::engine::{apply_annotator_action, Oracle};
use crate::error::{Error, Result};
use crate::init::{
    active_union, greedy_compose, ia_compose_trace, ia_features, IaFeature, IaModel, IaScorer,
    DEFAULT_IA_WIDTHS, DEFAULT_VISIBILITY_THRESHOLD,
};
use crate::io::SceneData;
use crate::mask::Bitmask;
use crate::nn::loss::quadratic_hinge;
use crate::nn::{AdamConfig, AdamState};
use crate::proposal::{GtScene, Scene};
use crate::render::visible_masks;
use crate::state::AnnotationState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaExample {
    pub feature: IaFeature,
    /// `+1` for a correct add, `-1` otherwise.
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IaTrainConfig {
    pub widths: Vec<usize>,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub mining_rounds: usize,
    /// Annotator actions simulated per scene while mining.
    pub mining_budget: usize,
    pub seed: u64,
}

impl Default for IaTrainConfig {
    fn default() -> Self {
        IaTrainConfig {
            widths: DEFAULT_IA_WIDTHS.to_vec(),
            adam: AdamConfig::default(),
            epochs: 50,
            batch_size: 256,
            mining_rounds: 2,
            mining_budget: 30,
            seed: 0,
        }
    }
}

/// Positives: the logged final segments replayed front to back, each
/// featurized against the union of the segments before it.
pub fn positive_examples(data: &[SceneData], logs: &[EpisodeLog], bits: usize) -> Result<Vec<IaExample>> {
    let mut out = Vec::new();
    for (d, log) in data.iter().zip(logs) {
        let scene = &d.scene;
        let mut covered = Bitmask::new(scene.width(), scene.height());
        for &(id, _) in &log.segments {
            let idx = scene.index_of(id)?;
            out.push(IaExample { feature: ia_features(scene, idx, &covered, bits), y: 1.0 });
            covered.or_assign(&scene.masks[idx]);
        }
    }
    Ok(out)
}

/// Gt segments not yet covered by a visible active segment at IoU > 0.5.
pub fn unmatched_gt(scene: &Scene, gt: &GtScene, state: &AnnotationState) -> Result<Vec<usize>> {
    let visible = visible_masks(scene, state)?;
    Ok((0..gt.len())
        .filter(|&g| !visible.iter().any(|v| v.iou(&gt.masks[g]).unwrap_or(0.0) > 0.5))
        .collect())
}

/// Whether adding proposal `idx` is consistent with the ground truth: its
/// mask must overlap one of the `unmatched` gt segments at IoU >= 0.5.
pub fn consistent_add(scene: &Scene, gt: &GtScene, unmatched: &[usize], idx: usize) -> Result<bool> {
    for &g in unmatched {
        if scene.masks[idx].iou(&gt.masks[g])? >= 0.5 {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Every add the scorer would make from `state`: each inactive proposal
/// scoring above the stop threshold, as `(index, feature)` in proposal order.
pub fn predicted_adds(scene: &Scene, state: &AnnotationState, scorer: &dyn IaScorer) -> Result<Vec<(usize, IaFeature)>> {
    let covered = active_union(scene, state)?;
    let mut out = Vec::new();
    for (idx, seg) in scene.proposals.segments.iter().enumerate() {
        if state.is_active(seg.id) {
            continue;
        }
        let feature = ia_features(scene, idx, &covered, scorer.class_bits());
        if scorer.score(&feature) > scorer.stop_threshold() {
            out.push((idx, feature));
        }
    }
    Ok(out)
}

fn mine_state(
    data: &SceneData,
    state: &AnnotationState,
    scorer: &dyn IaScorer,
    out: &mut Vec<IaExample>,
) -> Result<()> {
    let scene = &data.scene;
    let unmatched = unmatched_gt(scene, &data.gt, state)?;
    for (idx, feature) in predicted_adds(scene, state, scorer)? {
        if !consistent_add(scene, &data.gt, &unmatched, idx)? {
            out.push(IaExample { feature, y: -1.0 });
        }
    }
    Ok(())
}

/// Negatives for one scene: the inconsistent predicted adds at every step of
/// composing from scratch, and after every simulated annotator action.
pub fn mine_scene(data: &SceneData, scorer: &dyn IaScorer, budget: usize) -> Result<Vec<IaExample>> {
    let (scene, gt) = (&data.scene, &data.gt);
    let mut out = Vec::new();
    let (_, accepted) = ia_compose_trace(scene, scorer)?;
    let mut state = AnnotationState::new();
    mine_state(data, &state, scorer, &mut out)?;
    for c in accepted {
        state.push_back(c.id, scene.proposals.segments[c.index].proposed_label);
        mine_state(data, &state, scorer, &mut out)?;
    }
    let oracle = Oracle::new(scene, gt);
    let mut state = greedy_compose(scene, DEFAULT_VISIBILITY_THRESHOLD);
    for _ in 0..budget {
        let Some((kind, _)) = oracle.best_action(&state)? else { break };
        apply_annotator_action(scene, &mut state, kind)?;
        mine_state(data, &state, scorer, &mut out)?;
    }
    Ok(out)
}

pub fn mine_ia_negatives(data: &[SceneData], scorer: &(dyn IaScorer + Sync), budget: usize) -> Result<Vec<IaExample>> {
    use rayon::prelude::*;
    let per_scene: Vec<Vec<IaExample>> =
        data.par_iter().map(|d| mine_scene(d, scorer, budget)).collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Mean quadratic hinge loss, each class weighted to half the total.
pub fn ia_loss(model: &IaModel, examples: &[IaExample]) -> Result<f64> {
    let (wp, wn) = class_weights(examples)?;
    let mut total = 0.0;
    for e in examples {
        let s = model.net.forward(&e.feature.to_vec())?[0];
        total += quadratic_hinge(s, e.y).0 * if e.y > 0.0 { wp } else { wn };
    }
    Ok(total / examples.len() as f64)
}

fn class_weights(examples: &[IaExample]) -> Result<(f64, f64)> {
    let pos = examples.iter().filter(|e| e.y > 0.0).count();
    let neg = examples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidData("initialization training needs both positive and negative examples".into()));
    }
    let n = examples.len() as f64;
    Ok((n / (2.0 * pos as f64), n / (2.0 * neg as f64)))
}

/// Minibatch Adam on the class-balanced quadratic hinge loss, continuing
/// from `model`.
pub fn fit_ia(model: &mut IaModel, examples: &[IaExample], cfg: &IaTrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (wp, wn) = class_weights(examples)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut adam = AdamState::for_params(cfg.adam, &model.net.param_slices());
    let mut grads = model.net.zero_grads();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zeroed();
            for &i in batch {
                let e = &examples[i];
                let w = if e.y > 0.0 { wp } else { wn };
                let trace = model.net.forward_trace(&e.feature.to_vec())?;
                let (l, g) = quadratic_hinge(trace.output()[0], e.y);
                total += w * l;
                model.net.backward(&trace, &[w * g], &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model.net.param_slices_mut(), &grads.slices());
        }
        history.push(total / examples.len() as f64);
    }
    Ok(history)
}

pub fn train_ia(num_classes: usize, examples: &[IaExample], cfg: &IaTrainConfig) -> Result<IaModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = IaModel::new(num_classes, &cfg.widths, &mut rng)?;
    fit_ia(&mut model, examples, cfg, &mut rng)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRound {
    pub mined: usize,
    pub negatives: usize,
    pub final_loss: f64,
}

/// Starts from a random net and alternates mining with retraining from
/// scratch on the positives and every negative mined so far.
pub fn train_ia_with_mining(
    num_classes: usize,
    data: &[SceneData],
    logs: &[EpisodeLog],
    cfg: &IaTrainConfig,
) -> Result<(IaModel, Vec<MiningRound>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = IaModel::new(num_classes, &cfg.widths, &mut rng)?;
    let positives = positive_examples(data, logs, model.class_bits)?;
    let mut negatives: Vec<IaExample> = Vec::new();
    let mut rounds = Vec::new();
    for round in 0..cfg.mining_rounds.max(1) {
        let mut mined = mine_ia_negatives(data, &model, cfg.mining_budget)?;
        if mined.is_empty() && negatives.is_empty() {
            // An untrained net can stop before its first proposal.
            mined = mine_ia_negatives(data, &Unbounded(&model), cfg.mining_budget)?;
        }
        let count = mined.len();
        negatives.extend(mined);
        let mut examples = positives.clone();
        examples.extend(negatives.iter().cloned());
        let mut round_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        round_rng.set_stream(round as u64 + 1);
        model = IaModel::new(num_classes, &cfg.widths, &mut round_rng)?;
        let history = fit_ia(&mut model, &examples, cfg, &mut round_rng)?;
        log::info!("mining round {round}: {count} new negatives, {} total", negatives.len());
        rounds.push(MiningRound { mined: count, negatives: negatives.len(), final_loss: *history.last().unwrap_or(&0.0) });
    }
    Ok((model, rounds))
}

struct Unbounded<'a>(&'a IaModel);

impl IaScorer for Unbounded<'_> {
    fn score(&self, feature: &IaFeature) -> f64 {
        self.0.score(feature)
    }

    fn stop_threshold(&self) -> f64 {
        f64::NEG_INFINITY
    }

    fn class_bits(&self) -> usize {
        self.0.class_bits
    }
}

/// Picks the stop threshold that maximizes mean initial PQ on `data`.
///
/// The composition order does not depend on the threshold, so each scene is
/// composed once without stopping and every prefix is scored. Candidate
/// thresholds sit halfway between consecutive observed scores; ties go to the
/// candidate closest to the current threshold.
pub fn tune_stop_threshold(model: &IaModel, data: &[SceneData]) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Ok((model.stop_threshold, 0.0));
    }
    let traces: Vec<Vec<(f64, f64)>> = data
        .par_iter()
        .map(|d| {
            let oracle = Oracle::new(&d.scene, &d.gt);
            let (_, accepted) = ia_compose_trace(&d.scene, &Unbounded(model))?;
            let mut state = AnnotationState::new();
            // (score of the entry that extends the prefix, PQ of the prefix)
            let mut out = vec![(f64::INFINITY, oracle.pq(&state)?)];
            for c in accepted {
                state.push_back(c.id, d.scene.proposals.segments[c.index].proposed_label);
                out.last_mut().expect("nonempty").0 = c.score;
                out.push((f64::NEG_INFINITY, oracle.pq(&state)?));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut scores: Vec<f64> = traces.iter().flatten().map(|p| p.0).filter(|s| s.is_finite()).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut candidates = vec![model.stop_threshold];
    candidates.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    if let (Some(lo), Some(hi)) = (scores.first(), scores.last()) {
        candidates.push(lo - 1.0);
        candidates.push(hi + 1.0);
    }
    let mean_pq = |t: f64| {
        traces
            .iter()
            .map(|tr| {
                // the composer stops at the first extension scoring <= t
                let stop = tr.iter().position(|p| p.0 <= t).unwrap_or(tr.len() - 1);
                tr[stop].1
            })
            .sum::<f64>()
            / traces.len() as f64
    };
    let mut best = (model.stop_threshold, mean_pq(model.stop_threshold));
    for t in candidates {
        let pq = mean_pq(t);
        let closer = (t - model.stop_threshold).abs() < (best.0 - model.stop_threshold).abs();
        if pq > best.1 + 1e-12 || ((pq - best.1).abs() <= 1e-12 && closer) {
            best = (t, pq);
        }
    }
    Ok(best)
}
