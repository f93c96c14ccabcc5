//! Relabel accuracy as a function of the fixed-set size.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::ensemble::EnsembleModels;
use crate::context::features::{fixed_feature, proposal_feature};
use crate::error::Result;
use crate::io::SceneData;
use crate::metrics::greedy_match_proposals;
use crate::proposal::{argmax, ClassId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccuracyConfig {
    pub k_max: usize,
    /// Scenes with fewer matched proposals are skipped, so that every K up
    /// to `k_max` is evaluated on the same targets.
    pub min_matched: usize,
    pub samples_per_target: usize,
    pub seed: u64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        AccuracyConfig { k_max: 8, min_matched: 9, samples_per_target: 4, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyByK {
    /// `accuracy[k]` for `k = 0..=k_max`.
    pub accuracy: Vec<f64>,
    /// Accuracy of the unconditioned proposal label.
    pub proposal_accuracy: f64,
    pub scenes: usize,
    pub targets: usize,
}

/// Matches proposals to gt greedily (IoU > 0.5); each matched proposal is a
/// target whose label is its gt class, and each (target, K) pair is scored
/// with `samples_per_target` random sets of K other matched proposals fixed
/// to their gt classes.
pub fn context_accuracy(data: &[SceneData], model: &EnsembleModels, cfg: &AccuracyConfig) -> Result<AccuracyByK> {
    let mut correct = vec![0usize; cfg.k_max + 1];
    let mut trials = vec![0usize; cfg.k_max + 1];
    let (mut scenes, mut targets, mut raw_correct) = (0, 0, 0);
    for (s, d) in data.iter().enumerate() {
        let scene = &d.scene;
        let mut pairs: Vec<(usize, ClassId)> = Vec::new();
        for m in greedy_match_proposals(scene, &d.gt).into_iter().filter(|m| m.iou > 0.5) {
            let g = d.gt.gt.segments.iter().position(|x| x.id == m.gt_id).expect("matched gt exists");
            pairs.push((scene.index_of(m.proposal_id)?, d.gt.gt.segments[g].label));
        }
        pairs.sort();
        if pairs.len() < cfg.min_matched.max(cfg.k_max + 1) {
            continue;
        }
        scenes += 1;
        for (t, &(idx, label)) in pairs.iter().enumerate() {
            targets += 1;
            raw_correct += (scene.proposals.segments[idx].proposed_label == label) as usize;
            let x_p = proposal_feature(scene, idx);
            let others: Vec<(usize, ClassId)> = pairs.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, p)| *p).collect();
            for k in 0..=cfg.k_max {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((s as u64) << 20) ^ ((t as u64) << 8) ^ k as u64);
                let m = model.select_model(k);
                for _ in 0..cfg.samples_per_target {
                    let x_fix: Vec<_> =
                        others.choose_multiple(&mut rng, k).map(|&(j, c)| fixed_feature(scene, j, c)).collect();
                    let probs = m.relabel_probs(&x_p, &x_fix)?;
                    correct[k] += (argmax(&probs) == label.index()) as usize;
                    trials[k] += 1;
                }
            }
        }
    }
    Ok(AccuracyByK {
        accuracy: correct.iter().zip(&trials).map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect(),
        proposal_accuracy: if targets == 0 { 0.0 } else { raw_correct as f64 / targets as f64 },
        scenes,
        targets,
    })
}
