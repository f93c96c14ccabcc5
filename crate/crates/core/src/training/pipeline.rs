//! End-to-end assistant training from a training split.

use serde::{Deserialize, Serialize};

use super::context::{train_context, ContextTrainConfig, EnsembleReport};
use super::examples::{sample_add_examples, sample_relabel_examples, SamplingConfig};
use super::ia::{train_ia_with_mining, tune_stop_threshold, IaTrainConfig, MiningRound};
use super::logs::generate_episode_logs;
use crate::context::features::PoolingPredicate;
use crate::context::model::{ContextConfig, HeadKind};
use crate::engine::ContextAssistant;
use crate::error::{Error, Result};
use crate::init::IaModel;
use crate::io::SceneData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub predicate: PoolingPredicate,
    /// Annotator actions per logged episode.
    pub log_budget: usize,
    /// Trailing training scenes held out for early stopping and threshold
    /// tuning.
    pub tuning_scenes: usize,
    pub sampling: SamplingConfig,
    pub context: ContextTrainConfig,
    pub ia: IaTrainConfig,
    pub tune_stop_threshold: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            predicate: PoolingPredicate::AtLeastHalf,
            log_budget: 40,
            tuning_scenes: 50,
            sampling: SamplingConfig::default(),
            context: ContextTrainConfig { model: ContextConfig::compact(), patience: 3, ..ContextTrainConfig::default() },
            ia: IaTrainConfig::default(),
            tune_stop_threshold: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub relabel: EnsembleReport,
    pub add: EnsembleReport,
    pub mining: Vec<MiningRound>,
    pub stop_threshold: f64,
    pub tuning_init_pq: Option<f64>,
    pub relabel_examples: usize,
    pub add_examples: usize,
}

/// Splits `data` into fitting and tuning scenes.
pub fn tuning_split<'a>(data: &'a [SceneData], cfg: &PipelineConfig) -> Result<(&'a [SceneData], &'a [SceneData])> {
    if cfg.tuning_scenes >= data.len() {
        return Err(Error::Config(format!(
            "{} tuning scenes leave nothing to train on out of {}",
            cfg.tuning_scenes,
            data.len()
        )));
    }
    Ok(data.split_at(data.len() - cfg.tuning_scenes))
}

pub fn train_context_assistant(data: &[SceneData], cfg: &PipelineConfig) -> Result<(ContextAssistant, EnsembleReport, EnsembleReport, usize, usize)> {
    let num_classes = data.first().map(|d| d.scene.num_classes()).ok_or_else(|| Error::Config("empty training split".into()))?;
    let (fit_d, tune_d) = tuning_split(data, cfg)?;
    let logs_fit = generate_episode_logs(fit_d, cfg.log_budget)?;
    let logs_tune = generate_episode_logs(tune_d, cfg.log_budget)?;
    let rel = sample_relabel_examples(fit_d, &logs_fit, &cfg.sampling)?;
    let rel_t = sample_relabel_examples(tune_d, &logs_tune, &cfg.sampling)?;
    let (relabel, rel_report) = train_context(HeadKind::Relabel, num_classes, &rel, &rel_t, &cfg.context)?;
    let add = sample_add_examples(fit_d, &logs_fit, &cfg.sampling)?;
    let add_t = sample_add_examples(tune_d, &logs_tune, &cfg.sampling)?;
    let (add_models, add_report) = train_context(HeadKind::Add, num_classes, &add, &add_t, &cfg.context)?;
    let ca = ContextAssistant { relabel, add: add_models, predicate: cfg.predicate };
    Ok((ca, rel_report, add_report, rel.len(), add.len()))
}

pub fn train_initialization_assistant(data: &[SceneData], cfg: &PipelineConfig) -> Result<(IaModel, Vec<MiningRound>, Option<f64>)> {
    let num_classes = data.first().map(|d| d.scene.num_classes()).ok_or_else(|| Error::Config("empty training split".into()))?;
    let (fit_d, tune_d) = tuning_split(data, cfg)?;
    let logs = generate_episode_logs(fit_d, cfg.log_budget)?;
    let (mut ia, rounds) = train_ia_with_mining(num_classes, fit_d, &logs, &cfg.ia)?;
    let mut tuned = None;
    if cfg.tune_stop_threshold {
        let (t, pq) = tune_stop_threshold(&ia, tune_d)?;
        ia.stop_threshold = t;
        tuned = Some(pq);
    }
    Ok((ia, rounds, tuned))
}

/// Trains both assistants on scenes prepared with `cfg.predicate`.
pub fn train_assistants(data: &[SceneData], cfg: &PipelineConfig) -> Result<(ContextAssistant, IaModel, PipelineReport)> {
    if let Some(d) = data.iter().find(|d| d.scene.predicate != cfg.predicate) {
        return Err(Error::Config(format!(
            "scene {} was pooled with another predicate",
            d.scene.proposals.image_id
        )));
    }
    let (ca, relabel, add, relabel_examples, add_examples) = train_context_assistant(data, cfg)?;
    let (ia, mining, tuning_init_pq) = train_initialization_assistant(data, cfg)?;
    let report = PipelineReport {
        relabel,
        add,
        mining,
        stop_threshold: ia.stop_threshold,
        tuning_init_pq,
        relabel_examples,
        add_examples,
    };
    Ok((ca, ia, report))
}
