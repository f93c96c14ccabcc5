//! Context-model examples sampled from episode logs, and their shard format.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::logs::EpisodeLog;
use crate::context::ensemble::FEATURE_VERSION;
use crate::context::features::{fixed_feature, proposal_feature, FixedFeature, ProposalFeature};
use crate::context::model::{HeadKind, Target};
use crate::error::{Error, Result};
use crate::io::SceneData;
use crate::proposal::{ClassId, SegmentId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub k_max: usize,
    pub samples_per_segment: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { k_max: 16, samples_per_segment: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextExample {
    pub image_id: String,
    pub segment_id: SegmentId,
    pub fixed_ids: Vec<SegmentId>,
    pub x_p: ProposalFeature,
    pub x_fix: Vec<FixedFeature>,
    pub target: ExampleTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleTarget {
    Class(ClassId),
    Present(bool),
}

impl ExampleTarget {
    pub fn as_target(self) -> Target {
        match self {
            ExampleTarget::Class(c) => Target::Class(c.index()),
            ExampleTarget::Present(y) => Target::Present(y),
        }
    }

    pub fn head_kind(self) -> HeadKind {
        match self {
            ExampleTarget::Class(_) => HeadKind::Relabel,
            ExampleTarget::Present(_) => HeadKind::Add,
        }
    }
}

impl ContextExample {
    pub fn k(&self) -> usize {
        self.x_fix.len()
    }
}

/// Per-scene rng so sampling is independent of scene order and threading.
fn scene_rng(seed: u64, scene: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scene as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Draws `K ~ U{0..=min(k_max, pool)}` distinct members of `pool`.
fn sample_fixed(rng: &mut ChaCha8Rng, pool: &[(SegmentId, ClassId)], k_max: usize) -> Vec<(SegmentId, ClassId)> {
    let k = rng.gen_range(0..=k_max.min(pool.len()));
    pool.choose_multiple(rng, k).copied().collect()
}

fn build(
    data: &SceneData,
    target: SegmentId,
    fixed: &[(SegmentId, ClassId)],
    label: ExampleTarget,
) -> Result<ContextExample> {
    let scene = &data.scene;
    let x_fix = fixed
        .iter()
        .map(|&(id, c)| Ok(fixed_feature(scene, scene.index_of(id)?, c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContextExample {
        image_id: scene.proposals.image_id.clone(),
        segment_id: target,
        fixed_ids: fixed.iter().map(|f| f.0).collect(),
        x_p: proposal_feature(scene, scene.index_of(target)?),
        x_fix,
        target: label,
    })
}

/// Relabel examples: every logged segment, `samples_per_segment` times, with a
/// random subset of the other logged segments as the fixed set.
pub fn sample_relabel_examples(data: &[SceneData], logs: &[EpisodeLog], cfg: &SamplingConfig) -> Result<Vec<ContextExample>> {
    let mut out = Vec::new();
    for (s, (d, log)) in data.iter().zip(logs).enumerate() {
        let mut rng = scene_rng(cfg.seed, s, 1);
        for (t, &(id, label)) in log.segments.iter().enumerate() {
            let others: Vec<_> = log.segments.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, x)| *x).collect();
            for _ in 0..cfg.samples_per_segment {
                let fixed = sample_fixed(&mut rng, &others, cfg.k_max);
                out.push(build(d, id, &fixed, ExampleTarget::Class(label))?);
            }
        }
    }
    Ok(out)
}

/// Add examples: logged segments are positives, proposals that match no gt
/// segment (best IoU < 0.5, any label) are negatives; the larger side is
/// downsampled to a 1:1 balance per scene.
pub fn sample_add_examples(data: &[SceneData], logs: &[EpisodeLog], cfg: &SamplingConfig) -> Result<Vec<ContextExample>> {
    let mut out = Vec::new();
    for (s, (d, log)) in data.iter().zip(logs).enumerate() {
        let mut rng = scene_rng(cfg.seed, s, 2);
        let mut positives: Vec<SegmentId> = log.segments.iter().map(|x| x.0).collect();
        let mut negatives: Vec<SegmentId> = d
            .scene
            .proposals
            .segments
            .iter()
            .zip(&d.scene.masks)
            .filter(|(_, m)| d.gt.masks.iter().all(|g| m.iou(g).unwrap_or(0.0) < 0.5))
            .map(|(seg, _)| seg.id)
            .collect();
        let n = positives.len().min(negatives.len());
        positives.shuffle(&mut rng);
        negatives.shuffle(&mut rng);
        positives.truncate(n);
        negatives.truncate(n);
        positives.sort();
        negatives.sort();
        for _ in 0..cfg.samples_per_segment {
            for &id in &positives {
                let others: Vec<_> = log.segments.iter().filter(|x| x.0 != id).copied().collect();
                let fixed = sample_fixed(&mut rng, &others, cfg.k_max);
                out.push(build(d, id, &fixed, ExampleTarget::Present(true))?);
            }
            for &id in &negatives {
                let fixed = sample_fixed(&mut rng, &log.segments, cfg.k_max);
                out.push(build(d, id, &fixed, ExampleTarget::Present(false))?);
            }
        }
    }
    Ok(out)
}

/// Checks that no example carries its own target among its fixed segments.
pub fn check_no_self_context(examples: &[ContextExample]) -> Result<()> {
    for e in examples {
        let ids: BTreeSet<_> = e.fixed_ids.iter().collect();
        if ids.contains(&e.segment_id) || ids.len() != e.fixed_ids.len() {
            return Err(Error::InvalidData(format!(
                "example for {}/{} has an invalid fixed set",
                e.image_id, e.segment_id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShardHeader {
    version: u32,
    feature_version: u32,
    head_kind: HeadKind,
    count: usize,
}

/// Writes examples as JSON lines after a one-line header.
pub fn write_shard(path: &Path, head_kind: HeadKind, examples: &[ContextExample]) -> Result<()> {
    if let Some(e) = examples.iter().find(|e| e.target.head_kind() != head_kind) {
        return Err(Error::InvalidData(format!("example {}/{} belongs to another head", e.image_id, e.segment_id)));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = ShardHeader {
        version: crate::nn::CHECKPOINT_VERSION,
        feature_version: FEATURE_VERSION,
        head_kind,
        count: examples.len(),
    };
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header).expect("header serializes"))?;
    for e in examples {
        emit(serde_json::to_string(e).expect("example serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<(HeadKind, Vec<ContextExample>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let bad = |m: String| Error::MalformedRecord(format!("{}: {m}", path.display()));
    let first = lines.next().ok_or_else(|| bad("empty shard".into()))?.map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
    crate::nn::check_version(&value)?;
    let header: ShardHeader = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    if header.feature_version != FEATURE_VERSION {
        return Err(Error::Version { found: header.feature_version, expected: FEATURE_VERSION });
    }
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ContextExample = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if e.target.head_kind() != header.head_kind {
            return Err(bad("example head does not match the header".into()));
        }
        out.push(e);
    }
    if out.len() != header.count {
        return Err(bad(format!("header promises {} examples, found {}", header.count, out.len())));
    }
    Ok((header.head_kind, out))
}
