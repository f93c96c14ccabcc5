//! JSON file formats for proposal sets, ground truth, and datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::features::PoolingPredicate;
use crate::error::{Error, Result};
use crate::mask::SegmentMask;
use crate::nn::{check_version, CHECKPOINT_VERSION};
use crate::proposal::{ClassId, ClassInfo, GroundTruth, GtScene, GtSegment, ProposalSegment, ProposalSet, Scene, SegmentId};
use crate::synth::{generate_scene, WorldConfig};

pub const FORMAT_VERSION: u32 = CHECKPOINT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalRecord {
    id: SegmentId,
    rle: Vec<u32>,
    logits: Vec<f64>,
    score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalFile {
    version: u32,
    image_id: String,
    width: u32,
    height: u32,
    classes: Vec<ClassInfo>,
    segments: Vec<ProposalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GtRecord {
    id: SegmentId,
    rle: Vec<u32>,
    label: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GtFile {
    version: u32,
    image_id: String,
    width: u32,
    height: u32,
    classes: Vec<ClassInfo>,
    segments: Vec<GtRecord>,
}

fn parse_versioned<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedRecord(format!("{origin}: {e}")))?;
    check_version(&value)?;
    serde_json::from_value(value).map_err(|e| Error::MalformedRecord(format!("{origin}: {e}")))
}

pub fn proposals_to_json(set: &ProposalSet) -> String {
    let file = ProposalFile {
        version: FORMAT_VERSION,
        image_id: set.image_id.clone(),
        width: set.width,
        height: set.height,
        classes: set.classes.clone(),
        segments: set
            .segments
            .iter()
            .map(|s| ProposalRecord { id: s.id, rle: s.mask.runs.clone(), logits: s.logits.clone(), score: s.detector_score })
            .collect(),
    };
    serde_json::to_string(&file).expect("proposal file serializes")
}

/// Parses a proposal file. Geometry and proposed labels are always derived
/// from the masks and logits.
pub fn proposals_from_json(text: &str) -> Result<ProposalSet> {
    let file: ProposalFile = parse_versioned(text, "proposal file")?;
    let segments = file
        .segments
        .into_iter()
        .map(|r| {
            let mask = SegmentMask::new(file.width, file.height, r.rle)?;
            ProposalSegment::new(r.id, mask, r.logits, r.score)
        })
        .collect::<Result<Vec<_>>>()?;
    let set = ProposalSet { image_id: file.image_id, width: file.width, height: file.height, classes: file.classes, segments };
    set.validate()?;
    Ok(set)
}

pub fn gt_to_json(gt: &GroundTruth) -> String {
    let file = GtFile {
        version: FORMAT_VERSION,
        image_id: gt.image_id.clone(),
        width: gt.width,
        height: gt.height,
        classes: gt.classes.clone(),
        segments: gt
            .segments
            .iter()
            .map(|s| GtRecord { id: s.id, rle: s.mask.runs.clone(), label: s.label })
            .collect(),
    };
    serde_json::to_string(&file).expect("gt file serializes")
}

pub fn gt_from_json(text: &str) -> Result<GroundTruth> {
    let file: GtFile = parse_versioned(text, "ground-truth file")?;
    let segments = file
        .segments
        .into_iter()
        .map(|r| {
            if r.label.index() >= file.classes.len() {
                return Err(Error::InvalidData(format!("gt segment {} has label {} out of range", r.id, r.label)));
            }
            Ok(GtSegment { id: r.id, mask: SegmentMask::new(file.width, file.height, r.rle)?, label: r.label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth { image_id: file.image_id, width: file.width, height: file.height, classes: file.classes, segments })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<ProposalSet> {
    proposals_from_json(&read(path)?).map_err(|e| located(e, path))
}

pub fn read_gt(path: &Path) -> Result<GroundTruth> {
    gt_from_json(&read(path)?).map_err(|e| located(e, path))
}

fn located(e: Error, path: &Path) -> Error {
    match e {
        Error::MalformedRecord(m) => Error::MalformedRecord(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Index ranges of the standard splits; ranges never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 500, val: 100, test: 100 }
    }
}

impl SplitSizes {
    pub fn range(&self, split: &str) -> Result<std::ops::Range<u64>> {
        let (a, b, c) = (self.train, self.val, self.test);
        match split {
            "train" => Ok(0..a),
            "val" => Ok(a..a + b),
            "test" => Ok(a + b..a + b + c),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val, or test"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub world: Option<WorldConfig>,
    pub image_ids: Vec<String>,
}

/// Proposal sets paired with their ground truth, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub world: Option<WorldConfig>,
    pub items: Vec<(ProposalSet, GroundTruth)>,
}

/// A dataset item decoded for the engine.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene: Scene,
    pub gt: GtScene,
}

impl Dataset {
    /// Generates one split of the synthetic world, in parallel.
    pub fn synthesize(world: &WorldConfig, sizes: &SplitSizes, split: &str) -> Result<Self> {
        let range = sizes.range(split)?;
        let items = range
            .into_par_iter()
            .map(|i| generate_scene(world, i).map(|s| (s.proposals, s.gt)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { split: split.to_string(), world: Some(world.clone()), items })
    }

    pub fn proposals_path(dir: &Path, image_id: &str) -> PathBuf {
        dir.join("proposals").join(format!("{image_id}.json"))
    }

    pub fn gt_path(dir: &Path, image_id: &str) -> PathBuf {
        dir.join("gt").join(format!("{image_id}.json"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.items.par_iter().try_for_each(|(p, g)| -> Result<()> {
            write(&Self::proposals_path(dir, &p.image_id), &proposals_to_json(p))?;
            write(&Self::gt_path(dir, &g.image_id), &gt_to_json(g))
        })?;
        let manifest = DatasetManifest {
            version: FORMAT_VERSION,
            split: self.split.clone(),
            world: self.world.clone(),
            image_ids: self.items.iter().map(|(p, _)| p.image_id.clone()).collect(),
        };
        write(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: DatasetManifest = parse_versioned(&read(&path)?, &path.display().to_string())?;
        let items = manifest
            .image_ids
            .par_iter()
            .map(|id| {
                let p = read_proposals(&Self::proposals_path(dir, id))?;
                let g = read_gt(&Self::gt_path(dir, id))?;
                if p.image_id != *id || g.image_id != *id {
                    return Err(Error::InvalidData(format!("files for {id} carry a different image id")));
                }
                Ok((p, g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { split: manifest.split, world: manifest.world, items })
    }

    pub fn prepare(&self, predicate: PoolingPredicate) -> Result<Vec<SceneData>> {
        self.items
            .par_iter()
            .map(|(p, g)| {
                Ok(SceneData { scene: Scene::new(p.clone(), predicate)?, gt: GtScene::new(g.clone())? })
            })
            .collect()
    }
}
