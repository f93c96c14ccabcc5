//! Synthetic scenes with contextual class structure and noisy proposal pools.
//!
//! Classes come in groups that co-occur; each scene draws one group. Every
//! class has a confusable partner in another group, and proposal logits split
//! their mass between the true class and that partner. Without context the
//! partner often wins; one annotator-fixed segment reveals the group.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Bitmask;
use crate::proposal::{argmax, ClassId, ClassInfo, GroundTruth, GtSegment, ProposalSegment, ProposalSet, SegmentId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub groups: usize,
    pub classes_per_group: usize,
    /// The first `stuff_per_group` classes of each group are stuff.
    pub stuff_per_group: usize,
    pub segments_min: usize,
    pub segments_max: usize,
    /// Things per scene as a fraction of its segments.
    pub thing_fraction: (f64, f64),
    pub thing_size: (u32, u32),
    pub corner_cut_prob: f64,
    /// Smallest side of a stuff tile.
    pub min_tile: u32,
    /// Largest shift, in pixels, applied to the good copy of a segment.
    pub jitter: u32,
    pub distractors_per_gt: usize,
    /// Fraction of gt segments that receive a good (IoU >= 0.5) copy.
    pub recall: f64,
    pub margin: (f64, f64),
    /// Upper end of the per-scene share of logit mass given to the partner.
    pub confusion_max: f64,
    pub confusion_noise: f64,
    /// Share of logit mass moved to a same-group class.
    pub in_group_confusion: f64,
    pub background_logit: (f64, f64),
    pub distractor_margin_scale: f64,
    pub good_score: (f64, f64),
    pub distractor_score: (f64, f64),
    /// Largest per-class offset added to detector scores, keyed by the
    /// proposed class; drawn once per world from `seed`.
    pub class_score_bias: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 64,
            height: 64,
            groups: 4,
            classes_per_group: 4,
            stuff_per_group: 2,
            segments_min: 9,
            segments_max: 14,
            thing_fraction: (0.3, 0.5),
            thing_size: (8, 20),
            corner_cut_prob: 0.3,
            min_tile: 8,
            jitter: 1,
            distractors_per_gt: 2,
            recall: 0.95,
            margin: (3.0, 6.0),
            confusion_max: 0.75,
            confusion_noise: 0.2,
            in_group_confusion: 0.0,
            background_logit: (-1.0, 0.7),
            distractor_margin_scale: 0.5,
            good_score: (0.75, 0.15),
            distractor_score: (0.45, 0.2),
            class_score_bias: 0.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// No jitter, no confusion, no distractors: proposals equal the gt.
    pub fn noiseless() -> Self {
        WorldConfig {
            jitter: 0,
            distractors_per_gt: 0,
            recall: 1.0,
            confusion_max: 0.0,
            confusion_noise: 0.0,
            in_group_confusion: 0.0,
            background_logit: (-1.0, 0.0),
            ..WorldConfig::default()
        }
    }

    /// Per-class detector score offsets.
    pub fn score_biases(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        (0..self.num_classes())
            .map(|_| if self.class_score_bias > 0.0 { rng.gen_range(-self.class_score_bias..=self.class_score_bias) } else { 0.0 })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.groups * self.classes_per_group
    }

    pub fn group_of(&self, class: usize) -> usize {
        class / self.classes_per_group
    }

    /// The cross-group class a class is confused with.
    pub fn partner(&self, class: usize) -> usize {
        let g = self.group_of(class);
        let j = class % self.classes_per_group;
        (g ^ 1) * self.classes_per_group + j
    }

    pub fn classes(&self) -> Vec<ClassInfo> {
        (0..self.num_classes())
            .map(|c| {
                let j = c % self.classes_per_group;
                let isthing = j >= self.stuff_per_group;
                ClassInfo {
                    name: format!("{}{}_{}", if isthing { "thing" } else { "stuff" }, j, self.group_of(c)),
                    isthing,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.groups < 2 || self.groups % 2 != 0 {
            return bad("groups must be an even number of at least 2 so every class has a cross-group partner");
        }
        if self.stuff_per_group == 0 || self.stuff_per_group >= self.classes_per_group {
            return bad("each group needs both stuff and thing classes");
        }
        if self.segments_min == 0 || self.segments_min > self.segments_max {
            return bad("segments_min must be in 1..=segments_max");
        }
        if !(self.recall > 0.0 && self.recall <= 1.0) {
            return bad("recall must be in (0, 1]");
        }
        if self.thing_size.0 == 0 || self.thing_size.0 > self.thing_size.1 || self.min_tile == 0 {
            return bad("sizes must be positive and ordered");
        }
        if self.thing_fraction.0 < 0.0 || self.thing_fraction.0 > self.thing_fraction.1 || self.thing_fraction.1 >= 1.0 {
            return bad("thing_fraction must satisfy 0 <= lo <= hi < 1");
        }
        // the tiling must fit at least as many tiles as the biggest stuff count
        let tiles = (self.width / self.min_tile) as usize * (self.height / self.min_tile) as usize;
        if tiles < self.segments_max || self.thing_size.1 > self.width.min(self.height) {
            return bad("grid too small for the requested segments");
        }
        if !(0.0..0.5).contains(&self.class_score_bias) {
            return bad("class_score_bias must be in [0, 0.5)");
        }
        if self.margin.0 <= 0.0 || self.margin.0 > self.margin.1 {
            return bad("margin must be a positive ordered range");
        }
        Ok(())
    }
}

/// Both halves of one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub gt: GroundTruth,
    pub proposals: ProposalSet,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    fn w(&self) -> u32 {
        self.x1 - self.x0
    }
    fn h(&self) -> u32 {
        self.y1 - self.y0
    }
}

fn normal(rng: &mut ChaCha8Rng, (mean, std): (f64, f64)) -> f64 {
    if std <= 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("positive std").sample(rng)
}

/// Guillotine tiling: keep splitting the largest splittable tile.
fn tile(rng: &mut ChaCha8Rng, w: u32, h: u32, n: usize, min: u32) -> Option<Vec<Rect>> {
    let mut tiles = vec![Rect { x0: 0, y0: 0, x1: w, y1: h }];
    while tiles.len() < n {
        tiles.sort_by_key(|t| std::cmp::Reverse(t.w() * t.h()));
        let pos = tiles.iter().position(|t| t.w() >= 2 * min || t.h() >= 2 * min)?;
        let t = tiles.remove(pos);
        let vertical = if t.w() >= 2 * min && t.h() >= 2 * min { t.w() >= t.h() } else { t.w() >= 2 * min };
        let (len, start) = if vertical { (t.w(), t.x0) } else { (t.h(), t.y0) };
        let lo = min.max(len * 3 / 10);
        let hi = (len - min).min(len * 7 / 10).max(lo);
        let cut = start + rng.gen_range(lo..=hi);
        if vertical {
            tiles.push(Rect { x1: cut, ..t });
            tiles.push(Rect { x0: cut, ..t });
        } else {
            tiles.push(Rect { y1: cut, ..t });
            tiles.push(Rect { y0: cut, ..t });
        }
    }
    tiles.sort_by_key(|t| (t.y0, t.x0));
    Some(tiles)
}

fn rect_mask(w: u32, h: u32, r: Rect) -> Bitmask {
    Bitmask::rect(w, h, r.x0, r.y0, r.x1, r.y1)
}

fn best_iou(m: &Bitmask, gts: &[Bitmask]) -> f64 {
    gts.iter().map(|g| m.iou(g).unwrap_or(0.0)).fold(0.0, f64::max)
}

/// Generates the scene with the given index; deterministic in
/// `(config.seed, index)`.
pub fn generate_scene(config: &WorldConfig, index: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    for _ in 0..200 {
        if let Some(scene) = try_scene(config, index, &mut rng) {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!("could not place the requested segments for scene {index}")))
}

fn try_scene(cfg: &WorldConfig, index: u64, rng: &mut ChaCha8Rng) -> Option<SyntheticScene> {
    let (w, h) = (cfg.width, cfg.height);
    let cpg = cfg.classes_per_group;
    let group = rng.gen_range(0..cfg.groups);
    let n = rng.gen_range(cfg.segments_min..=cfg.segments_max);
    let frac = rng.gen_range(cfg.thing_fraction.0..=cfg.thing_fraction.1);
    let n_things = ((n as f64 * frac).round() as usize).min(n - 1);
    let n_stuff = n - n_things;

    // things: disjoint rectangles, some with a corner removed
    let mut things: Vec<Bitmask> = Vec::new();
    let mut occupied = Bitmask::new(w, h);
    let mut attempts = 0;
    while things.len() < n_things {
        attempts += 1;
        if attempts > 500 {
            return None;
        }
        let tw = rng.gen_range(cfg.thing_size.0..=cfg.thing_size.1);
        let th = rng.gen_range(cfg.thing_size.0..=cfg.thing_size.1);
        let x0 = rng.gen_range(0..=w - tw);
        let y0 = rng.gen_range(0..=h - th);
        let mut m = Bitmask::rect(w, h, x0, y0, x0 + tw, y0 + th);
        // one pixel of clearance keeps things from touching
        let halo = Bitmask::rect(w, h, x0.saturating_sub(1), y0.saturating_sub(1), x0 + tw + 1, y0 + th + 1);
        if halo.and_count(&occupied) > 0 {
            continue;
        }
        if rng.gen_bool(cfg.corner_cut_prob) {
            let (cw, ch) = (tw / 3, th / 3);
            let cx = if rng.gen_bool(0.5) { x0 } else { x0 + tw - cw };
            let cy = if rng.gen_bool(0.5) { y0 } else { y0 + th - ch };
            m.andnot_assign(&Bitmask::rect(w, h, cx, cy, cx + cw, cy + ch));
        }
        occupied.or_assign(&halo);
        things.push(m);
    }
    let mut thing_union = Bitmask::new(w, h);
    things.iter().for_each(|t| thing_union.or_assign(t));

    let tiles = tile(rng, w, h, n_stuff, cfg.min_tile)?;
    let mut masks: Vec<(Bitmask, usize)> = Vec::new();
    for t in tiles {
        let m = rect_mask(w, h, t).andnot(&thing_union);
        // tiles eaten by things would leave slivers
        if m.count() < (cfg.min_tile * cfg.min_tile / 2) as u64 {
            return None;
        }
        masks.push((m, group * cpg + rng.gen_range(0..cfg.stuff_per_group)));
    }
    for t in things {
        masks.push((t, group * cpg + rng.gen_range(cfg.stuff_per_group..cpg)));
    }
    if masks.len() < cfg.segments_min {
        return None;
    }

    let image_id = format!("synth_{index:06}");
    let classes = cfg.classes();
    let gt_masks: Vec<Bitmask> = masks.iter().map(|(m, _)| m.clone()).collect();
    let gt = GroundTruth {
        image_id: image_id.clone(),
        width: w,
        height: h,
        classes: classes.clone(),
        segments: masks
            .iter()
            .enumerate()
            .map(|(i, (m, c))| GtSegment { id: SegmentId(i as u32 + 1), mask: m.encode(), label: ClassId(*c as u32) })
            .collect(),
    };

    let biases = cfg.score_biases();
    let lambda = rng.gen_range(0.0..=cfg.confusion_max);
    let logits_for = |rng: &mut ChaCha8Rng, class: usize, scale: f64| -> Vec<f64> {
        let c = cfg.num_classes();
        let mut l: Vec<f64> = (0..c).map(|_| normal(rng, cfg.background_logit)).collect();
        let m = rng.gen_range(cfg.margin.0..=cfg.margin.1) * scale;
        let wgt = (lambda + normal(rng, (0.0, cfg.confusion_noise))).clamp(0.0, 1.0);
        let mut own = m * (1.0 - wgt);
        if cfg.in_group_confusion > 0.0 {
            let g = cfg.group_of(class);
            let other = g * cpg + (class % cpg + 1 + rng.gen_range(0..cpg - 1)) % cpg;
            let leak = own * cfg.in_group_confusion * rng.gen::<f64>();
            l[other] = l[other].max(leak);
            own -= leak;
        }
        l[class] = own;
        let p = cfg.partner(class);
        l[p] = l[p].max(m * wgt);
        l
    };

    // which gt segments get a good copy
    let n_gt = masks.len();
    let n_good = ((cfg.recall * n_gt as f64).ceil() as usize).min(n_gt);
    let mut order: Vec<usize> = (0..n_gt).collect();
    order.shuffle(rng);
    let mut has_good = vec![false; n_gt];
    order[..n_good].iter().for_each(|&i| has_good[i] = true);

    let mut raw: Vec<(Bitmask, Vec<f64>, f64)> = Vec::new();
    for (i, (m, class)) in masks.iter().enumerate() {
        if has_good[i] {
            let mut copy = m.clone();
            if cfg.jitter > 0 {
                let d = rng.gen_range(1..=cfg.jitter) as i32;
                let (dx, dy) = [(d, 0), (-d, 0), (0, d), (0, -d)][rng.gen_range(0..4)];
                let shifted = m.shifted(dx, dy);
                if !shifted.is_empty() && shifted.iou(m).unwrap_or(0.0) >= 0.5 {
                    copy = shifted;
                }
            }
            let logits = logits_for(rng, *class, 1.0);
            let score = (normal(rng, cfg.good_score) + biases[argmax(&logits)]).clamp(0.0, 1.0);
            raw.push((copy, logits, score));
        }
        for _ in 0..cfg.distractors_per_gt {
            if let Some(d) = distractor(cfg, rng, i, &gt_masks) {
                let logits = logits_for(rng, *class, cfg.distractor_margin_scale);
                let score = (normal(rng, cfg.distractor_score) + biases[argmax(&logits)]).clamp(0.0, 1.0);
                raw.push((d, logits, score));
            }
        }
    }
    raw.shuffle(rng);
    let segments = raw
        .into_iter()
        .enumerate()
        .map(|(i, (m, logits, score))| ProposalSegment::new(SegmentId(i as u32 + 1), m.encode(), logits, score))
        .collect::<Result<Vec<_>>>()
        .ok()?;
    let proposals = ProposalSet { image_id, width: w, height: h, classes, segments };
    Some(SyntheticScene { gt, proposals })
}

/// A fragment of, merge with a neighbour of, or random blob near gt segment
/// `i`; never a geometric match for any gt segment.
fn distractor(cfg: &WorldConfig, rng: &mut ChaCha8Rng, i: usize, gts: &[Bitmask]) -> Option<Bitmask> {
    let (w, h) = (cfg.width, cfg.height);
    let m = &gts[i];
    let (bx0, by0, bx1, by1) = m.bbox()?;
    for _ in 0..20 {
        let cand = match rng.gen_range(0..3) {
            0 => {
                let bw = bx1 - bx0 + 1;
                let bh = by1 - by0 + 1;
                let fw = (bw as f64 * rng.gen_range(0.3..0.7)).ceil() as u32;
                let fh = (bh as f64 * rng.gen_range(0.3..0.7)).ceil() as u32;
                let x = bx0 + rng.gen_range(0..=bw - fw);
                let y = by0 + rng.gen_range(0..=bh - fh);
                m.and(&Bitmask::rect(w, h, x, y, x + fw, y + fh))
            }
            1 => {
                let j = rng.gen_range(0..gts.len());
                if j == i {
                    continue;
                }
                m.or(&gts[j])
            }
            _ => {
                let bw = (bx1 - bx0 + 1).max(4);
                let bh = (by1 - by0 + 1).max(4);
                let x = rng.gen_range(0..=w.saturating_sub(bw));
                let y = rng.gen_range(0..=h.saturating_sub(bh));
                Bitmask::rect(w, h, x, y, x + bw, y + bh)
            }
        };
        if !cand.is_empty() && best_iou(&cand, gts) < 0.5 {
            return Some(cand);
        }
    }
    None
}
