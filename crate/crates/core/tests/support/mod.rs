//! Independent oracles and checkers shared by the core tests and the
//! acceptance run. Each returns what it measured so callers pick the
//! tolerance.
#![allow(dead_code)]

use std::collections::BTreeMap;

use coanno_core::context::features::{FixedFeature, ProposalFeature};
use coanno_core::context::{ContextConfig, ContextModel, HeadKind, Target};
use coanno_core::engine::{run_episode_observed, Actor, Systems};
use coanno_core::geometry::BoxGeometry;
use coanno_core::init::IaModel;
use coanno_core::io::SceneData;
use coanno_core::metrics::panoptic_quality;
use coanno_core::nn::gradcheck::{check_gradients, relative_error, GradCheck};
use coanno_core::nn::loss::{binary_cross_entropy, quadratic_hinge, softmax_cross_entropy};
use coanno_core::nn::Parameters;
use coanno_core::proposal::{ClassId, SegmentId};
use coanno_core::render::PanopticMap;
use coanno_core::state::{Action, ActionKind, AnnotationState, Author};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random map with up to `n` segments; `base` seeds it from an existing map
/// so that predictions and gt overlap substantially.
pub fn random_map(rng: &mut ChaCha8Rng, w: u32, h: u32, n: u32, base: Option<&PanopticMap>) -> PanopticMap {
    let classes: Vec<u32> = (0..=n).map(|_| rng.gen_range(0..3)).collect();
    let flip = rng.gen_range(0.0..0.5);
    let mut map = PanopticMap::void(w, h);
    for i in 0..map.len() {
        let sid = match base {
            Some(b) if !rng.gen_bool(flip) => b.segment_ids[i].0.min(n),
            _ => rng.gen_range(0..=n),
        };
        if sid > 0 {
            map.segment_ids[i] = SegmentId(sid);
            map.class_ids[i] = Some(ClassId(classes[sid as usize]));
        }
    }
    map
}

type Seg = (u32, Vec<usize>);

fn iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

fn search(i: usize, p: &[Seg], g: &[Seg], used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, best: &mut (usize, f64, Vec<Option<usize>>)) {
    if i == p.len() {
        let n = cur.iter().flatten().count();
        let s: f64 = cur.iter().enumerate().filter_map(|(pi, m)| m.map(|gi| iou(&p[pi].1, &g[gi].1))).sum();
        if n > best.0 || (n == best.0 && s > best.1) {
            *best = (n, s, cur.clone());
        }
        return;
    }
    cur.push(None);
    search(i + 1, p, g, used, cur, best);
    cur.pop();
    for j in 0..g.len() {
        if !used[j] && p[i].0 == g[j].0 && iou(&p[i].1, &g[j].1) > 0.5 {
            used[j] = true;
            cur.push(Some(j));
            search(i + 1, p, g, used, cur, best);
            cur.pop();
            used[j] = false;
        }
    }
}

/// Every injective same-class assignment with IoU > 0.5 is enumerated; the
/// one with the most matches (then the largest IoU sum) wins. Class-averaged
/// over classes present in either map.
pub fn brute_force_pq(pred: &PanopticMap, gt: &PanopticMap) -> f64 {
    let segs = |m: &PanopticMap| {
        let mut out: BTreeMap<u32, Seg> = BTreeMap::new();
        for (i, (s, c)) in m.segment_ids.iter().zip(&m.class_ids).enumerate() {
            if let (false, Some(c)) = (s.is_void(), c) {
                out.entry(s.0).or_insert((c.0, Vec::new())).1.push(i);
            }
        }
        out.into_values().collect::<Vec<_>>()
    };
    let (p, g) = (segs(pred), segs(gt));
    let mut best = (0, -1.0, Vec::new());
    search(0, &p, &g, &mut vec![false; g.len()], &mut Vec::new(), &mut best);
    let mut stats: BTreeMap<u32, (f64, f64, f64, f64)> = BTreeMap::new();
    for (pi, m) in best.2.iter().enumerate() {
        let e = stats.entry(p[pi].0).or_default();
        match m {
            Some(gi) => {
                e.0 += 1.0;
                e.3 += iou(&p[pi].1, &g[*gi].1);
            }
            None => e.1 += 1.0,
        }
    }
    for (gi, seg) in g.iter().enumerate() {
        if !best.2.contains(&Some(gi)) {
            stats.entry(seg.0).or_default().2 += 1.0;
        }
    }
    if stats.is_empty() {
        return 1.0;
    }
    stats.values().map(|(tp, fp, fn_, s)| s / (tp + 0.5 * fp + 0.5 * fn_)).sum::<f64>() / stats.len() as f64
}

/// Largest |PQ - brute force| over `n` random scenes of at most 8x8 pixels
/// and 4 segments per side.
pub fn pq_oracle_max_delta(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (w, h) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (ng, np) = (rng.gen_range(0..=4), rng.gen_range(0..=4));
        let gt = random_map(&mut rng, w, h, ng, None);
        let related = rng.gen_bool(0.8);
        let pred = random_map(&mut rng, w, h, np, related.then_some(&gt));
        let got = panoptic_quality(&pred, &gt).unwrap().pq;
        worst = worst.max((got - brute_force_pq(&pred, &gt)).abs());
    }
    worst
}

pub const C: usize = 6;

fn geom(rng: &mut ChaCha8Rng) -> BoxGeometry {
    BoxGeometry::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5))
}

pub fn inputs(rng: &mut ChaCha8Rng, k: usize) -> (ProposalFeature, Vec<FixedFeature>) {
    let scores = |rng: &mut ChaCha8Rng| (0..C).map(|_| rng.gen_range(-2.0..3.0)).collect::<Vec<f64>>();
    let x_p = ProposalFeature { geometry: geom(rng), scores: scores(rng) };
    let x_fix = (0..k)
        .map(|_| FixedFeature { class: ClassId(rng.gen_range(0..C as u32)), geometry: geom(rng), scores: scores(rng) })
        .collect();
    (x_p, x_fix)
}

pub fn small() -> ContextConfig {
    ContextConfig { human: vec![5, 4], geometry: vec![6, 4], appearance: vec![6, 4], fusion: 6, proposal: vec![8, 5] }
}

/// Finite-difference check of a context head and its loss at `points`
/// random parameter/input draws away from ReLU kinks.
pub fn check_context_head(head: HeadKind, points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheck::default();
    let mut done = 0;
    while done < points {
        let mut m = ContextModel::new(head, C, &small(), &mut rng).unwrap();
        for s in m.param_slices_mut() {
            s.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let k = rng.gen_range(0..5);
        let (x_p, x_fix) = inputs(&mut rng, k);
        if m.min_relu_margin(&x_p, &x_fix).unwrap() < 1e-3 {
            continue;
        }
        let target = match head {
            HeadKind::Relabel => Target::Class(rng.gen_range(0..C)),
            HeadKind::Add => Target::Present(rng.gen_bool(0.5)),
        };
        let mut g = m.zero_grads();
        m.loss(&x_p, &x_fix, target, Some(&mut g)).unwrap();
        total.merge(&check_gradients(&mut m, &g.slices(), |m| m.loss(&x_p, &x_fix, target, None).unwrap(), 1e-5));
        done += 1;
    }
    total
}

/// The initialization net under the quadratic hinge loss.
pub fn check_ia_net(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheck::default();
    let mut done = 0;
    while done < points {
        let mut m = IaModel::new(C, &[8, 8, 4, 1], &mut rng).unwrap();
        let x: Vec<f64> = (0..m.net.input_dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let trace = m.net.forward_trace(&x).unwrap();
        // stay away from the ReLU kinks and the hinge corner
        if trace.min_relu_margin(&m.net) < 1e-3 || (1.0 - y * trace.output()[0]).abs() < 1e-3 {
            continue;
        }
        let (_, d) = quadratic_hinge(trace.output()[0], y);
        let mut g = m.net.zero_grads();
        m.net.backward(&trace, &[d], &mut g).unwrap();
        let loss = |m: &IaModel| quadratic_hinge(m.net.forward(&x).unwrap()[0], y).0;
        total.merge(&check_gradients(&mut m, &g.slices(), loss, 1e-5));
        done += 1;
    }
    total
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Largest relative error of the three loss derivatives at `points` inputs.
pub fn loss_gradient_max_error(points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let logits: Vec<f64> = (0..C).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let class = rng.gen_range(0..C);
        let (_, g) = softmax_cross_entropy(&logits, class);
        for i in 0..C {
            let num = central(
                |v| {
                    let mut l = logits.clone();
                    l[i] = v;
                    softmax_cross_entropy(&l, class).0
                },
                logits[i],
            );
            worst = worst.max(relative_error(g[i], num));
        }
        let z = rng.gen_range(-8.0..8.0);
        let t = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        worst = worst.max(relative_error(binary_cross_entropy(z, t).1, central(|v| binary_cross_entropy(v, t).0, z)));
        let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let s = loop {
            let s: f64 = rng.gen_range(-3.0..3.0);
            if (1.0 - y * s).abs() > 1e-3 {
                break s;
            }
        };
        worst = worst.max(relative_error(quadratic_hinge(s, y).1, central(|v| quadratic_hinge(v, y).0, s)));
    }
    worst
}

/// Number of instances (out of `n`) whose logits change in any bit under
/// shuffling or uniform duplication of the fixed set.
pub fn pooling_invariance_failures(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [HeadKind::Relabel, HeadKind::Add];
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut failures = 0;
    for i in 0..n {
        let m = ContextModel::new(heads[i % 2], C, &small(), &mut rng).unwrap();
        let k = rng.gen_range(1..10);
        let (x_p, mut x_fix) = inputs(&mut rng, k);
        let base = bits(&m.logits(&x_p, &x_fix).unwrap());
        x_fix.shuffle(&mut rng);
        let shuffled = m.logits(&x_p, &x_fix).unwrap();
        let copies = rng.gen_range(2..5);
        let dup: Vec<FixedFeature> = (0..copies).flat_map(|_| x_fix.clone()).collect();
        let mut dup_shuffled = dup.clone();
        dup_shuffled.shuffle(&mut rng);
        let variants = [shuffled, m.logits(&x_p, &dup).unwrap(), m.logits(&x_p, &dup_shuffled).unwrap()];
        if variants.iter().any(|v| bits(v) != base) {
            failures += 1;
        }
    }
    failures
}

/// Problems found in one assistant turn: any action by someone other than
/// the assistant, on a segment fixed before the turn, or changing a fixed
/// entry.
pub fn turn_violations(before: &AnnotationState, after: &AnnotationState, actions: &[Action]) -> Vec<String> {
    let mut out = Vec::new();
    for a in actions {
        if a.author != Author::Assistant {
            out.push(format!("non-assistant action in assistant turn: {a:?}"));
        }
        if before.is_fixed(a.kind.segment_id()) {
            out.push(format!("assistant touched fixed segment {}", a.kind.segment_id()));
        }
        if !matches!(a.kind, ActionKind::Add { .. } | ActionKind::ChangeLabel { .. }) {
            out.push(format!("assistant issued {a:?}"));
        }
    }
    if after.fixed != before.fixed {
        out.push("assistant turn changed the fixed set".into());
    }
    for id in &before.fixed {
        if after.entry(*id) != before.entry(*id) {
            out.push(format!("fixed segment {id} changed"));
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct FuzzStats {
    pub episodes: usize,
    pub annotator_turns: usize,
    pub assistant_actions: usize,
    pub violations: Vec<String>,
}

/// Runs one observed episode and records every rule violation: assistant
/// edits of fixed segments, and anything other than exactly one annotator
/// record per annotator turn.
pub fn fuzz_episode(d: &SceneData, systems: &Systems, budget: usize, stats: &mut FuzzStats) {
    let mut violations = Vec::new();
    let mut assistant_actions = 0;
    let t = run_episode_observed(&d.scene, &d.gt, systems, budget, &mut |b, a, acts| {
        violations.extend(turn_violations(b, a, acts));
        assistant_actions += acts.len();
    })
    .unwrap();
    if let Err(e) = t.final_state.check_invariants(&d.scene) {
        violations.push(format!("final state: {e}"));
    }
    let annot: Vec<usize> = t.records.iter().filter(|r| r.author == Actor::Annotator).map(|r| r.turn).collect();
    if annot != (1..=t.annotator_actions).collect::<Vec<_>>() {
        violations.push(format!("{}: annotator records {annot:?} for {} turns", d.scene.proposals.image_id, t.annotator_actions));
    }
    if t.records.iter().filter(|r| r.author == Actor::Init).count() != 1 || t.curve.len() != budget + 1 {
        violations.push(format!("{}: malformed transcript", d.scene.proposals.image_id));
    }
    stats.episodes += 1;
    stats.annotator_turns += t.annotator_actions;
    stats.assistant_actions += assistant_actions;
    stats.violations.extend(violations);
}
