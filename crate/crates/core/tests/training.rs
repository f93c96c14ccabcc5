use std::collections::BTreeSet;

use coanno_core::context::features::{FixedFeature, ProposalFeature};
use coanno_core::context::{ContextConfig, HeadKind, PoolingPredicate};
use coanno_core::init::{IaFeature, IaModel, IaScorer};
use coanno_core::io::{Dataset, SceneData, SplitSizes};
use coanno_core::nn::gradcheck::check_gradients;
use coanno_core::nn::loss::quadratic_hinge;
use coanno_core::nn::AdamConfig;
use coanno_core::proposal::{ClassId, SegmentId};
use coanno_core::synth::WorldConfig;
use coanno_core::training::context::{evaluate, fit, train_context, ContextTrainConfig};
use coanno_core::training::examples::check_no_self_context;
use coanno_core::training::ia::{fit_ia, ia_loss, mine_ia_negatives, mine_scene, train_ia, IaTrainConfig};
use coanno_core::training::*;
use coanno_core::geometry::BoxGeometry;
use coanno_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenes(n: u64) -> Vec<SceneData> {
    let sizes = SplitSizes { train: n, val: 0, test: 0 };
    Dataset::synthesize(&WorldConfig::default(), &sizes, "train").unwrap().prepare(PoolingPredicate::AtLeastHalf).unwrap()
}

fn tiny() -> ContextTrainConfig {
    ContextTrainConfig {
        model: ContextConfig { human: vec![4], geometry: vec![4], appearance: vec![4], fusion: 4, proposal: vec![8] },
        epochs: 3,
        finetune_epochs: 2,
        batch_size: 32,
        ..ContextTrainConfig::default()
    }
}

#[test]
fn logs_hold_correctly_labeled_active_segments() {
    let data = scenes(4);
    let logs = generate_episode_logs(&data, 40).unwrap();
    assert_eq!(logs.len(), 4);
    for (d, log) in data.iter().zip(&logs) {
        assert_eq!(log.image_id, d.scene.proposals.image_id);
        assert!(!log.segments.is_empty());
        let ids: BTreeSet<_> = log.segments.iter().map(|s| s.0).collect();
        assert_eq!(ids.len(), log.segments.len());
        assert!(log.segments.len() <= d.gt.len());
    }
    assert_eq!(logs, generate_episode_logs(&data, 40).unwrap());
}

#[test]
fn relabel_sampling_counts_and_empty_contexts() {
    let data = scenes(3);
    let logs = generate_episode_logs(&data, 40).unwrap();
    let cfg = SamplingConfig { k_max: 0, samples_per_segment: 4, seed: 1 };
    let ex = sample_relabel_examples(&data, &logs, &cfg).unwrap();
    let n: usize = logs.iter().map(|l| l.segments.len()).sum();
    assert_eq!(ex.len(), n * 4);
    assert!(ex.iter().all(|e| e.x_fix.is_empty()));

    let single: Vec<EpisodeLog> =
        logs.iter().map(|l| EpisodeLog { image_id: l.image_id.clone(), segments: l.segments[..1].to_vec() }).collect();
    let ex = sample_relabel_examples(&data, &single, &SamplingConfig::default()).unwrap();
    assert_eq!(ex.len(), 3 * 4);
    assert!(ex.iter().all(|e| e.x_fix.is_empty()));
}

#[test]
fn sampled_examples_never_contain_their_target() {
    let data = scenes(6);
    let logs = generate_episode_logs(&data, 40).unwrap();
    let cfg = SamplingConfig::default();
    let rel = sample_relabel_examples(&data, &logs, &cfg).unwrap();
    let add = sample_add_examples(&data, &logs, &cfg).unwrap();
    check_no_self_context(&rel).unwrap();
    check_no_self_context(&add).unwrap();
    assert!(rel.iter().all(|e| e.k() <= cfg.k_max));
    // relabel targets are the logged labels
    for e in &rel {
        let log = logs.iter().find(|l| l.image_id == e.image_id).unwrap();
        let label = log.segments.iter().find(|s| s.0 == e.segment_id).unwrap().1;
        assert_eq!(e.target, ExampleTarget::Class(label));
    }
    let pos = add.iter().filter(|e| e.target == ExampleTarget::Present(true)).count();
    assert_eq!(pos * 2, add.len(), "add examples are balanced one to one");
    assert_eq!(rel, sample_relabel_examples(&data, &logs, &cfg).unwrap());
}

#[test]
fn add_negatives_match_no_ground_truth() {
    let data = scenes(3);
    let logs = generate_episode_logs(&data, 40).unwrap();
    let add = sample_add_examples(&data, &logs, &SamplingConfig::default()).unwrap();
    for e in add.iter().filter(|e| e.target == ExampleTarget::Present(false)) {
        let d = data.iter().find(|d| d.scene.proposals.image_id == e.image_id).unwrap();
        let m = d.scene.mask(e.segment_id).unwrap();
        assert!(d.gt.masks.iter().all(|g| m.iou(g).unwrap() < 0.5));
    }
}

#[test]
fn shard_round_trip_and_guards() {
    let data = scenes(2);
    let logs = generate_episode_logs(&data, 40).unwrap();
    let rel = sample_relabel_examples(&data, &logs, &SamplingConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("relabel.jsonl");
    write_shard(&path, HeadKind::Relabel, &rel).unwrap();
    let (head, back) = read_shard(&path).unwrap();
    assert_eq!(head, HeadKind::Relabel);
    assert_eq!(back, rel);
    assert!(write_shard(&path, HeadKind::Add, &rel).is_err());

    let text = std::fs::read_to_string(&path).unwrap();
    let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    std::fs::write(&path, truncated).unwrap();
    assert!(matches!(read_shard(&path), Err(Error::MalformedRecord(_))));

    let bumped = text.replacen("\"version\":1", "\"version\":99", 1);
    std::fs::write(&path, bumped).unwrap();
    assert!(matches!(read_shard(&path), Err(Error::Version { found: 99, .. })));
}

/// Two classes with opposite proposal scores, so the identity residual starts
/// out wrong everywhere; the true class is the side of the box center.
fn separable(n: usize, seed: u64) -> Vec<ContextExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let cx: f64 = rng.gen_range(0.05..0.95);
            let class = (cx > 0.5) as usize;
            let mut scores = vec![0.0; 2];
            scores[1 - class] = 1.0;
            ContextExample {
                image_id: "toy".into(),
                segment_id: SegmentId(i as u32 + 1),
                fixed_ids: Vec::new(),
                x_p: ProposalFeature { geometry: BoxGeometry { cx, cy: rng.gen_range(0.2..0.8), w: 0.2, h: 0.2 }, scores },
                x_fix: Vec::<FixedFeature>::new(),
                target: ExampleTarget::Class(ClassId(class as u32)),
            }
        })
        .collect()
}

#[test]
fn context_training_fits_a_separable_toy_set() {
    let train = separable(200, 3);
    let refs: Vec<&ContextExample> = train.iter().collect();
    let cfg = ContextTrainConfig {
        model: ContextConfig { human: vec![4], geometry: vec![4], appearance: vec![4], fusion: 4, proposal: vec![16, 16] },
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        batch_size: 32,
        ..ContextTrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init = coanno_core::context::ContextModel::new(HeadKind::Relabel, 2, &cfg.model, &mut rng).unwrap();
    let before = evaluate(&init, &refs).unwrap();
    let (model, report) = fit(init, &refs, &[], 200, &cfg, &mut rng).unwrap();
    assert!(report.train_loss[0] < before.loss);
    let after = evaluate(&model, &refs).unwrap();
    assert!(after.accuracy >= 0.99, "training accuracy {}", after.accuracy);
}

#[test]
fn ensemble_training_covers_buckets_and_reloads() {
    let data = scenes(8);
    let logs = generate_episode_logs(&data, 40).unwrap();
    let cfg = SamplingConfig { k_max: 3, ..SamplingConfig::default() };
    let ex = sample_relabel_examples(&data[..6], &logs[..6], &cfg).unwrap();
    let tune = sample_relabel_examples(&data[6..], &logs[6..], &cfg).unwrap();
    let train_cfg = ContextTrainConfig { k_split: 5, ..tiny() };
    let (ens, report) = train_context(HeadKind::Relabel, 16, &ex, &tune, &train_cfg).unwrap();
    // buckets beyond k_max are empty and fall back to the generic model
    assert_eq!(ens.per_k.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(report.per_k.len(), 4);
    for (k, r) in &report.per_k {
        let used = ex.iter().filter(|e| e.k() == *k).count();
        assert!(used > 0);
        assert!(r.best_epoch <= train_cfg.finetune_epochs);
    }
    // per-K fine-tuning never scores below the generic model on its bucket
    for (k, m) in &ens.per_k {
        let bucket: Vec<&ContextExample> = tune.iter().filter(|e| e.k() == *k).collect();
        let a = evaluate(m, &bucket).unwrap().accuracy;
        let g = evaluate(&ens.generic, &bucket).unwrap().accuracy;
        assert!(a >= g, "K={k}: {a} < {g}");
    }
    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path(), PoolingPredicate::AtLeastHalf).unwrap();
    let back = coanno_core::context::EnsembleModels::load(dir.path(), PoolingPredicate::AtLeastHalf).unwrap();
    let refs: Vec<&ContextExample> = tune.iter().collect();
    assert_eq!(evaluate(&back.generic, &refs).unwrap(), evaluate(&ens.generic, &refs).unwrap());
    let (again, _) = train_context(HeadKind::Relabel, 16, &ex, &tune, &train_cfg).unwrap();
    assert_eq!(again, ens, "training is deterministic in the seed");
}

#[test]
fn context_training_rejects_mismatched_heads() {
    let train = separable(5, 0);
    assert!(train_context(HeadKind::Add, 2, &train, &[], &tiny()).is_err());
    assert!(train_context(HeadKind::Relabel, 2, &[], &[], &tiny()).is_err());
}

/// Scores every proposal in `good` at +1 and everything else at -1.
struct Stub {
    good: BTreeSet<(u64, u64)>,
}

impl Stub {
    fn key(f: &IaFeature) -> (u64, u64) {
        (f.score.to_bits(), f.class_bits.iter().fold(0, |a, b| a * 2 + *b as u64))
    }
}

impl IaScorer for Stub {
    fn score(&self, f: &IaFeature) -> f64 {
        if self.good.contains(&Self::key(f)) {
            1.0
        } else {
            -1.0
        }
    }

    fn stop_threshold(&self) -> f64 {
        0.0
    }

    fn class_bits(&self) -> usize {
        8
    }
}

fn stub_for(d: &SceneData, pick: impl Fn(usize) -> bool) -> Stub {
    let good = (0..d.scene.len())
        .filter(|&i| pick(i))
        .map(|i| {
            let s = &d.scene.proposals.segments[i];
            let f = coanno_core::init::ia_features(&d.scene, i, &coanno_core::mask::Bitmask::new(64, 64), 8);
            (s.detector_score.to_bits(), Stub::key(&f).1)
        })
        .collect();
    Stub { good }
}

#[test]
fn perfect_initializer_mines_nothing() {
    for d in scenes(5) {
        let stub = stub_for(&d, |i| d.gt.masks.iter().any(|g| d.scene.masks[i].iou(g).unwrap() > 0.5));
        assert!(mine_scene(&d, &stub, 30).unwrap().is_empty());
    }
}

#[test]
fn initializer_stuck_on_a_distractor_mines_it_at_every_query() {
    let data = scenes(3);
    for d in &data {
        // a distractor that matches no gt segment
        let Some(bad) = (0..d.scene.len()).find(|&i| d.gt.masks.iter().all(|g| d.scene.masks[i].iou(g).unwrap() < 0.5))
        else {
            continue;
        };
        let stub = stub_for(d, |i| i == bad);
        let mined = mine_scene(d, &stub, 30).unwrap();
        // composing: the empty state, then the state holding the distractor,
        // where nothing scores above the threshold
        let oracle = coanno_core::engine::Oracle::new(&d.scene, &d.gt);
        let mut state = coanno_core::init::greedy_compose(&d.scene, 0.5);
        let mut queries = 0;
        let mut expected = 1;
        while queries < 30 {
            let Some((kind, _)) = oracle.best_action(&state).unwrap() else { break };
            coanno_core::engine::apply_annotator_action(&d.scene, &mut state, kind).unwrap();
            queries += 1;
            expected += !state.is_active(d.scene.proposals.segments[bad].id) as usize;
        }
        assert_eq!(mined.len(), expected);
        assert!(mined.iter().all(|e| e.y == -1.0));
        return;
    }
    panic!("no isolated distractor found");
}

#[test]
fn mining_is_deterministic() {
    let data = scenes(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ia = IaModel::new(16, &[8, 8, 4, 1], &mut rng).unwrap();
    assert_eq!(mine_ia_negatives(&data, &ia, 10).unwrap(), mine_ia_negatives(&data, &ia, 10).unwrap());
}

fn margin_separable(n: usize) -> Vec<IaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|_| {
            let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let score = if y > 0.0 { rng.gen_range(0.7..1.0) } else { rng.gen_range(0.0..0.3) };
            IaExample {
                feature: IaFeature { class_bits: vec![0.0; 8], score, free_fraction: rng.gen_range(0.0..1.0) },
                y,
            }
        })
        .collect()
}

#[test]
fn ia_training_drives_the_hinge_to_zero_on_separable_data() {
    let ex = margin_separable(200);
    let cfg = IaTrainConfig { epochs: 300, batch_size: 32, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() }, ..IaTrainConfig::default() };
    let model = train_ia(16, &ex, &cfg).unwrap();
    assert!(ia_loss(&model, &ex).unwrap() < 1e-3, "loss {}", ia_loss(&model, &ex).unwrap());
    assert_eq!(model, train_ia(16, &ex, &cfg).unwrap());
}

#[test]
fn ia_training_needs_both_classes() {
    let ex: Vec<IaExample> = margin_separable(20).into_iter().filter(|e| e.y > 0.0).collect();
    assert!(matches!(train_ia(16, &ex, &IaTrainConfig::default()), Err(Error::InvalidData(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = IaModel::new(16, &[8, 8, 4, 1], &mut rng).unwrap();
    assert!(fit_ia(&mut m, &ex, &IaTrainConfig::default(), &mut rng).is_err());
}

#[test]
fn hinge_through_the_ia_net_passes_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = IaModel::new(16, &[8, 8, 4, 1], &mut rng).unwrap();
    for e in margin_separable(50) {
        let x = e.feature.to_vec();
        let trace = model.net.forward_trace(&x).unwrap();
        if trace.min_relu_margin(&model.net) < 1e-4 {
            continue;
        }
        let (_, g) = quadratic_hinge(trace.output()[0], e.y);
        let mut grads = model.net.zero_grads();
        model.net.backward(&trace, &[g], &mut grads).unwrap();
        let loss = |m: &IaModel| quadratic_hinge(m.net.forward(&x).unwrap()[0], e.y).0;
        let check = check_gradients(&mut model, &grads.slices(), loss, 1e-5);
        assert!(check.passes(1e-4), "{check:?}");
    }
}

