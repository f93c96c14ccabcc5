//! The context model: per-pair encoder `E_fix` with late fusion, mean pooling
//! over the fixed set, proposal encoder `E_p`, and a single-layer head that
//! emits a residual on the proposal's logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{relative_geometry, FixedFeature, ProposalFeature, GEOMETRY_DIM, RELATIVE_DIM};
use crate::error::{Error, Result};
use crate::nn::loss::{binary_cross_entropy, sigmoid, softmax, softmax_cross_entropy};
use crate::nn::{Activation, DenseGrads, DenseNet, Parameters, Trace};
use crate::proposal::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Residual over all class logits, trained with softmax cross-entropy.
    Relabel,
    /// Residual over the top logit, trained with binary cross-entropy.
    Add,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Relabel => "relabel",
            HeadKind::Add => "add",
        }
    }
}

/// Layer widths of every branch. Each list gives the hidden/output widths
/// after the branch input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub human: Vec<usize>,
    pub geometry: Vec<usize>,
    pub appearance: Vec<usize>,
    pub fusion: usize,
    pub proposal: Vec<usize>,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            human: vec![64, 64],
            geometry: vec![64, 64],
            appearance: vec![128, 128],
            fusion: 128,
            proposal: vec![128, 128],
        }
    }
}

impl ContextConfig {
    /// Narrow widths for fast single-core training runs.
    pub fn compact() -> Self {
        ContextConfig {
            human: vec![16, 16],
            geometry: vec![32, 32],
            appearance: vec![32, 32],
            fusion: 32,
            proposal: vec![64, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [&self.human, &self.geometry, &self.appearance, &self.proposal];
        if all.iter().any(|w| w.is_empty() || w.contains(&0)) || self.fusion == 0 {
            return Err(Error::Config("context model widths must be nonempty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextModel {
    pub head_kind: HeadKind,
    pub num_classes: usize,
    pub config: ContextConfig,
    pub human: DenseNet,
    pub geometry: DenseNet,
    pub appearance: DenseNet,
    pub fusion: DenseNet,
    pub proposal: DenseNet,
    pub head: DenseNet,
}

fn dims(input: usize, widths: &[usize]) -> Vec<usize> {
    std::iter::once(input).chain(widths.iter().copied()).collect()
}

fn out_dim(head_kind: HeadKind, num_classes: usize) -> usize {
    match head_kind {
        HeadKind::Relabel => num_classes,
        HeadKind::Add => 1,
    }
}

/// Multiplicity of each distinct fixed feature, in canonical order.
#[derive(Debug, Clone)]
struct Canonical {
    items: Vec<(usize, u64)>,
    total: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sorts the set by exact bit pattern, merges duplicates, and reduces the
/// multiplicities by their gcd. Any permutation or uniform duplication of the
/// input yields the same result.
fn canonicalize(x_fix: &[FixedFeature]) -> Canonical {
    let mut keyed: Vec<(Vec<u64>, usize)> = x_fix.iter().enumerate().map(|(i, f)| (f.bit_key(), i)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut items: Vec<(usize, u64)> = Vec::new();
    let mut last: Option<&Vec<u64>> = None;
    for (key, idx) in &keyed {
        if last == Some(key) {
            items.last_mut().unwrap().1 += 1;
        } else {
            items.push((*idx, 1));
            last = Some(key);
        }
    }
    let g = items.iter().fold(0, |g, &(_, n)| gcd(g, n));
    for item in &mut items {
        item.1 /= g.max(1);
    }
    let total = items.iter().map(|&(_, n)| n).sum();
    Canonical { items, total }
}

#[derive(Debug, Clone)]
struct PairTrace {
    weight: f64,
    human: Trace,
    geometry: Trace,
    appearance: Trace,
    fusion: Trace,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ContextTrace {
    pairs: Vec<PairTrace>,
    proposal: Trace,
    head: Trace,
    /// Final logits: `base + δ`.
    pub logits: Vec<f64>,
}

/// Gradients shaped like a [`ContextModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGrads {
    pub human: DenseGrads,
    pub geometry: DenseGrads,
    pub appearance: DenseGrads,
    pub fusion: DenseGrads,
    pub proposal: DenseGrads,
    pub head: DenseGrads,
}

impl ContextGrads {
    fn parts(&self) -> [&DenseGrads; 6] {
        [&self.human, &self.geometry, &self.appearance, &self.fusion, &self.proposal, &self.head]
    }

    fn parts_mut(&mut self) -> [&mut DenseGrads; 6] {
        [
            &mut self.human,
            &mut self.geometry,
            &mut self.appearance,
            &mut self.fusion,
            &mut self.proposal,
            &mut self.head,
        ]
    }

    pub fn zeroed(&mut self) {
        self.parts_mut().into_iter().for_each(DenseGrads::zeroed);
    }

    pub fn scale(&mut self, s: f64) {
        self.parts_mut().into_iter().for_each(|g| g.scale(s));
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.parts().into_iter().flat_map(DenseGrads::slices).collect()
    }
}

/// Supervision for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Present(bool),
}

impl ContextModel {
    pub fn new<R: Rng>(head_kind: HeadKind, num_classes: usize, config: &ContextConfig, rng: &mut R) -> Result<Self> {
        Self::build(head_kind, num_classes, config, |d, act| DenseNet::new(d, act, rng))
            .map(|mut m| {
                // start near the identity residual
                m.head.param_slices_mut().into_iter().for_each(|s| s.iter_mut().for_each(|v| *v *= 0.1));
                m
            })
    }

    /// A model whose residual is identically zero.
    pub fn zeros(head_kind: HeadKind, num_classes: usize, config: &ContextConfig) -> Result<Self> {
        Self::build(head_kind, num_classes, config, DenseNet::zeros)
    }

    fn build(
        head_kind: HeadKind,
        num_classes: usize,
        config: &ContextConfig,
        mut make: impl FnMut(&[usize], Activation) -> DenseNet,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("context model needs at least one class".into()));
        }
        let c = num_classes;
        let relu = Activation::Relu;
        let human = make(&dims(c, &config.human), relu);
        let geometry = make(&dims(RELATIVE_DIM, &config.geometry), relu);
        let appearance = make(&dims(2 * c, &config.appearance), relu);
        let fused_in = human.output_dim() + geometry.output_dim() + appearance.output_dim();
        let fusion = make(&[fused_in, config.fusion], relu);
        let proposal = make(&dims(GEOMETRY_DIM + c, &config.proposal), relu);
        let head = make(
            &[config.fusion + proposal.output_dim(), out_dim(head_kind, c)],
            Activation::Identity,
        );
        Ok(ContextModel {
            head_kind,
            num_classes,
            config: config.clone(),
            human,
            geometry,
            appearance,
            fusion,
            proposal,
            head,
        })
    }

    fn nets(&self) -> [&DenseNet; 6] {
        [&self.human, &self.geometry, &self.appearance, &self.fusion, &self.proposal, &self.head]
    }

    fn nets_mut(&mut self) -> [&mut DenseNet; 6] {
        [
            &mut self.human,
            &mut self.geometry,
            &mut self.appearance,
            &mut self.fusion,
            &mut self.proposal,
            &mut self.head,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for net in self.nets() {
            net.validate()?;
        }
        let c = self.num_classes;
        let fused_in = self.human.output_dim() + self.geometry.output_dim() + self.appearance.output_dim();
        let ok = self.human.input_dim() == c
            && self.geometry.input_dim() == RELATIVE_DIM
            && self.appearance.input_dim() == 2 * c
            && self.fusion.input_dim() == fused_in
            && self.proposal.input_dim() == GEOMETRY_DIM + c
            && self.head.layers.len() == 1
            && self.head.input_dim() == self.fusion.output_dim() + self.proposal.output_dim()
            && self.head.output_dim() == out_dim(self.head_kind, c);
        if !ok {
            return Err(Error::InvalidData("context model branches do not chain".into()));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ContextGrads {
        ContextGrads {
            human: self.human.zero_grads(),
            geometry: self.geometry.zero_grads(),
            appearance: self.appearance.zero_grads(),
            fusion: self.fusion.zero_grads(),
            proposal: self.proposal.zero_grads(),
            head: self.head.zero_grads(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.fusion.output_dim()
    }

    fn check_features(&self, x_p: &ProposalFeature, x_fix: &[FixedFeature]) -> Result<()> {
        let c = self.num_classes;
        if x_p.scores.len() != c {
            return Err(Error::LengthMismatch { expected: c, got: x_p.scores.len() });
        }
        for f in x_fix {
            if f.scores.len() != c {
                return Err(Error::LengthMismatch { expected: c, got: f.scores.len() });
            }
            if f.class.index() >= c {
                return Err(Error::InvalidData(format!("fixed class {} out of range", f.class)));
            }
        }
        Ok(())
    }

    /// `E_fix(x_p, x_fix)` with intermediate traces.
    fn pair(&self, x_p: &ProposalFeature, f: &FixedFeature) -> Result<(Trace, Trace, Trace, Trace)> {
        let human = self.human.forward_trace(&f.one_hot(self.num_classes))?;
        let geometry = self.geometry.forward_trace(&relative_geometry(&f.geometry, &x_p.geometry))?;
        let mut app_in = f.scores.clone();
        app_in.extend_from_slice(&x_p.scores);
        let appearance = self.appearance.forward_trace(&app_in)?;
        let mut fused = human.output().to_vec();
        fused.extend_from_slice(geometry.output());
        fused.extend_from_slice(appearance.output());
        let fusion = self.fusion.forward_trace(&fused)?;
        Ok((human, geometry, appearance, fusion))
    }

    /// Full forward pass. With an empty fixed set the pooled embedding is the
    /// zero vector.
    pub fn forward_trace(&self, x_p: &ProposalFeature, x_fix: &[FixedFeature]) -> Result<ContextTrace> {
        self.check_features(x_p, x_fix)?;
        let canon = canonicalize(x_fix);
        let mut pooled = vec![0.0; self.embedding_dim()];
        let mut pairs = Vec::with_capacity(canon.items.len());
        for &(idx, n) in &canon.items {
            let (human, geometry, appearance, fusion) = self.pair(x_p, &x_fix[idx])?;
            let weight = n as f64 / canon.total as f64;
            for (acc, &e) in pooled.iter_mut().zip(fusion.output()) {
                *acc += weight * e;
            }
            pairs.push(PairTrace { weight, human, geometry, appearance, fusion });
        }
        let proposal = self.proposal.forward_trace(&x_p.to_vec())?;
        let mut head_in = pooled;
        head_in.extend_from_slice(proposal.output());
        let head = self.head.forward_trace(&head_in)?;
        let delta = head.output();
        let logits = match self.head_kind {
            HeadKind::Relabel => x_p.scores.iter().zip(delta).map(|(s, d)| s + d).collect(),
            HeadKind::Add => vec![x_p.scores[argmax(&x_p.scores)] + delta[0]],
        };
        Ok(ContextTrace { pairs, proposal, head, logits })
    }

    pub fn logits(&self, x_p: &ProposalFeature, x_fix: &[FixedFeature]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x_p, x_fix)?.logits)
    }

    /// Class distribution from the relabel head.
    pub fn relabel_probs(&self, x_p: &ProposalFeature, x_fix: &[FixedFeature]) -> Result<Vec<f64>> {
        self.expect(HeadKind::Relabel)?;
        Ok(softmax(&self.logits(x_p, x_fix)?))
    }

    /// Presence probability from the add head.
    pub fn add_prob(&self, x_p: &ProposalFeature, x_fix: &[FixedFeature]) -> Result<f64> {
        self.expect(HeadKind::Add)?;
        Ok(sigmoid(self.logits(x_p, x_fix)?[0]))
    }

    fn expect(&self, kind: HeadKind) -> Result<()> {
        if self.head_kind != kind {
            return Err(Error::InvalidData(format!(
                "expected a {} model, got a {} model",
                kind.name(),
                self.head_kind.name()
            )));
        }
        Ok(())
    }

    /// Accumulates parameter gradients for `upstream = dL/d(logits)`.
    pub fn backward(&self, trace: &ContextTrace, upstream: &[f64], grads: &mut ContextGrads) -> Result<()> {
        let d_head_in = self.head.backward(&trace.head, upstream, &mut grads.head)?;
        let (d_pooled, d_prop) = d_head_in.split_at(self.embedding_dim());
        self.proposal.backward(&trace.proposal, d_prop, &mut grads.proposal)?;
        let hd = self.human.output_dim();
        let gd = self.geometry.output_dim();
        for pair in &trace.pairs {
            let d_e: Vec<f64> = d_pooled.iter().map(|d| d * pair.weight).collect();
            let d_fused = self.fusion.backward(&pair.fusion, &d_e, &mut grads.fusion)?;
            self.human.backward(&pair.human, &d_fused[..hd], &mut grads.human)?;
            self.geometry.backward(&pair.geometry, &d_fused[hd..hd + gd], &mut grads.geometry)?;
            self.appearance.backward(&pair.appearance, &d_fused[hd + gd..], &mut grads.appearance)?;
        }
        Ok(())
    }

    /// Loss of one example; accumulates its gradient when `grads` is given.
    pub fn loss(
        &self,
        x_p: &ProposalFeature,
        x_fix: &[FixedFeature],
        target: Target,
        grads: Option<&mut ContextGrads>,
    ) -> Result<f64> {
        let trace = self.forward_trace(x_p, x_fix)?;
        let (loss, upstream) = match (self.head_kind, target) {
            (HeadKind::Relabel, Target::Class(c)) if c < self.num_classes => softmax_cross_entropy(&trace.logits, c),
            (HeadKind::Add, Target::Present(y)) => {
                let (l, g) = binary_cross_entropy(trace.logits[0], if y { 1.0 } else { 0.0 });
                (l, vec![g])
            }
            _ => return Err(Error::InvalidData("target does not match the head kind".into())),
        };
        if let Some(grads) = grads {
            self.backward(&trace, &upstream, grads)?;
        }
        Ok(loss)
    }

    /// Smallest `|pre-activation|` over every ReLU evaluated for this input.
    pub fn min_relu_margin(&self, x_p: &ProposalFeature, x_fix: &[FixedFeature]) -> Result<f64> {
        let t = self.forward_trace(x_p, x_fix)?;
        let mut m = t.proposal.min_relu_margin(&self.proposal);
        for p in &t.pairs {
            m = m
                .min(p.human.min_relu_margin(&self.human))
                .min(p.geometry.min_relu_margin(&self.geometry))
                .min(p.appearance.min_relu_margin(&self.appearance))
                .min(p.fusion.min_relu_margin(&self.fusion));
        }
        Ok(m)
    }
}

impl Parameters for ContextModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.nets().into_iter().flat_map(DenseNet::param_slices).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets_mut().into_iter().flat_map(DenseNet::param_slices_mut).collect()
    }
}
