//! Test-time strategies and the online stream runner.
//!
//! Every strategy sees only input batches. Generalizeformer is stateless;
//! Tent keeps its own copy of the backbone and an optimizer; the prototype
//! strategy keeps per-class support sets. None of them writes to the shared
//! source model.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{Backbone, BnMode, ParamSet, SlotKind, Track, CLASSIFIER_SLOT};
use crate::error::{invalid, Error, Result};
use crate::metatrain::Model;
use crate::objectives::{argmax_rows, entropy_loss, probe, GradSet, UnsupervisedLoss};
use crate::optim::Adam;
use crate::paramgen::Generator;
use crate::synthdata::{DomainBatch, DomainStream};
use crate::tensor::Tensor;

pub const TENT_LR: f64 = 1e-3;
pub const PROTOTYPE_CAPACITY: usize = 20;
/// Minimum per-channel batch variance before a Tent batch is flagged.
pub const DEGENERATE_VAR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Generalizeformer,
    Erm,
    Tent,
    PrototypeAdjust,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [Self::Erm, Self::Generalizeformer, Self::Tent, Self::PrototypeAdjust];

    pub fn name(self) -> &'static str {
        match self {
            Self::Generalizeformer => "generalizeformer",
            Self::Erm => "erm",
            Self::Tent => "tent",
            Self::PrototypeAdjust => "prototype_adjust",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generalizeformer" | "gf" => Ok(Self::Generalizeformer),
            "erm" => Ok(Self::Erm),
            "tent" => Ok(Self::Tent),
            "prototype_adjust" | "prototype" | "t3a" => Ok(Self::PrototypeAdjust),
            other => Err(invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub logits: Tensor,
    /// Set when batch statistics were degenerate (Tent with tiny batches).
    pub degenerate: bool,
}

pub trait Strategy {
    fn kind(&self) -> StrategyKind;
    fn adapt_batch(&mut self, x: &Tensor) -> Result<BatchOutput>;
    /// Logits from the current state without adapting to `x`.
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

/// Result of one generation pass.
#[derive(Clone, Debug)]
pub struct Generalized {
    /// Every backbone slot: generated where the generator covers it, source elsewhere.
    pub params: ParamSet,
    pub logits: Tensor,
    pub features: Tensor,
    pub grads: GradSet,
}

/// Features and gradients at the source parameters, one generator pass,
/// then the forward with the generated parameters injected.
pub fn generalize(backbone: &Backbone, generator: &Generator, loss: UnsupervisedLoss, x: &Tensor) -> Result<Generalized> {
    let slots = generator.spec().generated_slots();
    let pr = probe(backbone, loss, x, None, &slots)?;
    let params = generator.generate(&backbone.extract_all(), &pr.features, &pr.grads)?;
    let logits = backbone.forward(x, Some(&params))?;
    Ok(Generalized { params, logits, features: pr.features, grads: pr.grads })
}

pub struct Erm<'a> {
    backbone: &'a Backbone,
}

impl<'a> Erm<'a> {
    pub fn new(backbone: &'a Backbone) -> Self {
        Self { backbone }
    }
}

impl Strategy for Erm<'_> {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Erm
    }

    fn adapt_batch(&mut self, x: &Tensor) -> Result<BatchOutput> {
        Ok(BatchOutput { logits: self.backbone.forward(x, None)?, degenerate: false })
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.forward(x, None)
    }
}

pub struct GeneralizeFormer<'a> {
    model: &'a Model,
    /// Parameters generated for the most recent batch.
    pub last: Option<ParamSet>,
}

impl<'a> GeneralizeFormer<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, last: None }
    }
}

impl Strategy for GeneralizeFormer<'_> {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Generalizeformer
    }

    fn adapt_batch(&mut self, x: &Tensor) -> Result<BatchOutput> {
        let m = self.model;
        let out = generalize(&m.backbone, &m.generator, m.loss, x)?;
        self.last = Some(out.params);
        Ok(BatchOutput { logits: out.logits, degenerate: false })
    }

    /// The stored checkpoint, untouched by any earlier batch.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.model.backbone.forward(x, None)
    }
}

/// Online entropy minimization with batch statistics, one Adam step per batch.
pub struct Tent {
    model: Backbone,
    opt: Adam,
    /// Also update conv kernels and the classifier.
    pub full: bool,
}

impl Tent {
    pub fn new(source: &Backbone, lr: f64, full: bool) -> Self {
        Self { model: source.clone(), opt: Adam::new(lr), full }
    }

    /// The strategy-local backbone copy.
    pub fn model(&self) -> &Backbone {
        &self.model
    }
}

impl Strategy for Tent {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Tent
    }

    fn adapt_batch(&mut self, x: &Tensor) -> Result<BatchOutput> {
        let mut g = Graph::new();
        let mut overrides = BTreeMap::new();
        if !self.full {
            for s in self.model.list_slots().into_iter().filter(|s| s.kind != SlotKind::Classifier) {
                let v = self.model.extract(&[&s.slot_id])?.get(&s.slot_id).expect("extracted").clone();
                overrides.insert(s.slot_id, g.param(v));
            }
        }
        let track = Track { conv: self.full, slots: self.full };
        let vars = self.model.bind(&mut g, &overrides, track)?;
        let xv = g.constant(x.clone());
        let t = self.model.trace(&mut g, xv, &vars, BnMode::Batch);
        let degenerate = x.dim(0) < 2
            || t.moments.iter().any(|m| m.var.iter().any(|&v| v < DEGENERATE_VAR));
        let h = g.entropy(t.logits);
        if !g.value(h).item().is_finite() {
            return Err(Error::NonFinite("tent entropy".into()));
        }
        let logits = g.value(t.logits).clone();
        let mut grads = g.backward(h);
        if self.full {
            let handles = vars.all();
            let gs: Vec<Tensor> = handles
                .iter()
                .map(|&v| {
                    let shape = g.value(v).shape().to_vec();
                    grads.take_or_zeros(v, &shape)
                })
                .collect();
            self.opt.step(&mut self.model.theta_mut(), &gs)?;
        } else {
            let mut current = ParamSet::new();
            let mut gs = Vec::new();
            for (id, &v) in &overrides {
                current.insert(id.clone(), g.value(v).clone());
                let shape = g.value(v).shape().to_vec();
                gs.push(grads.take_or_zeros(v, &shape));
            }
            // Both maps iterate in slot-id order, matching `gs`.
            let mut refs: Vec<&mut Tensor> = current.values_mut().collect();
            self.opt.step(&mut refs, &gs)?;
            self.model.set_slots(&current)?;
        }
        Ok(BatchOutput { logits, degenerate })
    }

    /// The adapted copy, normalizing with the batch's own statistics as in `adapt_batch`.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.model.forward_mode(x, None, BnMode::Batch)?.1)
    }
}

/// Simplified T3A: entropy-filtered, capacity-bounded support sets per class,
/// each prototype the mean of the source class vector and its supports.
pub struct PrototypeAdjust<'a> {
    backbone: &'a Backbone,
    source: Tensor,
    supports: Vec<VecDeque<Vec<f64>>>,
    entropies: Vec<f64>,
    pub capacity: usize,
}

impl<'a> PrototypeAdjust<'a> {
    pub fn new(backbone: &'a Backbone, capacity: usize) -> Result<Self> {
        let source = backbone.extract(&[CLASSIFIER_SLOT])?.get(CLASSIFIER_SLOT).expect("extracted").clone();
        let k = source.dim(0);
        Ok(Self { backbone, source, supports: vec![VecDeque::new(); k], entropies: Vec::new(), capacity })
    }

    pub fn support_sizes(&self) -> Vec<usize> {
        self.supports.iter().map(VecDeque::len).collect()
    }

    /// Current class vectors `[K, F]`.
    pub fn prototypes(&self) -> Tensor {
        let (k, f) = (self.source.dim(0), self.source.dim(1));
        let mut out = self.source.clone();
        for c in 0..k {
            let sup = &self.supports[c];
            if sup.is_empty() {
                continue;
            }
            let src = self.source.row(c);
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut acc = src.to_vec();
            for s in sup {
                let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if sn > 0.0 { norm / sn } else { 0.0 };
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v * scale;
                }
            }
            let n = (sup.len() + 1) as f64;
            for (o, a) in out.data_mut()[c * f..(c + 1) * f].iter_mut().zip(&acc) {
                *o = a / n;
            }
        }
        out
    }

    fn logits_with(features: &Tensor, classes: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let c = g.constant(classes.clone());
        let l = g.matmul_t(f, c, false, true);
        g.value(l).clone()
    }
}

fn row_entropies(logits: &Tensor) -> Vec<f64> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|r| entropy_loss(&Tensor::new([1, k], r.to_vec())).unwrap_or(f64::INFINITY))
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl Strategy for PrototypeAdjust<'_> {
    fn kind(&self) -> StrategyKind {
        StrategyKind::PrototypeAdjust
    }

    fn adapt_batch(&mut self, x: &Tensor) -> Result<BatchOutput> {
        let features = self.backbone.features(x, None)?;
        let pseudo_logits = Self::logits_with(&features, &self.prototypes());
        let labels = argmax_rows(&pseudo_logits);
        let ent = row_entropies(&pseudo_logits);
        for &e in &ent {
            let pos = self.entropies.partition_point(|&v| v < e);
            self.entropies.insert(pos, e);
        }
        let med = median(&self.entropies);
        for (i, (&y, &e)) in labels.iter().zip(&ent).enumerate() {
            if e < med {
                let sup = &mut self.supports[y];
                sup.push_back(features.row(i).to_vec());
                while sup.len() > self.capacity {
                    sup.pop_front();
                }
            }
        }
        let logits = Self::logits_with(&features, &self.prototypes());
        Ok(BatchOutput { logits, degenerate: false })
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::logits_with(&self.backbone.features(x, None)?, &self.prototypes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyOptions {
    pub tent_lr: f64,
    pub tent_full: bool,
    pub prototype_capacity: usize,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self { tent_lr: TENT_LR, tent_full: false, prototype_capacity: PROTOTYPE_CAPACITY }
    }
}

/// A fresh strategy over `model` (each call starts from clean state).
pub fn make_strategy<'a>(kind: StrategyKind, model: &'a Model, opts: StrategyOptions) -> Result<Box<dyn Strategy + 'a>> {
    Ok(match kind {
        StrategyKind::Erm => Box::new(Erm::new(&model.backbone)),
        StrategyKind::Generalizeformer => Box::new(GeneralizeFormer::new(model)),
        StrategyKind::Tent => Box::new(Tent::new(&model.backbone, opts.tent_lr, opts.tent_full)),
        StrategyKind::PrototypeAdjust => Box::new(PrototypeAdjust::new(&model.backbone, opts.prototype_capacity)?),
    })
}

/// Per-batch record of a stream run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_idx: usize,
    /// The batch's domain when all samples share one.
    pub domain_id: Option<usize>,
    pub n: usize,
    pub n_correct: usize,
    pub mean_entropy: f64,
    pub adapt_ms: f64,
    #[serde(default)]
    pub degenerate: bool,
    /// `(domain_id, n, n_correct)` per domain present in the batch.
    pub per_domain: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: StrategyKind,
    pub batches: Vec<BatchRecord>,
}

impl RunMetrics {
    pub fn n(&self) -> usize {
        self.batches.iter().map(|b| b.n).sum()
    }

    pub fn n_correct(&self) -> usize {
        self.batches.iter().map(|b| b.n_correct).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            0.0
        } else {
            self.n_correct() as f64 / n as f64
        }
    }

    /// `domain -> (n, n_correct)`.
    pub fn per_domain(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut out: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for b in &self.batches {
            for &(d, n, c) in &b.per_domain {
                let e = out.entry(d).or_default();
                e.0 += n;
                e.1 += c;
            }
        }
        out
    }

    pub fn per_domain_accuracy(&self) -> BTreeMap<usize, f64> {
        self.per_domain().into_iter().map(|(d, (n, c))| (d, c as f64 / n.max(1) as f64)).collect()
    }

    pub fn wallclock_ms(&self) -> f64 {
        self.batches.iter().map(|b| b.adapt_ms).sum()
    }

    pub fn any_degenerate(&self) -> bool {
        self.batches.iter().any(|b| b.degenerate)
    }

    /// Median and 95th-percentile (nearest rank) per-batch adapt time.
    pub fn adapt_ms_quantiles(&self) -> (f64, f64) {
        let mut v: Vec<f64> = self.batches.iter().map(|b| b.adapt_ms).collect();
        if v.is_empty() {
            return (0.0, 0.0);
        }
        v.sort_by(f64::total_cmp);
        let p95 = v[((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        (median(&v), p95)
    }
}

fn record(idx: usize, batch: &DomainBatch, out: &BatchOutput, ms: f64) -> Result<BatchRecord> {
    let preds = argmax_rows(&out.logits);
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((p, y), d) in preds.iter().zip(&batch.labels).zip(&batch.domain_ids) {
        let e = per.entry(*d).or_default();
        e.0 += 1;
        e.1 += usize::from(p == y);
    }
    Ok(BatchRecord {
        batch_idx: idx,
        domain_id: batch.single_domain(),
        n: batch.len(),
        n_correct: per.values().map(|v| v.1).sum(),
        mean_entropy: entropy_loss(&out.logits)?,
        adapt_ms: ms,
        degenerate: out.degenerate,
        per_domain: per.into_iter().map(|(d, (n, c))| (d, n, c)).collect(),
    })
}

/// Feeds the stream through the strategy in order. Only inputs reach the
/// strategy; labels and domain ids are used for scoring.
pub fn run_stream(stream: &DomainStream, strategy: &mut dyn Strategy) -> Result<RunMetrics> {
    run_batches(&stream.batches, strategy)
}

pub fn run_batches(batches: &[DomainBatch], strategy: &mut dyn Strategy) -> Result<RunMetrics> {
    let mut out = Vec::with_capacity(batches.len());
    for (i, b) in batches.iter().enumerate() {
        let t0 = Instant::now();
        let o = strategy.adapt_batch(&b.inputs)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        out.push(record(i, b, &o, ms)?);
    }
    Ok(RunMetrics { strategy: strategy.kind(), batches: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::metatrain::TrainConfig;
    use crate::synthdata::{make_rotated_domains, stream, OrderPolicy};

    fn model() -> Model {
        let mut c = TrainConfig::desk(BackboneSpec::default());
        c.generator.n_layers = 2;
        Model::init(&c).unwrap()
    }

    fn data() -> DomainStream {
        let d = make_rotated_domains(3, &[30.0, 60.0], 30, 5, 16).unwrap();
        stream(&d, 8, OrderPolicy::InterleavedRandom, 0).unwrap()
    }

    #[test]
    fn untrained_generator_matches_erm_bitwise() {
        let m = model();
        for b in &data().batches {
            let gf = generalize(&m.backbone, &m.generator, m.loss, &b.inputs).unwrap();
            assert!(gf.logits.bits_eq(&m.backbone.forward(&b.inputs, None).unwrap()));
        }
    }

    #[test]
    fn erm_run_matches_plain_forward() {
        let m = model();
        let s = data();
        let r = run_stream(&s, &mut Erm::new(&m.backbone)).unwrap();
        assert_eq!(r.batches.len(), s.len());
        let mut correct = 0;
        for b in &s.batches {
            let p = argmax_rows(&m.backbone.forward(&b.inputs, None).unwrap());
            correct += p.iter().zip(&b.labels).filter(|(a, b)| a == b).count();
        }
        assert_eq!(r.n_correct(), correct);
        let pd = r.per_domain();
        assert_eq!(pd.values().map(|v| v.0).sum::<usize>(), r.n());
    }

    #[test]
    fn tent_is_local_and_moves() {
        let m = model();
        let before = m.backbone.checksum();
        let mut t = Tent::new(&m.backbone, TENT_LR, false);
        run_stream(&data(), &mut t).unwrap();
        assert_ne!(t.model().checksum(), before);
        assert_eq!(m.backbone.checksum(), before);
        let conv_same = t.model().conv_weights().iter().zip(m.backbone.conv_weights()).all(|(a, b)| a.bits_eq(b));
        assert!(conv_same);
        assert!(t.model().extract(&[CLASSIFIER_SLOT]).unwrap().bits_eq(&m.backbone.extract(&[CLASSIFIER_SLOT]).unwrap()));
    }

    #[test]
    fn tent_zero_lr_is_batch_norm_only() {
        let m = model();
        let mut t = Tent::new(&m.backbone, 0.0, false);
        for b in &data().batches {
            let out = t.adapt_batch(&b.inputs).unwrap();
            let (_, want) = m.backbone.forward_mode(&b.inputs, None, BnMode::Batch).unwrap();
            assert!(out.logits.bits_eq(&want));
        }
    }

    #[test]
    fn tent_single_sample_flagged() {
        let m = model();
        let mut t = Tent::new(&m.backbone, TENT_LR, false);
        let b = &data().batches[0];
        let out = t.adapt_batch(&b.inputs.select(&[0])).unwrap();
        assert!(out.degenerate);
        assert!(out.logits.is_finite());
    }

    #[test]
    fn tent_full_moves_conv() {
        let m = model();
        let mut t = Tent::new(&m.backbone, TENT_LR, true);
        t.adapt_batch(&data().batches[0].inputs).unwrap();
        assert!(!t.model().conv_weights()[0].bits_eq(&m.backbone.conv_weights()[0]));
    }

    #[test]
    fn prototype_fallback_and_capacity() {
        let m = model();
        let s = data();
        let mut p = PrototypeAdjust::new(&m.backbone, 3).unwrap();
        assert!(p.prototypes().bits_eq(m.backbone.extract(&[CLASSIFIER_SLOT]).unwrap().get(CLASSIFIER_SLOT).unwrap()));
        let x = &s.batches[0].inputs;
        let erm = m.backbone.forward(x, None).unwrap();
        assert!(PrototypeAdjust::logits_with(&m.backbone.features(x, None).unwrap(), &p.prototypes()).bits_eq(&erm));
        for b in &s.batches {
            p.adapt_batch(&b.inputs).unwrap();
            assert!(p.support_sizes().iter().all(|&n| n <= 3));
        }
        assert!(p.support_sizes().iter().any(|&n| n > 0));
    }

    #[test]
    fn generalizeformer_is_order_independent() {
        let m = model();
        let s = data();
        let batches: Vec<_> = s.batches.iter().take(5).cloned().collect();
        let fwd = run_batches(&batches, &mut GeneralizeFormer::new(&m)).unwrap();
        let rev: Vec<_> = batches.iter().rev().cloned().collect();
        let bwd = run_batches(&rev, &mut GeneralizeFormer::new(&m)).unwrap();
        for (i, b) in fwd.batches.iter().enumerate() {
            assert_eq!(b.n_correct, bwd.batches[4 - i].n_correct);
        }
    }

    #[test]
    fn quantiles() {
        let mk = |ms: f64| BatchRecord {
            batch_idx: 0,
            domain_id: None,
            n: 1,
            n_correct: 0,
            mean_entropy: 0.0,
            adapt_ms: ms,
            degenerate: false,
            per_domain: vec![],
        };
        let r = RunMetrics { strategy: StrategyKind::Erm, batches: (1..=20).map(|i| mk(i as f64)).collect() };
        assert_eq!(r.adapt_ms_quantiles(), (10.5, 19.0));
    }
}
