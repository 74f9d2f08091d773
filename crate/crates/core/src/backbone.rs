//! The convolutional classifier whose BN affine parameters and classifier
//! matrix can be swapped per call.
//!
//! Architecture: `L` blocks of `conv3x3 -> BN -> ReLU -> avgpool2`, then a
//! global average pool and a bias-free linear classifier, so the classifier
//! slot is exactly the `[K, F]` matrix of class vectors.
//!
//! Injection is call-scoped: [`Backbone::forward`] with a [`ParamSet`] builds
//! the same graph as the plain forward, only reading the injected tensors in
//! place of the stored ones. Stored weights are never touched.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{BatchMoments, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CLASSIFIER_SLOT: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    /// Output channels of each block; one BN layer per block.
    pub channels: Vec<usize>,
    pub n_classes: usize,
    pub image_size: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { in_channels: 1, channels: vec![8, 16, 32], n_classes: 5, image_size: 16 }
    }
}

impl BackboneSpec {
    pub fn n_bn_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated spec has blocks")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(invalid("backbone needs at least one block with nonzero channels"));
        }
        if self.n_classes < 2 {
            return Err(invalid("n_classes must be at least 2"));
        }
        if self.in_channels == 0 {
            return Err(invalid("in_channels must be nonzero"));
        }
        let down = 1usize << self.channels.len();
        if self.image_size < down || !self.image_size.is_multiple_of(down) {
            return Err(invalid(format!(
                "image_size {} must be a positive multiple of {down} for {} pooling blocks",
                self.image_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    BnGamma,
    BnBeta,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSlot {
    pub slot_id: String,
    pub kind: SlotKind,
    pub shape: Vec<usize>,
    /// BN depth in `1..=L`; 0 for the classifier.
    pub depth_index: usize,
}

pub fn gamma_slot(depth: usize) -> String {
    format!("bn{depth}.gamma")
}

pub fn beta_slot(depth: usize) -> String {
    format!("bn{depth}.beta")
}

/// Slot id -> tensor. Used both for extracted source parameters and for
/// generated target parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slot_id: impl Into<String>, value: Tensor) {
        self.entries.insert(slot_id.into(), value);
    }

    pub fn get(&self, slot_id: &str) -> Option<&Tensor> {
        self.entries.get(slot_id)
    }

    pub fn get_mut(&mut self, slot_id: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(slot_id)
    }

    pub fn contains(&self, slot_id: &str) -> bool {
        self.entries.contains_key(slot_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn slot_ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bits_eq(b))
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            v.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// Running statistics of one BN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BnStats {
    fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: BN_MOMENTUM }
    }
}

/// Where BN layers take their normalization statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Stored running statistics (inference and test-time generation).
    Frozen,
    /// Statistics of the current batch, without touching the running ones.
    Batch,
}

/// Graph handles for every backbone parameter of one traced call.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub conv: Vec<Var>,
    pub gamma: Vec<Var>,
    pub beta: Vec<Var>,
    pub classifier: Var,
}

impl BackboneVars {
    /// Handles in [`Backbone::theta_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.conv.clone();
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            v.push(*g);
            v.push(*b);
        }
        v.push(self.classifier);
        v
    }

    pub fn slot(&self, slot: &ParameterSlot) -> Var {
        match slot.kind {
            SlotKind::BnGamma => self.gamma[slot.depth_index - 1],
            SlotKind::BnBeta => self.beta[slot.depth_index - 1],
            SlotKind::Classifier => self.classifier,
        }
    }
}

/// Which stored parameters get gradient-tracked leaves in [`Backbone::bind`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Track {
    pub conv: bool,
    pub slots: bool,
}

pub struct Trace {
    pub features: Var,
    pub logits: Var,
    /// Batch statistics per BN layer (empty in frozen mode).
    pub moments: Vec<BatchMoments>,
    /// Input of each block's ReLU.
    pub pre_relu: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    conv: Vec<Tensor>,
    slots: ParamSet,
    stats: Vec<BnStats>,
    stats_locked: bool,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Vec::new();
        let mut slots = ParamSet::new();
        let mut stats = Vec::new();
        let mut c_in = spec.in_channels;
        for (l, &c) in spec.channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let w = (0..c * c_in * 9).map(|_| normal.sample(&mut rng)).collect();
            conv.push(Tensor::new([c, c_in, 3, 3], w));
            slots.insert(gamma_slot(l + 1), Tensor::full([c], 1.0));
            slots.insert(beta_slot(l + 1), Tensor::zeros([c]));
            stats.push(BnStats::new(c));
            c_in = c;
        }
        let f = spec.feature_dim();
        let bound = 1.0 / (f as f64).sqrt();
        let uniform = Uniform::new(-bound, bound);
        let cls = (0..spec.n_classes * f).map(|_| uniform.sample(&mut rng)).collect();
        slots.insert(CLASSIFIER_SLOT, Tensor::new([spec.n_classes, f], cls));
        Ok(Self { spec, conv, slots, stats, stats_locked: false })
    }

    pub(crate) fn from_parts(
        spec: BackboneSpec,
        conv: Vec<Tensor>,
        slots: ParamSet,
        stats: Vec<BnStats>,
    ) -> Result<Self> {
        spec.validate()?;
        let model = Self { spec, conv, slots, stats, stats_locked: false };
        let mut c_in = model.spec.in_channels;
        if model.conv.len() != model.spec.n_bn_layers() || model.stats.len() != model.spec.n_bn_layers() {
            return Err(invalid("layer count does not match spec"));
        }
        for (l, &c) in model.spec.channels.iter().enumerate() {
            if model.conv[l].shape() != [c, c_in, 3, 3] {
                return Err(Error::ShapeMismatch {
                    name: format!("conv{}", l + 1),
                    expected: vec![c, c_in, 3, 3],
                    got: model.conv[l].shape().to_vec(),
                });
            }
            if model.stats[l].mean.len() != c || model.stats[l].var.len() != c {
                return Err(invalid(format!("bn{} statistics have wrong length", l + 1)));
            }
            c_in = c;
        }
        model.validate_params(&model.slots, true)?;
        Ok(model)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn conv_weights(&self) -> &[Tensor] {
        &self.conv
    }

    pub fn stats(&self) -> &[BnStats] {
        &self.stats
    }

    pub fn list_slots(&self) -> Vec<ParameterSlot> {
        let mut out = Vec::new();
        for (l, &c) in self.spec.channels.iter().enumerate() {
            out.push(ParameterSlot {
                slot_id: gamma_slot(l + 1),
                kind: SlotKind::BnGamma,
                shape: vec![c],
                depth_index: l + 1,
            });
            out.push(ParameterSlot {
                slot_id: beta_slot(l + 1),
                kind: SlotKind::BnBeta,
                shape: vec![c],
                depth_index: l + 1,
            });
        }
        out.push(ParameterSlot {
            slot_id: CLASSIFIER_SLOT.to_string(),
            kind: SlotKind::Classifier,
            shape: vec![self.spec.n_classes, self.spec.feature_dim()],
            depth_index: 0,
        });
        out
    }

    pub fn slot(&self, slot_id: &str) -> Result<ParameterSlot> {
        self.list_slots()
            .into_iter()
            .find(|s| s.slot_id == slot_id)
            .ok_or_else(|| Error::UnknownSlot(slot_id.to_string()))
    }

    /// Copies of the named slots.
    pub fn extract<S: AsRef<str>>(&self, slot_ids: &[S]) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for id in slot_ids {
            let id = id.as_ref();
            let t = self.slots.get(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
            out.insert(id, t.clone());
        }
        Ok(out)
    }

    pub fn extract_all(&self) -> ParamSet {
        self.slots.clone()
    }

    /// Checks slot names, shapes and finiteness; `require_all` also demands
    /// that every declared slot is present.
    pub fn validate_params(&self, params: &ParamSet, require_all: bool) -> Result<()> {
        let slots = self.list_slots();
        for (id, t) in params.iter() {
            let slot = slots
                .iter()
                .find(|s| &s.slot_id == id)
                .ok_or_else(|| Error::UnknownSlot(id.clone()))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: id.clone(),
                    expected: slot.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("slot `{id}`")));
            }
        }
        if require_all {
            if let Some(missing) = slots.iter().find(|s| !params.contains(&s.slot_id)) {
                return Err(Error::UnknownSlot(format!("missing {}", missing.slot_id)));
            }
        }
        Ok(())
    }

    /// Creates graph leaves for every parameter. Slots present in `overrides`
    /// use the given handles; the rest read stored values, tracked per `track`.
    pub fn bind(&self, g: &mut Graph, overrides: &BTreeMap<String, Var>, track: Track) -> Result<BackboneVars> {
        for (id, &v) in overrides {
            let slot = self.slot(id)?;
            if g.value(v).shape() != slot.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: id.clone(),
                    expected: slot.shape,
                    got: g.value(v).shape().to_vec(),
                });
            }
        }
        let leaf = |g: &mut Graph, t: &Tensor, tracked: bool| {
            if tracked {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let conv = self.conv.iter().map(|w| leaf(g, w, track.conv)).collect();
        let mut slot_var = |id: &str| match overrides.get(id) {
            Some(&v) => v,
            None => leaf(g, self.slots.get(id).expect("declared slot"), track.slots),
        };
        let n = self.spec.n_bn_layers();
        let gamma = (1..=n).map(|l| slot_var(&gamma_slot(l))).collect();
        let beta = (1..=n).map(|l| slot_var(&beta_slot(l))).collect();
        let classifier = slot_var(CLASSIFIER_SLOT);
        Ok(BackboneVars { conv, gamma, beta, classifier })
    }

    /// Binds injected tensors as constants on top of the stored values.
    pub fn bind_injected(&self, g: &mut Graph, injected: Option<&ParamSet>, track: Track) -> Result<BackboneVars> {
        let mut overrides = BTreeMap::new();
        if let Some(p) = injected {
            self.validate_params(p, false)?;
            for (id, t) in p.iter() {
                overrides.insert(id.clone(), g.constant(t.clone()));
            }
        }
        self.bind(g, &overrides, track)
    }

    /// Records the forward computation on `g`.
    pub fn trace(&self, g: &mut Graph, x: Var, vars: &BackboneVars, mode: BnMode) -> Trace {
        let mut h = x;
        let mut moments = Vec::new();
        let mut pre_relu = Vec::new();
        for l in 0..self.spec.n_bn_layers() {
            h = g.conv3x3(h, vars.conv[l]);
            h = match mode {
                BnMode::Frozen => g.norm_frozen(h, &self.stats[l].mean, &self.stats[l].var, BN_EPS),
                BnMode::Batch => {
                    let (n, m) = g.norm_batch(h, BN_EPS);
                    moments.push(m);
                    n
                }
            };
            h = g.channel_affine(h, vars.gamma[l], vars.beta[l]);
            pre_relu.push(h);
            h = g.relu(h);
            h = g.avg_pool2(h);
        }
        let features = g.global_avg_pool(h);
        let logits = g.matmul_t(features, vars.classifier, false, true);
        Trace { features, logits, moments, pre_relu }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = &self.spec;
        let want = [s.in_channels, s.image_size, s.image_size];
        if x.rank() != 4 || x.shape()[1..] != want || x.dim(0) == 0 {
            return Err(Error::ShapeMismatch {
                name: "input batch".into(),
                expected: vec![x.shape().first().copied().unwrap_or(0), want[0], want[1], want[2]],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `(features, logits)` with frozen statistics and optional injected slots.
    pub fn forward_full(&self, x: &Tensor, injected: Option<&ParamSet>) -> Result<(Tensor, Tensor)> {
        self.forward_mode(x, injected, BnMode::Frozen)
    }

    pub fn forward_mode(&self, x: &Tensor, injected: Option<&ParamSet>, mode: BnMode) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = self.bind_injected(&mut g, injected, Track::default())?;
        let t = self.trace(&mut g, xv, &vars, mode);
        Ok((g.value(t.features).clone(), g.value(t.logits).clone()))
    }

    /// Logits `[B, K]`.
    pub fn forward(&self, x: &Tensor, injected: Option<&ParamSet>) -> Result<Tensor> {
        Ok(self.forward_full(x, injected)?.1)
    }

    /// Penultimate (post-pooling) features `[B, F]`.
    pub fn features(&self, x: &Tensor, injected: Option<&ParamSet>) -> Result<Tensor> {
        Ok(self.forward_full(x, injected)?.0)
    }

    /// Mutable access to every trainable tensor: conv kernels, then
    /// `(gamma, beta)` per layer, then the classifier.
    pub(crate) fn theta_mut(&mut self) -> Vec<&mut Tensor> {
        let n = self.spec.n_bn_layers();
        let mut order: Vec<String> = Vec::new();
        for l in 1..=n {
            order.push(gamma_slot(l));
            order.push(beta_slot(l));
        }
        order.push(CLASSIFIER_SLOT.to_string());
        let mut out: Vec<&mut Tensor> = self.conv.iter_mut().collect();
        let mut by_id: BTreeMap<&String, &mut Tensor> = self.slots.entries.iter_mut().collect();
        for id in &order {
            out.push(by_id.remove(id).expect("declared slot"));
        }
        out
    }

    /// Overwrites stored slot values (training-time only).
    pub fn set_slots(&mut self, params: &ParamSet) -> Result<()> {
        self.validate_params(params, false)?;
        for (id, t) in params.iter() {
            self.slots.insert(id.clone(), t.clone());
        }
        Ok(())
    }

    /// Marks the running statistics read-only; later updates are refused.
    pub fn lock_stats(&mut self) {
        self.stats_locked = true;
    }

    pub fn stats_locked(&self) -> bool {
        self.stats_locked
    }

    /// Exponential-moving-average update of the running statistics with the
    /// moments of one training batch (unbiased variance, as in common BN).
    pub fn update_running_stats(&mut self, moments: &[BatchMoments]) -> Result<()> {
        if self.stats_locked {
            return Err(Error::StatsLocked);
        }
        if moments.len() != self.stats.len() {
            return Err(invalid("one set of moments per BN layer expected"));
        }
        for (s, m) in self.stats.iter_mut().zip(moments) {
            let correction = if m.count > 1 { m.count as f64 / (m.count - 1) as f64 } else { 1.0 };
            for c in 0..s.mean.len() {
                s.mean[c] = (1.0 - s.momentum) * s.mean[c] + s.momentum * m.mean[c];
                s.var[c] = (1.0 - s.momentum) * s.var[c] + s.momentum * m.var[c] * correction;
            }
        }
        Ok(())
    }

    /// SHA-256 over spec-ordered weights and statistics.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.conv {
            w.hash_into(&mut h);
        }
        for (k, v) in self.slots.iter() {
            h.update(k.as_bytes());
            v.hash_into(&mut h);
        }
        for s in &self.stats {
            for v in s.mean.iter().chain(&s.var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([n, 1, 16, 16], (0..n * 256).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn model() -> Backbone {
        let mut m = Backbone::new(BackboneSpec::default(), 0).unwrap();
        // Non-trivial statistics and affine values so the checks are not vacuous.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in &mut m.stats {
            for v in s.mean.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
            for v in s.var.iter_mut() {
                *v = rng.gen_range(0.5..2.0);
            }
        }
        m
    }

    #[test]
    fn bn_formula_by_hand() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new([2, 1], vec![1.0, 3.0]));
        let n = g.norm_frozen(z, &[2.0], &[1.0], 0.0);
        let gamma = g.constant(Tensor::new([1], vec![1.0]));
        let beta = g.constant(Tensor::new([1], vec![0.0]));
        let y = g.channel_affine(n, gamma, beta);
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let gamma0 = g.constant(Tensor::new([1], vec![0.0]));
        let beta7 = g.constant(Tensor::new([1], vec![7.0]));
        let y = g.channel_affine(n, gamma0, beta7);
        assert_eq!(g.value(y).data(), &[7.0, 7.0]);
    }

    #[test]
    fn bn_identity_affine() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new([3, 1], vec![-0.5, 0.0, 2.25]));
        let n = g.norm_frozen(z, &[0.0], &[1.0], 0.0);
        assert_eq!(g.value(n).data(), &[-0.5, 0.0, 2.25]);
    }

    #[test]
    fn default_spec_has_seven_slots() {
        let m = model();
        let slots = m.list_slots();
        assert_eq!(slots.len(), 7);
        let count = |k| slots.iter().filter(|s| s.kind == k).count();
        assert_eq!((count(SlotKind::BnGamma), count(SlotKind::BnBeta), count(SlotKind::Classifier)), (3, 3, 1));
        assert_eq!(m.slot(CLASSIFIER_SLOT).unwrap().shape, vec![5, 32]);
        assert_eq!(m.slot("bn2.beta").unwrap().shape, vec![16]);
    }

    #[test]
    fn injection_identity() {
        let m = model();
        let x = batch(1, 6);
        let plain = m.forward(&x, None).unwrap();
        let injected = m.forward(&x, Some(&m.extract_all())).unwrap();
        assert!(plain.bits_eq(&injected));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let m = model();
        let mut p = ParamSet::new();
        p.insert(CLASSIFIER_SLOT, Tensor::zeros([5, 32]));
        let logits = m.forward(&batch(2, 4), Some(&p)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubled_gamma_changes_logits_and_leaves_model_alone() {
        let m = model();
        let before = m.checksum();
        let x = batch(0, 4);
        let mut p = m.extract(&["bn1.gamma"]).unwrap();
        for v in p.get_mut("bn1.gamma").unwrap().data_mut() {
            *v *= 2.0;
        }
        let a = m.forward(&x, None).unwrap();
        let b = m.forward(&x, Some(&p)).unwrap();
        assert!(!a.bits_eq(&b));
        assert_eq!(before, m.checksum());
    }

    #[test]
    fn injection_errors() {
        let m = model();
        let x = batch(0, 2);
        let mut p = ParamSet::new();
        p.insert("bn9.gamma", Tensor::zeros([8]));
        assert!(matches!(m.forward(&x, Some(&p)), Err(Error::UnknownSlot(_))));
        let mut p = ParamSet::new();
        p.insert("bn1.gamma", Tensor::zeros([9]));
        assert!(matches!(m.forward(&x, Some(&p)), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(m.extract(&["nope"]), Err(Error::UnknownSlot(_))));
    }

    #[test]
    fn extract_copies_are_isolated() {
        let m = model();
        let a = m.extract_all();
        let mut b = m.extract_all();
        assert!(a.bits_eq(&b));
        b.get_mut(CLASSIFIER_SLOT).unwrap().data_mut()[0] += 1.0;
        assert!(a.bits_eq(&m.extract_all()));
        assert!(!b.bits_eq(&m.extract_all()));
    }

    #[test]
    fn feature_shape_and_rowwise_determinism() {
        let m = model();
        let x = batch(3, 3);
        let dup = Tensor::concat(&[&x, &x]);
        let f = m.features(&dup, None).unwrap();
        assert_eq!(f.shape(), &[6, m.slot(CLASSIFIER_SLOT).unwrap().shape[1]]);
        for i in 0..3 {
            assert_eq!(f.row(i), f.row(i + 3));
        }
    }

    #[test]
    fn batch_mean_feature_matches_per_sample_features() {
        let m = model();
        let x = batch(4, 5);
        let mean = m.features(&x, None).unwrap().mean_rows();
        let singles: Vec<Tensor> = (0..5).map(|i| m.features(&x.select(&[i]), None).unwrap()).collect();
        let refs: Vec<&Tensor> = singles.iter().collect();
        let mean2 = Tensor::concat(&refs).mean_rows();
        assert!(mean.max_abs_diff(&mean2) <= 1e-6);
    }

    #[test]
    fn locked_stats_refuse_updates() {
        let mut m = model();
        m.lock_stats();
        let moments: Vec<BatchMoments> = m
            .spec
            .channels
            .iter()
            .map(|&c| BatchMoments { mean: vec![0.0; c], var: vec![1.0; c], count: 4 })
            .collect();
        assert!(matches!(m.update_running_stats(&moments), Err(Error::StatsLocked)));
    }

    #[test]
    fn spec_validation() {
        let bad = BackboneSpec { image_size: 12, ..BackboneSpec::default() };
        assert!(Backbone::new(bad, 0).is_err());
        let bad = BackboneSpec { n_classes: 1, ..BackboneSpec::default() };
        assert!(Backbone::new(bad, 0).is_err());
    }
}
