//! The parameter generator: a post-norm transformer encoder over tokens built
//! from source slot values, the batch feature summary and slot gradients.
//!
//! Groups are one BN layer (`[gamma, beta, feat, grad_gamma, grad_beta]`) or
//! the classifier (`[c_1..c_K, feat, grad_1..grad_K]`). Each group is an
//! independent attention segment unless [`GeneratorSpec::joint`] is set, in
//! which case all tokens attend to each other. Row-wise layers (projections,
//! layer norms, feed-forward) are shared and run on the stacked tokens.
//!
//! Read-back is residual: `generated = source + out_proj(h)` at each
//! param-token position, with `out_proj` zero-initialized.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::backbone::{beta_slot, gamma_slot, BackboneSpec, ParamSet, CLASSIFIER_SLOT};
use crate::error::{invalid, Error, Result};
use crate::objectives::GradSet;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const EMB_STD: f64 = 0.5;

/// Which token roles carry real content; masked roles get a learned null token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputMask {
    pub params: bool,
    pub features: bool,
    pub grads: bool,
}

impl Default for InputMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl InputMask {
    pub const ALL: Self = Self { params: true, features: true, grads: true };
    pub const FEAT_GRAD: Self = Self { params: false, features: true, grads: true };
    pub const GRAD_PARAM: Self = Self { params: true, features: false, grads: true };
    pub const FEAT_PARAM: Self = Self { params: true, features: true, grads: false };

    pub fn name(self) -> String {
        let mut parts = Vec::new();
        if self.features {
            parts.push("feat");
        }
        if self.grads {
            parts.push("grad");
        }
        if self.params {
            parts.push("param");
        }
        if parts.len() == 3 {
            "all".into()
        } else {
            parts.join("+")
        }
    }

    fn enabled(self, role: TokenRole) -> bool {
        match role {
            TokenRole::Param => self.params,
            TokenRole::Feature => self.features,
            TokenRole::Grad => self.grads,
        }
    }
}

impl FromStr for InputMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::ALL);
        }
        let mut m = Self { params: false, features: false, grads: false };
        for part in s.split('+') {
            match part {
                "feat" => m.features = true,
                "grad" => m.grads = true,
                "param" => m.params = true,
                other => return Err(invalid(format!("unknown input role `{other}`"))),
            }
        }
        Ok(m)
    }
}

/// Which slots are generated; the rest keep their source values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratedLayers {
    #[default]
    Both,
    BnOnly,
    ClassifierOnly,
}

impl GeneratedLayers {
    pub fn name(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::BnOnly => "bn",
            Self::ClassifierOnly => "classifier",
        }
    }

    pub fn bn(self) -> bool {
        self != Self::ClassifierOnly
    }

    pub fn classifier(self) -> bool {
        self != Self::BnOnly
    }
}

impl fmt::Display for GeneratedLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratedLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "bn" => Ok(Self::BnOnly),
            "classifier" => Ok(Self::ClassifierOnly),
            other => Err(invalid(format!("unknown layer selection `{other}` (both|bn|classifier)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// One attention segment over all groups instead of one per group.
    pub joint: bool,
    pub inputs: InputMask,
    pub layers: GeneratedLayers,
    pub bn_channels: Vec<usize>,
    pub n_classes: usize,
    pub feature_dim: usize,
}

impl GeneratorSpec {
    pub fn for_backbone(b: &BackboneSpec) -> Self {
        Self {
            model_dim: 64,
            n_layers: 8,
            n_heads: 4,
            ffn_dim: 128,
            joint: false,
            inputs: InputMask::ALL,
            layers: GeneratedLayers::Both,
            bn_channels: b.channels.clone(),
            n_classes: b.n_classes,
            feature_dim: b.feature_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(invalid(format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads)));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(invalid("n_layers and ffn_dim must be nonzero"));
        }
        let m = self.inputs;
        if !(m.params || m.features || m.grads) {
            return Err(invalid("at least one input role must be enabled"));
        }
        if self.bn_channels.is_empty() || self.n_classes < 2 || self.feature_dim == 0 {
            return Err(invalid("generator spec does not describe a valid backbone"));
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<SlotGroup> {
        let mut g = Vec::new();
        if self.layers.bn() {
            g.extend((1..=self.bn_channels.len()).map(SlotGroup::Bn));
        }
        if self.layers.classifier() {
            g.push(SlotGroup::Classifier);
        }
        g
    }

    /// Slot ids whose values this generator produces.
    pub fn generated_slots(&self) -> Vec<String> {
        self.groups().iter().flat_map(|g| g.slots()).collect()
    }

    /// `(slot_id, vector length)` for each generated slot's projections.
    fn slot_widths(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for g in self.groups() {
            match g {
                SlotGroup::Bn(l) => {
                    let c = self.bn_channels[l - 1];
                    out.push((gamma_slot(l), c));
                    out.push((beta_slot(l), c));
                }
                SlotGroup::Classifier => out.push((CLASSIFIER_SLOT.to_string(), self.feature_dim)),
            }
        }
        out
    }

    fn n_embeddings(&self) -> usize {
        // roles (3) + kinds (3) + one per BN layer + classifier group
        3 + 3 + self.bn_channels.len() + 1
    }

    /// `(name, shape)` of every learnable tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.model_dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (slot, w) in self.slot_widths() {
            if self.inputs.params || self.inputs.grads {
                out.push((format!("in.{slot}.w"), vec![w, d]));
                out.push((format!("in.{slot}.b"), vec![d]));
            }
            out.push((format!("out.{slot}.w"), vec![d, w]));
            out.push((format!("out.{slot}.b"), vec![w]));
        }
        if self.inputs.features {
            out.push(("in.feature.w".into(), vec![self.feature_dim, d]));
            out.push(("in.feature.b".into(), vec![d]));
        }
        out.push(("emb".into(), vec![self.n_embeddings(), d]));
        for role in [TokenRole::Param, TokenRole::Feature, TokenRole::Grad] {
            if !self.inputs.enabled(role) {
                out.push((format!("null.{}", role.name()), vec![1, d]));
            }
        }
        for i in 0..self.n_layers {
            for (n, s) in encoder_layer_layout(d, self.ffn_dim) {
                out.push((format!("enc{i}.{n}"), s));
            }
        }
        out
    }
}

fn encoder_layer_layout(d: usize, f: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("wq", vec![d, d]),
        ("bq", vec![d]),
        ("wk", vec![d, d]),
        ("bk", vec![d]),
        ("wv", vec![d, d]),
        ("bv", vec![d]),
        ("wo", vec![d, d]),
        ("bo", vec![d]),
        ("ln1.g", vec![d]),
        ("ln1.b", vec![d]),
        ("w1", vec![d, f]),
        ("b1", vec![f]),
        ("w2", vec![f, d]),
        ("b2", vec![d]),
        ("ln2.g", vec![d]),
        ("ln2.b", vec![d]),
    ]
}

/// Learnable parameters in one encoder layer.
pub fn encoder_layer_parameters(spec: &GeneratorSpec) -> usize {
    let (d, f) = (spec.model_dim, spec.ffn_dim);
    4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
}

/// Exact learnable-parameter count, in closed form.
pub fn count_parameters(spec: &GeneratorSpec) -> usize {
    let d = spec.model_dim;
    let mut n = 0;
    let uses_slot_input = spec.inputs.params || spec.inputs.grads;
    for (_, w) in spec.slot_widths() {
        if uses_slot_input {
            n += w * d + d;
        }
        n += d * w + w;
    }
    if spec.inputs.features {
        n += spec.feature_dim * d + d;
    }
    n += spec.n_embeddings() * d;
    let masked = [spec.inputs.params, spec.inputs.features, spec.inputs.grads].iter().filter(|e| !**e).count();
    n += masked * d;
    n + spec.n_layers * encoder_layer_parameters(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotGroup {
    /// BN layer at depth `1..=L`.
    Bn(usize),
    Classifier,
}

impl SlotGroup {
    pub fn slots(self) -> Vec<String> {
        match self {
            SlotGroup::Bn(l) => vec![gamma_slot(l), beta_slot(l)],
            SlotGroup::Classifier => vec![CLASSIFIER_SLOT.to_string()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Param,
    Feature,
    Grad,
}

impl TokenRole {
    fn name(self) -> &'static str {
        match self {
            TokenRole::Param => "param",
            TokenRole::Feature => "feature",
            TokenRole::Grad => "grad",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Slot and (for the classifier) class row a token is bound to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBinding {
    pub slot_id: String,
    pub row: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TokenBundle {
    pub group: SlotGroup,
    /// Projected tokens `[T, d]` including the added embeddings.
    pub tokens: Tensor,
    pub roles: Vec<TokenRole>,
    /// `None` for the feature token.
    pub bindings: Vec<Option<TokenBinding>>,
}

impl TokenBundle {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Token positions holding source parameters, in read-back order.
    pub fn param_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == TokenRole::Param).collect()
    }
}

/// Token layout of one group before projection.
fn group_layout(group: SlotGroup, k: usize) -> (Vec<TokenRole>, Vec<Option<TokenBinding>>) {
    let bind = |slot: &str, row| Some(TokenBinding { slot_id: slot.to_string(), row });
    match group {
        SlotGroup::Bn(l) => {
            let (g, b) = (gamma_slot(l), beta_slot(l));
            (
                vec![TokenRole::Param, TokenRole::Param, TokenRole::Feature, TokenRole::Grad, TokenRole::Grad],
                vec![bind(&g, None), bind(&b, None), None, bind(&g, None), bind(&b, None)],
            )
        }
        SlotGroup::Classifier => {
            let mut roles = vec![TokenRole::Param; k];
            let mut binds: Vec<_> = (0..k).map(|r| bind(CLASSIFIER_SLOT, Some(r))).collect();
            roles.push(TokenRole::Feature);
            binds.push(None);
            roles.extend(std::iter::repeat_n(TokenRole::Grad, k));
            binds.extend((0..k).map(|r| bind(CLASSIFIER_SLOT, Some(r))));
            (roles, binds)
        }
    }
}

/// The generator's learnable tensors.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    weights: BTreeMap<String, Tensor>,
}

/// Graph handles of a generation trace.
pub struct GenTrace {
    /// Generated value per generated slot.
    pub slots: BTreeMap<String, Var>,
    /// Weight handles in [`Generator::weights_mut`] order.
    pub weights: Vec<Var>,
    /// Projected tokens per group, before the encoder.
    pub tokens: Vec<(SlotGroup, Var)>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Normal::new(0.0, EMB_STD).expect("valid std");
        let mut weights = BTreeMap::new();
        for (name, shape) in spec.layout() {
            let numel: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or("");
            let t = if name.starts_with("out.") {
                Tensor::zeros(shape)
            } else if name == "emb" || name.starts_with("null.") {
                Tensor::new(shape, (0..numel).map(|_| emb.sample(&mut rng)).collect())
            } else if leaf == "g" {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let u = Uniform::new(-bound, bound);
                Tensor::new(shape, (0..numel).map(|_| u.sample(&mut rng)).collect())
            } else {
                Tensor::zeros(shape)
            };
            weights.insert(name, t);
        }
        Ok(Self { spec, weights })
    }

    pub(crate) fn from_weights(spec: GeneratorSpec, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != weights.len() {
            return Err(invalid("generator weight table does not match its spec"));
        }
        for (name, shape) in layout {
            let t = weights.get(&name).ok_or_else(|| invalid(format!("missing generator weight `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { name, expected: shape, got: t.shape().to_vec() });
            }
        }
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.values_mut().collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.weights {
            h.update(k.as_bytes());
            v.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    fn check_inputs(&self, params: &ParamSet, z: &Tensor, grads: &GradSet) -> Result<()> {
        if z.rank() != 2 || z.dim(0) == 0 || z.dim(1) != self.spec.feature_dim {
            return Err(Error::ShapeMismatch {
                name: "features".into(),
                expected: vec![z.shape().first().copied().unwrap_or(1), self.spec.feature_dim],
                got: z.shape().to_vec(),
            });
        }
        for (slot, w) in self.spec.slot_widths() {
            let p = params.get(&slot).ok_or_else(|| Error::UnknownSlot(format!("missing source value for {slot}")))?;
            let rows = if slot == CLASSIFIER_SLOT { self.spec.n_classes } else { 1 };
            if p.numel() != rows * w {
                return Err(Error::ShapeMismatch { name: slot, expected: vec![rows * w], got: p.shape().to_vec() });
            }
            if self.spec.inputs.grads {
                let g = grads.get(&slot).ok_or_else(|| Error::UnknownSlot(format!("missing gradient for {slot}")))?;
                if g.numel() != p.numel() {
                    return Err(Error::ShapeMismatch {
                        name: format!("grad {slot}"),
                        expected: p.shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Records token construction, the encoder and read-back on `g`.
    /// With `track`, generator weights become gradient-tracked leaves.
    pub fn trace(&self, g: &mut Graph, params: &ParamSet, z: &Tensor, grads: &GradSet, track: bool) -> Result<GenTrace> {
        self.check_inputs(params, z, grads)?;
        let spec = &self.spec;
        let mut w: BTreeMap<&str, Var> = BTreeMap::new();
        let mut weight_vars = Vec::with_capacity(self.weights.len());
        for (name, t) in &self.weights {
            let v = if track { g.param(t.clone()) } else { g.constant(t.clone()) };
            w.insert(name.as_str(), v);
            weight_vars.push(v);
        }
        let feat = if spec.inputs.features {
            let mean = g.constant(z.mean_rows());
            Some(g.linear(mean, w["in.feature.w"], w["in.feature.b"]))
        } else {
            None
        };
        let grads = grads.rms_normalized();
        let k = spec.n_classes;

        let mut group_tokens = Vec::new();
        let mut segments = Vec::new();
        let mut offset = 0;
        for group in spec.groups() {
            let (roles, binds) = group_layout(group, k);
            let mut rows: Vec<Var> = Vec::new();
            // Consecutive tokens of the same role and slot are projected together.
            let mut i = 0;
            while i < roles.len() {
                let role = roles[i];
                let mut j = i + 1;
                while j < roles.len()
                    && roles[j] == role
                    && binds[j].as_ref().map(|b| &b.slot_id) == binds[i].as_ref().map(|b| &b.slot_id)
                {
                    j += 1;
                }
                let n = j - i;
                let v = if !spec.inputs.enabled(role) {
                    let ones = g.constant(Tensor::full([n, 1], 1.0));
                    g.matmul(ones, w[format!("null.{}", role.name()).as_str()])
                } else if role == TokenRole::Feature {
                    feat.expect("feature projection exists when enabled")
                } else {
                    let slot = &binds[i].as_ref().expect("bound token").slot_id;
                    let src = match role {
                        TokenRole::Param => params.get(slot).expect("checked").clone(),
                        _ => grads.get(slot).expect("checked").clone(),
                    };
                    let width = src.numel() / n;
                    let x = g.constant(src.reshape([n, width]));
                    g.linear(x, w[format!("in.{slot}.w").as_str()], w[format!("in.{slot}.b").as_str()])
                };
                rows.push(v);
                i = j;
            }
            let content = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
            let onehot = g.constant(self.embedding_selector(group, &roles));
            let emb = g.matmul(onehot, w["emb"]);
            let tokens = g.add(content, emb);
            group_tokens.push((group, tokens));
            segments.push((offset, roles.len()));
            offset += roles.len();
        }
        let all: Vec<Var> = group_tokens.iter().map(|(_, v)| *v).collect();
        let mut h = if all.len() == 1 { all[0] } else { g.concat_rows(&all) };
        if spec.joint {
            segments = vec![(0, offset)];
        }
        for l in 0..spec.n_layers {
            h = self.encoder_layer(g, &w, l, h, &segments);
        }

        let mut slots = BTreeMap::new();
        let mut start = 0;
        for (group, tokens) in &group_tokens {
            let t = g.value(*tokens).dim(0);
            match *group {
                SlotGroup::Bn(l) => {
                    for (i, slot) in [gamma_slot(l), beta_slot(l)].into_iter().enumerate() {
                        let row = g.slice_rows(h, start + i, 1);
                        slots.insert(slot.clone(), self.read_back(g, &w, &slot, row, params)?);
                    }
                }
                SlotGroup::Classifier => {
                    let rows = g.slice_rows(h, start, k);
                    slots.insert(CLASSIFIER_SLOT.into(), self.read_back(g, &w, CLASSIFIER_SLOT, rows, params)?);
                }
            }
            start += t;
        }
        Ok(GenTrace { slots, weights: weight_vars, tokens: group_tokens })
    }

    fn read_back(&self, g: &mut Graph, w: &BTreeMap<&str, Var>, slot: &str, rows: Var, params: &ParamSet) -> Result<Var> {
        let delta = g.linear(rows, w[format!("out.{slot}.w").as_str()], w[format!("out.{slot}.b").as_str()]);
        let src = params.get(slot).expect("checked");
        let delta = g.reshape(delta, src.shape());
        let base = g.constant(src.clone());
        Ok(g.add(base, delta))
    }

    /// Multi-hot `[T, n_embeddings]` selecting role, kind and group rows of `emb`.
    fn embedding_selector(&self, group: SlotGroup, roles: &[TokenRole]) -> Tensor {
        let e = self.spec.n_embeddings();
        let l = self.spec.bn_channels.len();
        let group_row = 6 + match group {
            SlotGroup::Bn(d) => d - 1,
            SlotGroup::Classifier => l,
        };
        let mut m = Tensor::zeros([roles.len(), e]);
        let data = m.data_mut();
        for (i, &role) in roles.iter().enumerate() {
            data[i * e + role.index()] = 1.0;
            data[i * e + group_row] = 1.0;
            let kind = match (group, role) {
                (_, TokenRole::Feature) => None,
                (SlotGroup::Classifier, _) => Some(2),
                (SlotGroup::Bn(_), _) => {
                    // gamma tokens come first within each role
                    let first_of_role = roles.iter().position(|&r| r == role).expect("present");
                    Some(if i == first_of_role { 0 } else { 1 })
                }
            };
            if let Some(kd) = kind {
                data[i * e + 3 + kd] = 1.0;
            }
        }
        m
    }

    fn encoder_layer(&self, g: &mut Graph, w: &BTreeMap<&str, Var>, l: usize, x: Var, segments: &[(usize, usize)]) -> Var {
        let p = |n: &str| w[format!("enc{l}.{n}").as_str()];
        let q = g.linear(x, p("wq"), p("bq"));
        let k = g.linear(x, p("wk"), p("bk"));
        let v = g.linear(x, p("wv"), p("bv"));
        let heads = self.spec.n_heads;
        let att = if segments.len() == 1 {
            g.attention(q, k, v, heads)
        } else {
            let parts: Vec<Var> = segments
                .iter()
                .map(|&(s, n)| {
                    let (qs, ks, vs) = (g.slice_rows(q, s, n), g.slice_rows(k, s, n), g.slice_rows(v, s, n));
                    g.attention(qs, ks, vs, heads)
                })
                .collect();
            g.concat_rows(&parts)
        };
        let att = g.linear(att, p("wo"), p("bo"));
        let r = g.add(x, att);
        let h = g.layer_norm(r, p("ln1.g"), p("ln1.b"), LN_EPS);
        let f = g.linear(h, p("w1"), p("b1"));
        let f = g.relu(f);
        let f = g.linear(f, p("w2"), p("b2"));
        let r = g.add(h, f);
        g.layer_norm(r, p("ln2.g"), p("ln2.b"), LN_EPS)
    }

    /// One feedforward generation pass. The result covers every slot of
    /// `params`: generated slots are replaced, the rest are copied through.
    pub fn generate(&self, params: &ParamSet, z: &Tensor, grads: &GradSet) -> Result<ParamSet> {
        let mut g = Graph::new();
        let t = self.trace(&mut g, params, z, grads, false)?;
        let mut out = params.clone();
        for (slot, v) in t.slots {
            let value = g.value(v).clone();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("generated `{slot}`")));
            }
            out.insert(slot, value);
        }
        Ok(out)
    }

    /// Projected token bundles for every generated group.
    pub fn tokenize(&self, params: &ParamSet, z: &Tensor, grads: &GradSet) -> Result<Vec<TokenBundle>> {
        let mut g = Graph::new();
        let t = self.trace(&mut g, params, z, grads, false)?;
        Ok(t.tokens
            .into_iter()
            .map(|(group, v)| {
                let (roles, bindings) = group_layout(group, self.spec.n_classes);
                TokenBundle { group, tokens: g.value(v).clone(), roles, bindings }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneSpec};
    use crate::objectives::{layer_gradients, UnsupervisedLoss};
    use rand::{Rng, SeedableRng};

    fn setup() -> (Backbone, Tensor, ParamSet, GradSet) {
        let m = Backbone::new(BackboneSpec::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new([4, 1, 16, 16], (0..4 * 256).map(|_| rng.gen_range(0.0..1.0)).collect());
        // Trained-looking source values; a fresh beta of exactly zero would
        // give its input projection a zero gradient.
        let mut params = m.extract_all();
        for id in m.list_slots().into_iter().map(|s| s.slot_id) {
            for v in params.get_mut(&id).unwrap().data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let slots: Vec<String> = m.list_slots().into_iter().map(|s| s.slot_id).collect();
        let grads = layer_gradients(&m, UnsupervisedLoss::Entropy, &x, Some(&params), &slots).unwrap();
        let z = m.features(&x, Some(&params)).unwrap();
        (m, z, params, grads)
    }

    fn perturbed(spec: GeneratorSpec, seed: u64) -> Generator {
        let mut gen = Generator::new(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (name, t) in gen.weights.iter_mut() {
            if name.starts_with("out.") {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        gen
    }

    #[test]
    fn bundle_sizes() {
        let (m, z, p, gs) = setup();
        let gen = Generator::new(GeneratorSpec::for_backbone(m.spec()), 0).unwrap();
        let bundles = gen.tokenize(&p, &z, &gs).unwrap();
        assert_eq!(bundles.len(), 4);
        assert_eq!(bundles[1].group, SlotGroup::Bn(2));
        assert_eq!(bundles[1].tokens.shape(), &[5, 64]);
        assert_eq!(bundles[3].tokens.shape(), &[11, 64]);
        assert_eq!(bundles[3].param_positions(), (0..5).collect::<Vec<_>>());
        for b in &bundles {
            let params = b.roles.iter().filter(|&&r| r == TokenRole::Param).count();
            let grads = b.roles.iter().filter(|&&r| r == TokenRole::Grad).count();
            assert_eq!(params, grads);
            assert!(b.roles.contains(&TokenRole::Feature));
        }
    }

    #[test]
    fn singleton_batch_feature_token() {
        let (m, _, p, gs) = setup();
        let gen = Generator::new(GeneratorSpec::for_backbone(m.spec()), 3).unwrap();
        let z = Tensor::new([1, 32], (0..32).map(|i| i as f64 * 0.1).collect());
        let b = &gen.tokenize(&p, &z, &gs).unwrap()[0];
        // feature token = proj(z) + feature-role and group embeddings
        let w = &gen.weights["in.feature.w"];
        let emb = &gen.weights["emb"];
        for c in 0..64 {
            let mut want = 0.0;
            for f in 0..32 {
                want += z.data()[f] * w.data()[f * 64 + c];
            }
            want += emb.data()[TokenRole::Feature.index() * 64 + c] + emb.data()[6 * 64 + c];
            assert!((b.tokens.data()[2 * 64 + c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_init_reproduces_source() {
        let (m, z, p, gs) = setup();
        let gen = Generator::new(GeneratorSpec::for_backbone(m.spec()), 1).unwrap();
        let out = gen.generate(&p, &z, &gs).unwrap();
        assert!(out.bits_eq(&p));
    }

    #[test]
    fn generate_is_deterministic_pure_and_shape_preserving() {
        let (m, z, p, gs) = setup();
        let gen = perturbed(GeneratorSpec::for_backbone(m.spec()), 2);
        let before = (gen.checksum(), m.checksum(), p.checksum());
        let a = gen.generate(&p, &z, &gs).unwrap();
        let b = gen.generate(&p, &z, &gs).unwrap();
        assert!(a.bits_eq(&b));
        assert!(!a.bits_eq(&p));
        m.validate_params(&a, true).unwrap();
        assert_eq!(before, (gen.checksum(), m.checksum(), p.checksum()));
    }

    #[test]
    fn class_permutation_equivariance() {
        let (m, z, p, gs) = setup();
        for joint in [false, true] {
            let spec = GeneratorSpec { joint, ..GeneratorSpec::for_backbone(m.spec()) };
            let gen = perturbed(spec, 4);
            let perm = [3usize, 0, 4, 1, 2];
            let mut pp = p.clone();
            pp.insert(CLASSIFIER_SLOT, p.get(CLASSIFIER_SLOT).unwrap().select(&perm));
            let mut gp = gs.clone();
            gp.entries.insert(CLASSIFIER_SLOT.into(), gs.get(CLASSIFIER_SLOT).unwrap().select(&perm));
            let a = gen.generate(&p, &z, &gs).unwrap();
            let b = gen.generate(&pp, &z, &gp).unwrap();
            let a_perm = a.get(CLASSIFIER_SLOT).unwrap().select(&perm);
            assert!(a_perm.max_abs_diff(b.get(CLASSIFIER_SLOT).unwrap()) < 1e-12, "joint={joint}");
            if !joint {
                // other groups never see the classifier tokens
                assert!(a.get("bn2.gamma").unwrap().bits_eq(b.get("bn2.gamma").unwrap()));
            }
        }
    }

    #[test]
    fn count_matches_enumeration() {
        let b = BackboneSpec::default();
        for layers in [2, 4, 8] {
            for inputs in [InputMask::ALL, InputMask::FEAT_GRAD, InputMask::GRAD_PARAM, InputMask::FEAT_PARAM] {
                for sel in [GeneratedLayers::Both, GeneratedLayers::BnOnly, GeneratedLayers::ClassifierOnly] {
                    let spec = GeneratorSpec { n_layers: layers, inputs, layers: sel, ..GeneratorSpec::for_backbone(&b) };
                    let gen = Generator::new(spec.clone(), 0).unwrap();
                    assert_eq!(count_parameters(&spec), gen.n_parameters());
                }
            }
        }
        let s8 = GeneratorSpec::for_backbone(&b);
        let s4 = GeneratorSpec { n_layers: 4, ..s8.clone() };
        let s2 = GeneratorSpec { n_layers: 2, ..s8.clone() };
        assert_eq!(8 * encoder_layer_parameters(&s8) / 2, 4 * encoder_layer_parameters(&s4));
        assert!(count_parameters(&s2) < count_parameters(&s8));
    }

    #[test]
    fn gradients_reach_every_weight() {
        let (m, z, p, gs) = setup();
        for inputs in [InputMask::ALL, InputMask::FEAT_GRAD, InputMask::GRAD_PARAM, InputMask::FEAT_PARAM] {
            let spec = GeneratorSpec { n_layers: 2, inputs, ..GeneratorSpec::for_backbone(m.spec()) };
            let gen = perturbed(spec, 5);
            let mut g = Graph::new();
            let t = gen.trace(&mut g, &p, &z, &gs, true).unwrap();
            let mut terms = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            for v in t.slots.values() {
                let shape = g.value(*v).shape().to_vec();
                let n: usize = shape.iter().product();
                let r = g.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()));
                let prod = g.mul(*v, r);
                let flat = g.reshape(prod, &[1, n]);
                let ones = g.constant(Tensor::full([n, 1], 1.0));
                terms.push(g.matmul(flat, ones));
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = g.add(loss, t);
            }
            let loss = g.reshape(loss, &[]);
            let grads = g.backward(loss);
            for ((name, _), v) in gen.weights.iter().zip(&t.weights) {
                let n = grads.get(*v).map(|t| t.l2_norm()).unwrap_or(0.0);
                assert!(n > 0.0, "{} dead weight {name}", inputs.name());
            }
        }
    }

    #[test]
    fn mask_names_round_trip() {
        for m in [InputMask::ALL, InputMask::FEAT_GRAD, InputMask::GRAD_PARAM, InputMask::FEAT_PARAM] {
            assert_eq!(m.name().parse::<InputMask>().unwrap(), m);
        }
        assert_eq!("both".parse::<GeneratedLayers>().unwrap(), GeneratedLayers::Both);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (m, z, p, mut gs) = setup();
        gs.entries.remove("bn1.beta");
        let gen = Generator::new(GeneratorSpec::for_backbone(m.spec()), 0).unwrap();
        assert!(matches!(gen.generate(&p, &z, &gs), Err(Error::UnknownSlot(_))));
    }
}
