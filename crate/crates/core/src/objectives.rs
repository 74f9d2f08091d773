//! Unsupervised test-time losses and the per-slot gradients fed to the
//! generator as tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneVars, BnMode, ParamSet, Track};
use crate::error::{invalid, Error, Result};
use crate::synthdata::{flip_batch, rotate_batch};
use crate::tensor::Tensor;

/// Added to the RMS before dividing, so all-zero gradients stay zero.
pub const RMS_EPS: f64 = 1e-8;

/// Fixed MEMO-style augmentation set: rotations by these angles, then the two flips.
pub const MEMO_ROTATIONS: [f64; 2] = [10.0, -10.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupervisedLoss {
    #[default]
    Entropy,
    PseudoLabel,
    /// Entropy of the mean prediction over the fixed augmentation set.
    AugmentationConsistency,
}

impl UnsupervisedLoss {
    pub fn cli_name(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::PseudoLabel => "pseudo",
            Self::AugmentationConsistency => "memo",
        }
    }
}

impl fmt::Display for UnsupervisedLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for UnsupervisedLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "pseudo" | "pseudo_label" => Ok(Self::PseudoLabel),
            "memo" | "augmentation_consistency" => Ok(Self::AugmentationConsistency),
            other => Err(invalid(format!("unknown loss `{other}` (entropy|pseudo|memo)"))),
        }
    }
}

fn check_logits(logits: &Tensor) -> Result<()> {
    if logits.rank() != 2 || logits.dim(0) == 0 || logits.dim(1) == 0 {
        return Err(invalid(format!("logits must be a nonempty [B, K] matrix, got {:?}", logits.shape())));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Mean over the batch of the softmax entropy, natural log.
pub fn entropy_loss(logits: &Tensor) -> Result<f64> {
    check_logits(logits)?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let h = g.entropy(l);
    Ok(g.value(h).item())
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Cross-entropy against the model's own hard predictions.
pub fn pseudo_label_loss(logits: &Tensor) -> Result<f64> {
    check_logits(logits)?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, &argmax_rows(logits));
    Ok(g.value(ce).item())
}

/// The augmented copies of a batch used by the MEMO-style loss.
pub fn memo_augmentations(x: &Tensor) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = MEMO_ROTATIONS.iter().map(|&a| rotate_batch(x, a)).collect();
    out.push(flip_batch(x, true));
    out.push(flip_batch(x, false));
    out
}

/// Records the chosen unsupervised loss on `g` for a bound backbone.
/// Returns `(loss, features, logits)` of the un-augmented batch.
pub fn trace_loss(
    g: &mut Graph,
    model: &Backbone,
    vars: &BackboneVars,
    x: &Tensor,
    loss: UnsupervisedLoss,
    mode: BnMode,
) -> (Var, Var, Var) {
    let xv = g.constant(x.clone());
    let t = model.trace(g, xv, vars, mode);
    let value = match loss {
        UnsupervisedLoss::Entropy => g.entropy(t.logits),
        UnsupervisedLoss::PseudoLabel => {
            let labels = argmax_rows(g.value(t.logits));
            g.cross_entropy(t.logits, &labels)
        }
        UnsupervisedLoss::AugmentationConsistency => {
            let augs = memo_augmentations(x);
            let mut mean: Option<Var> = None;
            for a in &augs {
                let av = g.constant(a.clone());
                let logits = model.trace(g, av, vars, mode).logits;
                let p = g.softmax(logits);
                mean = Some(match mean {
                    None => p,
                    Some(m) => g.add(m, p),
                });
            }
            let m = g.scale(mean.expect("nonempty augmentation set"), 1.0 / augs.len() as f64);
            g.prob_entropy(m)
        }
    };
    (value, t.features, t.logits)
}

/// Detached gradients of an unsupervised loss, one entry per requested slot.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub entries: BTreeMap<String, Tensor>,
    pub loss: UnsupervisedLoss,
}

impl GradSet {
    pub fn get(&self, slot_id: &str) -> Option<&Tensor> {
        self.entries.get(slot_id)
    }

    /// Each entry divided by its own RMS (plus [`RMS_EPS`]).
    pub fn rms_normalized(&self) -> GradSet {
        let entries = self.entries.iter().map(|(k, t)| (k.clone(), rms_normalize(t))).collect();
        GradSet { entries, loss: self.loss }
    }
}

pub fn rms_normalize(t: &Tensor) -> Tensor {
    let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel().max(1) as f64).sqrt();
    t.map(|v| v / (rms + RMS_EPS))
}

/// Everything the generator needs from one pass over a target batch.
#[derive(Clone, Debug)]
pub struct Probe {
    /// Penultimate features `[B, F]` under the evaluated parameters.
    pub features: Tensor,
    pub logits: Tensor,
    pub loss_value: f64,
    pub grads: GradSet,
}

/// Runs the frozen-statistics forward at `params` (stored values where not
/// given) and differentiates the loss with respect to `slots` only.
pub fn probe<S: AsRef<str>>(
    model: &Backbone,
    loss: UnsupervisedLoss,
    x: &Tensor,
    params: Option<&ParamSet>,
    slots: &[S],
) -> Result<Probe> {
    let mut g = Graph::new();
    let mut overrides = BTreeMap::new();
    let mut tracked = Vec::new();
    if let Some(p) = params {
        model.validate_params(p, false)?;
    }
    for id in slots {
        let id = id.as_ref();
        let slot = model.slot(id)?;
        let value = match params.and_then(|p| p.get(id)) {
            Some(t) => t.clone(),
            None => model.extract(&[id])?.get(id).expect("extracted").clone(),
        };
        let v = g.param(value);
        overrides.insert(id.to_string(), v);
        tracked.push((slot, v));
    }
    if let Some(p) = params {
        for (id, t) in p.iter() {
            if !overrides.contains_key(id) {
                overrides.insert(id.clone(), g.constant(t.clone()));
            }
        }
    }
    let vars = model.bind(&mut g, &overrides, Track::default())?;
    let (l, f, logits) = trace_loss(&mut g, model, &vars, x, loss, BnMode::Frozen);
    let loss_value = g.value(l).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("{loss} loss")));
    }
    let mut grads = g.backward(l);
    let mut entries = BTreeMap::new();
    for (slot, v) in tracked {
        let t = grads.take_or_zeros(v, &slot.shape);
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", slot.slot_id)));
        }
        entries.insert(slot.slot_id, t);
    }
    Ok(Probe {
        features: g.value(f).clone(),
        logits: g.value(logits).clone(),
        loss_value,
        grads: GradSet { entries, loss },
    })
}

/// Mean-reduced gradient of `loss` with respect to each slot, detached.
pub fn layer_gradients<S: AsRef<str>>(
    model: &Backbone,
    loss: UnsupervisedLoss,
    x: &Tensor,
    params: Option<&ParamSet>,
    slots: &[S],
) -> Result<GradSet> {
    Ok(probe(model, loss, x, params, slots)?.grads)
}

/// Scalar value of `loss` at `params`, used by the finite-difference checks.
pub fn loss_value(model: &Backbone, loss: UnsupervisedLoss, x: &Tensor, params: Option<&ParamSet>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind_injected(&mut g, params, Track::default())?;
    let (l, _, _) = trace_loss(&mut g, model, &vars, x, loss, BnMode::Frozen);
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, CLASSIFIER_SLOT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([n, 1, 16, 16], (0..n * 256).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn entropy_closed_forms() {
        let u = Tensor::zeros([3, 7]);
        assert!((entropy_loss(&u).unwrap() - 7f64.ln()).abs() < 1e-12);
        let mut hot = Tensor::zeros([1, 4]);
        hot.data_mut()[2] = 1e6;
        assert!(entropy_loss(&hot).unwrap().abs() < 1e-6);
        let l = Tensor::new([2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]);
        let shifted = l.map(|v| v + 42.0);
        assert!((entropy_loss(&l).unwrap() - entropy_loss(&shifted).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_closed_forms() {
        assert_eq!(argmax_rows(&Tensor::zeros([1, 2])), vec![0]);
        assert!((pseudo_label_loss(&Tensor::zeros([1, 2])).unwrap() - 2f64.ln()).abs() < 1e-12);
        let mut hot = Tensor::zeros([1, 3]);
        hot.data_mut()[1] = 1e6;
        assert!(pseudo_label_loss(&hot).unwrap().abs() < 1e-6);
        let l = Tensor::new([1, 3], vec![0.2, 1.5, -0.4]);
        let p = Tensor::new([1, 3], vec![-0.4, 0.2, 1.5]);
        assert!((pseudo_label_loss(&l).unwrap() - pseudo_label_loss(&p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let bad = Tensor::new([1, 2], vec![f64::NAN, 0.0]);
        assert!(entropy_loss(&bad).is_err());
        assert!(pseudo_label_loss(&bad).is_err());
    }

    #[test]
    fn uniform_logits_give_zero_classifier_gradient() {
        let m = Backbone::new(BackboneSpec::default(), 0).unwrap();
        let mut p = ParamSet::new();
        p.insert(CLASSIFIER_SLOT, Tensor::zeros([5, 32]));
        let g = layer_gradients(&m, UnsupervisedLoss::Entropy, &batch(0, 4), Some(&p), &[CLASSIFIER_SLOT]).unwrap();
        assert!(g.get(CLASSIFIER_SLOT).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let m = Backbone::new(BackboneSpec::default(), 1).unwrap();
        let x = batch(1, 3);
        let xx = Tensor::concat(&[&x, &x]);
        let slots: Vec<String> = m.list_slots().into_iter().map(|s| s.slot_id).collect();
        for loss in [UnsupervisedLoss::Entropy, UnsupervisedLoss::PseudoLabel, UnsupervisedLoss::AugmentationConsistency] {
            let a = layer_gradients(&m, loss, &x, None, &slots).unwrap();
            let b = layer_gradients(&m, loss, &xx, None, &slots).unwrap();
            for (k, t) in &a.entries {
                assert!(t.max_abs_diff(&b.entries[k]) <= 1e-6, "{loss} {k}");
            }
        }
    }

    #[test]
    fn rms_normalization() {
        let t = Tensor::new([4], vec![3.0, -3.0, 3.0, -3.0]);
        let n = rms_normalize(&t);
        for v in n.data() {
            assert!((v.abs() - 1.0).abs() < 1e-8);
        }
        assert!(rms_normalize(&Tensor::zeros([3])).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_names_round_trip() {
        for l in [UnsupervisedLoss::Entropy, UnsupervisedLoss::PseudoLabel, UnsupervisedLoss::AugmentationConsistency] {
            assert_eq!(l.cli_name().parse::<UnsupervisedLoss>().unwrap(), l);
        }
        assert!("kl".parse::<UnsupervisedLoss>().is_err());
    }
}
