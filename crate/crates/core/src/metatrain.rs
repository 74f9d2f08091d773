//! Episodic training: each iteration holds out one source domain as the
//! meta-target, takes a cross-entropy step on the backbone with the rest,
//! then trains the generator to produce parameters that classify the
//! held-out batch.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::backbone::{Backbone, BackboneSpec, BnMode, Track};
use crate::error::{invalid, Error, Result};
use crate::objectives::{probe, UnsupervisedLoss};
use crate::optim::Adam;
use crate::paramgen::{Generator, GeneratorSpec};
use crate::synthdata::{derive_seed, sequential_batches, DomainBatch, DomainDataset};
use crate::tensor::Tensor;
use crate::ttg;

const SALT_INIT: u64 = 0x6a09_e667_f3bc_c908;
const SALT_ITER: u64 = 0xbb67_ae85_84ca_a73b;
const SALT_HOLDOUT: u64 = 0x3c6e_f372_fe94_f82b;

/// Test batch size used for validation passes.
pub const VAL_BATCH_SIZE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_iter: usize,
    pub lr: f64,
    /// Generator learning rate; `None` uses `lr` for both parts.
    #[serde(default)]
    pub generator_lr: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Unsupervised loss whose gradients feed the generator.
    pub loss: UnsupervisedLoss,
    pub backbone: BackboneSpec,
    pub generator: GeneratorSpec,
    /// Per-domain fraction held out for model selection.
    pub val_fraction: f64,
    /// Validation cadence for model selection (0 disables selection).
    pub eval_every: usize,
    pub log_every: usize,
}

impl TrainConfig {
    /// Full-scale schedule: 10000 iterations, Adam at 1e-4, batch 64.
    pub fn full(backbone: BackboneSpec) -> Self {
        let generator = GeneratorSpec::for_backbone(&backbone);
        Self {
            n_iter: 10_000,
            lr: 1e-4,
            generator_lr: None,
            batch_size: 64,
            seed: 0,
            loss: UnsupervisedLoss::Entropy,
            backbone,
            generator,
            val_fraction: 0.1,
            eval_every: 100,
            log_every: 100,
        }
    }

    /// A schedule that trains in about a minute on one core. The backbone
    /// runs at 1e-3; the generator keeps the full-scale 1e-4.
    pub fn desk(backbone: BackboneSpec) -> Self {
        Self { n_iter: 600, lr: 1e-3, generator_lr: Some(1e-4), batch_size: 32, ..Self::full(backbone) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if let Some(g) = self.generator_lr {
            if !(g > 0.0 && g.is_finite()) {
                return Err(invalid("generator_lr must be positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid("val_fraction must be in [0, 1)"));
        }
        self.backbone.validate()?;
        self.generator.validate()?;
        let g = &self.generator;
        if g.bn_channels != self.backbone.channels
            || g.n_classes != self.backbone.n_classes
            || g.feature_dim != self.backbone.feature_dim()
        {
            return Err(invalid("generator spec does not match the backbone"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A trained backbone plus generator: everything test time needs.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub generator: Generator,
    pub loss: UnsupervisedLoss,
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone(), derive_seed(config.seed, SALT_INIT, 0))?;
        let generator = Generator::new(config.generator.clone(), derive_seed(config.seed, SALT_INIT, 1))?;
        Ok(Self { backbone, generator, loss: config.loss })
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.backbone.checksum().as_bytes());
        h.update(self.generator.checksum().as_bytes());
        h.update(self.loss.cli_name().as_bytes());
        hex::encode(h.finalize())
    }
}

/// One logging row of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iter: usize,
    /// Means over the iterations since the previous row.
    pub meta_source_ce: f64,
    pub meta_target_ce: f64,
    pub wallclock_s: f64,
    /// Generated-model accuracy on the held-out source split, when evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

/// T' = one domain index drawn uniformly, S' = the rest in order.
pub fn split_meta<R: Rng>(n_domains: usize, rng: &mut R) -> Result<(Vec<usize>, usize)> {
    if n_domains < 2 {
        return Err(invalid("meta splitting needs at least 2 source domains"));
    }
    let t = rng.gen_range(0..n_domains);
    Ok(((0..n_domains).filter(|&d| d != t).collect(), t))
}

/// Per-domain, per-class sample indices for class-uniform batch sampling.
#[derive(Clone, Debug)]
struct ClassIndex {
    by_class: Vec<Vec<Vec<usize>>>,
    classes: Vec<Vec<usize>>,
}

impl ClassIndex {
    fn new(domains: &[DomainDataset]) -> Self {
        let mut by_class = Vec::new();
        let mut classes = Vec::new();
        for d in domains {
            let mut per = vec![Vec::new(); d.n_classes];
            for (i, &y) in d.labels.iter().enumerate() {
                per[y].push(i);
            }
            classes.push((0..d.n_classes).filter(|&c| !per[c].is_empty()).collect());
            by_class.push(per);
        }
        Self { by_class, classes }
    }

    /// Each sample: a domain uniformly from `from`, a class uniformly among that
    /// domain's classes, then a sample of that class uniformly.
    fn sample<R: Rng>(&self, domains: &[DomainDataset], from: &[usize], n: usize, rng: &mut R) -> DomainBatch {
        let [c, h, w] = domains[0].image_shape();
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let d = *from.choose(rng).expect("nonempty domain set");
            let y = *self.classes[d].choose(rng).expect("domain has samples");
            let i = *self.by_class[d][y].choose(rng).expect("class has samples");
            data.extend_from_slice(domains[d].inputs.row(i));
            labels.push(y);
            ids.push(domains[d].domain_id);
        }
        DomainBatch { inputs: Tensor::new([n, c, h, w], data), labels, domain_ids: ids }
    }
}

/// One cross-entropy Adam step on every backbone parameter with batch
/// statistics; running statistics are updated afterwards. Returns the loss.
pub fn meta_source_step(model: &mut Backbone, opt: &mut Adam, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = model.bind(&mut g, &Default::default(), Track { conv: true, slots: true })?;
    let t = model.trace(&mut g, xv, &vars, BnMode::Batch);
    let ce = g.cross_entropy(t.logits, labels);
    let loss = g.value(ce).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("meta-source cross-entropy ({loss})")));
    }
    let mut grads = g.backward(ce);
    let handles = vars.all();
    let gs: Vec<Tensor> = handles
        .iter()
        .map(|&v| {
            let shape = g.value(v).shape().to_vec();
            grads.take_or_zeros(v, &shape)
        })
        .collect();
    opt.step(&mut model.theta_mut(), &gs)?;
    model.update_running_stats(&t.moments)?;
    Ok(loss)
}

/// One generator step: features and gradients at the current backbone
/// (frozen statistics, detached), generation with tracked generator weights,
/// injected forward, cross-entropy against the true labels. Only the
/// generator moves. Returns `(loss, logits)`.
pub fn meta_target_step(
    backbone: &Backbone,
    generator: &mut Generator,
    opt: &mut Adam,
    loss: UnsupervisedLoss,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    let slots = generator.spec().generated_slots();
    let pr = probe(backbone, loss, x, None, &slots)?;
    let source = backbone.extract(&slots)?;
    let mut g = Graph::new();
    let gen = generator.trace(&mut g, &source, &pr.features, &pr.grads, true)?;
    let vars = backbone.bind(&mut g, &gen.slots, Track::default())?;
    let xv = g.constant(x.clone());
    let t = backbone.trace(&mut g, xv, &vars, BnMode::Frozen);
    let ce = g.cross_entropy(t.logits, labels);
    let value = g.value(ce).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("meta-target cross-entropy ({value})")));
    }
    let mut grads = g.backward(ce);
    let gs: Vec<Tensor> = gen
        .weights
        .iter()
        .map(|&v| {
            let shape = g.value(v).shape().to_vec();
            grads.take_or_zeros(v, &shape)
        })
        .collect();
    opt.step(&mut generator.weights_mut(), &gs)?;
    Ok((value, g.value(t.logits).clone()))
}

/// Serializable loop state beyond the model itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub iter: usize,
    pub window_source: f64,
    pub window_target: f64,
    pub window_n: usize,
    pub elapsed_s: f64,
    pub best_val_acc: Option<f64>,
    pub best_iter: Option<usize>,
}

/// Resumable training loop.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub opt_theta: Adam,
    pub opt_phi: Adam,
    pub state: LoopState,
    /// Model with the best validation accuracy so far.
    pub best: Option<Model>,
    pub metrics: Vec<TrainMetrics>,
    train: Vec<DomainDataset>,
    val: Vec<DomainDataset>,
    index: ClassIndex,
}

impl Trainer {
    pub fn new(config: TrainConfig, sources: &[DomainDataset]) -> Result<Self> {
        let model = Model::init(&config)?;
        let opt_theta = Adam::new(config.lr);
        let opt_phi = Adam::new(config.generator_lr.unwrap_or(config.lr));
        let state = LoopState {
            iter: 0,
            window_source: 0.0,
            window_target: 0.0,
            window_n: 0,
            elapsed_s: 0.0,
            best_val_acc: None,
            best_iter: None,
        };
        Self::assemble(config, model, opt_theta, opt_phi, state, None, Vec::new(), sources)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        config: TrainConfig,
        model: Model,
        opt_theta: Adam,
        opt_phi: Adam,
        state: LoopState,
        best: Option<Model>,
        metrics: Vec<TrainMetrics>,
        sources: &[DomainDataset],
    ) -> Result<Self> {
        config.validate()?;
        if sources.len() < 2 {
            return Err(invalid("training needs at least 2 source domains"));
        }
        let b = &config.backbone;
        for d in sources {
            d.validate()?;
            if d.image_shape() != [b.in_channels, b.image_size, b.image_size] || d.n_classes != b.n_classes {
                return Err(invalid(format!("domain {} does not match the backbone spec", d.domain_id)));
            }
        }
        let (train, val): (Vec<_>, Vec<_>) = sources
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if config.val_fraction > 0.0 {
                    let (tr, va) = d.split(config.val_fraction, derive_seed(config.seed, SALT_HOLDOUT, i as u64));
                    (tr, va)
                } else {
                    (d.clone(), d.subset(&[]))
                }
            })
            .unzip();
        let index = ClassIndex::new(&train);
        Ok(Self { config, model, opt_theta, opt_phi, state, best, metrics, train, val, index })
    }

    pub fn train_split(&self) -> &[DomainDataset] {
        &self.train
    }

    pub fn val_split(&self) -> &[DomainDataset] {
        &self.val
    }

    pub fn done(&self) -> bool {
        self.state.iter >= self.config.n_iter
    }

    /// One iteration: meta-source step, then meta-target step.
    pub fn step(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let it = self.state.iter;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SALT_ITER, it as u64));
        let (s_prime, t_prime) = split_meta(self.train.len(), &mut rng)?;
        let bs = self.config.batch_size;
        let src = self.index.sample(&self.train, &s_prime, bs, &mut rng);
        let tgt = self.index.sample(&self.train, &[t_prime], bs, &mut rng);

        let ls = meta_source_step(&mut self.model.backbone, &mut self.opt_theta, &src.inputs, &src.labels)
            .map_err(|e| annotate(e, it))?;
        let (lt, _) = meta_target_step(
            &self.model.backbone,
            &mut self.model.generator,
            &mut self.opt_phi,
            self.model.loss,
            &tgt.inputs,
            &tgt.labels,
        )
        .map_err(|e| annotate(e, it))?;

        let s = &mut self.state;
        s.iter += 1;
        s.window_source += ls;
        s.window_target += lt;
        s.window_n += 1;
        s.elapsed_s += t0.elapsed().as_secs_f64();

        let last = self.state.iter == self.config.n_iter;
        let mut val_acc = None;
        let ev = self.config.eval_every;
        if ev > 0 && !self.val.iter().all(|d| d.is_empty()) && (self.state.iter.is_multiple_of(ev) || last) {
            let acc = self.validation_accuracy(&self.model)?;
            val_acc = Some(acc);
            if self.state.best_val_acc.is_none_or(|b| acc > b) {
                self.state.best_val_acc = Some(acc);
                self.state.best_iter = Some(self.state.iter);
                self.best = Some(self.model.clone());
            }
        }
        let le = self.config.log_every.max(1);
        if self.state.iter.is_multiple_of(le) || last {
            let s = &mut self.state;
            let n = s.window_n.max(1) as f64;
            self.metrics.push(TrainMetrics {
                iter: s.iter,
                meta_source_ce: s.window_source / n,
                meta_target_ce: s.window_target / n,
                wallclock_s: s.elapsed_s,
                val_acc,
            });
            s.window_source = 0.0;
            s.window_target = 0.0;
            s.window_n = 0;
        }
        Ok(())
    }

    /// Runs until `iter == min(until, n_iter)`.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while self.state.iter < until.min(self.config.n_iter) {
            self.step()?;
        }
        Ok(())
    }

    /// Generated-model accuracy over the held-out split of every source domain.
    pub fn validation_accuracy(&self, model: &Model) -> Result<f64> {
        let (mut correct, mut total) = (0usize, 0usize);
        for d in &self.val {
            for b in sequential_batches(d, VAL_BATCH_SIZE) {
                if b.is_empty() {
                    continue;
                }
                let out = ttg::generalize(&model.backbone, &model.generator, model.loss, &b.inputs)?;
                correct += count_correct(&out.logits, &b.labels);
                total += b.len();
            }
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    /// The selected model: best validation accuracy, else the current one.
    pub fn selected(&self) -> &Model {
        self.best.as_ref().unwrap_or(&self.model)
    }

    pub fn finish(mut self) -> Result<TrainOutcome> {
        self.run_until(self.config.n_iter)?;
        let mut selected = self.selected().clone();
        selected.backbone.lock_stats();
        Ok(TrainOutcome {
            config_hash: self.config.hash(),
            best_iter: self.state.best_iter,
            best_val_acc: self.state.best_val_acc,
            selected,
            last: self.model,
            metrics: self.metrics,
        })
    }
}

fn annotate(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at iteration {iter}")),
        other => other,
    }
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    crate::objectives::argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config_hash: String,
    pub selected: Model,
    pub last: Model,
    pub metrics: Vec<TrainMetrics>,
    pub best_iter: Option<usize>,
    pub best_val_acc: Option<f64>,
}

/// Full training run on the given source domains.
pub fn train(config: &TrainConfig, sources: &[DomainDataset]) -> Result<TrainOutcome> {
    Trainer::new(config.clone(), sources)?.finish()
}

/// Distinct class labels over several datasets.
pub fn label_space(domains: &[DomainDataset]) -> BTreeSet<usize> {
    domains.iter().flat_map(|d| d.classes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_rotated_domains;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::desk(BackboneSpec::default());
        c.generator.n_layers = 2;
        c.batch_size = 16;
        c.eval_every = 0;
        c
    }

    fn domains() -> Vec<DomainDataset> {
        make_rotated_domains(0, &[0.0, 30.0, 60.0], 60, 5, 16).unwrap()
    }

    #[test]
    fn split_meta_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(split_meta(1, &mut rng).is_err());
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let (s, t) = split_meta(3, &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            assert!(!s.contains(&t));
            counts[t] += 1;
        }
        for c in counts {
            assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() <= 0.05);
        }
    }

    #[test]
    fn zero_lr_source_step_is_noop() {
        let c = tiny_config();
        let mut m = Model::init(&c).unwrap().backbone;
        let before = m.extract_all();
        let conv_before = m.conv_weights().to_vec();
        let d = &domains()[0];
        let mut opt = Adam::new(0.0);
        meta_source_step(&mut m, &mut opt, &d.inputs.select(&[0, 1, 2, 3]), &d.labels[..4]).unwrap();
        assert!(before.bits_eq(&m.extract_all()));
        assert!(conv_before.iter().zip(m.conv_weights()).all(|(a, b)| a.bits_eq(b)));
    }

    #[test]
    fn source_loss_decreases_on_fixed_set() {
        let c = tiny_config();
        let mut m = Model::init(&c).unwrap().backbone;
        let d = &domains()[0];
        let idx: Vec<usize> = (0..20).collect();
        let x = d.inputs.select(&idx);
        let y = &d.labels[..20];
        let mut opt = Adam::new(1e-3);
        let first = meta_source_step(&mut m, &mut opt, &x, y).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = meta_source_step(&mut m, &mut opt, &x, y).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn target_step_updates_only_generator_and_starts_at_erm() {
        let c = tiny_config();
        let mut model = Model::init(&c).unwrap();
        let d = &domains()[1];
        let x = d.inputs.select(&[0, 1, 2, 3, 4]);
        let y = &d.labels[..5];
        let bb = model.backbone.checksum();
        let gen_before = model.generator.checksum();
        let mut opt = Adam::new(1e-3);
        let (_, logits) =
            meta_target_step(&model.backbone, &mut model.generator, &mut opt, model.loss, &x, y).unwrap();
        assert!(logits.bits_eq(&model.backbone.forward(&x, None).unwrap()));
        assert_eq!(bb, model.backbone.checksum());
        assert_ne!(gen_before, model.generator.checksum());
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let mut c = tiny_config();
        c.n_iter = 0;
        let out = train(&c, &domains()).unwrap();
        assert_eq!(out.selected.checksum(), Model::init(&c).unwrap().checksum());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn config_hash_distinguishes_variants() {
        let a = tiny_config();
        let mut b = a.clone();
        b.generator.inputs = crate::paramgen::InputMask::FEAT_GRAD;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), tiny_config().hash());
    }
}
