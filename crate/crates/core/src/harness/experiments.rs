//! Experiment drivers for the desk-scale protocols.
//!
//! Each driver loops over seeds, trains what it needs (through a shared
//! [`ModelCache`], so experiments that need the same model train it once),
//! runs the strategies on seeded target streams and returns an
//! [`ExperimentReport`] of per-seed cells plus the raw per-batch records.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSpec, ParamSet};
use crate::error::{invalid, Error, Result};
use crate::harness::report::{labels, BatchLine, Cell, ExperimentReport, Labels};
use crate::metatrain::{train, Model, TrainConfig};
use crate::paramgen::{GeneratedLayers, GeneratorSpec, InputMask};
use crate::synthdata::{
    derive_seed, make_category_shift_split, make_rotated_domains, sequential_batches, stream, DomainBatch,
    DomainDataset, DomainMeta, OrderPolicy,
};
use crate::ttg::{make_strategy, run_batches, GeneralizeFormer, RunMetrics, Strategy, StrategyKind, StrategyOptions};

const SALT_DATA: u64 = 0x510e_527f_ade6_82d1;
const SALT_TEST: u64 = 0x9b05_688c_2b3e_6c1f;

pub const LOO_ANGLES: [f64; 4] = [0.0, 30.0, 60.0, 90.0];
pub const MULTI_SOURCE_ANGLES: [f64; 4] = [0.0, 15.0, 75.0, 90.0];
pub const MULTI_TARGET_ANGLES: [f64; 3] = [30.0, 45.0, 60.0];
pub const BATCH_SIZES: [usize; 5] = [1, 16, 20, 64, 128];
pub const TEST_BATCH_SIZE: usize = 20;
/// Label-space size of the category-shift benchmark, split (3, 2, 2) over three sources.
pub const CATEGORY_CLASSES: usize = 7;

pub const EXPERIMENTS: [&str; 8] = ["loo", "forgetting", "multitarget", "batchsweep", "inputs", "layers", "distance", "timing"];

/// Everything an experiment needs besides the protocol itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSetup {
    pub n_per_domain: usize,
    pub train: TrainConfig,
    pub test_batch_size: usize,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub options: StrategyOptions,
}

impl DeskSetup {
    /// The acceptance-scale setup: 5 seeds, the desk training schedule.
    pub fn desk() -> Self {
        Self {
            n_per_domain: 300,
            train: TrainConfig::desk(BackboneSpec::default()),
            test_batch_size: TEST_BATCH_SIZE,
            seeds: (0..5).collect(),
            strategies: StrategyKind::ALL.to_vec(),
            options: StrategyOptions::default(),
        }
    }

    /// Seconds-scale setup for smoke tests and examples. Numbers from it mean little.
    pub fn quick() -> Self {
        let mut train = TrainConfig::desk(BackboneSpec::default());
        train.n_iter = 40;
        train.batch_size = 16;
        train.generator.n_layers = 2;
        train.eval_every = 20;
        train.log_every = 20;
        Self { n_per_domain: 40, train, seeds: vec![0], ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() || self.strategies.is_empty() {
            return Err(invalid("setup needs at least one seed and one strategy"));
        }
        if self.test_batch_size == 0 {
            return Err(invalid("test_batch_size must be at least 1"));
        }
        Ok(())
    }

    /// The same setup with a different label-space size; generator
    /// hyperparameters are kept.
    pub fn with_classes(&self, k: usize) -> Self {
        let mut s = self.clone();
        s.train.backbone.n_classes = k;
        let g = &self.train.generator;
        s.train.generator = GeneratorSpec {
            model_dim: g.model_dim,
            n_layers: g.n_layers,
            n_heads: g.n_heads,
            ffn_dim: g.ffn_dim,
            joint: g.joint,
            inputs: g.inputs,
            layers: g.layers,
            ..GeneratorSpec::for_backbone(&s.train.backbone)
        };
        s
    }

    pub fn config(&self, seed: u64) -> TrainConfig {
        self.train.clone().with_seed(seed)
    }

    /// Rotated domains drawn from the seed's base instances.
    pub fn rotated(&self, seed: u64, angles: &[f64]) -> Result<Vec<DomainDataset>> {
        let b = &self.train.backbone;
        make_rotated_domains(derive_seed(seed, SALT_DATA, 0), angles, self.n_per_domain, b.n_classes, b.image_size)
    }

    fn stream_seed(seed: u64, tag: u64) -> u64 {
        derive_seed(seed, SALT_TEST, tag)
    }
}

/// Trained models keyed by config hash and a digest of the source data.
#[derive(Default)]
pub struct ModelCache {
    models: Mutex<BTreeMap<String, Arc<Model>>>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.models.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_train(&self, config: &TrainConfig, sources: &[DomainDataset]) -> Result<Arc<Model>> {
        let key = format!("{}:{}", config.hash(), data_digest(sources));
        if let Some(m) = self.models.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let model = Arc::new(train(config, sources)?.selected);
        self.models.lock().expect("cache lock").insert(key, model.clone());
        Ok(model)
    }
}

fn data_digest(sources: &[DomainDataset]) -> String {
    let mut h = Sha256::new();
    for d in sources {
        h.update(serde_json::to_vec(&d.meta).expect("meta serializes"));
        h.update((d.domain_id as u64).to_le_bytes());
        for &l in &d.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in d.inputs.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Worker count for independent seeds: `TTG_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("TTG_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Runs `f` per seed, possibly in parallel, and merges results in seed order.
fn per_seed<F>(name: &str, setup: &DeskSetup, f: F) -> Result<ExperimentReport>
where
    F: Fn(u64, &mut ExperimentReport) -> Result<()> + Sync,
{
    setup.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let parts: Vec<Result<ExperimentReport>> = pool.install(|| {
        setup
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut r = ExperimentReport::new(name, setup.train.hash());
                f(seed, &mut r)?;
                Ok(r)
            })
            .collect()
    });
    let mut out = ExperimentReport::new(name, setup.train.hash());
    out.seeds = setup.seeds.clone();
    for p in parts {
        let p = p?;
        out.cells.extend(p.cells);
        out.batches.extend(p.batches);
    }
    Ok(out)
}

/// Human label of a domain: its rotation angle when it has one.
pub fn domain_label(d: &DomainDataset) -> String {
    fn angle(m: &DomainMeta) -> Option<f64> {
        match m {
            DomainMeta::Rotated { angle_deg, .. } => Some(*angle_deg),
            DomainMeta::CategoryShift { base, .. } => angle(base),
            DomainMeta::Subpopulation { .. } => None,
        }
    }
    match angle(&d.meta) {
        Some(a) => format!("{a}"),
        None => format!("domain{}", d.domain_id),
    }
}

pub fn run_strategy(model: &Model, kind: StrategyKind, opts: StrategyOptions, batches: &[DomainBatch]) -> Result<RunMetrics> {
    let mut s = make_strategy(kind, model, opts)?;
    run_batches(batches, s.as_mut())
}

/// Shuffled single-domain batches of one target.
fn target_batches(target: &DomainDataset, batch_size: usize, seed: u64) -> Result<Vec<DomainBatch>> {
    Ok(stream(std::slice::from_ref(target), batch_size, OrderPolicy::SingleDomain, seed)?.batches)
}

/// Single-target mode: a fresh strategy per target domain; returns per-domain
/// accuracies and records their batches.
#[allow(clippy::too_many_arguments)]
fn single_target(
    model: &Model,
    kind: StrategyKind,
    opts: StrategyOptions,
    targets: &[DomainDataset],
    batch_size: usize,
    seed: u64,
    base: &Labels,
    r: &mut ExperimentReport,
) -> Result<Vec<f64>> {
    let mut accs = Vec::new();
    for t in targets {
        let batches = target_batches(t, batch_size, DeskSetup::stream_seed(seed, t.domain_id as u64))?;
        let m = run_strategy(model, kind, opts, &batches)?;
        let mut l = base.clone();
        l.insert("target".into(), domain_label(t));
        r.push_batches(&l, seed, &m.batches);
        accs.push(m.accuracy());
    }
    Ok(accs)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn split_sources_targets(all: Vec<DomainDataset>, n_sources: usize) -> (Vec<DomainDataset>, Vec<DomainDataset>) {
    let mut sources = all;
    let targets = sources.split_off(n_sources);
    (sources, targets)
}

/// Leave-one-domain-out: train on all but one domain, evaluate every strategy
/// on the held-out one. Cells: `{target, strategy}` accuracy.
pub fn eval_leave_one_out(setup: &DeskSetup, angles: &[f64], cache: &ModelCache) -> Result<ExperimentReport> {
    if angles.len() < 3 {
        return Err(invalid("leave-one-out needs at least 3 domains"));
    }
    per_seed("loo", setup, |seed, r| {
        let domains = setup.rotated(seed, angles)?;
        for (ti, target) in domains.iter().enumerate() {
            let sources: Vec<DomainDataset> =
                domains.iter().enumerate().filter(|(i, _)| *i != ti).map(|(_, d)| d.clone()).collect();
            let model = cache.get_or_train(&setup.config(seed), &sources)?;
            let batches = target_batches(target, setup.test_batch_size, DeskSetup::stream_seed(seed, ti as u64))?;
            for &kind in &setup.strategies {
                let m = run_strategy(&model, kind, setup.options, &batches)?;
                let l = labels(&[("target", &domain_label(target)), ("strategy", kind.name())]);
                r.push_batches(&l, seed, &m.batches);
                r.push(l, seed, "accuracy", m.accuracy());
            }
        }
        Ok(())
    })
}

/// Accuracy of a strategy's current state on each dataset, without adapting.
pub fn source_accuracy(strategy: &dyn Strategy, datasets: &[DomainDataset], batch_size: usize) -> Result<Vec<f64>> {
    datasets
        .iter()
        .map(|d| {
            let mut correct = 0;
            for b in sequential_batches(d, batch_size) {
                let logits = strategy.predict(&b.inputs)?;
                correct += crate::metatrain::count_correct(&logits, &b.labels);
            }
            Ok(correct as f64 / d.len().max(1) as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub strategy: StrategyKind,
    pub domain: String,
    pub before: f64,
    pub after: f64,
}

/// Source accuracy before and after a strategy adapts over the whole target stream.
pub fn forgetting(
    model: &Model,
    kind: StrategyKind,
    opts: StrategyOptions,
    target_batches: &[DomainBatch],
    sources: &[DomainDataset],
    batch_size: usize,
) -> Result<Vec<ForgettingRow>> {
    let mut s = make_strategy(kind, model, opts)?;
    let before = source_accuracy(s.as_ref(), sources, batch_size)?;
    run_batches(target_batches, s.as_mut())?;
    let after = source_accuracy(s.as_ref(), sources, batch_size)?;
    Ok(sources
        .iter()
        .zip(before.into_iter().zip(after))
        .map(|(d, (before, after))| ForgettingRow { strategy: kind, domain: domain_label(d), before, after })
        .collect())
}

/// Trains on all angles but the last, adapts on the last, re-evaluates the
/// sources. Cells: `{strategy, domain, phase}` accuracy and `{strategy, domain}` delta.
pub fn eval_forgetting(setup: &DeskSetup, angles: &[f64], cache: &ModelCache) -> Result<ExperimentReport> {
    if angles.len() < 3 {
        return Err(invalid("forgetting needs at least 2 sources and 1 target"));
    }
    per_seed("forgetting", setup, |seed, r| {
        let (sources, targets) = split_sources_targets(setup.rotated(seed, angles)?, angles.len() - 1);
        let model = cache.get_or_train(&setup.config(seed), &sources)?;
        let t = &targets[0];
        let batches = target_batches(t, setup.test_batch_size, DeskSetup::stream_seed(seed, t.domain_id as u64))?;
        for &kind in &setup.strategies {
            for row in forgetting(&model, kind, setup.options, &batches, &sources, setup.test_batch_size)? {
                for (phase, v) in [("before", row.before), ("after", row.after)] {
                    r.push(labels(&[("strategy", kind.name()), ("domain", &row.domain), ("phase", phase)]), seed, "accuracy", v);
                }
                r.push(labels(&[("strategy", kind.name()), ("domain", &row.domain)]), seed, "delta", row.after - row.before);
            }
        }
        Ok(())
    })
}

/// Single-target mode (mean over per-domain streams) against multiple-target
/// mode (one interleaved stream). Cells: `{strategy, mode}` accuracy.
pub fn eval_multi_target(
    setup: &DeskSetup,
    source_angles: &[f64],
    target_angles: &[f64],
    cache: &ModelCache,
) -> Result<ExperimentReport> {
    per_seed("multitarget", setup, |seed, r| {
        let all: Vec<f64> = source_angles.iter().chain(target_angles).copied().collect();
        let (sources, targets) = split_sources_targets(setup.rotated(seed, &all)?, source_angles.len());
        let model = cache.get_or_train(&setup.config(seed), &sources)?;
        let multi = stream(&targets, setup.test_batch_size, OrderPolicy::InterleavedRandom, DeskSetup::stream_seed(seed, 1000))?;
        for &kind in &setup.strategies {
            let base = labels(&[("strategy", kind.name()), ("mode", "single")]);
            let accs = single_target(&model, kind, setup.options, &targets, setup.test_batch_size, seed, &base, r)?;
            r.push(base, seed, "accuracy", mean(&accs));
            let m = run_strategy(&model, kind, setup.options, &multi.batches)?;
            let l = labels(&[("strategy", kind.name()), ("mode", "multi")]);
            r.push_batches(&l, seed, &m.batches);
            r.push(l, seed, "accuracy", m.accuracy());
        }
        Ok(())
    })
}

/// Single-target accuracy per test batch size. Cells: `{strategy, batch_size}`
/// accuracy and the fraction of batches flagged degenerate.
pub fn sweep_batch_size(
    setup: &DeskSetup,
    sizes: &[usize],
    source_angles: &[f64],
    target_angles: &[f64],
    cache: &ModelCache,
) -> Result<ExperimentReport> {
    if sizes.contains(&0) {
        return Err(invalid("batch sizes must be at least 1"));
    }
    per_seed("batchsweep", setup, |seed, r| {
        let all: Vec<f64> = source_angles.iter().chain(target_angles).copied().collect();
        let (sources, targets) = split_sources_targets(setup.rotated(seed, &all)?, source_angles.len());
        let model = cache.get_or_train(&setup.config(seed), &sources)?;
        for &size in sizes {
            for &kind in &setup.strategies {
                let base = labels(&[("strategy", kind.name()), ("batch_size", &size.to_string())]);
                let mut accs = Vec::new();
                let (mut flagged, mut total) = (0usize, 0usize);
                for t in &targets {
                    let batches = target_batches(t, size, DeskSetup::stream_seed(seed, t.domain_id as u64))?;
                    let m = run_strategy(&model, kind, setup.options, &batches)?;
                    flagged += m.batches.iter().filter(|b| b.degenerate).count();
                    total += m.batches.len();
                    let mut l = base.clone();
                    l.insert("target".into(), domain_label(t));
                    r.push_batches(&l, seed, &m.batches);
                    accs.push(m.accuracy());
                }
                r.push(base.clone(), seed, "accuracy", mean(&accs));
                r.push(base, seed, "degenerate_fraction", flagged as f64 / total.max(1) as f64);
            }
        }
        Ok(())
    })
}

/// Retrains per variant and scores generalizeformer (and ERM of the same
/// selected checkpoint) in single-target mode.
#[allow(clippy::too_many_arguments)]
fn variants<V: Copy + Sync>(
    name: &str,
    key: &str,
    setup: &DeskSetup,
    items: &[V],
    label: impl Fn(V) -> String + Sync,
    apply: impl Fn(&mut TrainConfig, V) + Sync,
    source_angles: &[f64],
    target_angles: &[f64],
    cache: &ModelCache,
) -> Result<ExperimentReport> {
    per_seed(name, setup, |seed, r| {
        let all: Vec<f64> = source_angles.iter().chain(target_angles).copied().collect();
        let (sources, targets) = split_sources_targets(setup.rotated(seed, &all)?, source_angles.len());
        for &v in items {
            let mut config = setup.config(seed);
            apply(&mut config, v);
            let model = cache.get_or_train(&config, &sources)?;
            let hash = config.clone().with_seed(0).hash();
            for (kind, metric) in [(StrategyKind::Generalizeformer, "accuracy"), (StrategyKind::Erm, "erm_accuracy")] {
                let base = labels(&[(key, &label(v)), ("variant_hash", &hash[..12])]);
                let mut lb = base.clone();
                lb.insert("strategy".into(), kind.name().into());
                let accs = single_target(&model, kind, setup.options, &targets, setup.test_batch_size, seed, &lb, r)?;
                r.push(base, seed, metric, mean(&accs));
            }
        }
        Ok(())
    })
}

pub const INPUT_VARIANTS: [InputMask; 4] = [InputMask::ALL, InputMask::FEAT_GRAD, InputMask::GRAD_PARAM, InputMask::FEAT_PARAM];
pub const LAYER_VARIANTS: [GeneratedLayers; 3] =
    [GeneratedLayers::Both, GeneratedLayers::BnOnly, GeneratedLayers::ClassifierOnly];

/// Generator input ablation; masked roles use learned null tokens. Cells:
/// `{inputs, variant_hash}` accuracy.
pub fn ablate_inputs(
    setup: &DeskSetup,
    masks: &[InputMask],
    source_angles: &[f64],
    target_angles: &[f64],
    cache: &ModelCache,
) -> Result<ExperimentReport> {
    variants(
        "inputs",
        "inputs",
        setup,
        masks,
        InputMask::name,
        |c, m| c.generator.inputs = m,
        source_angles,
        target_angles,
        cache,
    )
}

/// Which slots are generated. Cells: `{layers, variant_hash}` accuracy.
pub fn ablate_generated_layers(
    setup: &DeskSetup,
    layers: &[GeneratedLayers],
    source_angles: &[f64],
    target_angles: &[f64],
    cache: &ModelCache,
) -> Result<ExperimentReport> {
    variants(
        "layers",
        "layers",
        setup,
        layers,
        |l| l.name().to_string(),
        |c, l| c.generator.layers = l,
        source_angles,
        target_angles,
        cache,
    )
}

/// Mean over the stream of `‖θ_t − θ_s‖ / ‖θ_s‖` per slot. A slot whose source
/// norm is zero reports the absolute distance instead.
pub fn layer_distance_report(source: &ParamSet, generated: &[ParamSet]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if generated.is_empty() {
        return Err(invalid("no generated parameter sets"));
    }
    for (id, s) in source.iter() {
        let norm = s.l2_norm();
        let mut total = 0.0;
        for g in generated {
            let t = g.get(id).ok_or_else(|| Error::UnknownSlot(id.clone()))?;
            if t.shape() != s.shape() {
                return Err(Error::ShapeMismatch { name: id.clone(), expected: s.shape().to_vec(), got: t.shape().to_vec() });
            }
            let d = t.sub(s).l2_norm();
            total += if norm > 0.0 { d / norm } else { d };
        }
        out.insert(id.clone(), total / generated.len() as f64);
    }
    Ok(out)
}

/// Generalizeformer over a stream, keeping every generated parameter set.
pub fn generated_stream(model: &Model, batches: &[DomainBatch]) -> Result<(RunMetrics, Vec<ParamSet>)> {
    let mut gf = GeneralizeFormer::new(model);
    let mut sets = Vec::with_capacity(batches.len());
    let mut records = Vec::with_capacity(batches.len());
    for b in batches {
        let m = run_batches(std::slice::from_ref(b), &mut gf)?;
        sets.push(gf.last.take().expect("generated"));
        records.extend(m.batches);
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.batch_idx = i;
    }
    Ok((RunMetrics { strategy: StrategyKind::Generalizeformer, batches: records }, sets))
}

/// Layer distances on an input-level shift (rotation only) against an
/// output-level one (the same rotated sources restricted to disjoint class
/// subsets of sizes 3, 2, 2). Cells: `{benchmark, slot}` relative_l2.
pub fn eval_distance(setup: &DeskSetup, angles: &[f64], cache: &ModelCache) -> Result<ExperimentReport> {
    if angles.len() != 4 {
        return Err(invalid("distance benchmark expects 3 source angles and 1 target angle"));
    }
    let setup = setup.with_classes(CATEGORY_CLASSES);
    let subsets: [BTreeSet<usize>; 3] = [(0..3).collect(), (3..5).collect(), (5..7).collect()];
    per_seed("distance", &setup, |seed, r| {
        let (raw, targets) = split_sources_targets(setup.rotated(seed, angles)?, 3);
        let full: BTreeSet<usize> = (0..CATEGORY_CLASSES).collect();
        for bench in ["input", "output"] {
            let assignment: BTreeMap<usize, BTreeSet<usize>> = raw
                .iter()
                .zip(&subsets)
                .map(|(d, s)| (d.domain_id, if bench == "output" { s.clone() } else { full.clone() }))
                .collect();
            let sources = make_category_shift_split(&raw, &assignment)?;
            let model = cache.get_or_train(&setup.config(seed), &sources)?;
            let t = &targets[0];
            let batches = target_batches(t, setup.test_batch_size, DeskSetup::stream_seed(seed, t.domain_id as u64))?;
            let (m, sets) = generated_stream(&model, &batches)?;
            let l = labels(&[("benchmark", bench), ("strategy", "generalizeformer")]);
            r.push_batches(&l, seed, &m.batches);
            r.push(labels(&[("benchmark", bench)]), seed, "gf_accuracy", m.accuracy());
            for (slot, d) in layer_distance_report(&model.backbone.extract_all(), &sets)? {
                r.push(labels(&[("benchmark", bench), ("slot", &slot)]), seed, "relative_l2", d);
            }
        }
        Ok(())
    })
}

/// Per-batch adapt time of every strategy on the same stream. Seeds run
/// sequentially regardless of `TTG_THREADS` so timings do not contend.
/// Cells: `{strategy}` adapt_ms_median, adapt_ms_p95, accuracy.
pub fn eval_timing(setup: &DeskSetup, angles: &[f64], cache: &ModelCache) -> Result<ExperimentReport> {
    if angles.len() < 3 {
        return Err(invalid("timing needs at least 2 sources and 1 target"));
    }
    setup.validate()?;
    let mut out = ExperimentReport::new("timing", setup.train.hash());
    for &seed in &setup.seeds {
        let (sources, targets) = split_sources_targets(setup.rotated(seed, angles)?, angles.len() - 1);
        let model = cache.get_or_train(&setup.config(seed), &sources)?;
        let t = &targets[0];
        let batches = target_batches(t, setup.test_batch_size, DeskSetup::stream_seed(seed, t.domain_id as u64))?;
        for &kind in &setup.strategies {
            let m = run_strategy(&model, kind, setup.options, &batches)?;
            let l = labels(&[("strategy", kind.name())]);
            out.push_batches(&l, seed, &m.batches);
            out.push(l, seed, "accuracy", m.accuracy());
        }
    }
    out.cells.extend(timing_cells(&out.batches));
    Ok(out)
}

/// Median and p95 adapt time per `(labels, seed)`, from raw batch lines.
pub fn timing_cells(lines: &[BatchLine]) -> Vec<Cell> {
    let mut groups: BTreeMap<(Labels, u64), RunMetrics> = BTreeMap::new();
    for l in lines {
        groups
            .entry((l.labels.clone(), l.seed))
            .or_insert_with(|| RunMetrics { strategy: StrategyKind::Erm, batches: Vec::new() })
            .batches
            .push(l.record.clone());
    }
    let mut out = Vec::new();
    for ((labels, seed), m) in groups {
        let (median, p95) = m.adapt_ms_quantiles();
        out.push(Cell { labels: labels.clone(), seed, metric: "adapt_ms_median".into(), value: median });
        out.push(Cell { labels, seed, metric: "adapt_ms_p95".into(), value: p95 });
    }
    out
}

/// Accuracy per `(labels, seed)` from raw batch lines: `Σ n_correct / Σ n`.
pub fn accuracy_from_batches(lines: &[BatchLine]) -> BTreeMap<(Labels, u64), f64> {
    let mut acc: BTreeMap<(Labels, u64), (usize, usize)> = BTreeMap::new();
    for l in lines {
        let e = acc.entry((l.labels.clone(), l.seed)).or_default();
        e.0 += l.record.n_correct;
        e.1 += l.record.n;
    }
    acc.into_iter().map(|(k, (c, n))| (k, c as f64 / n.max(1) as f64)).collect()
}

/// Dispatches an experiment by its CLI name with the default protocol arguments.
pub fn run_experiment(name: &str, setup: &DeskSetup, cache: &ModelCache) -> Result<ExperimentReport> {
    match name {
        "loo" => eval_leave_one_out(setup, &LOO_ANGLES, cache),
        "forgetting" => eval_forgetting(setup, &LOO_ANGLES, cache),
        "multitarget" => eval_multi_target(setup, &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, cache),
        "batchsweep" => sweep_batch_size(setup, &BATCH_SIZES, &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, cache),
        "inputs" => ablate_inputs(setup, &INPUT_VARIANTS, &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, cache),
        "layers" => ablate_generated_layers(setup, &LAYER_VARIANTS, &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, cache),
        "distance" => eval_distance(setup, &LOO_ANGLES, cache),
        "timing" => eval_timing(setup, &LOO_ANGLES, cache),
        other => Err(invalid(format!("unknown experiment `{other}` (one of {})", EXPERIMENTS.join("|")))),
    }
}

/// Parses a comma-separated strategy list.
pub fn parse_strategies(s: &str) -> Result<Vec<StrategyKind>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| StrategyKind::from_str(p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> DeskSetup {
        let mut s = DeskSetup::quick();
        s.n_per_domain = 20;
        s.train.n_iter = 4;
        s.train.batch_size = 8;
        s.train.eval_every = 2;
        s
    }

    #[test]
    fn loo_counts_runs_and_erm_matches_plain_forward() {
        let s = tiny();
        let cache = ModelCache::new();
        let r = eval_leave_one_out(&s, &LOO_ANGLES, &cache).unwrap();
        assert_eq!(cache.len(), 4);
        assert_eq!(r.cells.len(), 4 * s.strategies.len());
        let domains = s.rotated(0, &LOO_ANGLES).unwrap();
        for (ti, t) in domains.iter().enumerate() {
            let sources: Vec<_> = domains.iter().enumerate().filter(|(i, _)| *i != ti).map(|(_, d)| d.clone()).collect();
            let model = cache.get_or_train(&s.config(0), &sources).unwrap();
            let logits = model.backbone.forward(&t.inputs, None).unwrap();
            let plain = crate::metatrain::count_correct(&logits, &t.labels) as f64 / t.len() as f64;
            let erm = r.values(&[("target", &domain_label(t)), ("strategy", "erm")], "accuracy");
            assert_eq!(erm, vec![plain]);
        }
        let recomputed = accuracy_from_batches(&r.batches);
        for c in &r.cells {
            assert_eq!(recomputed[&(c.labels.clone(), c.seed)], c.value);
        }
    }

    #[test]
    fn multi_target_erm_is_order_independent() {
        let mut s = tiny();
        s.strategies = vec![StrategyKind::Erm];
        let r = eval_multi_target(&s, &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, &ModelCache::new()).unwrap();
        let single = r.values(&[("mode", "single")], "accuracy")[0];
        let multi = r.values(&[("mode", "multi")], "accuracy")[0];
        // equal-size targets, so the mean of per-domain accuracies is the pooled accuracy
        assert!((single - multi).abs() < 1e-12, "{single} vs {multi}");
    }

    #[test]
    fn distance_of_identical_sets_is_zero() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new([2], vec![3.0, 4.0]));
        p.insert("b", Tensor::zeros([2]));
        let d = layer_distance_report(&p, &[p.clone(), p.clone()]).unwrap();
        assert!(d.values().all(|&v| v == 0.0));
        let mut q = p.clone();
        q.insert("a", Tensor::new([2], vec![3.0, 5.0]));
        q.insert("b", Tensor::new([2], vec![0.0, 2.0]));
        let d = layer_distance_report(&p, &[q]).unwrap();
        assert!((d["a"] - 0.2).abs() < 1e-15);
        assert_eq!(d["b"], 2.0);
    }

    #[test]
    fn batch_sweep_flags_tent_at_size_one() {
        let mut s = tiny();
        s.strategies = vec![StrategyKind::Generalizeformer, StrategyKind::Tent];
        let r = sweep_batch_size(&s, &[1, 16], &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, &ModelCache::new()).unwrap();
        assert_eq!(r.values(&[("strategy", "tent"), ("batch_size", "1")], "degenerate_fraction"), vec![1.0]);
        assert_eq!(r.values(&[("strategy", "generalizeformer"), ("batch_size", "1")], "degenerate_fraction"), vec![0.0]);
        assert_eq!(r.values(&[], "accuracy").len(), 4);
    }

    #[test]
    fn timing_cells_recompute_from_batches() {
        let mut s = tiny();
        s.strategies = vec![StrategyKind::Erm, StrategyKind::Tent];
        let r = eval_timing(&s, &LOO_ANGLES, &ModelCache::new()).unwrap();
        let stored: Vec<&Cell> = r.cells.iter().filter(|c| c.metric.starts_with("adapt_ms")).collect();
        let again = timing_cells(&r.batches);
        assert_eq!(stored.len(), again.len());
        for (a, b) in stored.iter().zip(&again) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn variant_configs_hash_differently() {
        let mut s = tiny();
        s.train.n_iter = 0;
        let r = ablate_inputs(&s, &INPUT_VARIANTS, &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, &ModelCache::new()).unwrap();
        let hashes: BTreeSet<String> = r.cells.iter().map(|c| c.labels["variant_hash"].clone()).collect();
        assert_eq!(hashes.len(), 4);
        // untrained generators reproduce ERM exactly
        let all = r.values(&[("inputs", "all")], "accuracy");
        assert_eq!(all, r.values(&[("inputs", "all")], "erm_accuracy"));
    }
}
