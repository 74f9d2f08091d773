//! Checkpoints: `manifest.json` plus a raw little-endian `f64` blob.
//!
//! The manifest carries the format version, the training config and its
//! hash, the slot table and a tensor table with offsets into the blob, and
//! the blob's SHA-256. A trainer checkpoint additionally stores optimizer
//! moments, the selected model so far and the loop state, so a run can be
//! resumed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneSpec, BnStats, ParameterSlot, ParamSet};
use crate::error::{invalid, Error, Result};
use crate::metatrain::{LoopState, Model, TrainConfig, TrainMetrics, TrainOutcome, Trainer};
use crate::objectives::UnsupervisedLoss;
use crate::optim::Adam;
use crate::paramgen::{Generator, GeneratorSpec};
use crate::synthdata::DomainDataset;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` values from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub n_iter: usize,
    pub best_iter: Option<usize>,
    pub best_val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub n_buffers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeInfo {
    pub state: LoopState,
    pub metrics: Vec<TrainMetrics>,
    pub opt_theta: OptimizerInfo,
    pub opt_phi: OptimizerInfo,
    pub has_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub backbone: BackboneSpec,
    pub generator: GeneratorSpec,
    pub loss: UnsupervisedLoss,
    pub slots: Vec<ParameterSlot>,
    pub stats_locked: bool,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<ResumeInfo>,
}

/// A loaded model checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

#[derive(Default)]
struct BlobWriter {
    data: Vec<f64>,
    table: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.table.push(TensorEntry { name: name.into(), shape: t.shape().to_vec(), offset: self.data.len() });
        self.data.extend_from_slice(t.data());
    }

    fn push_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, &Tensor::new([v.len()], v.to_vec()));
    }

    fn push_model(&mut self, prefix: &str, m: &Model) {
        let b = &m.backbone;
        for (l, w) in b.conv_weights().iter().enumerate() {
            self.push(format!("{prefix}backbone.conv{}", l + 1), w);
        }
        for (id, t) in b.extract_all().iter() {
            self.push(format!("{prefix}backbone.{id}"), t);
        }
        for (l, s) in b.stats().iter().enumerate() {
            self.push_vec(format!("{prefix}backbone.bn{}.running_mean", l + 1), &s.mean);
            self.push_vec(format!("{prefix}backbone.bn{}.running_var", l + 1), &s.var);
        }
        for (name, t) in m.generator.weights() {
            self.push(format!("{prefix}generator.{name}"), t);
        }
    }

    fn push_adam(&mut self, prefix: &str, opt: &Adam) -> OptimizerInfo {
        let (m, v) = opt.moments();
        for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
            self.push_vec(format!("{prefix}.m{i}"), mi);
            self.push_vec(format!("{prefix}.v{i}"), vi);
        }
        OptimizerInfo { lr: opt.lr, beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, step: opt.step, n_buffers: m.len() }
    }

    fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

struct BlobReader {
    tensors: BTreeMap<String, Tensor>,
}

impl BlobReader {
    fn new(manifest: &Manifest, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Checkpoint("blob is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n).filter(|&end| end <= values.len());
            let Some(end) = end else {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of the blob", e.name)));
            };
            if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    fn take_vec(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.take(name)?.into_data())
    }

    fn take_model(&mut self, prefix: &str, m: &Manifest) -> Result<Model> {
        let spec = m.backbone.clone();
        let mut conv = Vec::new();
        let mut stats = Vec::new();
        for l in 1..=spec.n_bn_layers() {
            conv.push(self.take(&format!("{prefix}backbone.conv{l}"))?);
            let mean = self.take_vec(&format!("{prefix}backbone.bn{l}.running_mean"))?;
            let var = self.take_vec(&format!("{prefix}backbone.bn{l}.running_var"))?;
            stats.push(BnStats { mean, var, momentum: crate::backbone::BN_MOMENTUM });
        }
        let mut slots = ParamSet::new();
        for s in &m.slots {
            slots.insert(s.slot_id.clone(), self.take(&format!("{prefix}backbone.{}", s.slot_id))?);
        }
        let mut backbone = Backbone::from_parts(spec, conv, slots, stats)?;
        if m.stats_locked {
            backbone.lock_stats();
        }
        let gen_prefix = format!("{prefix}generator.");
        let names: Vec<String> = self.tensors.keys().filter(|k| k.starts_with(&gen_prefix)).cloned().collect();
        let mut weights = BTreeMap::new();
        for n in names {
            let t = self.take(&n)?;
            weights.insert(n[gen_prefix.len()..].to_string(), t);
        }
        let generator = Generator::from_weights(m.generator.clone(), weights)?;
        Ok(Model { backbone, generator, loss: m.loss })
    }

    fn take_adam(&mut self, prefix: &str, info: &OptimizerInfo) -> Result<Adam> {
        let mut m = Vec::with_capacity(info.n_buffers);
        let mut v = Vec::with_capacity(info.n_buffers);
        for i in 0..info.n_buffers {
            m.push(self.take_vec(&format!("{prefix}.m{i}"))?);
            v.push(self.take_vec(&format!("{prefix}.v{i}"))?);
        }
        let mut opt = Adam::new(info.lr);
        opt.beta1 = info.beta1;
        opt.beta2 = info.beta2;
        opt.eps = info.eps;
        opt.with_moments(info.step, m, v)
    }
}

fn base_manifest(config: &TrainConfig, model: &Model) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        config_hash: config.hash(),
        backbone: model.backbone.spec().clone(),
        generator: model.generator.spec().clone(),
        loss: model.loss,
        slots: model.backbone.list_slots(),
        stats_locked: model.backbone.stats_locked(),
        tensors: Vec::new(),
        blob: BLOB_FILE.into(),
        blob_sha256: String::new(),
        training: None,
        resume: None,
    }
}

fn write(dir: &Path, mut manifest: Manifest, blob: BlobWriter) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = blob.bytes();
    manifest.tensors = blob.table;
    manifest.blob_sha256 = hex::encode(Sha256::digest(&bytes));
    fs::write(dir.join(BLOB_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads and verifies the manifest and blob.
fn read(dir: &Path) -> Result<(Manifest, BlobReader)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("manifest has no format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersion { found: version as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Checksum("manifest config".into()));
    }
    let bytes = fs::read(dir.join(&manifest.blob))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.blob_sha256 {
        return Err(Error::Checksum(manifest.blob.clone()));
    }
    let reader = BlobReader::new(&manifest, &bytes)?;
    Ok((manifest, reader))
}

pub fn save_model(dir: &Path, config: &TrainConfig, model: &Model, training: Option<TrainingInfo>) -> Result<()> {
    let mut blob = BlobWriter::default();
    blob.push_model("", model);
    let manifest = Manifest { training, ..base_manifest(config, model) };
    write(dir, manifest, blob)
}

/// Saves the selected model of a finished run.
pub fn save_outcome(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    let info = TrainingInfo { n_iter: config.n_iter, best_iter: outcome.best_iter, best_val_acc: outcome.best_val_acc };
    save_model(dir, config, &outcome.selected, Some(info))
}

pub fn load_model(dir: &Path) -> Result<Checkpoint> {
    let (manifest, mut reader) = read(dir)?;
    let model = reader.take_model("", &manifest)?;
    if !reader.tensors.is_empty() && manifest.resume.is_none() {
        let extra = reader.tensors.keys().next().expect("nonempty");
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint { manifest, model })
}

/// Saves everything needed to continue a run with [`load_trainer`].
pub fn save_trainer(dir: &Path, trainer: &Trainer) -> Result<()> {
    let mut blob = BlobWriter::default();
    blob.push_model("", &trainer.model);
    if let Some(best) = &trainer.best {
        blob.push_model("best.", best);
    }
    let opt_theta = blob.push_adam("opt_theta", &trainer.opt_theta);
    let opt_phi = blob.push_adam("opt_phi", &trainer.opt_phi);
    let resume = ResumeInfo {
        state: trainer.state.clone(),
        metrics: trainer.metrics.clone(),
        opt_theta,
        opt_phi,
        has_best: trainer.best.is_some(),
    };
    let manifest = Manifest { resume: Some(resume), ..base_manifest(&trainer.config, &trainer.model) };
    write(dir, manifest, blob)
}

/// Restores a trainer saved mid-run. `sources` must be the domains the run
/// started with.
pub fn load_trainer(dir: &Path, sources: &[DomainDataset]) -> Result<Trainer> {
    let (manifest, mut reader) = read(dir)?;
    let Some(resume) = manifest.resume.clone() else {
        return Err(invalid("checkpoint holds no trainer state"));
    };
    let model = reader.take_model("", &manifest)?;
    let best = if resume.has_best { Some(reader.take_model("best.", &manifest)?) } else { None };
    let opt_theta = reader.take_adam("opt_theta", &resume.opt_theta)?;
    let opt_phi = reader.take_adam("opt_phi", &resume.opt_phi)?;
    Trainer::assemble(manifest.config, model, opt_theta, opt_phi, resume.state, best, resume.metrics, sources)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_rotated_domains;

    fn config() -> TrainConfig {
        let mut c = TrainConfig::desk(BackboneSpec::default());
        c.generator.n_layers = 2;
        c.n_iter = 6;
        c.batch_size = 8;
        c.eval_every = 3;
        c.log_every = 2;
        c
    }

    fn domains() -> Vec<DomainDataset> {
        make_rotated_domains(3, &[0.0, 45.0, 90.0], 30, 5, 16).unwrap()
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let c = config();
        let out = crate::metatrain::train(&c, &domains()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_outcome(dir.path(), &c, &out).unwrap();
        let ck = load_model(dir.path()).unwrap();
        assert_eq!(ck.model.checksum(), out.selected.checksum());
        assert!(ck.model.backbone.stats_locked());
        assert_eq!(ck.manifest.config_hash, c.hash());
        let x = domains()[1].inputs.select(&[0, 1, 2, 3]);
        let a = crate::ttg::generalize(&out.selected.backbone, &out.selected.generator, out.selected.loss, &x).unwrap();
        let b = crate::ttg::generalize(&ck.model.backbone, &ck.model.generator, ck.model.loss, &x).unwrap();
        assert!(a.logits.bits_eq(&b.logits));
    }

    #[test]
    fn corrupted_blob_and_unknown_version_are_rejected() {
        let c = config();
        let m = Model::init(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &c, &m, None).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum(_))));

        save_model(dir.path(), &c, &m, None).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::FormatVersion { found: 9, .. })));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let c = config();
        let ds = domains();
        let full = crate::metatrain::train(&c, &ds).unwrap();

        let mut t = Trainer::new(c.clone(), &ds).unwrap();
        t.run_until(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_trainer(dir.path(), &t).unwrap();
        drop(t);
        let resumed = load_trainer(dir.path(), &ds).unwrap().finish().unwrap();

        assert_eq!(resumed.selected.checksum(), full.selected.checksum());
        assert_eq!(resumed.best_iter, full.best_iter);
        assert_eq!(resumed.metrics.len(), full.metrics.len());
        for (a, b) in resumed.metrics.iter().zip(&full.metrics) {
            assert_eq!(a.iter, b.iter);
            assert!((a.meta_source_ce - b.meta_source_ce).abs() <= 1e-6);
            assert!((a.meta_target_ce - b.meta_target_ce).abs() <= 1e-6);
        }
    }
}
