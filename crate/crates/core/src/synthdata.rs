//! Deterministic multi-domain glyph datasets.
//!
//! Three kinds of shift are produced:
//! - input-level: the same glyph instances rotated by a per-domain angle,
//! - output-level: source domains restricted to disjoint class subsets,
//! - feature-level: superclasses whose sub-variants differ between source
//!   and target.
//!
//! Every generator is a pure function of its arguments (seed included) and
//! stores pixel values that are exactly representable as `f32`, so the raw
//! export format round-trips bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 16;
pub const DEFAULT_N_CLASSES: usize = 5;

// Salts for derived seeds.
const SALT_CLASS: u64 = 0x9e37_79b9_7f4a_7c15;
const SALT_SAMPLE: u64 = 0xc2b2_ae3d_27d4_eb4f;
const SALT_SPLIT: u64 = 0x1656_67b1_9e37_79f9;
const SALT_STREAM: u64 = 0x27d4_eb2f_1656_67c5;
const SALT_VARIANT: u64 = 0x85eb_ca77_c2b2_ae63;

/// Mixes a seed with a salt and an index into a new 64-bit seed (splitmix64).
pub(crate) fn derive_seed(seed: u64, salt: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt)
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator arguments recorded with each dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainMeta {
    Rotated { angle_deg: f64, seed: u64 },
    Subpopulation { variants: Vec<usize>, seed: u64 },
    /// A domain restricted to a class subset.
    CategoryShift { classes: Vec<usize>, base: Box<DomainMeta> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub meta: DomainMeta,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Samples at `indices` as a new dataset with the same id and metadata.
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id,
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            meta: self.meta.clone(),
        }
    }

    /// Deterministic per-class split into `(train, held_out)` with roughly
    /// `held_out_fraction` of every class held out (at least one sample of a
    /// class always stays in `train`).
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (DomainDataset, DomainDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_SPLIT, self.domain_id as u64));
        let mut train = Vec::new();
        let mut held = Vec::new();
        for class in self.classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let n_held = ((idx.len() as f64) * held_out_fraction).round() as usize;
            let n_held = n_held.min(idx.len().saturating_sub(1));
            held.extend_from_slice(&idx[..n_held]);
            train.extend_from_slice(&idx[n_held..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        (self.subset(&train), self.subset(&held))
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.rank() != 4 || self.inputs.dim(0) != self.labels.len() {
            return Err(invalid("inputs must be [N, C, H, W] with one label per sample"));
        }
        if !self.inputs.is_finite() {
            return Err(Error::NonFinite(format!("dataset {}", self.domain_id)));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(invalid(format!("label {bad} outside [0, {})", self.n_classes)));
        }
        Ok(())
    }
}

/// A procedurally drawn glyph: polylines in the unit disc `[-1, 1]^2`.
#[derive(Clone, Debug)]
struct Glyph {
    strokes: Vec<Vec<[f64; 2]>>,
}

impl Glyph {
    /// Base shape of one class: two or three connected polylines whose vertices
    /// stay within radius 0.65 so any rotation keeps them inside the frame.
    fn for_class(seed: u64, class: usize) -> Glyph {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_CLASS, class as u64));
        let n_strokes = rng.gen_range(2..=3);
        let strokes = (0..n_strokes)
            .map(|_| {
                let n_pts = rng.gen_range(2..=4);
                (0..n_pts).map(|_| random_in_disc(&mut rng, 0.65)).collect()
            })
            .collect();
        Glyph { strokes }
    }

    /// A deterministic style change: a fixed shear/scale warp plus one extra
    /// decoration stroke. Used for subpopulation variants.
    fn styled(&self, seed: u64, variant: usize) -> Glyph {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_VARIANT, variant as u64));
        let shear = rng.gen_range(-0.45..0.45);
        let sx = rng.gen_range(0.75..1.1);
        let sy = rng.gen_range(0.75..1.1);
        let mut strokes: Vec<Vec<[f64; 2]>> = self
            .strokes
            .iter()
            .map(|s| s.iter().map(|&[x, y]| clamp_disc([sx * (x + shear * y), sy * y], 0.7)).collect())
            .collect();
        let a = random_in_disc(&mut rng, 0.6);
        let b = random_in_disc(&mut rng, 0.6);
        strokes.push(vec![a, b]);
        Glyph { strokes }
    }

    fn jittered(&self, rng: &mut ChaCha8Rng) -> Glyph {
        let jitter = Normal::new(0.0, 0.06).expect("valid normal");
        let scale = rng.gen_range(0.85..1.1);
        let (tx, ty) = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08));
        let strokes = self
            .strokes
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&[x, y]| {
                        let p = [
                            scale * x + tx + jitter.sample(rng),
                            scale * y + ty + jitter.sample(rng),
                        ];
                        clamp_disc(p, 0.75)
                    })
                    .collect()
            })
            .collect();
        Glyph { strokes }
    }

    /// Anti-aliased rendering into a `size x size` plane.
    fn render(&self, size: usize, thickness_px: f64) -> Vec<f64> {
        let mut img = vec![0.0; size * size];
        let half = (size as f64 - 1.0) / 2.0;
        let to_px = |p: [f64; 2]| [half + p[0] * half, half + p[1] * half];
        for y in 0..size {
            for x in 0..size {
                let q = [x as f64, y as f64];
                let mut best = f64::INFINITY;
                for s in &self.strokes {
                    for w in s.windows(2) {
                        best = best.min(segment_distance(q, to_px(w[0]), to_px(w[1])));
                    }
                }
                img[y * size + x] = (thickness_px + 0.5 - best).clamp(0.0, 1.0);
            }
        }
        img
    }
}

fn random_in_disc(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 2] {
    loop {
        let p = [rng.gen_range(-radius..radius), rng.gen_range(-radius..radius)];
        if p[0] * p[0] + p[1] * p[1] <= radius * radius {
            return p;
        }
    }
}

fn clamp_disc(p: [f64; 2], radius: f64) -> [f64; 2] {
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if r > radius {
        [p[0] * radius / r, p[1] * radius / r]
    } else {
        p
    }
}

fn segment_distance(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let aq = [q[0] - a[0], q[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((aq[0] * ab[0] + aq[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [aq[0] - t * ab[0], aq[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Renders one jittered, noisy instance of `glyph` (values rounded to `f32`).
fn draw_instance(glyph: &Glyph, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let thickness = rng.gen_range(0.35..0.8) * size as f64 / 16.0;
    let mut img = glyph.jittered(rng).render(size, thickness);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

fn to_f32_grid(img: &mut [f64]) {
    for v in img {
        *v = *v as f32 as f64;
    }
}

/// Rotates a square single-channel plane by `angle_deg` counter-clockwise
/// about its center, with bilinear resampling and zero padding.
pub fn rotate_plane(img: &[f64], size: usize, angle_deg: f64) -> Vec<f64> {
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = (size as f64 - 1.0) / 2.0;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
            0.0
        } else {
            img[y as usize * size + x as usize]
        }
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            // Inverse map: sample the source at R(-theta)(p - c) + c.
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut v = (1.0 - fx) * (1.0 - fy) * at(x0, y0);
            if fx != 0.0 {
                v += fx * (1.0 - fy) * at(x0 + 1, y0);
            }
            if fy != 0.0 {
                v += (1.0 - fx) * fy * at(x0, y0 + 1);
            }
            if fx != 0.0 && fy != 0.0 {
                v += fx * fy * at(x0 + 1, y0 + 1);
            }
            out[y * size + x] = v;
        }
    }
    out
}

/// Applies [`rotate_plane`] to every channel of every sample of `[N, C, H, W]`.
pub fn rotate_batch(x: &Tensor, angle_deg: f64) -> Tensor {
    let s = x.shape();
    assert_eq!(s[2], s[3], "rotation needs square planes");
    let size = s[2];
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(size * size) {
        out.extend(rotate_plane(plane, size, angle_deg));
    }
    Tensor::new(s.to_vec(), out)
}

/// Mirrors every plane of `[N, C, H, W]` left-right (`horizontal`) or top-bottom.
pub fn flip_batch(x: &Tensor, horizontal: bool) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(x.numel());
    for plane in x.data().chunks(h * w) {
        for y in 0..h {
            for xo in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - xo) } else { (h - 1 - y, xo) };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Base (unrotated) instances shared by every rotated domain: sample `i` has
/// label `i mod n_classes`, so classes are uniformly represented.
fn base_instances(seed: u64, n: usize, n_classes: usize, size: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let glyphs: Vec<Glyph> = (0..n_classes).map(|k| Glyph::for_class(seed, k)).collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % n_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_SAMPLE, i as u64));
        let mut img = draw_instance(&glyphs[label], size, &mut rng);
        to_f32_grid(&mut img);
        images.push(img);
        labels.push(label);
    }
    (images, labels)
}

/// One dataset per angle; the same base instances are rotated by each
/// domain's angle so labels agree across domains index-by-index.
pub fn make_rotated_domains(
    seed: u64,
    angles: &[f64],
    n_per_domain: usize,
    n_classes: usize,
    image_size: usize,
) -> Result<Vec<DomainDataset>> {
    if angles.is_empty() {
        return Err(invalid("angles must be nonempty"));
    }
    if image_size < 8 {
        return Err(invalid("image_size must be at least 8"));
    }
    if n_classes < 2 {
        return Err(invalid("n_classes must be at least 2"));
    }
    if n_per_domain < n_classes {
        return Err(invalid(format!("n_per_domain ({n_per_domain}) < n_classes ({n_classes})")));
    }
    for (i, a) in angles.iter().enumerate() {
        if !a.is_finite() {
            return Err(invalid("angles must be finite"));
        }
        if angles[..i].contains(a) {
            return Err(invalid(format!("duplicate angle {a}")));
        }
    }
    let (base, labels) = base_instances(seed, n_per_domain, n_classes, image_size);
    let plane = image_size * image_size;
    Ok(angles
        .iter()
        .enumerate()
        .map(|(domain_id, &angle)| {
            let mut data = Vec::with_capacity(n_per_domain * plane);
            for img in &base {
                let mut r = rotate_plane(img, image_size, angle);
                to_f32_grid(&mut r);
                data.extend(r);
            }
            DomainDataset {
                domain_id,
                inputs: Tensor::new([n_per_domain, 1, image_size, image_size], data),
                labels: labels.clone(),
                n_classes,
                meta: DomainMeta::Rotated { angle_deg: angle, seed },
            }
        })
        .collect())
}

/// Restricts the datasets named in `class_assignment` to their class subsets;
/// datasets not named there (targets) pass through untouched.
///
/// The subsets must partition the label set. As a no-shift control, giving
/// every named domain the full label set is also accepted.
pub fn make_category_shift_split(
    datasets: &[DomainDataset],
    class_assignment: &BTreeMap<usize, BTreeSet<usize>>,
) -> Result<Vec<DomainDataset>> {
    let Some(first) = datasets.first() else {
        return Err(invalid("no datasets"));
    };
    let n_classes = first.n_classes;
    let full: BTreeSet<usize> = (0..n_classes).collect();
    for id in class_assignment.keys() {
        if !datasets.iter().any(|d| d.domain_id == *id) {
            return Err(invalid(format!("assignment names unknown domain {id}")));
        }
    }
    let all_full = class_assignment.values().all(|s| *s == full);
    if !all_full {
        let mut seen = BTreeSet::new();
        for (id, subset) in class_assignment {
            if let Some(c) = subset.iter().find(|c| **c >= n_classes) {
                return Err(invalid(format!("domain {id} assigned unknown class {c}")));
            }
            if let Some(c) = subset.iter().find(|c| seen.contains(*c)) {
                return Err(invalid(format!("class {c} assigned to more than one domain")));
            }
            seen.extend(subset.iter().copied());
        }
        if seen != full {
            return Err(invalid("class assignment does not cover the label set"));
        }
    }
    Ok(datasets
        .iter()
        .map(|d| match class_assignment.get(&d.domain_id) {
            Some(subset) if *subset != full => {
                let idx: Vec<usize> = (0..d.len()).filter(|&i| subset.contains(&d.labels[i])).collect();
                let mut out = d.subset(&idx);
                out.meta = DomainMeta::CategoryShift {
                    classes: subset.iter().copied().collect(),
                    base: Box::new(d.meta.clone()),
                };
                out
            }
            _ => d.clone(),
        })
        .collect())
}

/// Superclass-labelled data with distinct sub-variant styles; the source holds
/// variants `0..subs/2` of every superclass and the target the rest.
pub fn make_subpopulation_domains(
    seed: u64,
    n_super: usize,
    subs_per_super: usize,
    n_per_sub: usize,
    image_size: usize,
) -> Result<(DomainDataset, DomainDataset)> {
    if subs_per_super < 2 {
        return Err(invalid("subs_per_super must be at least 2"));
    }
    if !subs_per_super.is_multiple_of(2) {
        return Err(invalid("subs_per_super must be even to split variants in half"));
    }
    if n_super < 2 || n_per_sub == 0 {
        return Err(invalid("need at least 2 superclasses and 1 sample per sub-variant"));
    }
    if image_size < 8 {
        return Err(invalid("image_size must be at least 8"));
    }
    let half = subs_per_super / 2;
    let build = |variants: std::ops::Range<usize>, domain_id: usize| {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for sup in 0..n_super {
            let base = Glyph::for_class(seed, sup);
            for v in variants.clone() {
                let style = base.styled(seed, sup * subs_per_super + v);
                for i in 0..n_per_sub {
                    let index = ((sup * subs_per_super + v) * n_per_sub + i) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_SAMPLE, index));
                    let mut img = draw_instance(&style, image_size, &mut rng);
                    to_f32_grid(&mut img);
                    data.extend(img);
                    labels.push(sup);
                }
            }
        }
        let n = labels.len();
        DomainDataset {
            domain_id,
            inputs: Tensor::new([n, 1, image_size, image_size], data),
            labels,
            n_classes: n_super,
            meta: DomainMeta::Subpopulation { variants: variants.collect(), seed },
        }
    };
    Ok((build(0..half, 0), build(half..subs_per_super, 1)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Every batch of dataset 0, then dataset 1, ...; each dataset shuffled.
    SingleDomain,
    /// All samples of all datasets shuffled together, so a batch can mix domains.
    InterleavedRandom,
}

impl std::str::FromStr for OrderPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_domain" => Ok(Self::SingleDomain),
            "interleaved" | "interleaved_random" => Ok(Self::InterleavedRandom),
            other => Err(invalid(format!("unknown order policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Per-sample domain ids; for bookkeeping only, never shown to strategies.
    pub domain_ids: Vec<usize>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The batch's domain if all samples share one.
    pub fn single_domain(&self) -> Option<usize> {
        let first = *self.domain_ids.first()?;
        self.domain_ids.iter().all(|&d| d == first).then_some(first)
    }
}

#[derive(Clone, Debug)]
pub struct DomainStream {
    pub batches: Vec<DomainBatch>,
    pub order_policy: OrderPolicy,
    pub batch_size: usize,
    pub seed: u64,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.batches.iter().map(|b| b.len()).sum()
    }
}

fn gather(datasets: &[DomainDataset], refs: &[(usize, usize)]) -> DomainBatch {
    let planes: Vec<&[f64]> = refs.iter().map(|&(d, i)| datasets[d].inputs.row(i)).collect();
    let [c, h, w] = datasets[refs[0].0].image_shape();
    let mut data = Vec::with_capacity(refs.len() * c * h * w);
    for p in planes {
        data.extend_from_slice(p);
    }
    DomainBatch {
        inputs: Tensor::new([refs.len(), c, h, w], data),
        labels: refs.iter().map(|&(d, i)| datasets[d].labels[i]).collect(),
        domain_ids: refs.iter().map(|&(d, _)| datasets[d].domain_id).collect(),
    }
}

/// Cuts the datasets into a deterministic batch sequence. Every sample appears
/// exactly once; a trailing partial batch is emitted as-is.
pub fn stream(
    datasets: &[DomainDataset],
    batch_size: usize,
    order_policy: OrderPolicy,
    seed: u64,
) -> Result<DomainStream> {
    if batch_size == 0 {
        return Err(invalid("batch_size must be at least 1"));
    }
    if let Some(first) = datasets.first() {
        if datasets.iter().any(|d| d.image_shape() != first.image_shape()) {
            return Err(invalid("datasets have different image shapes"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_STREAM, 0));
    let mut batches = Vec::new();
    match order_policy {
        OrderPolicy::SingleDomain => {
            for (d, ds) in datasets.iter().enumerate() {
                let mut refs: Vec<(usize, usize)> = (0..ds.len()).map(|i| (d, i)).collect();
                refs.shuffle(&mut rng);
                batches.extend(refs.chunks(batch_size).map(|c| gather(datasets, c)));
            }
        }
        OrderPolicy::InterleavedRandom => {
            let mut refs: Vec<(usize, usize)> = datasets
                .iter()
                .enumerate()
                .flat_map(|(d, ds)| (0..ds.len()).map(move |i| (d, i)))
                .collect();
            refs.shuffle(&mut rng);
            batches.extend(refs.chunks(batch_size).map(|c| gather(datasets, c)));
        }
    }
    Ok(DomainStream { batches, order_policy, batch_size, seed })
}

/// Whole datasets as single-domain batches in input order (no shuffling).
pub fn sequential_batches(dataset: &DomainDataset, batch_size: usize) -> Vec<DomainBatch> {
    let refs: Vec<(usize, usize)> = (0..dataset.len()).map(|i| (0, i)).collect();
    refs.chunks(batch_size.max(1))
        .map(|c| gather(std::slice::from_ref(dataset), c))
        .collect()
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    datasets: Vec<DatasetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetEntry {
    domain_id: usize,
    n_classes: usize,
    /// `[N, C, H, W]`
    shape: Vec<usize>,
    inputs_file: String,
    labels_file: String,
    meta: DomainMeta,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(invalid(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `manifest.json` plus one raw little-endian `f32` file each for
/// inputs and labels of every dataset.
pub fn export_datasets(datasets: &[DomainDataset], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        let inputs_file = format!("domain{i}_inputs.f32");
        let labels_file = format!("domain{i}_labels.f32");
        write_f32(&dir.join(&inputs_file), d.inputs.data().iter().copied())?;
        write_f32(&dir.join(&labels_file), d.labels.iter().map(|&l| l as f64))?;
        entries.push(DatasetEntry {
            domain_id: d.domain_id,
            n_classes: d.n_classes,
            shape: d.inputs.shape().to_vec(),
            inputs_file,
            labels_file,
            meta: d.meta.clone(),
        });
    }
    let manifest = DatasetManifest { format_version: DATASET_FORMAT_VERSION, datasets: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn import_datasets(dir: &Path) -> Result<Vec<DomainDataset>> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion { found: manifest.format_version, expected: DATASET_FORMAT_VERSION });
    }
    manifest
        .datasets
        .into_iter()
        .map(|e| {
            let inputs = read_f32(&dir.join(&e.inputs_file))?;
            if inputs.len() != e.shape.iter().product::<usize>() || e.shape.len() != 4 {
                return Err(invalid(format!("{} does not match shape {:?}", e.inputs_file, e.shape)));
            }
            let labels = read_f32(&dir.join(&e.labels_file))?
                .into_iter()
                .map(|v| v as usize)
                .collect();
            let d = DomainDataset {
                domain_id: e.domain_id,
                inputs: Tensor::new(e.shape, inputs),
                labels,
                n_classes: e.n_classes,
                meta: e.meta,
            };
            d.validate()?;
            Ok(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotated_counting_contract() {
        let ds = make_rotated_domains(0, &[0.0, 90.0], 4, 2, 16).unwrap();
        assert_eq!(ds.len(), 2);
        for d in &ds {
            assert_eq!(d.len(), 4);
            assert_eq!(d.classes(), BTreeSet::from([0, 1]));
            d.validate().unwrap();
        }
    }

    #[test]
    fn zero_angle_is_the_base_glyph() {
        let ds = make_rotated_domains(3, &[0.0], 10, 5, 16).unwrap();
        let (base, labels) = base_instances(3, 10, 5, 16);
        let flat: Vec<f64> = base.into_iter().flatten().collect();
        assert_eq!(ds[0].inputs.data(), &flat[..]);
        assert_eq!(ds[0].labels, labels);
    }

    #[test]
    fn rotation_round_trip_within_tolerance() {
        let (base, _) = base_instances(1, 5, 5, 16);
        for img in &base {
            let back = rotate_plane(&rotate_plane(img, 16, 90.0), 16, -90.0);
            let err = img.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 0.05, "reconstruction error {err}");
        }
    }

    #[test]
    fn labels_constant_across_angles() {
        let ds = make_rotated_domains(2, &[0.0, 30.0, 60.0], 12, 3, 16).unwrap();
        assert!(ds.windows(2).all(|w| w[0].labels == w[1].labels));
        assert!(ds.iter().all(|d| d.inputs.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn rotated_errors() {
        assert!(make_rotated_domains(0, &[0.0, 0.0], 4, 2, 16).is_err());
        assert!(make_rotated_domains(0, &[0.0], 1, 2, 16).is_err());
        assert!(make_rotated_domains(0, &[], 4, 2, 16).is_err());
        assert!(make_rotated_domains(0, &[0.0], 4, 2, 4).is_err());
        assert!(make_rotated_domains(0, &[0.0], 4, 1, 16).is_err());
    }

    #[test]
    fn category_shift_three_two_two() {
        let ds = make_rotated_domains(0, &[0.0, 30.0, 60.0, 90.0], 70, 7, 16).unwrap();
        let assignment = BTreeMap::from([
            (0, BTreeSet::from([0, 1, 2])),
            (1, BTreeSet::from([3, 4])),
            (2, BTreeSet::from([5, 6])),
        ]);
        let out = make_category_shift_split(&ds, &assignment).unwrap();
        assert_eq!(out[0].classes(), BTreeSet::from([0, 1, 2]));
        assert_eq!(out[1].classes(), BTreeSet::from([3, 4]));
        assert_eq!(out[2].classes(), BTreeSet::from([5, 6]));
        assert_eq!(out[3], ds[3], "target keeps the entire label space");
        assert_eq!(out[0].len(), 30);
    }

    #[test]
    fn category_shift_identity_and_errors() {
        let ds = make_rotated_domains(0, &[0.0, 30.0], 9, 3, 16).unwrap();
        let all: BTreeSet<usize> = (0..3).collect();
        let ident = BTreeMap::from([(0, all.clone()), (1, all)]);
        assert_eq!(make_category_shift_split(&ds, &ident).unwrap(), ds);
        let overlap = BTreeMap::from([(0, BTreeSet::from([0, 1])), (1, BTreeSet::from([1, 2]))]);
        assert!(make_category_shift_split(&ds, &overlap).is_err());
        let incomplete = BTreeMap::from([(0, BTreeSet::from([0])), (1, BTreeSet::from([1]))]);
        assert!(make_category_shift_split(&ds, &incomplete).is_err());
    }

    #[test]
    fn subpopulation_contract() {
        let (src, tgt) = make_subpopulation_domains(0, 3, 2, 5, 16).unwrap();
        assert_eq!(src.meta, DomainMeta::Subpopulation { variants: vec![0], seed: 0 });
        assert_eq!(tgt.meta, DomainMeta::Subpopulation { variants: vec![1], seed: 0 });
        assert_eq!(src.classes(), tgt.classes());
        let (src2, tgt2) = make_subpopulation_domains(0, 3, 2, 5, 16).unwrap();
        assert!(src.inputs.bits_eq(&src2.inputs) && tgt.inputs.bits_eq(&tgt2.inputs));
        assert!(make_subpopulation_domains(0, 3, 3, 5, 16).is_err());
        assert!(make_subpopulation_domains(0, 3, 1, 5, 16).is_err());
    }

    #[test]
    fn subpopulation_prototypes_differ() {
        let (src, tgt) = make_subpopulation_domains(4, 3, 2, 20, 16).unwrap();
        let mut total = 0.0;
        for class in 0..3 {
            let proto = |d: &DomainDataset| {
                let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
                d.inputs.select(&idx).mean_rows()
            };
            total += proto(&src).sub(&proto(&tgt)).l2_norm();
        }
        assert!(total / 3.0 > 0.0);
    }

    #[test]
    fn stream_batch_sizes_and_order() {
        let ds = make_rotated_domains(0, &[0.0, 45.0], 10, 2, 8).unwrap();
        let s = stream(&ds[..1], 4, OrderPolicy::SingleDomain, 0).unwrap();
        assert_eq!(s.batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let s = stream(&ds, 4, OrderPolicy::SingleDomain, 0).unwrap();
        let ids: Vec<usize> = s.batches.iter().map(|b| b.single_domain().unwrap()).collect();
        assert_eq!(ids, vec![0, 0, 0, 1, 1, 1]);
        assert!(stream(&ds, 0, OrderPolicy::SingleDomain, 0).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_rotated_domains(5, &[0.0, 37.0], 6, 3, 8).unwrap();
        export_datasets(&ds, dir.path()).unwrap();
        let back = import_datasets(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ds.iter().zip(&back) {
            assert!(a.inputs.bits_eq(&b.inputs));
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.meta, b.meta);
        }
    }
}
