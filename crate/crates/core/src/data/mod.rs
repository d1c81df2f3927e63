//! Synthetic live/spoof face domains, image files and manifests.

mod io;
mod render;

pub use io::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use render::{high_frequency_energy, render_sample, Class, Style};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEALED_MANIFEST_FILE: &str = "sealed_manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub style: Style,
    pub count_per_class: usize,
    pub seed: u64,
    /// Fraction of each class assigned to the test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Unlabeled domains write labels only to the sealed manifest.
    #[serde(default = "default_labeled")]
    pub labeled: bool,
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_labeled() -> bool {
    true
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(DataError::Invalid(format!("domain name {:?} must be [A-Za-z0-9_-]+", self.name)));
        }
        if self.count_per_class == 0 {
            return Err(DataError::Invalid(format!("{}: count_per_class must be positive", self.name)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DataError::Invalid(format!("{}: test_fraction must lie in (0, 1)", self.name)));
        }
        let test = self.test_count();
        if test == 0 || test == self.count_per_class {
            return Err(DataError::Invalid(format!(
                "{}: {} samples per class cannot fill both splits",
                self.name, self.count_per_class
            )));
        }
        self.style.validate().map_err(DataError::Invalid)
    }

    fn test_count(&self) -> usize {
        (self.count_per_class as f64 * self.test_fraction).round() as usize
    }

    /// Class and split of record `index`. Classes alternate; the last
    /// `test_count` samples of each class form the test split.
    pub fn layout(&self, index: usize) -> (Class, Split) {
        let class = if index % 2 == 0 { Class::Live } else { Class::Spoof };
        let within = index / 2;
        let split = if within >= self.count_per_class - self.test_count() {
            Split::Test
        } else {
            Split::Train
        };
        (class, split)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// 1 = live, 0 = spoof.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub domain: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            schema_version: self.schema_version,
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn concat(manifests: &[DatasetManifest]) -> DatasetManifest {
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            records: manifests.iter().flat_map(|m| m.records.iter().cloned()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(DataError::Invalid(format!(
                "manifest schema version {} (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image.as_str()) {
                return Err(DataError::Invalid(format!("duplicate image path {}", r.image)));
            }
            if r.label.is_some() && r.depth.is_none() {
                return Err(DataError::Invalid(format!("labeled record {} lacks depth", r.image)));
            }
            if matches!(r.label, Some(l) if l > 1) {
                return Err(DataError::Invalid(format!("record {} has label outside {{0,1}}", r.image)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}

/// Thread count for dataset generation: `GDA_THREADS` when set, otherwise
/// the available parallelism.
pub fn generation_threads() -> usize {
    std::env::var("GDA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn record_paths(spec: &DomainSpec, index: usize) -> (String, String) {
    (
        format!("images/{}_{index:05}.ppm", spec.name),
        format!("depth/{}_{index:05}.pgm", spec.name),
    )
}

fn sample_seed(spec: &DomainSpec, index: usize) -> u64 {
    SplitMix64::derive(spec.seed, index as u64).next_u64()
}

/// Renders the domain under `out_dir` and writes `manifest.json` (and, for
/// unlabeled domains, `sealed_manifest.json`). Returns the manifest as
/// written, i.e. without labels for unlabeled domains.
pub fn generate_domain_dataset(spec: &DomainSpec, out_dir: &Path) -> Result<DatasetManifest> {
    generate_with_threads(spec, out_dir, generation_threads())
}

/// [`generate_domain_dataset`] with an explicit worker count; the output
/// does not depend on it.
pub fn generate_with_threads(spec: &DomainSpec, out_dir: &Path, threads: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "depth"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let total = 2 * spec.count_per_class;
    let threads = threads.min(total).max(1);
    let chunk = total.div_ceil(threads);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || -> Result<()> {
                    for index in t * chunk..((t + 1) * chunk).min(total) {
                        let (class, _) = spec.layout(index);
                        let (image, depth) = render_sample(class, &spec.style, sample_seed(spec, index));
                        let (ip, dp) = record_paths(spec, index);
                        write_ppm(&out_dir.join(ip), &image)?;
                        write_pgm(&out_dir.join(dp), &depth)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("render worker panicked"))
    })?;

    let sealed = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        records: (0..total)
            .map(|index| {
                let (class, split) = spec.layout(index);
                let (image, depth) = record_paths(spec, index);
                SampleRecord {
                    image,
                    depth: Some(depth),
                    label: Some(class.label()),
                    domain: spec.name.clone(),
                    split,
                }
            })
            .collect(),
    };
    if spec.labeled {
        sealed.save(&out_dir.join(MANIFEST_FILE))?;
        return Ok(sealed);
    }
    let open = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        records: sealed
            .records
            .iter()
            .map(|r| SampleRecord {
                depth: None,
                label: None,
                ..r.clone()
            })
            .collect(),
    };
    sealed.save(&out_dir.join(SEALED_MANIFEST_FILE))?;
    open.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(open)
}

/// Images (and, when labeled, labels and depth maps) held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// `[N,3,32,32]` flattened.
    images: Vec<f64>,
    labels: Option<Vec<usize>>,
    depths: Option<Vec<f64>>,
    domains: Vec<String>,
    len: usize,
}

const IMAGE_NUMEL: usize = 3 * 32 * 32;
const DEPTH_NUMEL: usize = 8 * 8;

impl Samples {
    /// Reads every record of `manifest`, resolving paths against `root`.
    pub fn load(root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        if manifest.records.is_empty() {
            return Err(DataError::Invalid("empty manifest".into()));
        }
        let labeled = manifest.is_labeled();
        let mut images = Vec::with_capacity(manifest.records.len() * IMAGE_NUMEL);
        let mut labels = Vec::new();
        let mut depths = Vec::new();
        let mut domains = Vec::new();
        for r in &manifest.records {
            let path = root.join(&r.image);
            let img = read_ppm(&path)?;
            if img.shape() != [3, 32, 32] {
                return Err(DataError::Format {
                    path,
                    message: format!("expected a 32×32 image, got {:?}", img.shape()),
                });
            }
            images.extend_from_slice(img.data());
            domains.push(r.domain.clone());
            if labeled {
                labels.push(r.label.expect("labeled") as usize);
                let dpath = root.join(r.depth.as_ref().expect("labeled records carry depth"));
                let d = read_pgm(&dpath)?;
                if d.numel() != DEPTH_NUMEL {
                    return Err(DataError::Format {
                        path: dpath,
                        message: format!("expected an 8×8 depth map, got {:?}", d.shape()),
                    });
                }
                depths.extend_from_slice(d.data());
            }
        }
        Ok(Self {
            images,
            labels: labeled.then_some(labels),
            depths: labeled.then_some(depths),
            domains,
            len: manifest.records.len(),
        })
    }

    pub fn from_parts(images: Vec<Tensor>, labels: Option<Vec<usize>>, depths: Option<Vec<Tensor>>) -> Self {
        let len = images.len();
        Self {
            images: images.iter().flat_map(|t| t.data().to_vec()).collect(),
            labels,
            depths: depths.map(|d| d.iter().flat_map(|t| t.data().to_vec()).collect()),
            domains: vec![String::new(); len],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Samples {
        Samples {
            images: self.images(idx).into_vec(),
            labels: self.batch_labels(idx),
            depths: self.depths(idx).map(Tensor::into_vec),
            domains: idx.iter().map(|&i| self.domains[i].clone()).collect(),
            len: idx.len(),
        }
    }

    /// Joins sets in order. Labels and depth survive only when every part
    /// carries them.
    pub fn concat(parts: &[Samples]) -> Samples {
        let labeled = !parts.is_empty() && parts.iter().all(|p| p.labels.is_some() && p.depths.is_some());
        Samples {
            images: parts.iter().flat_map(|p| p.images.iter().copied()).collect(),
            labels: labeled.then(|| parts.iter().flat_map(|p| p.labels.iter().flatten().copied()).collect()),
            depths: labeled.then(|| parts.iter().flat_map(|p| p.depths.iter().flatten().copied()).collect()),
            domains: parts.iter().flat_map(|p| p.domains.iter().cloned()).collect(),
            len: parts.iter().map(|p| p.len).sum(),
        }
    }

    /// The same images with labels and depth dropped.
    pub fn unlabeled(&self) -> Samples {
        Samples {
            labels: None,
            depths: None,
            ..self.clone()
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(&[3, 32, 32], self.images[i * IMAGE_NUMEL..(i + 1) * IMAGE_NUMEL].to_vec()).expect("image")
    }

    /// `[B,3,32,32]` batch.
    pub fn images(&self, idx: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(idx.len() * IMAGE_NUMEL);
        for &i in idx {
            out.extend_from_slice(&self.images[i * IMAGE_NUMEL..(i + 1) * IMAGE_NUMEL]);
        }
        Tensor::new(&[idx.len(), 3, 32, 32], out).expect("batch")
    }

    /// `[B,1,8,8]` depth targets, when labeled.
    pub fn depths(&self, idx: &[usize]) -> Option<Tensor> {
        let d = self.depths.as_ref()?;
        let mut out = Vec::with_capacity(idx.len() * DEPTH_NUMEL);
        for &i in idx {
            out.extend_from_slice(&d[i * DEPTH_NUMEL..(i + 1) * DEPTH_NUMEL]);
        }
        Some(Tensor::new(&[idx.len(), 1, 8, 8], out).expect("batch"))
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Option<Vec<usize>> {
        let l = self.labels.as_ref()?;
        Some(idx.iter().map(|&i| l[i]).collect())
    }

    /// Per-channel mean over all images.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for img in self.images.chunks(IMAGE_NUMEL) {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += img[c * 1024..(c + 1) * 1024].iter().sum::<f64>();
            }
        }
        sums.map(|s| s / (self.len * 1024) as f64)
    }
}

/// Seeded mini-batch order over `n` samples. Each epoch reshuffles with a
/// stream derived from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(DataError::Invalid(format!("cannot batch {n} samples by {batch_size}")));
        }
        if drop_last && batch_size > n {
            return Err(DataError::Invalid(format!("batch size {batch_size} exceeds {n} samples")));
        }
        let mut it = Self {
            n,
            batch_size,
            seed,
            drop_last,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        SplitMix64::derive(self.seed, self.epoch).shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Batches of the current epoch, then advances to the next one.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        while let Some(b) = self.next_in_epoch() {
            out.push(b);
        }
        self.epoch += 1;
        self.reshuffle();
        out
    }

    fn next_in_epoch(&mut self) -> Option<Vec<usize>> {
        let remaining = self.n - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let b = self.order[self.pos..self.pos + take].to_vec();
        self.pos += take;
        Some(b)
    }

    /// Next batch, rolling over epochs as needed; never empty.
    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.next_in_epoch() {
            Some(b) => b,
            None => {
                self.epoch += 1;
                self.reshuffle();
                self.next_in_epoch().expect("non-empty epoch")
            }
        }
    }
}

/// Partner index for every batch position: a uniformly random single cycle
/// (Sattolo), so no element is paired with itself once `len ≥ 2`.
pub fn partner_permutation(len: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.below(i);
        p.swap(i, j);
    }
    p
}

#[cfg(test)]
mod tests;
