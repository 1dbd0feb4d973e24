//! Synthetic multimodal data with a dominance knob per modality, the MMD1
//! container format and minibatch partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{MieError, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// `n` samples, one feature block per modality, class labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    classes: usize,
    features: Vec<Matrix>,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

impl MultimodalDataset {
    pub fn new(
        classes: usize,
        features: Vec<Matrix>,
        labels: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = labels.len();
        if features.is_empty() {
            return Err(MieError::validation("dataset needs at least one modality"));
        }
        if classes < 2 {
            return Err(MieError::validation("dataset needs at least two classes"));
        }
        if n == 0 {
            return Err(MieError::validation("dataset is empty"));
        }
        if splits.len() != n {
            return Err(MieError::validation("split tags and labels differ in length"));
        }
        for (j, f) in features.iter().enumerate() {
            if f.rows() != n {
                return Err(MieError::validation(format!(
                    "modality {j} has {} rows, expected {n}",
                    f.rows()
                )));
            }
            if f.cols() == 0 {
                return Err(MieError::validation(format!("modality {j} has zero width")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(MieError::validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(MultimodalDataset {
            classes,
            features,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.features.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(Matrix::cols).collect()
    }

    pub fn features(&self, modality: usize) -> &Matrix {
        &self.features[modality]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.classes];
        y[self.labels[i]] = 1.0;
        y
    }

    /// Sample indices of a split, ascending.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Minibatch of one modality.
    pub fn batch(&self, modality: usize, idx: &[usize]) -> Result<Batch> {
        Batch::new(self.features[modality].select_rows(idx), self.labels_of(idx))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u8(DATASET_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.modalities() as u32);
        w.u32(self.classes as u32);
        for f in &self.features {
            w.u32(f.cols() as u32);
        }
        for f in &self.features {
            w.f64s(f.as_slice());
        }
        for &l in &self.labels {
            w.u16(l as u16);
        }
        for s in &self.splits {
            w.u8(s.tag());
        }
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != DATASET_MAGIC {
            return Err(MieError::format("magic", "not an MMD1 dataset"));
        }
        let version = r.u8("version")?;
        if version != DATASET_VERSION {
            return Err(MieError::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let n = r.u32("header")? as usize;
        let m = r.u32("header")? as usize;
        let c = r.u32("header")? as usize;
        let dims = (0..m)
            .map(|_| r.u32("modality dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut features = Vec::with_capacity(m);
        for (j, &d) in dims.iter().enumerate() {
            let data = r.f64s(n * d, &format!("features of modality {j}"))?;
            features.push(Matrix::from_vec(n, d, data)?);
        }
        let labels = (0..n)
            .map(|_| r.u16("labels").map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        let splits = r
            .take(n, "split tags")?
            .iter()
            .map(|&t| Split::from_tag(t).ok_or_else(|| MieError::format("split tags", format!("bad tag {t}"))))
            .collect::<Result<Vec<_>>>()?;
        let payload_end = r.position();
        let stored = r.u32("checksum")?;
        if r.remaining() != 0 {
            return Err(MieError::format(
                "trailer",
                format!("{} unexpected trailing bytes", r.remaining()),
            ));
        }
        let actual = crc32fast::hash(&bytes[..payload_end]);
        if stored != actual {
            return Err(MieError::format(
                "checksum",
                format!("CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        MultimodalDataset::new(c, features, labels, splits)
            .map_err(|e| MieError::format("payload", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| MieError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MieError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"MMD1";
const DATASET_VERSION: u8 = 1;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    /// Feature width per modality; its length is the modality count.
    pub dims: Vec<usize>,
    /// Prototype scale per modality; larger means more informative.
    pub snr: Vec<f64>,
    /// Train / val / test fractions.
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            classes: 10,
            dims: vec![32, 32],
            snr: vec![3.0, 0.8],
            split_fractions: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let train = (self.split_fractions[0] * self.n as f64).round() as usize;
        let val = (self.split_fractions[1] * self.n as f64).round() as usize;
        let train = train.min(self.n);
        let val = val.min(self.n - train);
        [train, val, self.n - train - val]
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(MieError::validation("data.classes must be >= 2"));
        }
        if self.dims.is_empty() {
            return Err(MieError::validation("data.dims must list at least one modality"));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(MieError::validation("data.dims entries must be >= 1"));
        }
        if self.snr.len() != self.dims.len() {
            return Err(MieError::validation(format!(
                "data.snr has {} entries but data.dims has {}",
                self.snr.len(),
                self.dims.len()
            )));
        }
        if self.snr.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(MieError::validation("data.snr entries must be finite and >= 0"));
        }
        let f = &self.split_fractions;
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MieError::validation(format!(
                "data.splits must be three fractions summing to 1, got {f:?}"
            )));
        }
        if self.n > u32::MAX as usize || self.classes > u16::MAX as usize + 1 {
            return Err(MieError::validation("data.n or data.classes too large for MMD1"));
        }
        if self.split_sizes().iter().any(|&s| s == 0) {
            return Err(MieError::validation(format!(
                "data.n = {} leaves an empty split with fractions {f:?}",
                self.n
            )));
        }
        Ok(())
    }
}

/// Draws a dataset: per (class, modality) prototype `μ ~ N(0, I)`, samples
/// `x = snr_j·μ_{y,j} + N(0, I)`, labels `i mod c`, seeded random split.
pub fn generate(spec: &SyntheticSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let n = spec.n;
    let c = spec.classes;
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();

    let mut features = Vec::with_capacity(spec.modalities());
    for (j, (&d, &s)) in spec.dims.iter().zip(&spec.snr).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, j as u64]));
        let prototypes: Vec<f64> = (0..c * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            let mu = &prototypes[y * d..(y + 1) * d];
            for &m in mu {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(s * m + noise);
            }
        }
        features.push(Matrix::from_vec(n, d, data)?);
    }

    let [train, val, _] = spec.split_sizes();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[2])));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    MultimodalDataset::new(c, features, labels, splits)
}

/// Seeded shuffle of a split partitioned into `⌈n/B⌉` batches, last possibly short.
pub fn batches(dataset: &MultimodalDataset, split: Split, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut idx = split_checked(dataset, split, batch_size)?;
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Unshuffled partition in ascending index order.
pub fn fixed_batches(dataset: &MultimodalDataset, split: Split, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let idx = split_checked(dataset, split, batch_size)?;
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn split_checked(dataset: &MultimodalDataset, split: Split, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(MieError::validation("batch size must be >= 1"));
    }
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(MieError::validation(format!("split {split:?} is empty")));
    }
    Ok(idx)
}
