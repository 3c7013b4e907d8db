//! Byte-exact dataset loaders (IDX and CIFAR binary), preprocessing,
//! deterministic batch planning, and embedding export.
//!
//! Loaders only touch local files; `scripts/fetch_data.sh` documents where
//! the official archives come from.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;
use crate::util::{stream_rng, Stream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Cifar100,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            "cifar100" => Ok(DatasetName::Cifar100),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetName::Mnist => write!(f, "mnist"),
            DatasetName::Cifar10 => write!(f, "cifar10"),
            DatasetName::Cifar100 => write!(f, "cifar100"),
        }
    }
}

impl DatasetName {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::Cifar10 => 10,
            // coarse superclass labels
            DatasetName::Cifar100 => 20,
        }
    }
}

/// Images plus labels for one split, NCHW f64.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.images.shape[1], self.images.shape[2], self.images.shape[3])
    }

    /// First `n` examples (deterministic subset).
    pub fn take(&self, n: usize) -> Dataset {
        self.gather(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Seeded random subset without replacement.
    pub fn subset_seeded(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = stream_rng(seed, Stream::Export, 0, 0);
        idx.shuffle(&mut rng);
        idx.truncate(n.min(self.len()));
        self.gather(&idx)
    }

    /// Images + labels at `indices`, as a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let ds = self.gather(indices);
        (ds.images, ds.labels)
    }

    fn gather(&self, indices: &[usize]) -> Dataset {
        let (c, h, w) = self.image_dims();
        let chw = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * chw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * chw..(i + 1) * chw]);
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sized above"),
            labels,
            num_classes: self.num_classes,
        }
    }
}

fn read_u32_be(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

/// Parse IDX image + label files (big-endian headers, magic 2051/2049),
/// cross-checking the example counts.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)
        .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
    let lbl_bytes = std::fs::read(labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;

    let magic = read_u32_be(&img_bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!("images: bad magic {magic} (want {IDX_IMAGES_MAGIC})")));
    }
    let n = read_u32_be(&img_bytes, 4, "images")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "images")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "images")? as usize;
    if img_bytes.len() != 16 + n * rows * cols {
        return Err(Error::Data(format!(
            "images: {} bytes for {n} {rows}x{cols} images (want {})",
            img_bytes.len(),
            16 + n * rows * cols
        )));
    }

    let lmagic = read_u32_be(&lbl_bytes, 0, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!("labels: bad magic {lmagic} (want {IDX_LABELS_MAGIC})")));
    }
    let ln = read_u32_be(&lbl_bytes, 4, "labels")? as usize;
    if lbl_bytes.len() != 8 + ln {
        return Err(Error::Data(format!("labels: {} bytes for {ln} labels", lbl_bytes.len())));
    }
    if n != ln {
        return Err(Error::Data(format!("count mismatch: {n} images vs {ln} labels")));
    }

    let images = img_bytes[16..].iter().map(|&b| b as f64).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Data(format!("label {bad} out of range for mnist")));
    }
    Ok(Dataset {
        name: "mnist".into(),
        split: Split::Train,
        images: Tensor::from_vec(&[n, 1, rows, cols], images)?,
        labels,
        num_classes: 10,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    /// 20 coarse superclass labels.
    Cifar100Coarse,
}

/// Parse CIFAR binary batches. CIFAR-10 records are 1 label byte + 3072
/// pixel bytes (R, G, B planes); CIFAR-100 records carry coarse + fine label
/// bytes and the coarse one is kept.
pub fn load_cifar_bin(paths: &[PathBuf], variant: CifarVariant) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no cifar batch files given".into()));
    }
    let (label_bytes, num_classes, name) = match variant {
        CifarVariant::Cifar10 => (1usize, 10usize, "cifar10"),
        CifarVariant::Cifar100Coarse => (2, 20, "cifar100"),
    };
    let record = label_bytes + 3072;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if bytes.len() % record != 0 {
            return Err(Error::Data(format!(
                "{}: {} bytes is not a multiple of the {record}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(record) {
            let label = rec[0] as usize;
            if label >= num_classes {
                return Err(Error::Data(format!(
                    "{}: label {label} out of range [0, {num_classes})",
                    path.display()
                )));
            }
            labels.push(label);
            images.extend(rec[label_bytes..].iter().map(|&b| b as f64));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        name: name.into(),
        split: Split::Train,
        images: Tensor::from_vec(&[n, 3, 32, 32], images)?,
        labels,
        num_classes,
    })
}

/// Standard file layout under a data directory.
pub fn load_standard(name: DatasetName, data_dir: &Path, split: Split) -> Result<Dataset> {
    let mut ds = match name {
        DatasetName::Mnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let dir = data_dir.join("mnist");
            load_mnist_idx(
                &dir.join(format!("{prefix}-images-idx3-ubyte")),
                &dir.join(format!("{prefix}-labels-idx1-ubyte")),
            )?
        }
        DatasetName::Cifar10 => {
            let dir = data_dir.join("cifar-10-batches-bin");
            let paths: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar_bin(&paths, CifarVariant::Cifar10)?
        }
        DatasetName::Cifar100 => {
            let dir = data_dir.join("cifar-100-binary");
            let file = match split {
                Split::Train => "train.bin",
                Split::Test => "test.bin",
            };
            load_cifar_bin(&[dir.join(file)], CifarVariant::Cifar100Coarse)?
        }
    };
    ds.split = split;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeScheme {
    /// Scale raw bytes into [0, 1].
    UnitRange,
    /// Per-channel (x - mean) / std using train-split statistics.
    Standardize,
}

impl std::str::FromStr for NormalizeScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_range" | "unit-range" => Ok(NormalizeScheme::UnitRange),
            "standardize" => Ok(NormalizeScheme::Standardize),
            other => Err(Error::Config(format!("unknown preprocessing scheme '{other}'"))),
        }
    }
}

/// Per-channel mean/std computed once from the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(train: &Dataset) -> ChannelStats {
    let (n, c, h, w) = (train.len(), train.image_dims().0, train.image_dims().1, train.image_dims().2);
    let (hw, chw) = (h * w, c * h * w);
    let mut mean = vec![0.0f64; c];
    let mut std = vec![0.0f64; c];
    let m = (n * hw) as f64;
    for ch in 0..c {
        let mut s = 0.0;
        for im in 0..n {
            s += train.images.data[im * chw + ch * hw..im * chw + (ch + 1) * hw].iter().sum::<f64>();
        }
        mean[ch] = s / m;
        let mut v = 0.0;
        for im in 0..n {
            v += train.images.data[im * chw + ch * hw..im * chw + (ch + 1) * hw]
                .iter()
                .map(|&a| (a - mean[ch]) * (a - mean[ch]))
                .sum::<f64>();
        }
        std[ch] = (v / m).sqrt().max(1e-12);
    }
    ChannelStats { mean, std }
}

/// Apply a scheme in place. `stats` must come from the training split when
/// standardizing (the same statistics are applied to both splits).
pub fn normalize_images(ds: &mut Dataset, scheme: NormalizeScheme, stats: Option<&ChannelStats>) -> Result<()> {
    match scheme {
        NormalizeScheme::UnitRange => {
            for v in &mut ds.images.data {
                *v /= 255.0;
            }
        }
        NormalizeScheme::Standardize => {
            let stats = stats
                .ok_or_else(|| Error::Config("standardize needs train-split channel stats".into()))?;
            let (c, h, w) = ds.image_dims();
            let (hw, chw) = (h * w, c * h * w);
            for im in 0..ds.len() {
                for ch in 0..c {
                    let (mu, sd) = (stats.mean[ch], stats.std[ch]);
                    for v in &mut ds.images.data[im * chw + ch * hw..im * chw + (ch + 1) * hw] {
                        *v = (*v - mu) / sd;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Seeded epoch shuffling: each epoch gets its own permutation of [0, n).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn epoch_permutation(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.seed, Stream::Shuffle, epoch as u64, 0);
        order.shuffle(&mut rng);
        order
    }

    /// Full batches for one epoch; a trailing partial batch is dropped.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let order = self.epoch_permutation(n, epoch);
        order.chunks_exact(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Write penultimate features as CSV `index,label,f1..fp`. With
/// `normalized`, rows are projected onto the unit sphere first.
pub fn export_embeddings(
    model: &mut Model,
    dataset: &Dataset,
    path: &Path,
    normalized: bool,
) -> Result<usize> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let embed_dim = model.spec.embed_dim;
    write!(out, "index,label")?;
    for j in 1..=embed_dim {
        write!(out, ",f{j}")?;
    }
    writeln!(out)?;

    let mut rng = stream_rng(0, Stream::Export, 1, 0);
    let mut written = 0usize;
    let chunk = 256;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for block in indices.chunks(chunk) {
        let (images, labels) = dataset.batch(block);
        let mut tape = Tape::new();
        let fp = model.forward_on(&mut tape, &images, Mode::Eval, &mut rng)?;
        let features = if normalized {
            let z = tape.row_normalize(fp.features)?;
            tape.value(z).clone()
        } else {
            tape.value(fp.features).clone()
        };
        for (k, (&global, label)) in block.iter().zip(&labels).enumerate() {
            write!(out, "{global},{label}")?;
            for j in 0..embed_dim {
                write!(out, ",{}", features.data[k * embed_dim + j])?;
            }
            writeln!(out)?;
            written += 1;
        }
    }
    out.flush()?;
    Ok(written)
}
