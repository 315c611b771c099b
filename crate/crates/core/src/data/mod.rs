//! Datasets (IDX, CIFAR-10 binary, synthetic), balanced subsets, seeded
//! mini-batch orders and checkpoint files.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointSegment};

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    FashionMnist,
    Cifar10,
    Synthetic,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Mnist => "mnist",
            DataSource::FashionMnist => "fashion_mnist",
            DataSource::Cifar10 => "cifar10",
            DataSource::Synthetic => "synthetic",
        })
    }
}

/// Images `[N, C, H, W]` scaled to `[0, 1]` with labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    source: DataSource,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        source: DataSource,
    ) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim("Dataset::new", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn source(&self) -> DataSource {
        self.source
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let stride: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.gather(indices)?;
        Self::new(images, labels, self.classes, self.source)
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            pos: 0,
        }
    }

    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.bytes.len(),
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = Reader::new(path, bytes);
    let magic = r.u32_be("magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.fail(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let n = r.u32_be("image count")? as usize;
    let h = r.u32_be("row count")? as usize;
    let w = r.u32_be("column count")? as usize;
    if h == 0 || w == 0 {
        return Err(r.fail(8, format!("zero image dimension {h}x{w}")));
    }
    let pixels = r.take(n * h * w, "pixel data")?;
    r.expect_end()?;
    Ok((n, h, w, pixels.iter().map(|&b| b as f32 / 255.0).collect()))
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(path, bytes);
    let magic = r.u32_be("magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.fail(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = r.u32_be("label count")? as usize;
    let labels = r.take(n, "label data")?;
    r.expect_end()?;
    Ok(labels.iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image file and its label file; pixels are divided by 255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    source: DataSource,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, h, w, pixels) = parse_idx_images(ip, &read_file(ip)?)?;
    let labels = parse_idx_labels(lp, &read_file(lp)?)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {n} images", labels.len()),
        });
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            offset: 8 + pos as u64,
            message: format!("label {} outside 0..10", labels[pos]),
        });
    }
    if n == 0 {
        return Err(Error::Format {
            path: ip.to_path_buf(),
            offset: 4,
            message: "no images".into(),
        });
    }
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;
    Dataset::new(images, labels, 10, source)
}

/// Train and test splits from a directory holding the four standard IDX
/// files.
pub fn load_idx_dir(dir: impl AsRef<Path>, source: DataSource) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> PathBuf {
        let plain = dir.join(stem);
        if plain.exists() {
            plain
        } else {
            dir.join(stem.replacen("-idx", ".idx", 1))
        }
    };
    let train = load_idx(
        find("train-images-idx3-ubyte"),
        find("train-labels-idx1-ubyte"),
        source,
    )?;
    let test = load_idx(
        find("t10k-images-idx3-ubyte"),
        find("t10k-labels-idx1-ubyte"),
        source,
    )?;
    Ok((train, test))
}

/// Concatenates CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per
/// record).
pub fn load_cifar10<P: AsRef<Path>>(batch_files: &[P]) -> Result<Dataset> {
    if batch_files.is_empty() {
        return Err(Error::Input("no CIFAR-10 batch files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in batch_files {
        let path = file.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                message: format!(
                    "file size {} is not a positive multiple of {CIFAR_RECORD}",
                    bytes.len()
                ),
            });
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (i * CIFAR_RECORD) as u64,
                    message: format!("label {} outside 0..10", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10, DataSource::Cifar10)
}

/// `n / classes` samples of each class drawn without replacement, returned
/// in shuffled order.
pub fn balanced_subset<R: Rng + ?Sized>(data: &Dataset, n: usize, rng: &mut R) -> Result<Dataset> {
    let classes = data.classes();
    if n == 0 || !n.is_multiple_of(classes) {
        return Err(Error::Input(format!(
            "subset size {n} is not a positive multiple of {classes} classes"
        )));
    }
    let per = n / classes;
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(n);
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < per {
            return Err(Error::Input(format!(
                "class {c} has {} samples, {per} needed",
                idx.len()
            )));
        }
        let (picked, _) = idx.partial_shuffle(rng, per);
        chosen.extend_from_slice(picked);
    }
    chosen.shuffle(rng);
    data.subset(&chosen)
}

/// Mini-batch index lists for one epoch: a permutation of `0..len` keyed by
/// `(seed, epoch)`, cut into batches of `batch_size` with the final short
/// batch kept.
pub fn minibatch_order(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Class-structured random images for smoke tests and examples.
///
/// Each class has a fixed random prototype; samples add uniform noise and
/// are clamped to `[0, 1]`.
pub fn synthetic(
    n: usize,
    sample_shape: &[usize],
    classes: usize,
    noise: f32,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || classes == 0 || sample_shape.len() != 3 {
        return Err(Error::Input(format!(
            "synthetic data needs n, classes >= 1 and a [C, H, W] shape, got n={n}, classes={classes}, {sample_shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = sample_shape.iter().product();
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| rng.random::<f32>()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(
            protos[c]
                .iter()
                .map(|&v| (v + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)),
        );
    }
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Dataset::new(
        Tensor::new(shape, data)?,
        labels,
        classes,
        DataSource::Synthetic,
    )
}
