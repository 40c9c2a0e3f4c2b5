//! Datasets, file loaders, synthetic data and the index schedules used by the
//! training protocols.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labelled samples. Features are kept in 32-bit precision and converted to
/// the training scalar type per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if labels.is_empty() || per == 0 {
            return Err(Error::InvalidArgument("a dataset needs at least one non-empty sample".into()));
        }
        if features.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature values for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            sample_shape,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.sample_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.sample_len();
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.sample_shape.clone(), labels, self.num_classes)
    }

    /// Inputs at `indices` as an `N x sample_shape` tensor, plus their labels.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::lit(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }

    /// Every sample, in order.
    pub fn all<T: Scalar>(&self) -> Result<(Tensor<T>, Vec<usize>)> {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn format_err(path: &Path, detail: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail,
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            format_err(
                path,
                format!(
                    "header truncated: needs at least {} bytes to read the field at offset {offset}, file has {}",
                    offset + 4,
                    bytes.len()
                ),
            )
        })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an IDX image/label file pair. Pixels are divided by 255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read(images)?;
    let lab = read(labels)?;

    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images,
            format!("magic at offset 0 is {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(format_err(
            images,
            format!(
                "{n} images of {rows}x{cols} need {expected} bytes (16-byte header), file has {}",
                img.len()
            ),
        ));
    }

    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels,
            format!("magic at offset 0 is {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let m = be_u32(&lab, 4, labels)? as usize;
    if m != n {
        return Err(format_err(
            labels,
            format!(
                "count at offset 4 is {m} but {} declares {n} images",
                images.display()
            ),
        ));
    }
    if lab.len() != 8 + m {
        return Err(format_err(
            labels,
            format!("{m} labels need {} bytes (8-byte header), file has {}", 8 + m, lab.len()),
        ));
    }
    let label_bytes = &lab[8..];
    let num_classes = label_bytes.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let features = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(
        features,
        vec![1, rows, cols],
        label_bytes.iter().map(|&b| b as usize).collect(),
        num_classes,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(&images, &labels)
}

/// CIFAR binary batches: each record is `label_bytes` label bytes followed by
/// a 3x32x32 image. `label_index` picks which label byte to use (CIFAR-100
/// stores coarse then fine).
pub fn load_cifar_binary(
    paths: &[PathBuf],
    label_bytes: usize,
    label_index: usize,
    num_classes: usize,
) -> Result<Dataset> {
    const IMAGE: usize = 3 * 32 * 32;
    let record = label_bytes + IMAGE;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(format_err(
                path,
                format!(
                    "length {} is not a positive multiple of the {record}-byte record size",
                    bytes.len()
                ),
            ));
        }
        for (r, rec) in bytes.chunks_exact(record).enumerate() {
            let label = rec[label_index] as usize;
            if label >= num_classes {
                return Err(format_err(
                    path,
                    format!(
                        "label {label} at offset {} exceeds {num_classes} classes",
                        r * record + label_index
                    ),
                ));
            }
            labels.push(label);
            features.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new(features, vec![3, 32, 32], labels, num_classes)
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar_binary(&files, 1, 0, 10)
}

pub fn load_cifar100(dir: &Path, split: Split) -> Result<Dataset> {
    let file = match split {
        Split::Train => dir.join("train.bin"),
        Split::Test => dir.join("test.bin"),
    };
    load_cifar_binary(&[file], 2, 1, 100)
}

/// Gaussian clusters around class means placed on a sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    /// Distance of every class mean from the origin.
    pub radius: f64,
    pub seed: u64,
}

impl GaussianMixture {
    pub const DEFAULT_RADIUS: f64 = 4.0;

    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        Self {
            sample_shape: vec![dim],
            classes,
            radius: Self::DEFAULT_RADIUS,
            seed,
        }
    }

    fn means(&self) -> Vec<Vec<f64>> {
        let d: usize = self.sample_shape.iter().product();
        let mut r = rng::stream(self.seed, streams::SYNTHETIC_MEANS);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * self.radius / n).collect()
            })
            .collect()
    }

    fn draw(&self, n: usize, stream: u64) -> Result<Dataset> {
        if self.classes == 0 || n == 0 {
            return Err(Error::InvalidArgument("synthetic data needs samples and classes".into()));
        }
        let means = self.means();
        let mut r = rng::stream(self.seed, stream);
        let mut features = Vec::with_capacity(n * means[0].len());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.random_range(0..self.classes);
            for &m in &means[label] {
                let z: f64 = r.sample(StandardNormal);
                features.push((m + z) as f32);
            }
            labels.push(label);
        }
        Dataset::new(features, self.sample_shape.clone(), labels, self.classes)
    }

    pub fn train(&self, n: usize) -> Result<Dataset> {
        self.draw(n, streams::SYNTHETIC_TRAIN)
    }

    /// Held-out samples from an independent stream.
    pub fn test(&self, n: usize) -> Result<Dataset> {
        self.draw(n, streams::SYNTHETIC_TEST)
    }
}

pub fn synthetic_gaussian(n: usize, d: usize, k: usize, seed: u64) -> Result<Dataset> {
    GaussianMixture::new(d, k, seed).train(n)
}

fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Uniformly random `fraction` of the samples (rounded), plus the full set.
pub fn split_fraction(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok((ds.clone(), ds.clone()));
    }
    let k = ((ds.len() as f64 * fraction).round() as usize).max(1);
    let mut idx = permutation(ds.len(), &mut rng::stream(seed, streams::DATA_SPLIT));
    idx.truncate(k);
    idx.sort_unstable();
    Ok((ds.subset(&idx)?, ds.clone()))
}

/// Random subset of at most `max` samples; the dataset itself when smaller.
pub fn cap_samples(ds: &Dataset, max: usize, seed: u64) -> Result<Dataset> {
    if ds.len() <= max {
        return Ok(ds.clone());
    }
    let mut idx = permutation(ds.len(), &mut rng::stream(seed, streams::SUBSAMPLE));
    idx.truncate(max);
    idx.sort_unstable();
    ds.subset(&idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    /// Stage `k` sees chunks `1..=k`.
    Full,
    /// Stage `k` sees chunk `k` only.
    Limited,
}

/// Random partition of the sample indices into near-equal chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSchedule {
    pub permutation: Vec<usize>,
    /// `chunks + 1` offsets into `permutation`.
    pub bounds: Vec<usize>,
    pub mode: AccessMode,
}

impl ChunkSchedule {
    pub fn chunks(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn chunk(&self, k: usize) -> &[usize] {
        &self.permutation[self.bounds[k]..self.bounds[k + 1]]
    }

    /// Sample indices of stage `stage` (counted from 1).
    pub fn stage_indices(&self, stage: usize) -> Result<Vec<usize>> {
        if stage == 0 || stage > self.chunks() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} outside 1..={}",
                self.chunks()
            )));
        }
        let start = match self.mode {
            AccessMode::Full => 0,
            AccessMode::Limited => self.bounds[stage - 1],
        };
        let mut idx = self.permutation[start..self.bounds[stage]].to_vec();
        idx.sort_unstable();
        Ok(idx)
    }
}

pub fn make_chunks(n: usize, chunks: usize, mode: AccessMode, seed: u64) -> Result<ChunkSchedule> {
    if chunks == 0 || chunks > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples into {chunks} non-empty chunks"
        )));
    }
    let permutation = permutation(n, &mut rng::stream(seed, streams::CHUNKS));
    let bounds = (0..=chunks).map(|k| k * n / chunks).collect();
    Ok(ChunkSchedule {
        permutation,
        bounds,
        mode,
    })
}

pub fn stage_data(schedule: &ChunkSchedule, ds: &Dataset, stage: usize) -> Result<Dataset> {
    if schedule.permutation.len() != ds.len() {
        return Err(Error::InvalidArgument(format!(
            "schedule covers {} samples, dataset has {}",
            schedule.permutation.len(),
            ds.len()
        )));
    }
    ds.subset(&schedule.stage_indices(stage)?)
}

/// Mini-batch index lists for one epoch. The order is reshuffled from
/// `(seed, epoch)`; the last batch may be smaller.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let order = permutation(
        n,
        &mut rng::stream(seed, streams::indexed(streams::SHUFFLE, epoch as u64)),
    );
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Iterator over the mini-batches of one epoch.
pub struct Batches<'a, T> {
    ds: &'a Dataset,
    batches: std::vec::IntoIter<Vec<usize>>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        Some(self.ds.gather(&idx).expect("indices come from the dataset"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

pub fn batches<T: Scalar>(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Batches<'_, T> {
    Batches {
        ds,
        batches: batch_indices(ds.len(), batch_size, seed, epoch).into_iter(),
        _scalar: std::marker::PhantomData,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend(labels);
        v
    }

    fn scratch_dir(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("swr-data-{name}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn idx_round_trip() {
        let dir = scratch_dir("ok");
        let img = write(&dir, "i", &idx_images(2, 2, 2, &[0, 255, 51, 0, 1, 2, 3, 4]));
        let lab = write(&dir, "l", &idx_labels(&[9, 3]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.labels(), &[9, 3]);
        assert_eq!(ds.num_classes(), 10);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 0.2, 0.0]);
    }

    #[test]
    fn idx_errors_name_offsets_and_sizes() {
        let dir = scratch_dir("bad");
        let lab = write(&dir, "l", &idx_labels(&[1]));
        let short = write(&dir, "short", &IDX_IMAGES_MAGIC.to_be_bytes()[..3]);
        let msg = load_idx(&short, &lab).unwrap_err().to_string();
        assert!(msg.contains("needs at least 4 bytes"), "{msg}");

        let truncated = write(&dir, "trunc", &idx_images(1, 2, 2, &[0, 0, 0]));
        let msg = load_idx(&truncated, &lab).unwrap_err().to_string();
        assert!(msg.contains("need 20 bytes"), "{msg}");

        let mut wrong = idx_images(1, 1, 1, &[0]);
        wrong[3] = 0x01;
        let wrong = write(&dir, "magic", &wrong);
        let msg = load_idx(&wrong, &lab).unwrap_err().to_string();
        assert!(msg.contains("offset 0"), "{msg}");

        let img = write(&dir, "two", &idx_images(2, 1, 1, &[0, 0]));
        let msg = load_idx(&img, &lab).unwrap_err().to_string();
        assert!(msg.contains("offset 4"), "{msg}");

        let missing = dir.join("does-not-exist");
        assert!(matches!(load_idx(&missing, &lab), Err(Error::Io { .. })));
    }

    #[test]
    fn cifar_records() {
        let dir = scratch_dir("cifar");
        let mut rec = vec![7u8];
        rec.extend(vec![255u8; 3072]);
        let p = write(&dir, "b.bin", &rec);
        let ds = load_cifar_binary(std::slice::from_ref(&p), 1, 0, 10).unwrap();
        assert_eq!((ds.len(), ds.labels()[0]), (1, 7));
        assert!(ds.features().iter().all(|&v| v == 1.0));
        let bad = write(&dir, "c.bin", &rec[..100]);
        assert!(load_cifar_binary(&[bad], 1, 0, 10).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_gaussian(50, 4, 3, 1).unwrap();
        assert_eq!(a, synthetic_gaussian(50, 4, 3, 1).unwrap());
        assert_ne!(a, synthetic_gaussian(50, 4, 3, 2).unwrap());
        let one = synthetic_gaussian(20, 4, 1, 1).unwrap();
        assert!(one.labels().iter().all(|&l| l == 0));
        let g = GaussianMixture::new(4, 3, 1);
        assert_ne!(g.train(30).unwrap(), g.test(30).unwrap());
    }

    #[test]
    fn split_fraction_examples() {
        let ds = synthetic_gaussian(100, 2, 2, 0).unwrap();
        let (sub, full) = split_fraction(&ds, 1.0, 3).unwrap();
        assert_eq!(sub, full);
        let (sub, full) = split_fraction(&ds, 0.5, 3).unwrap();
        assert_eq!(sub.len(), 50);
        assert_eq!(full, ds);
        for i in 0..sub.len() {
            assert!((0..ds.len()).any(|j| ds.sample(j) == sub.sample(i)));
        }
        assert_eq!(sub, split_fraction(&ds, 0.5, 3).unwrap().0);
    }

    #[test]
    fn chunks_partition_and_stage() {
        let s = make_chunks(60000, 10, AccessMode::Full, 4).unwrap();
        assert!((0..10).all(|k| s.chunk(k).len() == 6000));
        assert_eq!(s.stage_indices(10).unwrap(), (0..60000).collect::<Vec<_>>());
        let l = ChunkSchedule {
            mode: AccessMode::Limited,
            ..s.clone()
        };
        assert_eq!(s.stage_indices(1).unwrap(), l.stage_indices(1).unwrap());
        let mut all: Vec<usize> = (1..=10).flat_map(|k| l.stage_indices(k).unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..60000).collect::<Vec<_>>());
        assert!(l.stage_indices(0).is_err() && l.stage_indices(11).is_err());

        let odd = make_chunks(23, 10, AccessMode::Limited, 0).unwrap();
        let sizes: Vec<usize> = (0..10).map(|k| odd.chunk(k).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn batch_schedule() {
        let sizes: Vec<usize> = batch_indices(1000, 256, 0, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![256, 256, 256, 232]);
        assert_eq!(batch_indices(1000, 256, 5, 2), batch_indices(1000, 256, 5, 2));
        assert_ne!(batch_indices(1000, 256, 5, 2), batch_indices(1000, 256, 5, 3));
        let ds = synthetic_gaussian(10, 3, 2, 0).unwrap();
        let total: usize = batches::<f64>(&ds, 4, 0, 0).map(|(x, y)| {
            assert_eq!(x.shape()[1..], [3]);
            y.len()
        }).sum();
        assert_eq!(total, 10);
    }
}
