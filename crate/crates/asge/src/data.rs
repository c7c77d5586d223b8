//! Dataset ingestion from the two standard binary containers (IDX and the
//! CIFAR record format), deterministic train/validation splitting,
//! per-channel normalization with a JSON sidecar cache, and seeded
//! pad-crop/flip augmentation. Everything reads from local disk; fetching
//! the files is a documented external step, never the engine's job.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, stream_seed, substream_seed2, Stream};
use crate::tensor::Tensor;

/// Which protocol slice a dataset instance represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// An in-memory image classification dataset, `[N, C, H, W]` in `[0, 1]`
/// (or normalized after `normalize`).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_stride(&self) -> usize {
        let [c, h, w] = self.sample_shape();
        c * h * w
    }

    /// Copies the selected samples into a batch tensor.
    pub fn gather(&self, indices: &[u32]) -> (Tensor<f32>, Vec<usize>) {
        let stride = self.sample_stride();
        let [c, h, w] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), c, h, w], data).expect("gather shapes"),
            labels,
        )
    }

    /// First `n` samples; used by smoke configurations.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let stride = self.sample_stride();
        let [c, h, w] = self.sample_shape();
        let data = self.images.data()[..n * stride].to_vec();
        self.images = Tensor::from_vec(&[n, c, h, w], data).expect("truncate shapes");
        self.labels.truncate(n);
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, field: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(format!(
            "{}: truncated header reading {field}",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an IDX image/label pair (the MNIST container): big-endian,
/// magic-tagged, pixel bytes scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, n_classes: usize) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let magic = be_u32(&img_bytes, 0, images_path, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = be_u32(&img_bytes, 4, images_path, "image count")? as usize;
    let rows = be_u32(&img_bytes, 8, images_path, "rows")? as usize;
    let cols = be_u32(&img_bytes, 12, images_path, "cols")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: image payload is {} bytes, expected {expected}",
            images_path.display(),
            img_bytes.len()
        )));
    }

    let lab_bytes = read_file(labels_path)?;
    let magic = be_u32(&lab_bytes, 0, labels_path, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let lab_count = be_u32(&lab_bytes, 4, labels_path, "label count")? as usize;
    if lab_bytes.len() != 8 + lab_count {
        return Err(Error::format(format!(
            "{}: label payload is {} bytes, expected {}",
            labels_path.display(),
            lab_bytes.len(),
            8 + lab_count
        )));
    }
    if lab_count != count {
        return Err(Error::format(format!(
            "image count {count} does not match label count {lab_count}"
        )));
    }

    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::format(format!(
            "{}: label {bad} out of range for {n_classes} classes",
            labels_path.display()
        )));
    }
    let data: Vec<f32> = img_bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::from_vec(&[count, 1, rows, cols], data)?,
        labels,
        n_classes,
        tag: SplitTag::Train,
    })
}

/// Writes an IDX image/label pair from raw pixel bytes. Fixture/test helper
/// and the inverse of `load_idx`.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let count = labels.len();
    if pixels.len() != count * rows * cols {
        return Err(Error::config(format!(
            "{} pixels for {count} samples of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(count as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + count);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(count as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// CIFAR binary record layout: 10-class files carry one label byte per
/// record, 100-class files carry a coarse byte then the fine label byte
/// (the fine label is used).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Ten,
    Hundred,
}

impl CifarVariant {
    pub fn n_classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Ten => 1,
            CifarVariant::Hundred => 2,
        }
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Loads one or more CIFAR batch files into a single dataset.
pub fn load_cifar(paths: &[PathBuf], variant: CifarVariant) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::config("no CIFAR batch files given"));
    }
    let record = variant.label_bytes() + CIFAR_PIXELS;
    let mut data: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::format(format!(
                "{}: {} bytes is not a whole number of {record}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(record) {
            let label = rec[variant.label_bytes() - 1] as usize;
            if label >= variant.n_classes() {
                return Err(Error::format(format!(
                    "{}: label {label} out of range",
                    path.display()
                )));
            }
            labels.push(label);
            data.extend(rec[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let count = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[count, 3, 32, 32], data)?,
        labels,
        n_classes: variant.n_classes(),
        tag: SplitTag::Train,
    })
}

/// Deterministic shuffled split into (train, validation): disjoint and
/// exhaustive, driven entirely by the seed.
pub fn split(dataset: &Dataset, val_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if val_count >= dataset.len() {
        return Err(Error::config(format!(
            "validation count {val_count} must be below dataset size {}",
            dataset.len()
        )));
    }
    let mut order: Vec<u32> = (0..dataset.len() as u32).collect();
    let mut rng = rng_from_seed(stream_seed(seed, Stream::Split));
    order.shuffle(&mut rng);
    let (train_idx, val_idx) = order.split_at(dataset.len() - val_count);
    let (train_images, train_labels) = dataset.gather(train_idx);
    let (val_images, val_labels) = dataset.gather(val_idx);
    Ok((
        Dataset {
            images: train_images,
            labels: train_labels,
            n_classes: dataset.n_classes,
            tag: SplitTag::Train,
        },
        Dataset {
            images: val_images,
            labels: val_labels,
            n_classes: dataset.n_classes,
            tag: SplitTag::Val,
        },
    ))
}

/// Per-channel mean/std, cached next to the dataset as a JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn compute_stats(dataset: &Dataset) -> ChannelStats {
    let [c, h, w] = dataset.sample_shape();
    let plane = h * w;
    let per_channel = (dataset.len() * plane) as f64;
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    for sample in dataset.images.data().chunks(c * plane) {
        for (ch, chunk) in sample.chunks(plane).enumerate() {
            for &v in chunk {
                sum[ch] += v as f64;
                sum_sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / per_channel) as f32).collect();
    let std: Vec<f32> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / per_channel) - (*m as f64) * (*m as f64);
            (var.max(0.0).sqrt() as f32).max(1e-8)
        })
        .collect();
    ChannelStats { mean, std }
}

pub fn load_stats(path: &Path) -> Result<ChannelStats> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn store_stats(path: &Path, stats: &ChannelStats) -> Result<()> {
    let json = serde_json::to_vec_pretty(stats).expect("stats serialize");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// `(x - mean) / std` per channel, in place.
pub fn normalize(dataset: &mut Dataset, stats: &ChannelStats) -> Result<()> {
    let [c, h, w] = dataset.sample_shape();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::config(format!(
            "stats have {} channels, dataset has {c}",
            stats.mean.len()
        )));
    }
    if stats.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::config("std must be positive"));
    }
    let plane = h * w;
    for sample in dataset.images.data_mut().chunks_mut(c * plane) {
        for (ch, chunk) in sample.chunks_mut(plane).enumerate() {
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(())
}

/// Seeded augmentation: reflect-pad random crop, then horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Padding pixels for the random crop; 0 disables cropping.
    pub pad_crop: usize,
    /// Probability of a horizontal flip; 0 disables flipping.
    pub flip_prob: f64,
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        AugmentationPolicy {
            pad_crop: 0,
            flip_prob: 0.0,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.pad_crop == 0 && self.flip_prob == 0.0
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Augments a batch in place. The RNG stream is addressed by
/// (seed, epoch, batch index), so augmentation is identical no matter how
/// batches are scheduled across workers.
pub fn augment_batch(
    batch: &mut Tensor<f32>,
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: u64,
    batch_idx: u64,
) {
    if policy.is_disabled() {
        return;
    }
    let (n, c, h, w) = batch.dims4().expect("batch is 4-d");
    let mut rng = rng_from_seed(substream_seed2(seed, Stream::Augment, epoch, batch_idx));
    let pad = policy.pad_crop;
    let stride = c * h * w;
    let mut scratch = vec![0.0f32; stride];
    for s in 0..n {
        let sample = &mut batch.data_mut()[s * stride..(s + 1) * stride];
        if pad > 0 {
            let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
            if dy != 0 || dx != 0 {
                for ch in 0..c {
                    for y in 0..h {
                        let sy = reflect(y as isize + dy, h);
                        for x in 0..w {
                            let sx = reflect(x as isize + dx, w);
                            scratch[(ch * h + y) * w + x] = sample[(ch * h + sy) * w + sx];
                        }
                    }
                }
                sample.copy_from_slice(&scratch);
            }
        }
        if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
            for ch in 0..c {
                for y in 0..h {
                    let row = (ch * h + y) * w;
                    sample[row..row + w].reverse();
                }
            }
        }
    }
}

/// Shuffled sample order for one epoch, derived statelessly from the seed.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..len as u32).collect();
    let mut rng = rng_from_seed(substream_seed2(seed, Stream::BatchOrder, epoch, 0));
    order.shuffle(&mut rng);
    order
}

/// Small self-contained four-class texture task (horizontal stripes,
/// vertical stripes, checkerboard, flat), one channel, 8x8. Useful for
/// smoke runs and examples that should not depend on downloaded data.
pub fn synthetic_textures(n: usize, seed: u64, tag: SplitTag) -> Dataset {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng_from_seed(seed);
    let mut images = Tensor::zeros(&[n, 1, 8, 8]);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let class = (s + seed as usize) % 4;
        let sample = &mut images.data_mut()[s * 64..(s + 1) * 64];
        for y in 0..8 {
            for x in 0..8 {
                let pattern = match class {
                    0 => (y % 2) as f32,
                    1 => (x % 2) as f32,
                    2 => ((x + y) % 2) as f32,
                    _ => 0.5,
                };
                let noise: f32 = StandardNormal.sample(&mut rng);
                sample[y * 8 + x] = pattern + noise * 0.1;
            }
        }
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        n_classes: 4,
        tag,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn synthetic_idx(dir: &Path, count: usize) -> (PathBuf, PathBuf) {
        let images = dir.join("img-idx3-ubyte");
        let labels = dir.join("lab-idx1-ubyte");
        let pixels: Vec<u8> = (0..count * 16).map(|i| (i * 37 % 256) as u8).collect();
        let labs: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        write_idx(&images, &labels, &pixels, &labs, 4, 4).unwrap();
        (images, labels)
    }

    #[test]
    fn idx_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let (images, labels) = synthetic_idx(dir.path(), 12);
        let ds = load_idx(&images, &labels, 10).unwrap();
        assert_eq!(ds.images.shape(), &[12, 1, 4, 4]);
        for (i, v) in ds.images.data().iter().enumerate() {
            assert_eq!(*v, (i * 37 % 256) as u8 as f32 / 255.0);
        }
        assert_eq!(ds.labels[3], 3);
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let (images, labels) = synthetic_idx(dir.path(), 4);
        let mut bytes = fs::read(&images).unwrap();
        bytes[3] = 0x42;
        fs::write(&images, bytes).unwrap();
        let err = load_idx(&images, &labels, 10).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn idx_reports_truncation_byte_counts() {
        let dir = tempdir().unwrap();
        let (images, labels) = synthetic_idx(dir.path(), 4);
        let bytes = fs::read(&images).unwrap();
        fs::write(&images, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_idx(&images, &labels, 10).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("75") && msg.contains("80"), "{msg}");
    }

    #[test]
    fn idx_rejects_out_of_range_labels() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("i");
        let labels = dir.path().join("l");
        write_idx(&images, &labels, &[0u8; 32], &[0, 13], 4, 4).unwrap();
        let err = load_idx(&images, &labels, 10).unwrap_err();
        assert!(err.to_string().contains("13"), "{err}");
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = tempdir().unwrap();
        let (images, _) = synthetic_idx(dir.path(), 4);
        let other = tempdir().unwrap();
        let (_, labels) = synthetic_idx(other.path(), 5);
        assert!(load_idx(&images, &labels, 10).is_err());
    }

    #[test]
    fn cifar_synthetic_fixture() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = vec![7u8]; // label
        bytes.extend((0..CIFAR_PIXELS).map(|i| (i % 251) as u8));
        bytes.push(3); // second record
        bytes.extend(std::iter::repeat(128u8).take(CIFAR_PIXELS));
        fs::write(&path, &bytes).unwrap();

        let ds = load_cifar(&[path.clone()], CifarVariant::Ten).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.data()[0], 0.0);
        assert_eq!(ds.images.data()[1], 1.0 / 255.0);
        assert_eq!(ds.images.data()[CIFAR_PIXELS], 128.0 / 255.0);

        // Truncated file: not a whole record.
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_cifar(&[path], CifarVariant::Ten).is_err());
    }

    #[test]
    fn cifar_hundred_uses_fine_label() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.bin");
        let mut bytes = vec![4u8, 93u8]; // coarse, fine
        bytes.extend(std::iter::repeat(0u8).take(CIFAR_PIXELS));
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar(&[path], CifarVariant::Hundred).unwrap();
        assert_eq!(ds.labels, vec![93]);
    }

    fn small_dataset(count: usize) -> Dataset {
        let data: Vec<f32> = (0..count * 4).map(|i| i as f32 / 100.0).collect();
        Dataset {
            images: Tensor::from_vec(&[count, 1, 2, 2], data).unwrap(),
            labels: (0..count).map(|i| i % 3).collect(),
            n_classes: 3,
            tag: SplitTag::Train,
        }
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let ds = small_dataset(20);
        let (train, val) = split(&ds, 5, 99).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(val.len(), 5);
        let (train2, val2) = split(&ds, 5, 99).unwrap();
        assert_eq!(train.images.data(), train2.images.data());
        assert_eq!(val.labels, val2.labels);

        // Union of first pixels covers the original multiset.
        let mut seen: Vec<f32> = train
            .images
            .data()
            .chunks(4)
            .chain(val.images.data().chunks(4))
            .map(|s| s[0])
            .collect();
        let mut orig: Vec<f32> = ds.images.data().chunks(4).map(|s| s[0]).collect();
        seen.sort_by(f32::total_cmp);
        orig.sort_by(f32::total_cmp);
        assert_eq!(seen, orig);

        let (train3, _) = split(&ds, 5, 100).unwrap();
        assert_ne!(train.images.data(), train3.images.data());
    }

    #[test]
    fn normalize_identity_and_stats() {
        let mut ds = small_dataset(10);
        let before = ds.images.clone();
        normalize(
            &mut ds,
            &ChannelStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
        )
        .unwrap();
        assert_eq!(ds.images.data(), before.data());

        let stats = compute_stats(&ds);
        normalize(&mut ds, &stats).unwrap();
        let after = compute_stats(&ds);
        assert!(after.mean[0].abs() <= 1e-5);
        assert!((after.std[0] - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn stats_sidecar_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let stats = ChannelStats {
            mean: vec![0.1307],
            std: vec![0.3081],
        };
        store_stats(&path, &stats).unwrap();
        assert_eq!(load_stats(&path).unwrap(), stats);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let mut batch = small_dataset(4).images;
        let before = batch.clone();
        augment_batch(&mut batch, &AugmentationPolicy::disabled(), 1, 0, 0);
        assert_eq!(batch.data(), before.data());
    }

    #[test]
    fn certain_flip_mirrors_exactly_and_is_involutive() {
        let mut batch =
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let policy = AugmentationPolicy {
            pad_crop: 0,
            flip_prob: 1.0,
        };
        augment_batch(&mut batch, &policy, 5, 0, 0);
        assert_eq!(batch.data(), &[2.0, 1.0, 4.0, 3.0]);
        augment_batch(&mut batch, &policy, 5, 0, 0);
        assert_eq!(batch.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn augmentation_preserves_shape_and_range() {
        let mut batch = small_dataset(6).images;
        let shape = batch.shape().to_vec();
        let (lo, hi) = (0.0f32, 0.23f32);
        let policy = AugmentationPolicy {
            pad_crop: 1,
            flip_prob: 0.5,
        };
        augment_batch(&mut batch, &policy, 7, 3, 11);
        assert_eq!(batch.shape(), &shape[..]);
        for v in batch.data() {
            assert!(*v >= lo && *v <= hi);
        }
        // Deterministic in (seed, epoch, batch).
        let mut again = small_dataset(6).images;
        augment_batch(&mut again, &policy, 7, 3, 11);
        assert_eq!(batch.data(), again.data());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(100, 1, 0);
        let b = epoch_order(100, 1, 0);
        assert_eq!(a, b);
        let c = epoch_order(100, 1, 1);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<u32>>());
    }
}
