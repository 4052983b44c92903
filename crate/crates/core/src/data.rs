//! Labelled image datasets, standard-format loaders and stratified splits.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
/// Bytes per CIFAR-10 record: one label byte then 32x32 R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Vec<Tensor<T>>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            inputs: self.inputs.iter().map(|t| t.cast()).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Reads `path`, or `path.gz` when only the compressed file exists.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let (actual, compressed) = if path.exists() {
        (path.to_path_buf(), path.extension().is_some_and(|e| e == "gz"))
    } else if gz.exists() {
        (gz, true)
    } else {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found (also tried .gz)"),
        ));
    };
    let raw = std::fs::read(&actual).map_err(|e| Error::io(&actual, e))?;
    if !compressed {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::io(&actual, e))?;
    Ok(out)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Dataset("truncated IDX header".into()))
}

/// Parses an IDX image file into raw `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Dataset(format!(
            "IDX image magic {magic}, expected {IDX_IMAGE_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = count * rows * cols;
    if body.len() < need {
        return Err(Error::Dataset(format!(
            "IDX image file truncated: {} of {need} pixel bytes",
            body.len()
        )));
    }
    let images = body[..need].chunks(rows * cols).map(<[u8]>::to_vec).collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Dataset(format!(
            "IDX label magic {magic}, expected {IDX_LABEL_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Dataset(format!(
            "IDX label file truncated: {} of {count} labels",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

/// Grayscale bytes to a `(size, size, 1)` tensor in [0, 1], zero-padded
/// symmetrically (28x28 MNIST digits become 32x32).
fn padded_gray<T: Scalar>(pixels: &[u8], rows: usize, cols: usize, size: usize) -> Tensor<T> {
    let top = (size - rows) / 2;
    let left = (size - cols) / 2;
    let mut data = vec![T::zero(); size * size];
    for r in 0..rows {
        for c in 0..cols {
            data[(r + top) * size + c + left] = T::of(pixels[r * cols + c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![size, size, 1], data).expect("padded image shape")
}

/// Loads one IDX image/label file pair.
pub fn load_idx_pair<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let (rows, cols, raw) = parse_idx_images(&read_maybe_gz(images)?)?;
    let lab = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if raw.len() != lab.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels in {}",
            raw.len(),
            lab.len(),
            labels.display()
        )));
    }
    let size = rows.max(cols).max(32);
    let size = size + size % 2;
    let inputs = raw.iter().map(|p| padded_gray(p, rows, cols, size)).collect();
    Dataset::new(
        inputs,
        lab.into_iter().map(usize::from).collect(),
        10,
        Split::Full,
    )
}

/// Loads MNIST from `root`: the `train-*` pair and/or the `t10k-*` pair
/// (plain or gzipped), concatenated in that order.
pub fn load_mnist<T: Scalar>(root: impl AsRef<Path>) -> Result<Dataset<T>> {
    let root = root.as_ref();
    let mut parts = Vec::new();
    for prefix in ["train", "t10k"] {
        let images = root.join(format!("{prefix}-images-idx3-ubyte"));
        let labels = root.join(format!("{prefix}-labels-idx1-ubyte"));
        let present = |p: &Path| p.exists() || PathBuf::from(format!("{}.gz", p.display())).exists();
        if present(&images) || present(&labels) {
            parts.push(load_idx_pair::<T>(&images, &labels)?);
        }
    }
    concat(parts, root)
}

pub fn parse_cifar10_batch<T: Scalar>(bytes: &[u8]) -> Result<(Vec<Tensor<T>>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "CIFAR-10 batch of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Dataset(format!("CIFAR-10 label {label} out of range")));
        }
        let planes = &rec[1..];
        let mut data = Vec::with_capacity(3072);
        for p in 0..1024 {
            for c in 0..3 {
                data.push(T::of(planes[c * 1024 + p] as f64 / 255.0));
            }
        }
        inputs.push(Tensor::new(vec![32, 32, 3], data)?);
        labels.push(label);
    }
    Ok((inputs, labels))
}

/// Loads the CIFAR-10 binary batches found in `root` (`data_batch_1..5.bin`,
/// then `test_batch.bin`).
pub fn load_cifar10<T: Scalar>(root: impl AsRef<Path>) -> Result<Dataset<T>> {
    let root = root.as_ref();
    let names = (1..=5)
        .map(|i| format!("data_batch_{i}.bin"))
        .chain(std::iter::once("test_batch.bin".to_string()));
    let mut parts = Vec::new();
    for name in names {
        let path = root.join(name);
        if path.exists() {
            let (inputs, labels) = parse_cifar10_batch(&read_maybe_gz(&path)?)?;
            parts.push(Dataset::new(inputs, labels, 10, Split::Full)?);
        }
    }
    concat(parts, root)
}

fn concat<T: Scalar>(parts: Vec<Dataset<T>>, root: &Path) -> Result<Dataset<T>> {
    let mut iter = parts.into_iter();
    let mut all = iter
        .next()
        .ok_or_else(|| Error::Dataset(format!("no dataset files found in {}", root.display())))?;
    for p in iter {
        all.inputs.extend(p.inputs);
        all.labels.extend(p.labels);
    }
    Ok(all)
}

/// Deterministic class-stratified split by integer ratio (e.g. 4:1:1).
///
/// Each class is shuffled and cut proportionally, with remainders handed to
/// the splits with the largest fractional share. Falls back to a plain
/// shuffled split when some class is smaller than the number of splits.
pub fn split_dataset<T: Scalar>(
    data: &Dataset<T>,
    ratio: [u32; 3],
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    let [a, b, c] = split_indices(&data.labels, data.num_classes, ratio, seed)?;
    Ok((
        data.subset(&a, Split::Train),
        data.subset(&b, Split::Val),
        data.subset(&c, Split::Test),
    ))
}

pub fn split_indices(
    labels: &[usize],
    num_classes: usize,
    ratio: [u32; 3],
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    let total: u32 = ratio.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("split ratio must not be all zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let parts_needed = ratio.iter().filter(|&&r| r > 0).count();
    let stratify = by_class
        .iter()
        .all(|c| c.is_empty() || c.len() >= parts_needed);
    let groups: Vec<Vec<usize>> = if stratify {
        by_class
    } else {
        log::warn!("dataset too small to stratify; using a plain shuffled split");
        vec![(0..labels.len()).collect()]
    };
    let mut out: [Vec<usize>; 3] = Default::default();
    for mut group in groups {
        group.shuffle(&mut rng);
        let counts = proportional_counts(group.len(), ratio);
        let mut start = 0;
        for (k, n) in counts.into_iter().enumerate() {
            out[k].extend_from_slice(&group[start..start + n]);
            start += n;
        }
    }
    for part in out.iter_mut() {
        part.shuffle(&mut rng);
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` items by `ratio`.
fn proportional_counts(n: usize, ratio: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    let mut counts = [0usize; 3];
    let mut remainders = [(0u64, 0usize); 3];
    for k in 0..3 {
        let exact = n as u64 * ratio[k] as u64;
        counts[k] = (exact / total) as usize;
        remainders[k] = (exact % total, k);
    }
    let mut left = n - counts.iter().sum::<usize>();
    remainders.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    for &(_, k) in &remainders {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Procedurally generated images: each class is a distinct bar/blob pattern
/// plus uniform noise. Used for fast tests and pipeline smoke runs.
pub fn synthetic<T: Scalar>(
    count: usize,
    shape: [usize; 3],
    num_classes: usize,
    noise: f64,
    seed: u64,
) -> Dataset<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, c] = shape;
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for n in 0..count {
        let label = n % num_classes;
        let row = (label * h) / num_classes;
        let col = ((label * 7 + 3) % num_classes * w) / num_classes;
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let on_row = y.abs_diff(row) <= h / 16;
                let on_col = x.abs_diff(col) <= w / 16;
                let base = if on_row || on_col { 0.8 } else { 0.1 };
                for _ in 0..c {
                    let v: f64 = base + noise * rng.gen_range(-1.0..1.0);
                    data.push(T::of(v.clamp(0.0, 1.0)));
                }
            }
        }
        inputs.push(Tensor::new(vec![h, w, c], data).unwrap());
        labels.push(label);
    }
    Dataset {
        inputs,
        labels,
        num_classes,
        split: Split::Full,
    }
}
