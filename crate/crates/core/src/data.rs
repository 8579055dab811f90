//! IDX (MNIST) and CIFAR-10 binary loaders plus deterministic splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Where a dataset came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub sources: Vec<PathBuf>,
    /// Hex SHA-256 per source file.
    pub sha256: Vec<String>,
    /// Per-channel mean/std normalisation applied after /255 scaling.
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(n, c, h, w)` with pixels in `[0, 1]` unless normalised.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidValue(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Samples at `indices`, in that order. Empty selections yield an empty
    /// dataset whose image tensor keeps the per-sample shape.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            images: self.images.select(indices),
            labels,
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Subtracts the per-channel mean and divides by the per-channel std.
    pub fn normalize(&mut self) {
        let shape = self.images.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for &v in &self.images.data()[base..base + plane] {
                    sum += v;
                    sq += v * v;
                }
            }
            let count = (n * plane) as f64;
            let mean = sum / count;
            let std = (sq / count - mean * mean).max(1e-12).sqrt();
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for v in &mut self.images.data_mut()[base..base + plane] {
                    *v = (*v - mean) / std;
                }
            }
        }
        self.provenance.normalized = true;
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX image file held in memory into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((n, rows, cols, &bytes[16..expected]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[8..expected])
}

/// Loads an IDX image/label file pair as `(n, 1, rows, cols)` images in `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = fs::read(ip)?;
    let label_bytes = fs::read(lp)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = 10.max(labels.iter().max().map_or(0, |m| m + 1));
    let mut ds = Dataset::new(images, labels, classes)?;
    ds.provenance = Provenance {
        sources: vec![ip.to_path_buf(), lp.to_path_buf()],
        sha256: vec![sha256_hex(&image_bytes), sha256_hex(&label_bytes)],
        normalized: false,
    };
    Ok(ds)
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut prov = Provenance::default();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a multiple of {CIFAR_RECORD}",
                p.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format(format!(
                    "{}: label {label} >= 10",
                    p.display()
                )));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&v| f64::from(v) / 255.0));
        }
        prov.sources.push(p.to_path_buf());
        prov.sha256.push(sha256_hex(&bytes));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data)?;
    let mut ds = Dataset::new(images, labels, 10)?;
    ds.provenance = prov;
    Ok(ds)
}

/// Seeded sample of `n` items without replacement: `(validation, rest)`.
/// Both parts keep the original relative order.
pub fn split_validation(data: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (val, rest) = split_indices(data.len(), n, seed)?;
    Ok((data.subset(&val), data.subset(&rest)))
}

/// Index form of [`split_validation`].
pub fn split_indices(len: usize, n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n > len {
        return Err(Error::InvalidValue(format!(
            "cannot draw {n} validation samples from {len}"
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut chosen = vec![false; len];
    for i in index::sample(&mut rng, len, n) {
        chosen[i] = true;
    }
    let val = (0..len).filter(|&i| chosen[i]).collect();
    let rest = (0..len).filter(|&i| !chosen[i]).collect();
    Ok((val, rest))
}

/// Standard MNIST file names inside a directory, training or test split.
pub fn mnist_paths(dir: impl AsRef<Path>, train: bool) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let (i, l) = mnist_paths(dir, train);
    load_idx(i, l)
}

/// CIFAR-10 binary batches in a directory: `data_batch_{1..5}.bin` or
/// `test_batch.bin`.
pub fn load_cifar10_dir(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let paths: Vec<PathBuf> = if train {
        (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect()
    } else {
        vec![dir.join("test_batch.bin")]
    };
    load_cifar10_bin(&paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..8).map(|i| i * 30).collect();
        let ip = write(dir.path(), "i", &idx_images(2, 2, 2, &px));
        let lp = write(dir.path(), "l", &idx_labels(&[5, 0]));
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![5, 0]);
        assert_eq!(ds.images.data()[1], 30.0 / 255.0);
        assert_eq!(ds.provenance.sha256.len(), 2);
        assert_eq!(ds.provenance.sha256[0].len(), 64);
    }

    #[test]
    fn idx_bad_magic() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[..4].copy_from_slice(&0xDEAD_BEEFu32.to_be_bytes());
        assert!(
            matches!(parse_idx_images(&bytes), Err(Error::Format(m)) if m.contains("0xdeadbeef"))
        );
        let mut lbytes = idx_labels(&[1]);
        lbytes[..4].copy_from_slice(&0xDEAD_BEEFu32.to_be_bytes());
        assert!(matches!(parse_idx_labels(&lbytes), Err(Error::Format(_))));
    }

    #[test]
    fn idx_truncated_payload_reports_sizes() {
        let bytes = idx_images(3, 2, 2, &[0; 7]);
        match parse_idx_images(&bytes) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, 16 + 12);
                assert_eq!(actual, 16 + 7);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &idx_images(2, 1, 1, &[0, 1]));
        let lp = write(dir.path(), "l", &idx_labels(&[1, 2, 3]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let p = write(dir.path(), "b.bin", &rec);
        let ds = load_cifar10_bin(&[&p]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        // green plane starts at 1024
        assert_eq!(ds.images.data()[1024], 0.0);
        assert_eq!(ds.images.data()[1025], 1.0 / 255.0);
    }

    #[test]
    fn cifar_bad_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "b.bin", &[0u8; 3072]);
        assert!(matches!(load_cifar10_bin(&[&p]), Err(Error::Format(_))));
    }

    fn toy(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn split_edges() {
        let ds = toy(10);
        let (v, r) = split_indices(ds.len(), 0, 1).unwrap();
        assert!(v.is_empty());
        assert_eq!(r.len(), 10);
        let (v, r) = split_indices(ds.len(), 10, 1).unwrap();
        assert_eq!(v.len(), 10);
        assert!(r.is_empty());
        assert!(split_validation(&ds, 11, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let ds = toy(100);
        let (a, b) = split_indices(ds.len(), 30, 42).unwrap();
        let (c, d) = split_indices(ds.len(), 30, 42).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (val, rest) = split_validation(&ds, 30, 42).unwrap();
        assert_eq!(val.len() + rest.len(), 100);
        assert_eq!(val.images.data()[0], a[0] as f64);
    }

    #[test]
    fn labels_must_fit_classes() {
        let images = Tensor::zeros(vec![2, 1]);
        assert!(Dataset::new(images.clone(), vec![0, 3], 3).is_err());
        assert!(Dataset::new(images, vec![0], 3).is_err());
    }
}
