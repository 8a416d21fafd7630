//! MNIST IDX loading, binarization and train/validation splitting.
//!
//! Images keep their original 8-bit grayscale internally; the network sees
//! the binarized pixels (`1` when `gray / 255 > 0.5`).
//!
//! The dataset cache is a flat little-endian file:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"QDBD"`                         |
//! | 4      | 2    | format version (`1`)                    |
//! | 6      | 2    | number of classes                       |
//! | 8      | 4    | item count `N`                          |
//! | 12     | 4    | pixels per image `D`                    |
//! | 16     | N*D  | grayscale bytes, row-major              |
//! | 16+N*D | N    | label bytes                             |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

const CACHE_MAGIC: &[u8; 4] = b"QDBD";
const CACHE_VERSION: u16 = 1;
const CACHE_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: bad magic number at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    MagicMismatch {
        path: PathBuf,
        offset: u64,
        expected: u32,
        found: u32,
    },
    #[error("{path}: item count mismatch at offset {offset}: {images} images but {labels} labels")]
    CountMismatch {
        path: PathBuf,
        offset: u64,
        images: usize,
        labels: usize,
    },
    #[error("{path}: file truncated at offset {offset} (needed {needed} more bytes)")]
    TruncatedFile {
        path: PathBuf,
        offset: u64,
        needed: u64,
    },
    #[error("{path}: label {label} at offset {offset} is not a class index below {classes}")]
    BadLabel {
        path: PathBuf,
        offset: u64,
        label: u8,
        classes: usize,
    },
    #[error("{path}: unsupported cache version {found} (this build reads version {CACHE_VERSION})")]
    VersionMismatch { path: PathBuf, found: u16 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Strict threshold: a pixel is on when its intensity exceeds one half.
#[inline]
pub fn binarize(value: f64) -> u8 {
    u8::from(value > 0.5)
}

#[inline]
fn binarize_gray(gray: u8) -> u8 {
    binarize(gray as f64 / 255.0)
}

/// Labeled binary images, all of the same dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledBinaryDataset {
    dim: usize,
    num_classes: usize,
    gray: Vec<u8>,
    binary: Vec<u8>,
    labels: Vec<u8>,
}

impl LabeledBinaryDataset {
    /// Builds a dataset from grayscale bytes (`labels.len() * dim` of them).
    ///
    /// Panics if the lengths disagree or a label is out of range.
    pub fn from_gray(dim: usize, num_classes: usize, gray: Vec<u8>, labels: Vec<u8>) -> Self {
        assert_eq!(gray.len(), labels.len() * dim, "image/label size mismatch");
        assert!(
            labels.iter().all(|&l| (l as usize) < num_classes),
            "label out of range"
        );
        let binary = gray.iter().map(|&g| binarize_gray(g)).collect();
        Self {
            dim,
            num_classes,
            gray,
            binary,
            labels,
        }
    }

    /// Builds a dataset directly from binary pixels (0/1 entries).
    pub fn from_binary(dim: usize, num_classes: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Self {
        assert!(pixels.iter().all(|&p| p <= 1), "pixels must be 0 or 1");
        let gray = pixels.iter().map(|&p| if p == 1 { 255 } else { 0 }).collect();
        Self::from_gray(dim, num_classes, gray, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Binary pixels of item `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.binary[i * self.dim..(i + 1) * self.dim]
    }

    /// Original grayscale bytes of item `i`.
    pub fn gray_image(&self, i: usize) -> &[u8] {
        &self.gray[i * self.dim..(i + 1) * self.dim]
    }

    /// One-hot label vector `t` of item `i`.
    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.num_classes];
        t[self.label(i)] = 1.0;
        t
    }

    /// Binary images of `indices` as an `(indices.len(), dim)` matrix.
    pub fn input_matrix(&self, indices: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((indices.len(), self.dim));
        for (row, &i) in m.rows_mut().into_iter().zip(indices) {
            for (dst, &p) in row.into_iter().zip(self.image(i)) {
                *dst = p as f64;
            }
        }
        m
    }

    /// One-hot labels of `indices` as an `(indices.len(), classes)` matrix.
    pub fn one_hot_matrix(&self, indices: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((indices.len(), self.num_classes));
        for (r, &i) in indices.iter().enumerate() {
            m[[r, self.label(i)]] = 1.0;
        }
        m
    }

    /// A new dataset holding items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut gray = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            gray.extend_from_slice(self.gray_image(i));
            labels.push(self.labels[i]);
        }
        Self::from_gray(self.dim, self.num_classes, gray, labels)
    }

    /// The first `n` items (or all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Seeded shuffle then split; the validation part gets
    /// `floor(len * validation_fraction)` items.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (Self, Self) {
        assert!(
            (0.0..1.0).contains(&validation_fraction),
            "validation fraction must lie in [0, 1)"
        );
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * validation_fraction).floor() as usize;
        let (val, train) = idx.split_at(n_val);
        (self.select(train), self.select(val))
    }

    /// Writes the flat cache file described in the module docs.
    pub fn write_cache(&self, path: &Path) -> Result<(), DatasetError> {
        let mut buf = Vec::with_capacity(CACHE_HEADER_LEN + self.gray.len() + self.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.gray);
        buf.extend_from_slice(&self.labels);
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))
    }

    pub fn read_cache(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let truncated = |offset: usize, needed: usize| DatasetError::TruncatedFile {
            path: path.to_path_buf(),
            offset: offset as u64,
            needed: (needed - (bytes.len() - offset.min(bytes.len()))) as u64,
        };
        if bytes.len() < CACHE_HEADER_LEN {
            return Err(truncated(0, CACHE_HEADER_LEN));
        }
        if &bytes[0..4] != CACHE_MAGIC {
            return Err(DatasetError::MagicMismatch {
                path: path.to_path_buf(),
                offset: 0,
                expected: u32::from_be_bytes(*CACHE_MAGIC),
                found: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CACHE_VERSION {
            return Err(DatasetError::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let classes = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = n * dim + n;
        if bytes.len() < CACHE_HEADER_LEN + body {
            return Err(truncated(CACHE_HEADER_LEN, body));
        }
        let gray = bytes[CACHE_HEADER_LEN..CACHE_HEADER_LEN + n * dim].to_vec();
        let labels = bytes[CACHE_HEADER_LEN + n * dim..CACHE_HEADER_LEN + body].to_vec();
        check_labels(path, &labels, (CACHE_HEADER_LEN + n * dim) as u64, classes)?;
        Ok(Self::from_gray(dim, classes, gray, labels))
    }
}

fn check_labels(path: &Path, labels: &[u8], base: u64, classes: usize) -> Result<(), DatasetError> {
    match labels.iter().position(|&l| l as usize >= classes) {
        Some(i) => Err(DatasetError::BadLabel {
            path: path.to_path_buf(),
            offset: base + i as u64,
            label: labels[i],
            classes,
        }),
        None => Ok(()),
    }
}

/// Cursor over an IDX file that reports offsets in its errors.
struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(Self { path, bytes, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&[u8], DatasetError> {
        if self.bytes.len() - self.pos < n {
            return Err(DatasetError::TruncatedFile {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                needed: (n - (self.bytes.len() - self.pos)) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DatasetError> {
        let found = self.u32_be()?;
        if found != expected {
            return Err(DatasetError::MagicMismatch {
                path: self.path.to_path_buf(),
                offset: 0,
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Reads an IDX image file (magic `0x00000803`): returns `(count, dim, bytes)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    let mut r = IdxReader::open(path)?;
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let data = r.take(n * rows * cols)?.to_vec();
    Ok((n, rows * cols, data))
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let mut r = IdxReader::open(path)?;
    r.magic(LABEL_MAGIC)?;
    let n = r.u32_be()? as usize;
    Ok(r.take(n)?.to_vec())
}

/// Loads a pair of IDX files into a binarized dataset with 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledBinaryDataset, DatasetError> {
    let (n, dim, gray) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(DatasetError::CountMismatch {
            path: labels_path.to_path_buf(),
            offset: 4,
            images: n,
            labels: labels.len(),
        });
    }
    check_labels(labels_path, &labels, 8, NUM_CLASSES)?;
    Ok(LabeledBinaryDataset::from_gray(dim, NUM_CLASSES, gray, labels))
}

/// Standard MNIST file names inside a directory.
#[derive(Debug, Clone)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }
}
