use std::fs;
use std::path::{Path, PathBuf};

use super::DataError;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Description of a dataset as loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub sources: Vec<PathBuf>,
}

/// Images in `[N, C, H, W]` with values in `[0, 1]`, plus optional labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(spec: DatasetSpec, images: Tensor, labels: Vec<u8>) -> Result<Self> {
        let n = images.dims4("dataset")?[0];
        if !labels.is_empty() && labels.len() != n {
            return Err(Error::InvalidArgument(format!("{} labels for {n} images", labels.len())));
        }
        Ok(Dataset { spec, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// First `count` images (or all of them if fewer).
    pub fn take(&self, count: usize) -> Result<Dataset> {
        self.range(0, count.min(self.len()))
    }

    pub fn range(&self, start: usize, count: usize) -> Result<Dataset> {
        Ok(Dataset {
            spec: self.spec.clone(),
            images: self.images.slice_batch(start, count)?,
            labels: if self.labels.is_empty() {
                Vec::new()
            } else {
                self.labels[start..start + count].to_vec()
            },
        })
    }

    /// Splits off the last `fraction` of the images as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("held-out fraction {fraction} outside [0, 1)")));
        }
        let held = ((self.len() as f64) * fraction).round() as usize;
        let keep = self.len() - held;
        Ok((self.range(0, keep)?, self.range(keep, held)?))
    }
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn need(file: &str, bytes: &[u8], expected: usize) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Truncated { file: file.to_string(), expected, found: bytes.len() });
    }
    Ok(())
}

/// Parses an IDX image file (`0x00000803`, big-endian `count, rows, cols`).
pub fn parse_idx_images(file: &str, bytes: &[u8]) -> Result<Tensor, DataError> {
    need(file, bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { file: file.to_string(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let body = n * rows * cols;
    need(file, bytes, 16 + body)?;
    if bytes.len() != 16 + body {
        return Err(DataError::DimensionMismatch {
            file: file.to_string(),
            detail: format!("header says {n}x{rows}x{cols} but payload has {} bytes", bytes.len() - 16),
        });
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new([n, 1, rows, cols], data).expect("size checked"))
}

/// Parses an IDX label file (`0x00000801`, big-endian `count`).
pub fn parse_idx_labels(file: &str, bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    need(file, bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { file: file.to_string(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4) as usize;
    need(file, bytes, 8 + n)?;
    if bytes.len() != 8 + n {
        return Err(DataError::DimensionMismatch {
            file: file.to_string(),
            detail: format!("header says {n} labels but payload has {} bytes", bytes.len() - 8),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an IDX image file and, optionally, its label file.
pub fn load_mnist_idx(images: &Path, labels: Option<&Path>) -> Result<(Tensor, Vec<u8>)> {
    let imgs = parse_idx_images(&name_of(images), &fs::read(images)?)?;
    let labs = match labels {
        Some(p) => {
            let l = parse_idx_labels(&name_of(p), &fs::read(p)?)?;
            if l.len() != imgs.shape()[0] {
                return Err(DataError::DimensionMismatch {
                    file: name_of(p),
                    detail: format!("{} labels for {} images", l.len(), imgs.shape()[0]),
                }
                .into());
            }
            l
        }
        None => Vec::new(),
    };
    Ok((imgs, labs))
}

/// Loads MNIST from a directory holding the four canonical IDX files.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lab = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (images, labels) = load_mnist_idx(&img, lab.exists().then_some(lab.as_path()))?;
    let [n, c, h, w] = images.dims4("mnist")?;
    let spec = DatasetSpec {
        name: "mnist".into(),
        channels: c,
        height: h,
        width: w,
        train_count: if split == Split::Train { n } else { 0 },
        test_count: if split == Split::Test { n } else { 0 },
        sources: vec![img],
    };
    Dataset::new(spec, images, labels)
}

/// Parses CIFAR-10 binary batches: per record one label byte, then the
/// red, green and blue 32x32 planes.
pub fn parse_cifar10(file: &str, bytes: &[u8]) -> Result<(Tensor, Vec<u8>), DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::RecordBoundary { file: file.to_string(), len: bytes.len(), record: CIFAR_RECORD });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new([n, 3, 32, 32], data).expect("size checked"), labels))
}

pub fn load_cifar10(path: &Path) -> Result<(Tensor, Vec<u8>)> {
    Ok(parse_cifar10(&name_of(path), &fs::read(path)?)?)
}

/// Loads every `.pgm`/`.ppm` file in `dir` (sorted by name); all must share one shape.
pub fn load_netpbm_dir(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::Malformed { file: name_of(dir), detail: "no NetPBM images found".into() }.into());
    }
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for f in &files {
        let img = super::read_image(f)?;
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(DataError::DimensionMismatch {
                    file: name_of(f),
                    detail: format!("shape {:?} differs from {:?}", img.shape(), s),
                }
                .into())
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
    }
    let s = shape.expect("non-empty");
    let images = Tensor::new([files.len(), s[1], s[2], s[3]], data)?;
    let spec = DatasetSpec {
        name: name_of(dir),
        channels: s[1],
        height: s[2],
        width: s[3],
        train_count: files.len(),
        test_count: 0,
        sources: files,
    };
    Dataset::new(spec, images, Vec::new())
}
