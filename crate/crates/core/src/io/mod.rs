//! Dataset readers, NetPBM image output, the checkpoint container and the
//! `key = value` configuration format.

pub mod checkpoint;
pub mod config;
mod dataset;
mod netpbm;

pub use checkpoint::{Checkpoint, Section, SectionTag, FORMAT_VERSION};
pub use config::ConfigFile;
pub use dataset::{
    load_cifar10, load_mnist_dir, load_mnist_idx, load_netpbm_dir, Dataset, DatasetSpec, Split,
};
pub use netpbm::{read_image, write_image_grid};

use std::fs;
use std::path::Path;

/// Malformed-input errors from the file readers.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{file}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { file: String, expected: u32, found: u32 },

    #[error("{file}: truncated, need {expected} bytes but found {found}")]
    Truncated { file: String, expected: usize, found: usize },

    #[error("{file}: dimension mismatch: {detail}")]
    DimensionMismatch { file: String, detail: String },

    #[error("{file}: {len} bytes is not a whole number of {record}-byte records")]
    RecordBoundary { file: String, len: usize, record: usize },

    #[error("unsupported channel count {0}; NetPBM supports 1 (P5) or 3 (P6)")]
    UnsupportedChannels(usize),

    #[error("{file}: {detail}")]
    Malformed { file: String, detail: String },
}

/// Writes `bytes` to `path` through a sibling temporary file so readers
/// never observe a half-written output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
