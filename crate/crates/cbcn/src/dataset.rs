//! IDX files on disk and the MNIST-rot variant.

use std::path::{Path, PathBuf};

use cbcn_core::data::{make_rot_variant, parse_idx_images, parse_idx_labels, AugmentSpec, LabeledImageSet};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Offsets added to the rotation seed so the two splits draw independent
/// angles.
const ROT_TRAIN_STREAM: u64 = 0;
const ROT_TEST_STREAM: u64 = 1 << 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_error(path: &Path, e: cbcn_core::Error) -> Error {
    match e {
        cbcn_core::Error::Idx { offset, reason } => Error::Format {
            path: path.to_path_buf(),
            offset,
            reason,
        },
        other => other.into(),
    }
}

/// Loads an image/label file pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledImageSet> {
    let (img, lbl) = (read(images)?, read(labels)?);
    parse_idx_images(&img).map_err(|e| idx_error(images, e))?;
    parse_idx_labels(&lbl).map_err(|e| idx_error(labels, e))?;
    LabeledImageSet::from_idx(&img, &lbl).map_err(|e| idx_error(labels, e))
}

/// The four standard file names under `dir`.
pub fn mnist_files(dir: &Path) -> [PathBuf; 4] {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS].map(|f| dir.join(f))
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl Mnist {
    pub fn load(dir: &Path) -> Result<Self> {
        let [tri, trl, tei, tel] = mnist_files(dir);
        Ok(Self {
            train: load_idx(&tri, &trl)?,
            test: load_idx(&tei, &tel)?,
        })
    }

    /// Keeps the first `n` samples of each split.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Ok(Self {
            train: self.train.truncated(n)?,
            test: self.test.truncated(n)?,
        })
    }

    /// Both splits rotated once, uniformly in [-45, 45] degrees, keyed by
    /// `(seed, split, index)`.
    pub fn rotated(&self, seed: u64) -> Result<Self> {
        let spec = AugmentSpec::default();
        Ok(Self {
            train: make_rot_variant(&self.train, &spec, seed.wrapping_add(ROT_TRAIN_STREAM))?,
            test: make_rot_variant(&self.test, &spec, seed.wrapping_add(ROT_TEST_STREAM))?,
        })
    }
}

/// Lower-case hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
