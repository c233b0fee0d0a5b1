#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cbcn::dataset::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use cbcn_core::data::{encode_idx_images, encode_idx_labels, LabeledImageSet};
use cbcn_core::train::TrainConfig;
use cbcn_core::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ten classes: class `c` is a bar whose orientation and offset depend on
/// `c`, plus pixel noise.
pub fn synthetic(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape4::new(n, 1, 28, 28).unwrap();
    let mut images = Tensor4::zeros(s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        let plane = images.plane_mut(i, 0);
        let pos = 4 + 2 * (c % 5) + rng.gen_range(0..2);
        for t in 3..25 {
            let (y, x) = if c < 5 { (pos, t) } else { (t, pos) };
            plane[y * 28 + x] = 1.0;
        }
        for p in plane.iter_mut() {
            *p = (*p + rng.gen_range(0.0..0.2f64)).min(1.0);
        }
        labels.push(c);
    }
    // round-trip through bytes so the set matches what the loader produces
    LabeledImageSet::from_idx(&encode_idx_images(&LabeledImageSet::new(images, labels.clone()).unwrap()), &encode_idx_labels(&labels)).unwrap()
}

/// Writes the four IDX files of a synthetic dataset into `dir`.
pub fn write_dataset(dir: &Path, train: usize, test: usize) {
    let tr = synthetic(train, 1);
    let te = synthetic(test, 2);
    std::fs::write(dir.join(TRAIN_IMAGES), encode_idx_images(&tr)).unwrap();
    std::fs::write(dir.join(TRAIN_LABELS), encode_idx_labels(tr.labels())).unwrap();
    std::fs::write(dir.join(TEST_IMAGES), encode_idx_images(&te)).unwrap();
    std::fs::write(dir.join(TEST_LABELS), encode_idx_labels(te.labels())).unwrap();
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        stages: vec![4, 8],
        batch_size: 16,
        epochs: 2,
        ..TrainConfig::default()
    }
}

/// The real MNIST files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CBCN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join(TRAIN_IMAGES).exists().then_some(dir)
}
