use std::path::Path;

use super::{normalize_channels, read, Dataset, Split};
use crate::error::{Error, Result};

pub const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const RECORD: usize = 1 + 3 * 32 * 32;
pub const BATCH_DIR: &str = "cifar-10-batches-bin";
pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// Splits a binary batch into labels and raw `(3, 32, 32)` pixels.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::MalformedDataset {
            path: path.to_path_buf(),
            reason: format!("size {} is not a multiple of the {RECORD}-byte record", bytes.len()),
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    let mut pixels = Vec::with_capacity(bytes.len());
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] > 9 {
            return Err(Error::MalformedDataset { path: path.to_path_buf(), reason: format!("label {} outside 0..=9", rec[0]) });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn load_files(dir: &Path, files: &[&str]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut images = Vec::new();
    for f in files {
        let p = dir.join(f);
        let (l, px) = parse_cifar_batch(&read(&p)?, &p)?;
        labels.extend(l.into_iter().map(u16::from));
        for im in px.chunks_exact(RECORD - 1) {
            images.extend(normalize_channels(im, 3, &MEAN, &STD));
        }
    }
    Dataset::new([3, 32, 32], images, labels)
}

/// Reads the binary distribution from `dir/cifar-10-batches-bin`.
pub fn load_cifar10(dir: &Path) -> Result<Split> {
    let batches = dir.join(BATCH_DIR);
    Ok(Split { train: load_files(&batches, &TRAIN_FILES)?, test: load_files(&batches, &[TEST_FILE])? })
}
