use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{normalize_channels, read, Dataset, Split};
use crate::error::{Error, Result};

pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const ROOT_DIR: &str = "tiny-imagenet-200";

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedDataset { path: path.to_path_buf(), reason: reason.into() }
}

/// Decodes a 64x64 image into channel-planar RGB bytes.
fn decode(path: &Path) -> Result<Vec<u8>> {
    let img = image::load_from_memory(&read(path)?).map_err(|e| malformed(path, e.to_string()))?.to_rgb8();
    if img.dimensions() != (64, 64) {
        return Err(malformed(path, format!("expected 64x64, found {:?}", img.dimensions())));
    }
    let raw = img.into_raw();
    let mut planar = vec![0u8; raw.len()];
    for (k, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * 4096 + k] = px[c];
        }
    }
    Ok(planar)
}

fn build(files: &[(PathBuf, u16)]) -> Result<Dataset> {
    let mut images = Vec::with_capacity(files.len() * 3 * 64 * 64);
    let mut labels = Vec::with_capacity(files.len());
    for (p, label) in files {
        images.extend(normalize_channels(&decode(p)?, 3, &MEAN, &STD));
        labels.push(*label);
    }
    Dataset::new([3, 64, 64], images, labels)
}

/// Reads the standard `tiny-imagenet-200` directory tree; the labelled
/// validation set serves as the test split.
pub fn load_tiny_imagenet(dir: &Path) -> Result<Split> {
    let root = dir.join(ROOT_DIR);
    let wnids_path = root.join("wnids.txt");
    let wnids_text = String::from_utf8(read(&wnids_path)?).map_err(|e| malformed(&wnids_path, e.to_string()))?;
    let wnids: Vec<&str> = wnids_text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if wnids.len() != 200 {
        return Err(malformed(&wnids_path, format!("expected 200 classes, found {}", wnids.len())));
    }
    let index: HashMap<&str, u16> = wnids.iter().enumerate().map(|(i, w)| (*w, i as u16)).collect();

    let mut train = Vec::new();
    for (label, wnid) in wnids.iter().enumerate() {
        let images = root.join("train").join(wnid).join("images");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&images)
            .map_err(|e| malformed(&images, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        names.sort();
        train.extend(names.into_iter().map(|p| (p, label as u16)));
    }

    let ann_path = root.join("val").join("val_annotations.txt");
    let ann = String::from_utf8(read(&ann_path)?).map_err(|e| malformed(&ann_path, e.to_string()))?;
    let mut val = Vec::new();
    for line in ann.lines().filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split('\t');
        let (Some(file), Some(wnid)) = (cols.next(), cols.next()) else {
            return Err(malformed(&ann_path, format!("bad line `{line}`")));
        };
        let label = *index.get(wnid).ok_or_else(|| malformed(&ann_path, format!("unknown class {wnid}")))?;
        val.push((root.join("val").join("images").join(file), label));
    }
    Ok(Split { train: build(&train)?, test: build(&val)? })
}
