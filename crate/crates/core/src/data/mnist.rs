use std::path::Path;

use super::{normalize_channels, read, Dataset, Split};
use crate::error::{Error, Result};

pub const MEAN: f32 = 0.1307;
pub const STD: f32 = 0.3081;

pub const FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedDataset { path: path.to_path_buf(), reason: reason.into() }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX image file; returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0803 {
        return Err(malformed(path, "not an IDX image file (bad magic)"));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(malformed(path, format!("expected {} pixel bytes, found {}", n * rows * cols, body.len())));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0801 {
        return Err(malformed(path, "not an IDX label file (bad magic)"));
    }
    let n = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(malformed(path, format!("expected {n} labels, found {}", body.len())));
    }
    if let Some(&bad) = body.iter().find(|&&l| l > 9) {
        return Err(malformed(path, format!("label {bad} outside 0..=9")));
    }
    Ok(body.to_vec())
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let (n, rows, cols, pixels) = parse_idx_images(&read(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read(&lp)?, &lp)?;
    if labels.len() != n {
        return Err(malformed(&lp, format!("{} labels for {n} images", labels.len())));
    }
    if (rows, cols) != (28, 28) {
        return Err(malformed(&ip, format!("expected 28x28 images, found {rows}x{cols}")));
    }
    let images = normalize_channels(&pixels, 1, &[MEAN], &[STD]);
    Dataset::new([1, rows, cols], images, labels.into_iter().map(u16::from).collect())
}

/// Reads the four raw IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Split> {
    Ok(Split { train: load_pair(dir, FILES[0], FILES[1])?, test: load_pair(dir, FILES[2], FILES[3])? })
}

#[cfg(test)]
pub(crate) fn idx_images(images: &[[u8; 784]]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    out.extend((images.len() as u32).to_be_bytes());
    out.extend(28u32.to_be_bytes());
    out.extend(28u32.to_be_bytes());
    for im in images {
        out.extend_from_slice(im);
    }
    out
}

#[cfg(test)]
pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_a_synthetic_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = [0u8; 784];
        a[0] = 255;
        let b = [0u8; 784];
        std::fs::write(dir.path().join(FILES[0]), idx_images(&[a, b])).unwrap();
        std::fs::write(dir.path().join(FILES[1]), idx_labels(&[3, 9])).unwrap();
        std::fs::write(dir.path().join(FILES[2]), idx_images(&[b])).unwrap();
        std::fs::write(dir.path().join(FILES[3]), idx_labels(&[0])).unwrap();
        let split = load_mnist(dir.path()).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.train.labels, vec![3, 9]);
        assert!((split.train.images[0] - (1.0 - MEAN) / STD).abs() < 1e-6);
        assert!((split.test.images[5] + MEAN / STD).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x");
        assert!(parse_idx_images(&[0, 0, 8, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], p).is_err());
        let mut good = idx_images(&[[0u8; 784]]);
        good.pop();
        assert!(matches!(parse_idx_images(&good, p), Err(Error::MalformedDataset { .. })));
        assert!(parse_idx_labels(&idx_labels(&[12]), p).is_err());
    }
}
