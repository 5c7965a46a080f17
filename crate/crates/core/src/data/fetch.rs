//! Explicit dataset acquisition (`ibcomm fetch-data`).

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use super::{cifar, mnist, task_dir, tiny_imagenet};
use crate::error::{Error, Result};
use crate::models::Task;

/// npm registry package carrying the raw IDX files.
pub const MNIST_URL: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";

/// SHA-256 of each extracted MNIST file.
pub const MNIST_SHA256: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
const CIFAR_FILE_BYTES: usize = 10_000 * (1 + 3072);

pub const TINY_IMAGENET_URL: &str = "http://cs231n.stanford.edu/tiny-imagenet-200.zip";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads `source` as a URL (`http://`, `https://`) or a local file path.
pub fn read_source(source: &str) -> Result<Vec<u8>> {
    if source.starts_with("http://") || source.starts_with("https://") {
        log::info!("downloading {source}");
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| Error::Fetch(e.to_string()))?;
        let resp = client.get(source).send().map_err(|e| Error::Fetch(format!("{source}: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::Fetch(format!("{source}: HTTP {}", resp.status())));
        }
        let bytes = resp.bytes().map_err(|e| Error::Fetch(format!("{source}: {e}")))?;
        Ok(bytes.to_vec())
    } else {
        let path = source.strip_prefix("file://").unwrap_or(source);
        std::fs::read(path).map_err(|e| Error::Fetch(format!("{path}: {e}")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Calls `keep(name, bytes)` for every regular file in a gzipped tarball.
fn for_each_entry(tgz: &[u8], mut keep: impl FnMut(&str, Vec<u8>) -> Result<()>) -> Result<()> {
    let mut archive = tar::Archive::new(GzDecoder::new(tgz));
    for entry in archive.entries().map_err(|e| Error::Fetch(format!("bad archive: {e}")))? {
        let mut entry = entry.map_err(|e| Error::Fetch(format!("bad archive entry: {e}")))?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let name = entry.path().map_err(|e| Error::Fetch(e.to_string()))?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        keep(&name, bytes)?;
    }
    Ok(())
}

/// Extracts the IDX files from an npm-style tarball into `dir`, checking
/// each against `expected` `(name, sha256)` pairs.
pub fn install_mnist(tgz: &[u8], dir: &Path, expected: &[(&str, &str)]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for_each_entry(tgz, |name, bytes| {
        let base = name.rsplit('/').next().unwrap_or(name);
        if let Some((_, sha)) = expected.iter().find(|(n, _)| *n == base) {
            let got = sha256_hex(&bytes);
            if got != *sha {
                return Err(Error::Fetch(format!("checksum mismatch for {base}: expected {sha}, got {got}")));
            }
            let path = dir.join(base);
            write_atomic(&path, &bytes)?;
            found.push(path);
        }
        Ok(())
    })?;
    if found.len() != expected.len() {
        let missing: Vec<&str> =
            expected.iter().map(|(n, _)| *n).filter(|n| !found.iter().any(|p| p.ends_with(n))).collect();
        return Err(Error::Fetch(format!("archive is missing {missing:?}")));
    }
    Ok(found)
}

/// Extracts the CIFAR-10 binary batches into `dir/cifar-10-batches-bin`.
pub fn install_cifar10(tgz: &[u8], dir: &Path) -> Result<Vec<PathBuf>> {
    let wanted: Vec<&str> = cifar::TRAIN_FILES.iter().copied().chain([cifar::TEST_FILE]).collect();
    let mut found = Vec::new();
    for_each_entry(tgz, |name, bytes| {
        let base = name.rsplit('/').next().unwrap_or(name);
        if wanted.contains(&base) {
            if bytes.len() != CIFAR_FILE_BYTES {
                return Err(Error::Fetch(format!("{base} has {} bytes, expected {CIFAR_FILE_BYTES}", bytes.len())));
            }
            let path = dir.join(cifar::BATCH_DIR).join(base);
            write_atomic(&path, &bytes)?;
            found.push(path);
        }
        Ok(())
    })?;
    if found.len() != wanted.len() {
        return Err(Error::Fetch(format!("archive held {} of {} batch files", found.len(), wanted.len())));
    }
    Ok(found)
}

/// True when every file the loader needs is already present.
pub fn is_installed(task: Task, root: &Path) -> bool {
    let dir = task_dir(root, task);
    match task {
        Task::Mnist => mnist::FILES.iter().all(|f| dir.join(f).is_file()),
        Task::Cifar10 => cifar::TRAIN_FILES
            .iter()
            .chain([&cifar::TEST_FILE])
            .all(|f| dir.join(cifar::BATCH_DIR).join(f).is_file()),
        Task::TinyImagenet => dir.join(tiny_imagenet::ROOT_DIR).join("wnids.txt").is_file(),
    }
}

pub fn default_source(task: Task) -> &'static str {
    match task {
        Task::Mnist => MNIST_URL,
        Task::Cifar10 => CIFAR10_URL,
        Task::TinyImagenet => TINY_IMAGENET_URL,
    }
}

/// Downloads (or copies from a local archive) and installs `task` under
/// `root`. Returns the installed files; a complete install is left alone
/// unless `force`.
pub fn fetch(task: Task, root: &Path, source: Option<&str>, force: bool) -> Result<Vec<PathBuf>> {
    let dir = task_dir(root, task);
    if is_installed(task, root) && !force {
        log::info!("{task} already present in {}", dir.display());
        return Ok(Vec::new());
    }
    let source = source.unwrap_or(default_source(task));
    match task {
        Task::Mnist => install_mnist(&read_source(source)?, &dir, &MNIST_SHA256),
        Task::Cifar10 => install_cifar10(&read_source(source)?, &dir),
        Task::TinyImagenet => Err(Error::Fetch(format!(
            "tiny-imagenet is distributed as a zip archive; download {source} and unpack it so that {} exists",
            dir.join(tiny_imagenet::ROOT_DIR).join("wnids.txt").display()
        ))),
    }
}
