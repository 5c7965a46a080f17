//! Dataset loading, normalization and acquisition.
//!
//! Every dataset lives under a data root (`$IBCOMM_DATA`, else `./data`) in
//! a per-task directory. Nothing is downloaded implicitly; see [`fetch`].

mod cifar;
pub mod fetch;
mod mnist;
mod tiny_imagenet;

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::models::Task;
use crate::real::Real;

pub use cifar::{load_cifar10, parse_cifar_batch};
pub use mnist::{load_mnist, parse_idx_images, parse_idx_labels};
pub use tiny_imagenet::load_tiny_imagenet;

/// Environment variable naming the data root.
pub const DATA_ENV: &str = "IBCOMM_DATA";

/// `$IBCOMM_DATA` if set, else `fallback`.
pub fn data_root(fallback: &Path) -> PathBuf {
    std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf())
}

/// Directory of `task` under `root`.
pub fn task_dir(root: &Path, task: Task) -> PathBuf {
    root.join(task.as_str())
}

/// Normalized images in `(N, C, H, W)` order with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], images: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixel values do not match {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { shape, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// First `limit` examples (all of them if `None`).
    pub fn truncated(mut self, limit: Option<usize>) -> Self {
        if let Some(k) = limit {
            if k < self.len() {
                self.labels.truncate(k);
                self.images.truncate(k * self.example_len());
            }
        }
        self
    }

    /// Stacks the given examples into a `(batch, C, H, W)` tensor.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> (ArrayD<T>, Vec<usize>) {
        let per = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.images[i * per..(i + 1) * per].iter().map(|&v| T::of(v as f64)));
            labels.push(self.labels[i] as usize);
        }
        let shape = [indices.len(), self.shape[0], self.shape[1], self.shape[2]];
        (ArrayD::from_shape_vec(IxDyn(&shape), data).expect("gathered length matches shape"), labels)
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the train/test split of `task` from `root`.
pub fn load(task: Task, root: &Path) -> Result<Split> {
    let dir = task_dir(root, task);
    if !dir.is_dir() {
        return Err(Error::DatasetMissing { dataset: task.as_str().into(), root: root.to_path_buf() });
    }
    match task {
        Task::Mnist => load_mnist(&dir),
        Task::Cifar10 => load_cifar10(&dir),
        Task::TinyImagenet => load_tiny_imagenet(&dir),
    }
}

/// Maps raw 8-bit channel values to `(v / 255 - mean[c]) / std[c]`.
pub(crate) fn normalize_channels(raw: &[u8], channels: usize, mean: &[f32], std: &[f32]) -> Vec<f32> {
    let plane = raw.len() / channels;
    raw.iter()
        .enumerate()
        .map(|(k, &v)| {
            let c = (k / plane) % channels;
            (v as f32 / 255.0 - mean[c]) / std[c]
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MalformedDataset { path: path.to_path_buf(), reason: "file not found".into() }
        } else {
            Error::Io(e)
        }
    })
}
