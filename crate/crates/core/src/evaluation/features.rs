use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::data::Dataset;
use crate::error::Result;
use crate::models::{Model, Variant};
use crate::real::Real;
use crate::run::write_atomic;

/// Noisy features as the server receives them, for the first `limit` test
/// examples. Rows follow dataset order.
pub fn received_features<R: Rng + ?Sized>(
    model: &mut Model<f32>,
    data: &Dataset,
    sigma2: f64,
    limit: usize,
    rng: &mut R,
) -> (Array2<f32>, Vec<usize>) {
    let n = limit.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(n * model.width());
    let mut labels = Vec::with_capacity(n);
    let std = sigma2.sqrt() as f32;
    let noisy = model.variant != Variant::Quantization;
    for chunk in idx.chunks(super::EVAL_BATCH) {
        let (x, y) = data.gather::<f32>(chunk);
        let out = model.encode_batch(&x, &Array1::from_elem(chunk.len(), sigma2 as f32), false);
        for (v, &on) in out.z.iter().zip(out.active.iter()) {
            rows.push(if on && noisy { v + std * f32::standard_normal(rng) } else { *v });
        }
        labels.extend(y);
    }
    (Array2::from_shape_vec((n, model.width()), rows).expect("sized"), labels)
}

/// `label,z0,z1,...` CSV for external embedding tools.
pub fn write_features_csv(path: &Path, features: &Array2<f32>, labels: &[usize]) -> Result<()> {
    let mut out = String::from("label");
    for i in 0..features.ncols() {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    for (row, label) in features.outer_iter().zip(labels) {
        out.push_str(&label.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
