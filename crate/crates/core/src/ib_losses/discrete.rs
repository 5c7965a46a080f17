//! Exact information-bottleneck quantities for small discrete systems.
//!
//! `Y -> X -> Z`: a joint `p(x, y)` plus an encoder kernel `p(z | x)`, all
//! enumerated. Values are in bits. These serve as an oracle for the
//! variational bound used during training.

use crate::error::{Error, Result};

pub const MAX_ALPHABET: usize = 32;
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSystem {
    /// `p_xy[x][y]`
    pub p_xy: Vec<Vec<f64>>,
    /// `encoder[x][z] = p(z | x)`
    pub encoder: Vec<Vec<f64>>,
}

fn check_distribution(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

fn check_rectangular(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::invalid(format!("{what} must be a non-empty rectangular table")));
    }
    if rows.len() > MAX_ALPHABET || width > MAX_ALPHABET {
        return Err(Error::invalid(format!(
            "{what} is {}x{width}; alphabets are limited to {MAX_ALPHABET}",
            rows.len()
        )));
    }
    Ok(width)
}

fn plogq(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * q.log2()
    }
}

/// Entropy in bits.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| plogq(v, v)).sum::<f64>()
}

/// `D(p || q)` in bits; infinite if `q` misses mass that `p` has.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else if qi == 0.0 { f64::INFINITY } else { pi * (pi / qi).log2() })
        .sum()
}

/// Mutual information of a joint table `joint[a][b]`, in bits.
pub fn mutual_information(joint: &[Vec<f64>]) -> f64 {
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let nb = joint.first().map(|r| r.len()).unwrap_or(0);
    let pb: Vec<f64> = (0..nb).map(|b| joint.iter().map(|r| r[b]).sum()).collect();
    let mut mi = 0.0;
    for (a, row) in joint.iter().enumerate() {
        for (b, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pa[a] * pb[b])).log2();
            }
        }
    }
    mi
}

impl DiscreteSystem {
    pub fn new(p_xy: Vec<Vec<f64>>, encoder: Vec<Vec<f64>>) -> Result<Self> {
        let sys = Self { p_xy, encoder };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        check_rectangular(&self.p_xy, "p(x,y)")?;
        check_rectangular(&self.encoder, "p(z|x)")?;
        if self.encoder.len() != self.p_xy.len() {
            return Err(Error::invalid(format!(
                "encoder has {} input rows but p(x,y) has {} x values",
                self.encoder.len(),
                self.p_xy.len()
            )));
        }
        let flat: Vec<f64> = self.p_xy.iter().flatten().copied().collect();
        check_distribution(&flat, "p(x,y)")?;
        for (x, row) in self.encoder.iter().enumerate() {
            check_distribution(row, &format!("p(z|x={x})"))?;
        }
        Ok(())
    }

    pub fn x_size(&self) -> usize {
        self.p_xy.len()
    }

    pub fn y_size(&self) -> usize {
        self.p_xy[0].len()
    }

    pub fn z_size(&self) -> usize {
        self.encoder[0].len()
    }

    pub fn p_x(&self) -> Vec<f64> {
        self.p_xy.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn p_y(&self) -> Vec<f64> {
        (0..self.y_size()).map(|y| self.p_xy.iter().map(|r| r[y]).sum()).collect()
    }

    /// `joint_zy[z][y] = sum_x p(x, y) p(z | x)`
    pub fn joint_zy(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.y_size()]; self.z_size()];
        for (x, row) in self.p_xy.iter().enumerate() {
            for (y, &pxy) in row.iter().enumerate() {
                for (z, &pz) in self.encoder[x].iter().enumerate() {
                    out[z][y] += pxy * pz;
                }
            }
        }
        out
    }

    /// `joint_xz[x][z] = p(x) p(z | x)`
    pub fn joint_xz(&self) -> Vec<Vec<f64>> {
        let px = self.p_x();
        self.encoder.iter().zip(&px).map(|(row, &p)| row.iter().map(|&q| p * q).collect()).collect()
    }

    pub fn p_z(&self) -> Vec<f64> {
        self.joint_zy().iter().map(|r| r.iter().sum()).collect()
    }

    /// `p(y | z)`; rows for unreachable `z` are left uniform.
    pub fn p_y_given_z(&self) -> Vec<Vec<f64>> {
        let ny = self.y_size();
        self.joint_zy()
            .into_iter()
            .map(|row| {
                let pz: f64 = row.iter().sum();
                if pz > 0.0 {
                    row.into_iter().map(|v| v / pz).collect()
                } else {
                    vec![1.0 / ny as f64; ny]
                }
            })
            .collect()
    }
}

/// `-I(Z; Y) + beta * I(Z; X)`, exactly, in bits.
pub fn exact_ib_objective(sys: &DiscreteSystem, beta: f64) -> Result<f64> {
    sys.validate()?;
    Ok(-mutual_information(&sys.joint_zy()) + beta * mutual_information(&sys.joint_xz()))
}

/// The variational objective
/// `E_{p(z,y)}[-log q(y|z)] + beta * E_{p(x)} D(p(z|x) || q(z))`, in bits.
///
/// It upper-bounds `exact_ib_objective + H(Y)`; the gap is
/// `E_{p(z)} D(p(y|z) || q(y|z)) + beta * D(p(z) || q(z))`.
pub fn exact_vib_objective(
    sys: &DiscreteSystem,
    q_z: &[f64],
    q_y_given_z: &[Vec<f64>],
    beta: f64,
) -> Result<f64> {
    sys.validate()?;
    if q_z.len() != sys.z_size() {
        return Err(Error::invalid(format!("q(z) has {} entries, expected {}", q_z.len(), sys.z_size())));
    }
    check_distribution(q_z, "q(z)")?;
    if q_y_given_z.len() != sys.z_size() || q_y_given_z.iter().any(|r| r.len() != sys.y_size()) {
        return Err(Error::invalid("q(y|z) shape does not match the system"));
    }
    for (z, row) in q_y_given_z.iter().enumerate() {
        check_distribution(row, &format!("q(y|z={z})"))?;
    }

    let mut distortion = 0.0;
    for (z, row) in sys.joint_zy().iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            distortion -= plogq(p, q_y_given_z[z][y]);
        }
    }
    let rate: f64 = sys
        .p_x()
        .iter()
        .zip(&sys.encoder)
        .map(|(&px, p_z_x)| if px == 0.0 { 0.0 } else { px * kl_divergence(p_z_x, q_z) })
        .sum();
    Ok(distortion + beta * rate)
}
