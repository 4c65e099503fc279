//! Principal component analysis by one-sided Jacobi SVD.
//!
//! The model is fitted on the centered data matrix directly (no covariance
//! round trip), with a deterministic sign convention so components are
//! identical across runs and platforms.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d_q x d_z`, rows orthonormal, ordered by non-increasing explained variance.
    pub components: DenseMatrix,
    /// Sample variance captured by each component.
    pub explained_variance: Vec<f64>,
    pub fitted_on: usize,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// `q = components · (z - mean)`
    pub fn reduce(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::dims("pca reduce", format!("{}", self.input_dim()), format!("{}", z.len())));
        }
        let centered: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self.components.matvec(&centered))
    }

    /// `z ≈ mean + componentsᵀ · q`; exact when `d_q` equals the data rank.
    pub fn reconstruct(&self, q: &[f64]) -> Vec<f64> {
        let mut z = self.components.matvec_t(q);
        for (zi, m) in z.iter_mut().zip(&self.mean) {
            *zi += m;
        }
        z
    }
}

/// Fit PCA with `d_q` components on row vectors `data`.
///
/// Fails with the achievable rank when `d_q` exceeds the rank of the centered
/// data.
pub fn fit_pca(data: &[Vec<f64>], d_q: usize) -> Result<PcaModel> {
    if data.is_empty() {
        return Err(Error::RankDeficient {
            requested: d_q,
            achievable: 0,
        });
    }
    let n = data.len();
    let d = data[0].len();
    for row in data {
        if row.len() != d {
            return Err(Error::dims("fit_pca", format!("rows of dim {d}"), format!("{}", row.len())));
        }
    }

    let mut mean = vec![0.0; d];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // centered data as columns for the one-sided Jacobi sweep
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| data.iter().map(|row| row[j] - mean[j]).collect())
        .collect();
    let mut v = DenseMatrix::identity(d);

    let eps = 1e-14;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let app = dot(&cols[p], &cols[p]);
                let aqq = dot(&cols[q], &cols[q]);
                let apq = dot(&cols[p], &cols[q]);
                if apq.abs() <= eps * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let xp = cols[p][i];
                    let xq = cols[q][i];
                    cols[p][i] = c * xp - s * xq;
                    cols[q][i] = s * xp + c * xq;
                }
                for i in 0..d {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, col)| (dot(col, col).sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let sigma_max = order[0].0;
    let tol = sigma_max * 1e-10;
    let rank = order.iter().filter(|(s, _)| *s > tol && *s > 0.0).count();
    if d_q > rank {
        return Err(Error::RankDeficient {
            requested: d_q,
            achievable: rank,
        });
    }

    let mut components = DenseMatrix::zeros(d_q, d);
    let mut explained = Vec::with_capacity(d_q);
    for (k, (sigma, j)) in order.iter().take(d_q).enumerate() {
        let mut row: Vec<f64> = (0..d).map(|i| v.get(i, *j)).collect();
        // sign convention: the entry of largest magnitude is made positive
        let lead = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if row[lead] < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(k).copy_from_slice(&row);
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        explained.push(sigma * sigma / denom);
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
        fitted_on: n,
    })
}

/// Textual persistence with 17 significant digits (exact `f64` round trip).
pub fn write_pca(path: &Path, model: &PcaModel) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "pca d_z {} d_q {} fitted_on {}\n",
        model.input_dim(),
        model.output_dim(),
        model.fitted_on
    ));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
    out.push_str(&format!("mean {}\n", fmt(&model.mean)));
    for k in 0..model.output_dim() {
        out.push_str(&format!(
            "component {} {:.16e} {}\n",
            k,
            model.explained_variance[k],
            fmt(model.components.row(k))
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pca(path: &Path) -> Result<PcaModel> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let err = |line: usize, message: &str| Error::Checkpoint {
        line: line + 1,
        message: message.to_string(),
    };

    let (idx, header) = lines.next().ok_or_else(|| err(0, "empty file"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 7 || head[0] != "pca" {
        return Err(err(idx, "bad header"));
    }
    let d_z: usize = head[2].parse().map_err(|_| err(idx, "bad d_z"))?;
    let d_q: usize = head[4].parse().map_err(|_| err(idx, "bad d_q"))?;
    let fitted_on: usize = head[6].parse().map_err(|_| err(idx, "bad fitted_on"))?;

    let (idx, mean_line) = lines.next().ok_or_else(|| err(1, "missing mean"))?;
    let mut parts = mean_line.split_whitespace();
    if parts.next() != Some("mean") {
        return Err(err(idx, "expected mean line"));
    }
    let mean = parts
        .map(|p| p.parse::<f64>().map_err(|_| err(idx, "bad mean value")))
        .collect::<Result<Vec<f64>>>()?;
    if mean.len() != d_z {
        return Err(err(idx, "mean dimension mismatch"));
    }

    let mut components = DenseMatrix::zeros(d_q, d_z);
    let mut explained = vec![0.0; d_q];
    for k in 0..d_q {
        let (idx, line) = lines.next().ok_or_else(|| err(2 + k, "missing component"))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("component") {
            return Err(err(idx, "expected component line"));
        }
        let _k: usize = parts
            .next()
            .ok_or_else(|| err(idx, "missing index"))?
            .parse()
            .map_err(|_| err(idx, "bad index"))?;
        explained[k] = parts
            .next()
            .ok_or_else(|| err(idx, "missing variance"))?
            .parse()
            .map_err(|_| err(idx, "bad variance"))?;
        let row = parts
            .map(|p| p.parse::<f64>().map_err(|_| err(idx, "bad component value")))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != d_z {
            return Err(err(idx, "component dimension mismatch"));
        }
        components.row_mut(k).copy_from_slice(&row);
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
        fitted_on,
    })
}
