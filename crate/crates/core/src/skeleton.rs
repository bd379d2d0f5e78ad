//! Skeleton flattening and PCA.
//!
//! Eigenvectors come from cyclic Jacobi rotations on the (small, dense)
//! covariance matrix. Each component's sign is fixed so that its
//! largest-magnitude entry is positive, which makes fitted models identical
//! across runs and platforms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::KeypointFrame;
use crate::model::NUM_JOINTS;

pub const SKELETON_DIM: usize = 3 * NUM_JOINTS;
pub const PCA_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("joint {0} is missing")]
    MissingJoint(usize),
    #[error("PCA needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("data has zero total variance")]
    ZeroVariance,
    #[error("row {row} has width {got}, expected {expected}")]
    WidthMismatch { row: usize, got: usize, expected: usize },
    #[error("variance target {0} outside (0, 1]")]
    InvalidTarget(f64),
    #[error("requested {requested} components from {dim}-dimensional data")]
    TooManyComponents { requested: usize, dim: usize },
    #[error("unsupported PCA model schema version {0}")]
    UnsupportedSchema(u32),
}

/// `(x0, y0, z0, x1, ..., z24)` for a frame with every joint present.
pub fn flatten(frame: &KeypointFrame) -> Result<[f64; SKELETON_DIM], SkeletonError> {
    let mut out = [0.0; SKELETON_DIM];
    for (j, joint) in frame.joints.iter().enumerate() {
        let p = joint.ok_or(SkeletonError::MissingJoint(j))?;
        out[3 * j..3 * j + 3].copy_from_slice(&p);
    }
    Ok(out)
}

pub fn flatten_skeleton(joints: &[[f64; 3]; NUM_JOINTS]) -> [f64; SKELETON_DIM] {
    let mut out = [0.0; SKELETON_DIM];
    for (j, p) in joints.iter().enumerate() {
        out[3 * j..3 * j + 3].copy_from_slice(p);
    }
    out
}

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Smallest count whose cumulative explained variance reaches the target.
    VarianceTarget(f64),
    /// A fixed count regardless of variance.
    Components(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub schema_version: u32,
    pub mean: Vec<f64>,
    /// k rows of length `mean.len()`, mutually orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Variance along each kept component, nonincreasing.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    pub retained_ratio: f64,
    pub selection: Selection,
    /// The count a variance target would have chosen (reported even for fixed selections).
    pub target_components: usize,
    pub variance_target: f64,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.schema_version != PCA_SCHEMA_VERSION {
            return Err(SkeletonError::UnsupportedSchema(self.schema_version));
        }
        for (row, c) in self.components.iter().enumerate() {
            if c.len() != self.dim() {
                return Err(SkeletonError::WidthMismatch { row, got: c.len(), expected: self.dim() });
            }
        }
        Ok(())
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues (unsorted, diagonal order) and eigenvectors as columns
/// of the row-major `n x n` matrix.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return (vec![0.0; n], v);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|p| (p + 1..n).map(move |q| (p, q))).map(|(p, q)| a[p][q] * a[p][q]).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn check_width(rows: &[Vec<f64>], expected: usize) -> Result<(), SkeletonError> {
    for (row, r) in rows.iter().enumerate() {
        if r.len() != expected {
            return Err(SkeletonError::WidthMismatch { row, got: r.len(), expected });
        }
    }
    Ok(())
}

pub fn fit_pca(rows: &[Vec<f64>], variance_target: f64) -> Result<PcaModel, SkeletonError> {
    fit_pca_with(rows, Selection::VarianceTarget(variance_target), variance_target)
}

/// Fits PCA on centered rows; `reference_target` is only used to report
/// `target_components` when `selection` is a fixed count.
pub fn fit_pca_with(rows: &[Vec<f64>], selection: Selection, reference_target: f64) -> Result<PcaModel, SkeletonError> {
    let target = match selection {
        Selection::VarianceTarget(t) => t,
        Selection::Components(_) => reference_target,
    };
    if !(target > 0.0 && target <= 1.0) {
        return Err(SkeletonError::InvalidTarget(target));
    }
    let n = rows.len();
    if n < 2 {
        return Err(SkeletonError::TooFewRows(n));
    }
    let dim = rows[0].len();
    check_width(rows, dim)?;

    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![vec![0.0; dim]; dim];
    let mut centered = vec![0.0; dim];
    for r in rows {
        for ((c, x), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for (j, cj) in centered.iter().enumerate().skip(i) {
                cov[i][j] += ci * cj;
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }

    let (values, vectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i].max(0.0)).collect();
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return Err(SkeletonError::ZeroVariance);
    }

    let mut cumulative = 0.0;
    let mut target_k = dim;
    for (i, v) in sorted.iter().enumerate() {
        cumulative += v;
        if cumulative / total >= target {
            target_k = i + 1;
            break;
        }
    }
    let k = match selection {
        Selection::VarianceTarget(_) => target_k,
        Selection::Components(k) if k > dim || k == 0 => {
            return Err(SkeletonError::TooManyComponents { requested: k, dim })
        }
        Selection::Components(k) => k,
    };

    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&col| {
            let mut c: Vec<f64> = vectors.iter().map(|row| row[col]).collect();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            c.iter_mut().for_each(|x| *x /= norm);
            let pivot = c.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > c[best].abs() { i } else { best });
            if c[pivot] < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
            c
        })
        .collect();
    let explained_variance = sorted[..k].to_vec();
    let retained_ratio = explained_variance.iter().sum::<f64>() / total;

    Ok(PcaModel {
        schema_version: PCA_SCHEMA_VERSION,
        mean,
        components,
        explained_variance,
        total_variance: total,
        retained_ratio,
        selection,
        target_components: target_k,
        variance_target: target,
    })
}

/// Projects `(row - mean)` onto each component.
pub fn apply_pca(model: &PcaModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SkeletonError> {
    check_width(rows, model.dim())?;
    Ok(rows
        .iter()
        .map(|r| {
            model
                .components
                .iter()
                .map(|c| c.iter().zip(r).zip(&model.mean).map(|((w, x), m)| w * (x - m)).sum())
                .collect()
        })
        .collect())
}

/// Maps projected coordinates back into the original space.
pub fn reconstruct(model: &PcaModel, projected: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SkeletonError> {
    check_width(projected, model.k())?;
    Ok(projected
        .iter()
        .map(|z| {
            let mut x = model.mean.clone();
            for (zi, c) in z.iter().zip(&model.components) {
                for (xj, cj) in x.iter_mut().zip(c) {
                    *xj += zi * cj;
                }
            }
            x
        })
        .collect())
}
