//! Sample-quality statistics: 2-D PCA projection and energy distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DigError, Result};

/// Projection onto the two leading principal axes of a reference set.
#[derive(Clone, Debug)]
pub struct Pca2 {
    pub mean: DVector<f64>,
    /// `2 × d`, rows are unit principal axes.
    pub axes: DMatrix<f64>,
}

impl Pca2 {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.len() < 2 || d < 2 || rows.iter().any(|r| r.len() != d) {
            return Err(DigError::shape("pca", "need ≥ 2 rows of equal width ≥ 2"));
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(rows.len(), d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (rows.len() - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axes = DMatrix::from_fn(2, d, |k, j| eig.eigenvectors[(j, order[k])]);
        Ok(Self { mean, axes })
    }

    pub fn project(&self, rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
        rows.iter()
            .map(|r| {
                let v = DVector::from_column_slice(r) - &self.mean;
                let p = &self.axes * v;
                [p[0], p[1]]
            })
            .collect()
    }
}

fn mean_pairwise(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    for p in a {
        for q in b {
            total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
    }
    total / (a.len() * b.len()) as f64
}

/// `2 E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖` (V-statistic).
pub fn energy_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DigError::shape("energy_distance", "empty sample set"));
    }
    Ok(2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b))
}

/// Energy distance between two sets after projecting both with the
/// principal axes of `reference`.
pub fn projected_energy_distance(reference: &[Vec<f64>], samples: &[Vec<f64>]) -> Result<f64> {
    let pca = Pca2::fit(reference)?;
    energy_distance(&pca.project(reference), &pca.project(samples))
}
