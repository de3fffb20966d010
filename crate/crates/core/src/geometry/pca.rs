use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Principal axes of one trajectory's node states.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Orthonormal, by descending eigenvalue.
    pub components: Vec<DVector<f64>>,
    pub eigenvalues: Vec<f64>,
    pub mean: DVector<f64>,
}

fn node_matrix(traj: &Trajectory) -> Result<Vec<&DVector<f64>>> {
    if traj.nodes.len() < 3 {
        return Err(Error::Contract(format!(
            "PCA needs at least 3 nodes, trajectory has {}",
            traj.nodes.len()
        )));
    }
    Ok(traj.nodes.iter().map(|(_, x)| x).collect())
}

fn mean_of(xs: &[&DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(xs[0].len());
    for x in xs {
        m += *x;
    }
    m / xs.len() as f64
}

/// Sum of squared deviations from the mean over `n - 1`.
pub fn total_variance(traj: &Trajectory) -> Result<f64> {
    let xs = node_matrix(traj)?;
    let m = mean_of(&xs);
    Ok(xs.iter().map(|x| (*x - &m).norm_squared()).sum::<f64>() / (xs.len() - 1) as f64)
}

/// Eigen-decomposition of the sample covariance of the node states.
///
/// Each component is signed so that its first non-negligible coordinate is positive.
pub fn pca_trajectory(traj: &Trajectory) -> Result<PcaResult> {
    let xs = node_matrix(traj)?;
    let d = xs[0].len();
    let mean = mean_of(&xs);
    let mut cov = DMatrix::zeros(d, d);
    for x in &xs {
        let c = *x - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (xs.len() - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let components = order
        .iter()
        .map(|&i| {
            let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
            let tol = 1e-12 * v.amax();
            if let Some(first) = v.iter().find(|c| c.abs() > tol) {
                if *first < 0.0 {
                    v.neg_mut();
                }
            }
            v
        })
        .collect();
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    Ok(PcaResult {
        components,
        eigenvalues,
        mean,
    })
}

impl PcaResult {
    /// Reconstruction of `x` from the top `k` components.
    pub fn project(&self, x: &DVector<f64>, k: usize) -> DVector<f64> {
        let c = x - &self.mean;
        let mut out = self.mean.clone();
        for v in &self.components[..k] {
            out += v * v.dot(&c);
        }
        out
    }

    /// Top-k eigenvalue share for k = 1..d; ends at exactly 1. A degenerate
    /// (constant) trajectory gives all ones.
    pub fn cumulative_variance(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return vec![1.0; self.eigenvalues.len()];
        }
        self.eigenvalues
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc / total)
            })
            .collect()
    }
}

/// Relative error `|x - x~| / |x|` per node after projecting onto the top `k`
/// components. Nodes with zero norm give `None`.
pub fn projection_error(traj: &Trajectory, k: usize) -> Result<Vec<Option<f64>>> {
    let d = traj.dim();
    if k == 0 || k > d {
        return Err(Error::Parameter(format!("k must be in 1..={d}, got {k}")));
    }
    let pca = pca_trajectory(traj)?;
    Ok(traj
        .nodes
        .iter()
        .map(|(_, x)| {
            let norm = x.norm();
            (norm > 0.0).then(|| (x - pca.project(x, k)).norm() / norm)
        })
        .collect())
}

pub fn cumulative_variance(traj: &Trajectory) -> Result<Vec<f64>> {
    Ok(pca_trajectory(traj)?.cumulative_variance())
}
