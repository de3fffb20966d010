use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::rng::{gaussian_vector, SeedTree};

/// 1D 2-Wasserstein distance between equal-size samples (sorted pairing).
fn w2_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let ss: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Mean over random unit directions of the 1D W2 distance between projections.
/// Direction `j` comes from its own seed stream.
pub fn sliced_wasserstein(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Parameter(format!(
            "sample sets must be non-empty and equal in size, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if projections == 0 {
        return Err(Error::Parameter("need at least one projection".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Parameter("samples differ in dimension".into()));
    }
    let root = SeedTree::new(seed);
    let total: f64 = (0..projections)
        .map(|j| {
            let mut rng = root.child(j as u64).rng();
            let mut u = gaussian_vector(&mut rng, d, 1.0);
            while u.norm() == 0.0 {
                u = gaussian_vector(&mut rng, d, 1.0);
            }
            u /= u.norm();
            w2_1d(
                a.iter().map(|x| x.dot(&u)).collect(),
                b.iter().map(|x| x.dot(&u)).collect(),
            )
        })
        .sum();
    Ok(total / projections as f64)
}

/// Negated least-squares slope of log error against log NFE.
pub fn order_estimate(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::Parameter(format!(
            "order estimate needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points
        .iter()
        .any(|&(n, e)| n == 0 || !(e > 0.0 && e.is_finite()))
    {
        return Err(Error::Parameter(
            "NFE and errors must be positive and finite".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter("NFE values must not all be equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(-sxy / sxx)
}
