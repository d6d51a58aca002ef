//! Two-component principal component projection for embedding scatterplots.

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `n × 2` coordinates, one row per input row.
    pub coords: Vec<[f64; 2]>,
    /// Unit loading vectors of the two components.
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component.
    pub variances: [f64; 2],
    /// Set when every row is identical, in which case all coordinates are zero.
    pub degenerate: bool,
}

/// Projects mean-centred rows onto the top two eigenvectors of their
/// covariance. Each component is oriented so its largest-magnitude loading
/// is positive. Needs at least two rows of equal length.
pub fn project(rows: &[Vec<f64>]) -> Option<Projection> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return None;
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let scale = cov_scale(&x);
    let degenerate = eig.eigenvalues[order[0]] <= 1e-24 * scale.max(1e-300) || scale == 0.0;
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    if !degenerate {
        for (c, &k) in order.iter().take(2).enumerate() {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            components[c] = v;
            variances[c] = eig.eigenvalues[k].max(0.0);
        }
    }
    let coords = x
        .row_iter()
        .map(|r| {
            let dot = |c: &[f64]| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    Some(Projection {
        coords,
        components,
        variances,
        degenerate,
    })
}

fn cov_scale(x: &DMatrix<f64>) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>()
}
