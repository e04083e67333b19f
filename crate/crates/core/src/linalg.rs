//! Dense least squares via SVD, shared by the estimators.

use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// One coefficient column per right-hand side: `coef[rhs][regressor]`.
    pub coef: Vec<Vec<f64>>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// `residuals[row][rhs]` of the fitted system.
    pub residuals: Vec<Vec<f64>>,
}

impl LeastSquares {
    pub fn full_rank(&self) -> bool {
        self.rank == self.coef.first().map_or(0, Vec::len)
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residuals
            .iter()
            .flatten()
            .fold(0.0_f64, |m, r| m.max(r.abs()))
    }
}

/// Minimum-norm solution of `rows · x ≈ targets` for each target column.
///
/// `rows` has one regressor vector per observation; `targets` has one target
/// vector per observation (all of equal width). Singular values at or below
/// `max(m, n) · f64::EPSILON · σ_max` count as zero.
pub fn solve(rows: &[Vec<f64>], targets: &[Vec<f64>]) -> LeastSquares {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    let k = targets.first().map_or(0, Vec::len);
    debug_assert_eq!(targets.len(), m);

    if m == 0 || n == 0 {
        return LeastSquares {
            coef: vec![vec![0.0; n]; k],
            rank: 0,
            singular_values: Vec::new(),
            residuals: targets.to_vec(),
        };
    }

    let a = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    let b = DMatrix::from_fn(m, k, |i, j| targets[i][j]);
    let svd = a.clone().svd(true, true);
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = sigma.iter().copied().fold(0.0_f64, f64::max);
    let tol = (m.max(n) as f64) * f64::EPSILON * smax;
    let rank = sigma.iter().filter(|&&s| s > tol && s > 0.0).count();

    let x = if smax > 0.0 {
        svd.solve(&b, tol).unwrap_or_else(|_| DMatrix::zeros(n, k))
    } else {
        DMatrix::zeros(n, k)
    };
    let r = &b - &a * &x;

    LeastSquares {
        coef: (0..k).map(|c| x.column(c).iter().copied().collect()).collect(),
        rank,
        singular_values: sigma,
        residuals: (0..m).map(|i| r.row(i).iter().copied().collect()).collect(),
    }
}

/// Right singular vector for the smallest singular value of `rows`, with that
/// singular value. Used to find approximate affine relations among columns.
pub fn smallest_right_singular(rows: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    // Pad with zero rows so the thin SVD exposes all n right vectors.
    let a = DMatrix::from_fn(m.max(n), n, |i, j| if i < m { rows[i][j] } else { 0.0 });
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let (idx, smin) = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one column");
    (v_t.row(idx).iter().copied().collect(), smin)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
