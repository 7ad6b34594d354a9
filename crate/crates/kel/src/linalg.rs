//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold used for numerical rank decisions.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Symmetric projection (M + M^T)/2.
pub fn sym_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix with eigenvalues clipped at zero.
/// Returns (eigenvalues, eigenvectors) with columns as eigenvectors.
pub fn sym_eigen_clipped(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = sym_project(m).symmetric_eigen();
    let vals = se.eigenvalues.map(|v| v.max(0.0));
    (vals, se.eigenvectors)
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Small negative eigenvalues are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_clipped(m);
    let sq = DMatrix::from_diagonal(&vals.map(|v| v.sqrt()));
    &vecs * sq * vecs.transpose()
}

/// Numerical rank via singular values with relative threshold `rel_tol`.
pub fn matrix_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// 2-norm condition number sigma_max / sigma_min; +inf for singular input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Matrix exponential by scaling-and-squaring with a Taylor series on the
/// scaled matrix. The series is summed until the term norm underflows the
/// target precision, which converges in a handful of terms once
/// ||M||/2^s <= 1/2.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "expm requires a square matrix");
    let norm = m.iter().map(|v| v.abs()).fold(0.0_f64, f64::max) * n as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let t = m / 2f64.powi(s as i32);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut k = 1.0_f64;
    loop {
        term = &term * &t / k;
        result += &term;
        let tn = term.iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
        if tn < 1e-18 || k > 64.0 {
            break;
        }
        k += 1.0;
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre polynomial. Nodes are returned in increasing order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess for the i-th positive root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence: p_k(x), derivative via standard identity.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Map Gauss-Legendre nodes/weights from [-1, 1] to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (
        x.iter().map(|&xi| mid + half * xi).collect(),
        w.iter().map(|&wi| half * wi).collect(),
    )
}

/// Ordinary least squares for y = slope * x + intercept; returns
/// (slope, intercept, r_squared). A (numerically) constant y series gives
/// slope 0 and R^2 = 0 by convention.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let yscale = y.iter().map(|v| v.abs()).fold(0.0_f64, f64::max).max(1e-300);
    if syy <= (1e-14 * yscale).powi(2) * n {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = (sxy * sxy) / (sxx * syy);
    (slope, intercept, r2)
}
