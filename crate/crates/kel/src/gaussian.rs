//! Exact-law oracle for linear instances.
//!
//! Linear block models have Gaussian transition laws; this module propagates
//! (mean, covariance) through the moment ODEs
//!
//! ```text
//! dm/ds     = F m + u
//! dSigma/ds = F Sigma + Sigma F^T + G G^T
//! ```
//!
//! by fixed-substep RK4 and evaluates the closed-form relative entropy and
//! W2 between the resulting Gaussians. It is the measuring stick the
//! sample-based estimators are judged against.

use nalgebra::{DMatrix, DVector};

use crate::error::{KelError, Result};
use crate::linalg;
use crate::model::{BlockModel, Drift, SigmaCoeff, ZDrift};

/// Condition-number cap distinguishing "numerically singular" from merely
/// ill-conditioned reference covariances.
pub const CONDITION_CAP: f64 = 1e12;

/// Default RK4 substeps per unit time for moment propagation.
pub const DEFAULT_SUBSTEPS_PER_UNIT: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    /// Build a state, enforcing symmetry within 1e-12 and clipping eigenvalues
    /// in [-1e-12, 0) to zero.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(KelError::Invalid(format!(
                "covariance is {}x{} but mean has length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = (&cov - cov.transpose()).iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
        let scale = cov.iter().map(|v| v.abs()).fold(0.0_f64, f64::max).max(1.0);
        if asym > 1e-12 * scale {
            return Err(KelError::Invalid(format!(
                "covariance asymmetry {asym:e} exceeds tolerance"
            )));
        }
        let sym = linalg::sym_project(&cov);
        let eig = sym.clone().symmetric_eigen();
        let lmin = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        if lmin < -1e-12 * scale {
            return Err(KelError::Invalid(format!(
                "covariance has negative eigenvalue {lmin:e}"
            )));
        }
        let cov = if lmin < 0.0 {
            let vals = eig.eigenvalues.map(|v| v.max(0.0));
            &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
        } else {
            sym
        };
        Ok(GaussianState { mean, cov })
    }

    pub fn point(x: &[f64]) -> Self {
        GaussianState {
            mean: DVector::from_column_slice(x),
            cov: DMatrix::zeros(x.len(), x.len()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Linear-coefficient extraction of a block model: drift F x + u on the full
/// state and constant noise injection G (dim x d2).
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub u: DVector<f64>,
}

/// Extract (F, G, u) when every coefficient is affine in the state and sigma
/// is constant; returns None for genuinely nonlinear or measure-dependent
/// models.
pub fn linearize(model: &BlockModel) -> Option<LinearModel> {
    let (d1, d2) = (model.d1, model.d2);
    let dim = d1 + d2;
    let mut f = DMatrix::zeros(dim, dim);
    let mut u = DVector::zeros(dim);

    f.view_mut((0, 0), (d1, d1)).copy_from(&model.a);
    f.view_mut((0, d1), (d1, d2)).copy_from(&model.b_mat);
    match &model.drift {
        Drift::Zero => {}
        Drift::Affine { j1, j2, c } => {
            let mut top_left = f.view((0, 0), (d1, d1)).clone_owned();
            top_left += j1;
            f.view_mut((0, 0), (d1, d1)).copy_from(&top_left);
            let mut top_right = f.view((0, d1), (d1, d2)).clone_owned();
            top_right += j2;
            f.view_mut((0, d1), (d1, d2)).copy_from(&top_right);
            u.rows_mut(0, d1).copy_from(c);
        }
        Drift::Custom(_) => return None,
    }
    match &model.z {
        ZDrift::Affine { c1, c2, c0 } => {
            f.view_mut((d1, 0), (d2, d1)).copy_from(c1);
            f.view_mut((d1, d1), (d2, d2)).copy_from(c2);
            u.rows_mut(d1, d2).copy_from(c0);
        }
        _ => return None,
    }
    let sigma = match &model.sigma {
        SigmaCoeff::Constant(s) => s.clone(),
        SigmaCoeff::Custom(_) => return None,
    };
    let mut g = DMatrix::zeros(dim, d2);
    g.view_mut((d1, 0), (d2, d2)).copy_from(&sigma);
    Some(LinearModel { f, g, u })
}

/// Integrate the moment ODEs from `init` over [0, t] with classical RK4 and
/// `substeps_per_unit` fixed substeps per unit time (minimum 16 overall).
pub fn propagate_linear(
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    u: &DVector<f64>,
    init: &GaussianState,
    t: f64,
    substeps_per_unit: f64,
) -> GaussianState {
    assert!(t > 0.0, "propagation time must be positive");
    let n = ((substeps_per_unit * t).ceil() as usize).max(16);
    let h = t / n as f64;
    let gg = g * g.transpose();
    let mut m = init.mean.clone();
    let mut s = init.cov.clone();
    let fm = |m: &DVector<f64>| f * m + u;
    let fs = |s: &DMatrix<f64>| f * s + s * f.transpose() + &gg;
    for _ in 0..n {
        let k1m = fm(&m);
        let k1s = fs(&s);
        let k2m = fm(&(&m + &k1m * (h / 2.0)));
        let k2s = fs(&(&s + &k1s * (h / 2.0)));
        let k3m = fm(&(&m + &k2m * (h / 2.0)));
        let k3s = fs(&(&s + &k2s * (h / 2.0)));
        let k4m = fm(&(&m + &k3m * h));
        let k4s = fs(&(&s + &k3s * h));
        m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
        s += (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (h / 6.0);
        s = linalg::sym_project(&s);
    }
    GaussianState { mean: m, cov: s }
}

fn reference_condition(cov: &DMatrix<f64>) -> f64 {
    linalg::condition_number(cov)
}

/// Relative entropy KL(p || q) between Gaussians:
/// (tr(Sq^{-1} Sp) - d + (mq - mp)^T Sq^{-1} (mq - mp) + ln det Sq / det Sp) / 2.
pub fn gaussian_kl(p: &GaussianState, q: &GaussianState) -> Result<f64> {
    let d = p.dim();
    assert_eq!(d, q.dim(), "dimension mismatch");
    let cond = reference_condition(&q.cov);
    if !cond.is_finite() || cond > CONDITION_CAP {
        return Err(KelError::SingularReference {
            cond,
            cap: CONDITION_CAP,
        });
    }
    let lu = q.cov.clone().lu();
    let qi_p = lu
        .solve(&p.cov)
        .ok_or(KelError::SingularReference { cond, cap: CONDITION_CAP })?;
    let dm = &q.mean - &p.mean;
    let qidm = lu
        .solve(&dm)
        .ok_or(KelError::SingularReference { cond, cap: CONDITION_CAP })?;
    let quad = dm.dot(&qidm);
    // log-determinants via symmetric eigenvalues for stability near the cap
    let ld = |m: &DMatrix<f64>| -> f64 {
        linalg::sym_project(m)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|&v| v.max(1e-300).ln())
            .sum()
    };
    let val = 0.5 * (qi_p.trace() - d as f64 + quad + ld(&q.cov) - ld(&p.cov));
    Ok(val.max(0.0))
}

/// Wasserstein-2 distance between Gaussians via the Bures metric:
/// sqrt(|mp - mq|^2 + tr(Sp + Sq - 2 (Sq^{1/2} Sp Sq^{1/2})^{1/2})).
pub fn gaussian_w2(p: &GaussianState, q: &GaussianState) -> f64 {
    let dm2 = (&p.mean - &q.mean).norm_squared();
    let sq = linalg::sqrtm_psd(&q.cov);
    let inner = &sq * &p.cov * &sq;
    let cross = linalg::sqrtm_psd(&inner);
    let bures = (p.cov.trace() + q.cov.trace() - 2.0 * cross.trace()).max(0.0);
    (dm2 + bures).sqrt()
}

/// Exact kernel relative entropy curve t -> KL(P_t^x || P_t^y) of a linear
/// model started from the two points. Both transition kernels share the
/// covariance Sigma_t, so KL(t) = (m_x(t) - m_y(t))^T Sigma_t^{-1} (...) / 2.
/// Times where Sigma_t is numerically singular are reported as None.
pub fn entropy_cost_curve(
    model: &BlockModel,
    x: &[f64],
    y: &[f64],
    t_grid: &[f64],
    substeps_per_unit: f64,
) -> Result<Vec<(f64, Option<f64>)>> {
    let lin = linearize(model).ok_or_else(|| {
        KelError::Invalid("entropy_cost_curve requires a linear model".into())
    })?;
    if x.len() != model.dim() || y.len() != model.dim() {
        return Err(KelError::Invalid("state dimension mismatch".into()));
    }
    let mut grid = t_grid.to_vec();
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.first().is_none_or(|&t| t <= 0.0) {
        return Err(KelError::Invalid(
            "t_grid must be strictly increasing and positive".into(),
        ));
    }
    let mut out = Vec::with_capacity(grid.len());
    let dim = model.dim();
    let gg = &lin.g * lin.g.transpose();
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    let mut dm = DVector::from_column_slice(x) - DVector::from_column_slice(y);
    let mut t_prev = 0.0;
    grid.insert(0, 0.0);
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = ((substeps_per_unit * (b - a)).ceil() as usize).max(16);
        let h = (b - a) / n as f64;
        let fs = |s: &DMatrix<f64>| &lin.f * s + s * lin.f.transpose() + &gg;
        let fm = |m: &DVector<f64>| &lin.f * m;
        for _ in 0..n {
            let k1s = fs(&s);
            let k1m = fm(&dm);
            let k2s = fs(&(&s + &k1s * (h / 2.0)));
            let k2m = fm(&(&dm + &k1m * (h / 2.0)));
            let k3s = fs(&(&s + &k2s * (h / 2.0)));
            let k3m = fm(&(&dm + &k2m * (h / 2.0)));
            let k4s = fs(&(&s + &k3s * h));
            let k4m = fm(&(&dm + &k3m * h));
            s += (k1s + k2s * 2.0 + k3s * 2.0 + k4s) * (h / 6.0);
            dm += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
            s = linalg::sym_project(&s);
        }
        t_prev = b;
        let cond = reference_condition(&s);
        if !cond.is_finite() || cond > CONDITION_CAP {
            out.push((b, None));
            continue;
        }
        let sol = s.clone().lu().solve(&dm);
        match sol {
            Some(v) => out.push((b, Some((0.5 * dm.dot(&v)).max(0.0)))),
            None => out.push((b, None)),
        }
    }
    let _ = t_prev;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{expm, gauss_legendre_on, ols};
    use approx::assert_relative_eq;

    #[test]
    fn brownian_covariance_is_t_identity() {
        let f = DMatrix::zeros(2, 2);
        let g = DMatrix::identity(2, 2);
        let u = DVector::zeros(2);
        let init = GaussianState::point(&[0.3, -0.7]);
        let out = propagate_linear(&f, &g, &u, &init, 1.0, 1e3);
        assert_relative_eq!(out.cov[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(out.cov[(1, 1)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(out.cov[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(out.mean[0], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn zero_drift_preserves_mean_exactly() {
        let f = DMatrix::zeros(3, 3);
        let g = DMatrix::identity(3, 3) * 0.5;
        let u = DVector::zeros(3);
        let init = GaussianState::point(&[1.0, 2.0, 3.0]);
        let out = propagate_linear(&f, &g, &u, &init, 2.0, 1e3);
        assert_eq!(out.mean, init.mean);
    }

    #[test]
    fn forcing_difference_matches_matrix_exponential_quadrature() {
        // Mean difference between u = (0, delta) and u = 0 runs equals
        // int_0^t e^{F (t-s)} u ds, evaluated by Gauss-Legendre + expm.
        let model = BlockModel::kinetic_ou(1);
        let lin = linearize(&model).unwrap();
        let delta = 0.37;
        let u1 = DVector::from_column_slice(&[0.0, delta]);
        let u0 = DVector::zeros(2);
        let init = GaussianState::point(&[0.0, 0.0]);
        let t = 1.3;
        let a = propagate_linear(&lin.f, &lin.g, &u1, &init, t, 2e3);
        let b = propagate_linear(&lin.f, &lin.g, &u0, &init, t, 2e3);
        let diff = &a.mean - &b.mean;
        let (nodes, weights) = gauss_legendre_on(32, 0.0, t);
        let mut quad = DVector::zeros(2);
        for (s, w) in nodes.iter().zip(&weights) {
            quad += expm(&(&lin.f * (t - s))) * &u1 * *w;
        }
        assert_relative_eq!(diff[0], quad[0], epsilon = 1e-8);
        assert_relative_eq!(diff[1], quad[1], epsilon = 1e-8);
    }

    #[test]
    fn kl_of_equal_states_is_zero() {
        let p = GaussianState::new(
            DVector::from_column_slice(&[1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_mean_shift_and_variance_examples() {
        let p = GaussianState::new(DVector::from_column_slice(&[0.7]), DMatrix::identity(1, 1))
            .unwrap();
        let q = GaussianState::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(gaussian_kl(&p, &q).unwrap(), 0.7 * 0.7 / 2.0, epsilon = 1e-12);

        let p = GaussianState::new(DVector::zeros(1), DMatrix::identity(1, 1) * 2.0).unwrap();
        // (2 - 1 - ln 2) / 2, evaluated directly.
        assert_relative_eq!(gaussian_kl(&p, &q).unwrap(), 0.1534264097200273, epsilon = 1e-12);
    }

    #[test]
    fn kl_rejects_singular_reference() {
        let p = GaussianState::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let q = GaussianState::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(
            gaussian_kl(&p, &q),
            Err(KelError::SingularReference { .. })
        ));
    }

    #[test]
    fn kl_nonnegative_zero_iff_equal() {
        let mut buf = [0.0; 6];
        for i in 0..100 {
            crate::rng::fill_normals(31, i, 0, &mut buf);
            let m1 = DVector::from_column_slice(&buf[0..2]);
            let m2 = DVector::from_column_slice(&buf[2..4]);
            let c1 = DMatrix::from_row_slice(
                2,
                2,
                &[1.5 + buf[4].abs(), 0.2, 0.2, 1.0 + buf[5].abs()],
            );
            let p = GaussianState::new(m1.clone(), c1.clone()).unwrap();
            let q = GaussianState::new(m2.clone(), DMatrix::identity(2, 2)).unwrap();
            let kl = gaussian_kl(&p, &q).unwrap();
            assert!(kl >= 0.0);
            if (m1 - m2).norm() > 1e-8 {
                assert!(kl > 1e-10);
            }
        }
    }

    #[test]
    fn w2_point_masses_and_diagonal_case() {
        let p = GaussianState::point(&[1.0, 0.0]);
        let q = GaussianState::point(&[4.0, 4.0]);
        assert_relative_eq!(gaussian_w2(&p, &q), 5.0, epsilon = 1e-12);

        let p = GaussianState::new(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 4.0])),
        )
        .unwrap();
        let q = GaussianState::new(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 1.0])),
        )
        .unwrap();
        assert_relative_eq!(gaussian_w2(&p, &q), 2f64.sqrt(), epsilon = 1e-10);
        assert_eq!(gaussian_w2(&p, &p), 0.0);
    }

    #[test]
    fn w2_symmetric_and_triangle_on_random_gaussians() {
        let mut buf = [0.0; 9];
        let mut states = Vec::new();
        for i in 0..30 {
            crate::rng::fill_normals(41, i, 0, &mut buf);
            let m = DVector::from_column_slice(&buf[0..2]);
            let l = DMatrix::from_row_slice(2, 2, &[buf[2].abs() + 0.2, 0.0, buf[3], buf[4].abs() + 0.2]);
            let cov = &l * l.transpose();
            states.push(GaussianState::new(m, cov).unwrap());
        }
        for i in 0..10 {
            let (p, q, r) = (&states[3 * i], &states[3 * i + 1], &states[3 * i + 2]);
            let pq = gaussian_w2(p, q);
            let qp = gaussian_w2(q, p);
            assert!((pq - qp).abs() < 1e-10);
            assert!(pq <= gaussian_w2(p, r) + gaussian_w2(r, q) + 1e-8);
        }
    }

    #[test]
    fn entropy_curve_zero_for_equal_starts() {
        let model = BlockModel::kinetic_ou(1);
        let curve =
            entropy_cost_curve(&model, &[0.5, -0.5], &[0.5, -0.5], &[0.1, 0.5, 1.0], 1e3).unwrap();
        for (_, kl) in curve {
            assert_relative_eq!(kl.unwrap(), 0.0, epsilon = 1e-20);
        }
    }

    #[test]
    fn entropy_curve_short_time_slopes() {
        // Exact kernel entropy scaling for kinetic-ou: t^{-3} for block-1
        // differences, t^{-1} for block-2 differences.
        let model = BlockModel::kinetic_ou(1);
        let grid: Vec<f64> = (0..8).map(|i| 1e-3 * 10f64.powf(i as f64 / 7.0)).collect();
        for (delta, expect) in [([1.0, 0.0], -3.0), ([0.0, 1.0], -1.0)] {
            let curve = entropy_cost_curve(&model, &delta, &[0.0, 0.0], &grid, 1e4).unwrap();
            let pts: Vec<(f64, f64)> = curve
                .iter()
                .filter_map(|&(t, v)| v.map(|kl| (t.ln(), kl.ln())))
                .collect();
            assert_eq!(pts.len(), grid.len());
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let (slope, _, _) = ols(&xs, &ys);
            assert!(
                (slope - expect).abs() < 0.05,
                "slope {slope} for delta {delta:?}"
            );
        }
    }

    #[test]
    fn entropy_curve_finite_despite_degenerate_noise() {
        // Hypoellipticity: the kernel KL is finite for every t > 0 even
        // though G is rank-deficient.
        let model = BlockModel::kinetic_ou(1);
        let grid = [1e-3, 1e-2, 1e-1, 1.0];
        let curve = entropy_cost_curve(&model, &[1.0, 0.3], &[0.0, 0.0], &grid, 1e4).unwrap();
        for (t, kl) in curve {
            let v = kl.unwrap_or_else(|| panic!("singular at t = {t}"));
            assert!(v.is_finite() && v > 0.0);
        }
    }
}
