//! Flow matrices and the weighted controllability Gramian.
//!
//! The flow K_{t,s} solves dK/dt = {A + grad1 b(t, X_t)} K with K_{s,s} = I
//! along a (noise-free) reference trajectory, and the Gramian is
//!
//! ```text
//! Q_{t,s} = int_0^s r(t-r)/t^2 K_{t,r} B B^T K_{t,r}^T dr.
//! ```
//!
//! Its smallest eigenvalue obeys lambda_min >= c0 s^{2(k+1)} / t when the
//! Kalman condition holds at index k; `verify_gramian_scaling` measures that
//! exponent and the best constant on a grid.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{KelError, Result};
use crate::linalg::{self, expm, gauss_legendre_on, ols};
use crate::model::{BlockModel, Drift};

#[derive(Debug, Clone, Serialize)]
pub struct GramianResult {
    pub q: Vec<Vec<f64>>,
    pub t: f64,
    pub s: f64,
    pub lambda_min: f64,
    pub nodes: usize,
}

impl GramianResult {
    pub fn q_matrix(&self) -> DMatrix<f64> {
        let d = self.q.len();
        DMatrix::from_fn(d, d, |r, c| self.q[r][c])
    }
}

/// Whether the first-block drift Jacobian is state-independent, in which
/// case K_{t,s} = expm((A + J1)(t - s)) exactly.
fn constant_jacobian(model: &BlockModel) -> Option<DMatrix<f64>> {
    match &model.drift {
        Drift::Zero => Some(model.a.clone()),
        Drift::Affine { j1, .. } => Some(&model.a + j1),
        Drift::Custom(_) => None,
    }
}

/// Noise-free reference trajectory (the "frozen" flow) sampled on a uniform
/// grid over [0, t]; used to evaluate state-dependent drift Jacobians.
#[derive(Debug, Clone)]
pub struct FrozenTrajectory {
    pub t_end: f64,
    pub states: Vec<DVector<f64>>, // states[i] at time i * t_end / (len - 1)
}

impl FrozenTrajectory {
    pub fn compute(model: &BlockModel, x0: &[f64], t_end: f64, steps: usize) -> Self {
        let dim = model.dim();
        let h = t_end / steps as f64;
        let mut states = Vec::with_capacity(steps + 1);
        let mut x = DVector::from_column_slice(x0);
        states.push(x.clone());
        let deriv = |t: f64, x: &DVector<f64>| -> DVector<f64> {
            let xs = x.as_slice();
            let x1 = x.rows(0, model.d1).clone_owned();
            let x2 = x.rows(model.d1, model.d2).clone_owned();
            let dx1 = &model.a * &x1 + &model.b_mat * &x2 + model.drift_b(xs, None);
            let dx2 = model.z_drift(t, xs, None, None);
            let mut out = DVector::zeros(dim);
            out.rows_mut(0, model.d1).copy_from(&dx1);
            out.rows_mut(model.d1, model.d2).copy_from(&dx2);
            out
        };
        for i in 0..steps {
            let t = i as f64 * h;
            let k1 = deriv(t, &x);
            let k2 = deriv(t + h / 2.0, &(&x + &k1 * (h / 2.0)));
            let k3 = deriv(t + h / 2.0, &(&x + &k2 * (h / 2.0)));
            let k4 = deriv(t + h, &(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            states.push(x.clone());
        }
        FrozenTrajectory { t_end, states }
    }

    fn state_at(&self, t: f64) -> &DVector<f64> {
        let n = self.states.len() - 1;
        let idx = ((t / self.t_end) * n as f64).round() as usize;
        &self.states[idx.min(n)]
    }
}

fn jacobian_at(model: &BlockModel, traj: Option<&FrozenTrajectory>, t: f64) -> DMatrix<f64> {
    if let Some(j) = constant_jacobian(model) {
        return j;
    }
    let traj = traj.expect("state-dependent drift requires a reference trajectory");
    let x = traj.state_at(t);
    &model.a + model.drift_jacobian_x1(x.as_slice(), 1e-5)
}

/// K_{t,s}: integrates dK/du = J(u) K from u = s to t, K_{s,s} = I.
/// For state-independent Jacobians this is the exact matrix exponential.
pub fn flow_k(
    model: &BlockModel,
    t: f64,
    s: f64,
    traj: Option<&FrozenTrajectory>,
) -> DMatrix<f64> {
    assert!((0.0..=t).contains(&s), "need 0 <= s <= t");
    if let Some(j) = constant_jacobian(model) {
        return expm(&(j * (t - s)));
    }
    let steps = (((t - s) * 2e3).ceil() as usize).max(16);
    let h = (t - s) / steps as f64;
    let mut k = DMatrix::<f64>::identity(model.d1, model.d1);
    for i in 0..steps {
        let u = s + i as f64 * h;
        let f = |u: f64, k: &DMatrix<f64>| jacobian_at(model, traj, u) * k;
        let k1 = f(u, &k);
        let k2 = f(u + h / 2.0, &(&k + &k1 * (h / 2.0)));
        let k3 = f(u + h / 2.0, &(&k + &k2 * (h / 2.0)));
        let k4 = f(u + h, &(&k + &k3 * h));
        k += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    k
}

/// Q_{t,s} by Gauss-Legendre quadrature with `nodes` points on [0, s].
pub fn gramian_q(model: &BlockModel, t: f64, s: f64, nodes: usize) -> Result<GramianResult> {
    if !(s > 0.0 && s <= t) {
        return Err(KelError::Invalid(format!("need 0 < s <= t, got s = {s}, t = {t}")));
    }
    if nodes < 16 {
        return Err(KelError::Invalid(format!("need at least 16 nodes, got {nodes}")));
    }
    let traj = match constant_jacobian(model) {
        Some(_) => None,
        None => Some(FrozenTrajectory::compute(
            model,
            &vec![0.0; model.dim()],
            t,
            ((t * 2e3).ceil() as usize).max(64),
        )),
    };
    let (rs, ws) = gauss_legendre_on(nodes, 0.0, s);
    let d1 = model.d1;
    let mut q = DMatrix::<f64>::zeros(d1, d1);
    for (r, w) in rs.iter().zip(&ws) {
        let k = flow_k(model, t, *r, traj.as_ref());
        let kb = &k * &model.b_mat;
        let phi = r * (t - r) / (t * t);
        q += &kb * kb.transpose() * (w * phi);
    }
    let q = linalg::sym_project(&q);
    let eig = q.clone().symmetric_eigen();
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    Ok(GramianResult {
        q: (0..d1)
            .map(|r| (0..d1).map(|c| q[(r, c)]).collect())
            .collect(),
        t,
        s,
        lambda_min,
        nodes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GramianScaling {
    pub slope: f64,
    pub expected_slope: f64,
    pub c0: f64,
    pub r_squared: f64,
    pub kalman_index: usize,
    pub per_point: Vec<(f64, f64)>, // (s, lambda_min)
}

/// Fit log lambda_min(Q_{t,s}) against log s and extract the largest c0 with
/// lambda_min >= c0 s^{2(k+1)} / t across the grid.
pub fn verify_gramian_scaling(
    model: &BlockModel,
    t: f64,
    s_grid: &[f64],
    nodes: usize,
) -> Result<GramianScaling> {
    if s_grid.len() < 6 {
        return Err(KelError::Invalid("need at least 6 grid points".into()));
    }
    let (lo, hi) = (
        s_grid.iter().cloned().fold(f64::MAX, f64::min),
        s_grid.iter().cloned().fold(f64::MIN, f64::max),
    );
    if !(lo > 0.0 && hi <= t) || (hi / lo).log10() < 1.5 {
        return Err(KelError::Invalid(
            "s_grid must lie in (0, t] and span at least 1.5 decades".into(),
        ));
    }
    let k = crate::model::kalman_index(&model.a, &model.b_mat)?;
    let mut per_point = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let g = gramian_q(model, t, s, nodes)?;
        if g.lambda_min <= 0.0 {
            return Err(KelError::NotPositiveDefinite {
                lambda_min: g.lambda_min,
                s,
            });
        }
        per_point.push((s, g.lambda_min));
    }
    let xs: Vec<f64> = per_point.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = per_point.iter().map(|p| p.1.ln()).collect();
    let (slope, _, r2) = ols(&xs, &ys);
    let expo = 2.0 * (k as f64 + 1.0);
    let c0 = per_point
        .iter()
        .map(|&(s, l)| l * t / s.powf(expo))
        .fold(f64::MAX, f64::min);
    Ok(GramianScaling {
        slope,
        expected_slope: expo,
        c0,
        r_squared: r2,
        kalman_index: k,
        per_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn flow_identity_for_zero_generator() {
        let model = BlockModel::kinetic_ou(2);
        let k = flow_k(&model, 1.0, 0.25, None);
        assert_relative_eq!(k[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(k[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn flow_matches_nilpotent_exponential() {
        let model = BlockModel::chain();
        let k = flow_k(&model, 1.5, 0.5, None);
        // expm of [[0,1],[0,0]] * 1 = [[1,1],[0,1]]
        assert_relative_eq!(k[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(k[(0, 1)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(k[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(k[(1, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn flow_norm_bounded_by_exponential() {
        // ||K_{t,s}|| <= e^{Kbar (t - s)} with Kbar = ||A|| + sup ||grad b||.
        let model = BlockModel::chain();
        let kbar = model.a.norm();
        for &(t, s) in &[(1.0, 0.0), (2.0, 0.5), (0.7, 0.699)] {
            let k = flow_k(&model, t, s, None);
            let norm = k.singular_values().iter().cloned().fold(0.0_f64, f64::max);
            assert!(norm <= ((t - s) * kbar).exp() + 1e-9);
        }
    }

    #[test]
    fn kinetic_ou_gramian_is_t_over_six() {
        for &t in &[0.1, 1.0, 10.0] {
            let model = BlockModel::kinetic_ou(1);
            let g = gramian_q(&model, t, t, 64).unwrap();
            let rel = (g.q[0][0] - t / 6.0).abs() / (t / 6.0);
            assert!(rel <= 1e-6, "t = {t}: rel err {rel}");
        }
    }

    #[test]
    fn gramian_vanishes_as_s_to_zero() {
        // Closed form for kinetic-ou: Q_{1,s} = s^2/2 - s^3/3 -> 0.
        let model = BlockModel::kinetic_ou(1);
        let g = gramian_q(&model, 1.0, 1e-4, 32).unwrap();
        let exact = 1e-4f64.powi(2) / 2.0 - 1e-4f64.powi(3) / 3.0;
        assert_relative_eq!(g.q[0][0], exact, epsilon = 1e-15);
        assert!(g.lambda_min <= 1e-8);
    }

    #[test]
    fn chain_gramian_positive_definite_for_all_s() {
        let model = BlockModel::chain();
        for &s in &[1e-3, 1e-2, 0.1, 0.5, 1.0] {
            let g = gramian_q(&model, 1.0, s, 64).unwrap();
            assert!(g.lambda_min > 0.0, "s = {s}: lambda_min {}", g.lambda_min);
        }
    }

    #[test]
    fn gramian_monotone_in_s_under_psd_order() {
        let model = BlockModel::chain();
        let mut prev: Option<DMatrix<f64>> = None;
        for &s in &[0.1, 0.2, 0.4, 0.8] {
            let g = gramian_q(&model, 1.0, s, 64).unwrap().q_matrix();
            if let Some(p) = prev {
                let diff = &g - &p;
                let eig = diff.symmetric_eigen();
                let lmin = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
                assert!(lmin >= -1e-12, "not monotone at s = {s}: {lmin}");
            }
            prev = Some(g);
        }
    }

    #[test]
    fn gramian_quadrature_converged_at_64_nodes() {
        let model = BlockModel::chain();
        let a = gramian_q(&model, 1.0, 0.7, 64).unwrap().q_matrix();
        let b = gramian_q(&model, 1.0, 0.7, 128).unwrap().q_matrix();
        assert!((a - b).iter().map(|v| v.abs()).fold(0.0_f64, f64::max) <= 1e-10);
    }

    #[test]
    fn scaling_slopes_match_kalman_exponent() {
        let grid: Vec<f64> = (0..10).map(|i| 1e-3 * 10f64.powf(2.0 * i as f64 / 9.0)).collect();
        let fit = verify_gramian_scaling(&BlockModel::kinetic_ou(1), 1.0, &grid, 64).unwrap();
        assert!((fit.slope - 2.0).abs() < 0.05, "kinetic-ou slope {}", fit.slope);
        assert!(fit.c0 > 0.0);
        let fit = verify_gramian_scaling(&BlockModel::chain(), 1.0, &grid, 64).unwrap();
        assert!((fit.slope - 4.0).abs() < 0.2, "chain slope {}", fit.slope);
        assert!(fit.c0 > 0.0);
        assert_eq!(fit.kalman_index, 1);
    }

    #[test]
    fn zero_b_fails_positive_definiteness() {
        let mut model = BlockModel::kinetic_ou(1);
        model.b_mat = DMatrix::zeros(1, 1);
        let grid: Vec<f64> = (0..8).map(|i| 1e-3 * 10f64.powf(2.0 * i as f64 / 7.0)).collect();
        let err = verify_gramian_scaling(&model, 1.0, &grid, 32);
        assert!(
            matches!(
                err,
                Err(KelError::NotPositiveDefinite { .. }) | Err(KelError::NotControllable { .. })
            ),
            "got {err:?}"
        );
    }
}
