//! Block-structured degenerate SDE families and their closed-form constants.
//!
//! A [`BlockModel`] splits the state x = (x1, x2) in R^{d1} x R^{d2} with
//! noise acting on the second block only:
//!
//! ```text
//! dx1 = { A x1 + B x2 + b(x, mu) } dt
//! dx2 = Z(t, x, mu) dt + sigma(t, mu) dW
//! ```
//!
//! where mu may be the law of the solution (mean-field case). This module
//! owns the structural checks (Kalman index, dissipativity probing) and the
//! contraction constants (kappa, the twisted-metric coefficients a and r,
//! theta1/theta2 for the granular kernel).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{KelError, Result};
use crate::linalg;
use crate::rng;

/// Summary statistics of an empirical measure exposed to coefficients.
#[derive(Debug, Clone)]
pub struct MeasureSummary {
    pub n: usize,
    /// Mean over the full state, length d1 + d2.
    pub mean: DVector<f64>,
    /// Covariance over the full state; computed lazily by the stepper only
    /// when a coefficient asks for measure input.
    pub cov: Option<DMatrix<f64>>,
}

pub type DriftFn =
    Arc<dyn Fn(&[f64], Option<&MeasureSummary>) -> DVector<f64> + Send + Sync>;
pub type ZFn =
    Arc<dyn Fn(f64, &[f64], Option<&MeasureSummary>) -> DVector<f64> + Send + Sync>;
pub type SigmaFn = Arc<dyn Fn(f64, Option<&MeasureSummary>) -> DMatrix<f64> + Send + Sync>;
pub type KernelFn = Arc<dyn Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync>;

/// First-block drift b(x, mu) in R^{d1}.
#[derive(Clone)]
pub enum Drift {
    Zero,
    /// b(x) = J1 x1 + J2 x2 + c.
    Affine {
        j1: DMatrix<f64>,
        j2: DMatrix<f64>,
        c: DVector<f64>,
    },
    Custom(DriftFn),
}

/// Second-block drift Z(t, x, mu) in R^{d2}.
#[derive(Clone)]
pub enum ZDrift {
    /// Z = C1 x1 + C2 x2 + c0.
    Affine {
        c1: DMatrix<f64>,
        c2: DMatrix<f64>,
        c0: DVector<f64>,
    },
    /// The interacting family behind the granular presets:
    /// Z = -( B^T gradV(x1, mu) + beta B^T (B B^T)^{-1} x1 + x2 ),
    /// where gradV is the kernel average from [`MeanFieldSpec`].
    GranularFriction { beta: f64 },
    Custom(ZFn),
}

/// Diffusion coefficient sigma(t, mu), a d2 x d2 matrix.
#[derive(Clone)]
pub enum SigmaCoeff {
    Constant(DMatrix<f64>),
    Custom(SigmaFn),
}

/// Interaction kernel gradient grad_W(v, z) for v in R^{d1}, z in R^{d1+d2}.
#[derive(Clone)]
pub enum InteractionKernel {
    /// grad_W(v, z) = theta (v - z1). Its pairwise average over an ensemble
    /// collapses exactly to theta (v - mean(z1)), which the stepper exploits.
    QuadraticAttraction { theta: f64 },
    /// Arbitrary kernel; averaged by full O(N^2) pairwise sums (subsampled
    /// above the configured cap).
    Custom(KernelFn),
}

/// Mean-field interaction descriptors. `theta` and `alpha` are the declared
/// Lipschitz constants of grad_W and of mu -> sigma(mu) (squared, in W2);
/// they feed the contraction constants and are auditable by sampling.
#[derive(Clone)]
pub struct MeanFieldSpec {
    pub kernel: InteractionKernel,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// A degenerate two-block SDE specification.
#[derive(Clone)]
pub struct BlockModel {
    pub d1: usize,
    pub d2: usize,
    pub a: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub drift: Drift,
    pub z: ZDrift,
    pub sigma: SigmaCoeff,
    pub mean_field: Option<MeanFieldSpec>,
    pub name: String,
    /// Whether Z depends on x1; selects the xi_t rate exponent.
    pub z_depends_on_x1: bool,
}

impl fmt::Debug for BlockModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockModel")
            .field("name", &self.name)
            .field("d1", &self.d1)
            .field("d2", &self.d2)
            .finish()
    }
}

impl BlockModel {
    pub fn dim(&self) -> usize {
        self.d1 + self.d2
    }

    /// Evaluate b(x, mu).
    pub fn drift_b(&self, x: &[f64], mu: Option<&MeasureSummary>) -> DVector<f64> {
        match &self.drift {
            Drift::Zero => DVector::zeros(self.d1),
            Drift::Affine { j1, j2, c } => {
                let x1 = DVector::from_column_slice(&x[..self.d1]);
                let x2 = DVector::from_column_slice(&x[self.d1..]);
                j1 * x1 + j2 * x2 + c
            }
            Drift::Custom(f) => f(x, mu),
        }
    }

    /// Evaluate Z(t, x, mu). `interaction` is the per-particle kernel average
    /// B^T gradV(x1, mu) required by the granular family (ignored otherwise).
    pub fn z_drift(
        &self,
        t: f64,
        x: &[f64],
        mu: Option<&MeasureSummary>,
        interaction: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        match &self.z {
            ZDrift::Affine { c1, c2, c0 } => {
                let x1 = DVector::from_column_slice(&x[..self.d1]);
                let x2 = DVector::from_column_slice(&x[self.d1..]);
                c1 * x1 + c2 * x2 + c0
            }
            ZDrift::GranularFriction { beta } => {
                let x1 = DVector::from_column_slice(&x[..self.d1]);
                let x2 = DVector::from_column_slice(&x[self.d1..]);
                let bt = self.b_mat.transpose();
                let bbt = &self.b_mat * self.b_mat.transpose();
                let fric = bbt
                    .lu()
                    .solve(&x1)
                    .expect("B B^T invertible for the granular family");
                let mut out = -(&bt * fric) * *beta - x2;
                if let Some(inter) = interaction {
                    out -= inter;
                }
                out
            }
            ZDrift::Custom(f) => f(t, x, mu),
        }
    }

    /// Half diffusion matrix a(t, mu) = sigma sigma^T / 2 on the noisy block.
    pub fn a2(&self, t: f64, mu: Option<&MeasureSummary>) -> DMatrix<f64> {
        let s = self.sigma_at(t, mu);
        &s * s.transpose() * 0.5
    }

    pub fn sigma_at(&self, t: f64, mu: Option<&MeasureSummary>) -> DMatrix<f64> {
        match &self.sigma {
            SigmaCoeff::Constant(s) => s.clone(),
            SigmaCoeff::Custom(f) => f(t, mu),
        }
    }

    /// True when any coefficient consumes the measure argument.
    pub fn needs_measure(&self) -> bool {
        self.mean_field.is_some()
            || matches!(self.z, ZDrift::Custom(_))
            || matches!(self.sigma, SigmaCoeff::Custom(_))
            || matches!(self.drift, Drift::Custom(_))
    }

    /// Jacobian of b with respect to x1, at x. Analytic for structured
    /// drifts, central finite differences (relative step `fd_step`) otherwise.
    pub fn drift_jacobian_x1(&self, x: &[f64], fd_step: f64) -> DMatrix<f64> {
        match &self.drift {
            Drift::Zero => DMatrix::zeros(self.d1, self.d1),
            Drift::Affine { j1, .. } => j1.clone(),
            Drift::Custom(_) => self.fd_jacobian(x, 0, self.d1, fd_step),
        }
    }

    /// Jacobian of b with respect to x2.
    pub fn drift_jacobian_x2(&self, x: &[f64], fd_step: f64) -> DMatrix<f64> {
        match &self.drift {
            Drift::Zero => DMatrix::zeros(self.d1, self.d2),
            Drift::Affine { j2, .. } => j2.clone(),
            Drift::Custom(_) => self.fd_jacobian(x, self.d1, self.d2, fd_step),
        }
    }

    fn fd_jacobian(&self, x: &[f64], offset: usize, ncols: usize, fd_step: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.d1, ncols);
        let mut xp = x.to_vec();
        for j in 0..ncols {
            let idx = offset + j;
            let h = fd_step * x[idx].abs().max(1.0);
            xp[idx] = x[idx] + h;
            let fp = self.drift_b(&xp, None);
            xp[idx] = x[idx] - h;
            let fm = self.drift_b(&xp, None);
            xp[idx] = x[idx];
            let col = (fp - fm) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

impl BlockModel {
    /// Kinetic Ornstein-Uhlenbeck: A = 0, B = I, b = 0,
    /// Z = -x1 - x2, sigma = sqrt(2) I, with d1 = d2 = d.
    pub fn kinetic_ou(d: usize) -> Self {
        BlockModel {
            d1: d,
            d2: d,
            a: DMatrix::zeros(d, d),
            b_mat: DMatrix::identity(d, d),
            drift: Drift::Zero,
            z: ZDrift::Affine {
                c1: -DMatrix::identity(d, d),
                c2: -DMatrix::identity(d, d),
                c0: DVector::zeros(d),
            },
            sigma: SigmaCoeff::Constant(DMatrix::identity(d, d) * 2f64.sqrt()),
            mean_field: None,
            name: "kinetic-ou".into(),
            z_depends_on_x1: true,
        }
    }

    /// Kalman chain with index k = 1: d1 = 2, d2 = 1,
    /// A = [[0,1],[0,0]], B = (0,1)^T, b = 0, Z = -x2, sigma = sqrt(2).
    pub fn chain() -> Self {
        BlockModel {
            d1: 2,
            d2: 1,
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b_mat: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            drift: Drift::Zero,
            z: ZDrift::Affine {
                c1: DMatrix::zeros(1, 2),
                c2: -DMatrix::identity(1, 1),
                c0: DVector::zeros(1),
            },
            sigma: SigmaCoeff::Constant(DMatrix::identity(1, 1) * 2f64.sqrt()),
            mean_field: None,
            name: "chain".into(),
            z_depends_on_x1: false,
        }
    }

    /// Granular-media preset with quadratic-attraction kernel
    /// grad_W(v, z) = theta (v - z1), friction beta, B = I, b = 0, and
    /// constant sigma = sqrt(2) I (alpha is the declared sigma Lipschitz
    /// constant fed to the contraction constants).
    pub fn granular(d: usize, beta: f64, theta: f64, alpha: f64) -> Self {
        BlockModel {
            d1: d,
            d2: d,
            a: DMatrix::zeros(d, d),
            b_mat: DMatrix::identity(d, d),
            drift: Drift::Zero,
            z: ZDrift::GranularFriction { beta },
            sigma: SigmaCoeff::Constant(DMatrix::identity(d, d) * 2f64.sqrt()),
            mean_field: Some(MeanFieldSpec {
                kernel: InteractionKernel::QuadraticAttraction { theta },
                theta,
                alpha,
                beta,
            }),
            name: "granular".into(),
            z_depends_on_x1: true,
        }
    }

    /// Look a preset up by CLI name.
    pub fn preset(name: &str, d: usize, beta: f64, theta: f64, alpha: f64) -> Result<Self> {
        match name {
            "kinetic-ou" => Ok(Self::kinetic_ou(d)),
            "chain" => Ok(Self::chain()),
            "granular" => Ok(Self::granular(d, beta, theta, alpha)),
            other => Err(KelError::Invalid(format!("unknown preset `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Closed-form constants
// ---------------------------------------------------------------------------

/// Smallest k such that rank[B, AB, ..., A^k B] = d1.
pub fn kalman_index(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<usize> {
    let d1 = a.nrows();
    if a.ncols() != d1 || b.nrows() != d1 {
        return Err(KelError::Invalid(format!(
            "dimension mismatch: A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let d2 = b.ncols();
    let mut stacked = DMatrix::zeros(d1, 0);
    let mut power = b.clone();
    let mut best_rank = 0;
    for k in 0..d1 {
        let old = stacked;
        stacked = DMatrix::zeros(d1, old.ncols() + d2);
        stacked.view_mut((0, 0), (d1, old.ncols())).copy_from(&old);
        stacked
            .view_mut((0, old.ncols()), (d1, d2))
            .copy_from(&power);
        best_rank = linalg::matrix_rank(&stacked, linalg::RANK_REL_TOL);
        if best_rank == d1 {
            return Ok(k);
        }
        power = a * power;
    }
    Err(KelError::NotControllable {
        rank: best_rank,
        d1,
    })
}

/// Contraction rate kappa = 2 (beta - theta1 - theta2) / (2 + 2 beta + beta^2
/// + sqrt(beta^4 + 4)); defined only when theta1 + theta2 < beta.
pub fn kappa(beta: f64, theta1: f64, theta2: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(KelError::Invalid(format!("beta must be positive, got {beta}")));
    }
    let sum = theta1 + theta2;
    if sum >= beta {
        return Err(KelError::RateNotPositive { sum, beta });
    }
    Ok(2.0 * (beta - sum) / (2.0 + 2.0 * beta + beta * beta + (beta.powi(4) + 4.0).sqrt()))
}

/// Twisted-metric coefficients a = sqrt((1+beta+beta^2)/(1+beta)) and
/// r = a - beta/a = 1/sqrt((1+beta)(1+beta+beta^2)), with r in (0, 1).
pub fn twisted_constants(beta: f64) -> (f64, f64) {
    assert!(beta > 0.0, "beta must be positive");
    let a = ((1.0 + beta + beta * beta) / (1.0 + beta)).sqrt();
    let r = 1.0 / ((1.0 + beta) * (1.0 + beta + beta * beta)).sqrt();
    (a, r)
}

/// theta1 = theta (1/2 + s) and theta2 = theta s / 2 + alpha (beta+1)/(2 beta)
/// with s = sqrt(2 + 2 beta + beta^2).
pub fn granular_thetas(theta: f64, alpha: f64, beta: f64) -> (f64, f64) {
    assert!(beta > 0.0, "beta must be positive");
    assert!(theta >= 0.0 && alpha >= 0.0, "theta and alpha must be nonnegative");
    let s = (2.0 + 2.0 * beta + beta * beta).sqrt();
    (theta * (0.5 + s), 0.5 * theta * s + alpha * (beta + 1.0) / (2.0 * beta))
}

/// The quadratic form behind the twisted metric, psi_bar^2(x, y) =
/// (x - y)^T M (x - y), with M = [[a^2 I, r a B], [r a B^T, B^T B]].
#[derive(Debug, Clone)]
pub struct TwistedForm {
    pub beta: f64,
    pub a: f64,
    pub r: f64,
    pub b_mat: DMatrix<f64>,
    matrix: DMatrix<f64>,
}

impl TwistedForm {
    pub fn new(beta: f64, b_mat: &DMatrix<f64>) -> Self {
        let (a, r) = twisted_constants(beta);
        let d1 = b_mat.nrows();
        let d2 = b_mat.ncols();
        let dim = d1 + d2;
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (d1, d1))
            .copy_from(&(DMatrix::identity(d1, d1) * (a * a)));
        m.view_mut((0, d1), (d1, d2)).copy_from(&(b_mat * (r * a)));
        m.view_mut((d1, 0), (d2, d1))
            .copy_from(&(b_mat.transpose() * (r * a)));
        m.view_mut((d1, d1), (d2, d2))
            .copy_from(&(b_mat.transpose() * b_mat));
        TwistedForm {
            beta,
            a,
            r,
            b_mat: b_mat.clone(),
            matrix: m,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower Cholesky factor L with M = L L^T; |L^T d| realizes psi_bar as a
    /// Euclidean norm of transformed coordinates.
    pub fn cholesky_factor(&self) -> Result<DMatrix<f64>> {
        nalgebra::Cholesky::new(self.matrix.clone())
            .map(|c| c.l())
            .ok_or(KelError::NonPositiveForm { radicand: f64::NAN })
    }

    pub fn squared(&self, x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| xi - yi).collect();
        let dv = DVector::from_column_slice(&d);
        (dv.transpose() * &self.matrix * dv)[(0, 0)]
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let sq = self.squared(x, y);
        if sq < -1e-12 {
            return Err(KelError::NonPositiveForm { radicand: sq });
        }
        Ok(sq.max(0.0).sqrt())
    }

    /// Equivalence constant C with C^{-1}|x-y| <= psi_bar(x,y) <= C|x-y|,
    /// from the extreme eigenvalues of the form.
    pub fn equivalence_constant(&self) -> f64 {
        let eig = linalg::sym_project(&self.matrix).symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let lmin = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        lmax.sqrt().max(1.0 / lmin.sqrt())
    }
}

/// psi_bar(x, y) for the granular family; states are full (x1, x2) vectors.
pub fn twisted_metric(x: &[f64], y: &[f64], beta: f64, b_mat: &DMatrix<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(KelError::Invalid(format!(
            "state dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    TwistedForm::new(beta, b_mat).distance(x, y)
}

// ---------------------------------------------------------------------------
// Dissipativity probing
// ---------------------------------------------------------------------------

/// Sampling plan for the dissipativity probe: `n_states` uniform states in
/// [-box_half, box_half]^{d1+d2} crossed with `n_dirs` random unit vectors.
#[derive(Debug, Clone, Serialize)]
pub struct ProbePlan {
    pub n_states: usize,
    pub n_dirs: usize,
    pub box_half: f64,
    pub seed: u64,
    pub fd_step: f64,
}

impl Default for ProbePlan {
    fn default() -> Self {
        ProbePlan {
            n_states: 10_000,
            n_dirs: 100,
            box_half: 5.0,
            seed: 0x5EED,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DissipativityCheck {
    pub delta: f64,
    pub pass: bool,
    /// Worst value of <(grad2 b) B^T v, v> + delta |B^T v|^2 over the probes.
    pub worst_margin: f64,
    pub witness_x: Vec<f64>,
    pub witness_v: Vec<f64>,
}

/// Probe the dissipativity condition
/// `<(grad2 b(x)) B^T v, v> + delta |B^T v|^2 >= 0` over the plan.
pub fn check_dissipativity(model: &BlockModel, delta: f64, plan: &ProbePlan) -> Result<DissipativityCheck> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(KelError::Invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    let dim = model.dim();
    let bt = model.b_mat.transpose();

    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(plan.n_dirs);
    let mut buf = vec![0.0; model.d1];
    for j in 0..plan.n_dirs {
        rng::fill_normals(plan.seed, j as u64, 1, &mut buf);
        let mut v = DVector::from_column_slice(&buf);
        let n = v.norm();
        if n > 0.0 {
            v /= n;
        } else {
            v[0] = 1.0;
        }
        dirs.push(v);
    }

    let mut worst = f64::INFINITY;
    let mut witness_x = vec![0.0; dim];
    let mut witness_v = vec![0.0; model.d1];
    let mut xbuf = vec![0.0; dim];
    for i in 0..plan.n_states {
        rng::fill_uniforms(plan.seed, i as u64, 2, &mut xbuf);
        let x: Vec<f64> = xbuf
            .iter()
            .map(|u| (2.0 * u - 1.0) * plan.box_half)
            .collect();
        let grad2 = model.drift_jacobian_x2(&x, plan.fd_step);
        for v in &dirs {
            let btv = &bt * v;
            let margin = (&grad2 * &btv).dot(v) + delta * btv.norm_squared();
            if margin < worst {
                worst = margin;
                witness_x.copy_from_slice(&x);
                witness_v.copy_from_slice(v.as_slice());
            }
        }
    }
    Ok(DissipativityCheck {
        delta,
        pass: worst >= 0.0,
        worst_margin: worst,
        witness_x,
        witness_v,
    })
}

// ---------------------------------------------------------------------------
// Condition report
// ---------------------------------------------------------------------------

/// All structural conditions and constants for one model, as reported by
/// `kel check`.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    /// None means the Kalman condition failed for every k <= d1 - 1.
    pub kalman_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dissipativity: Option<DissipativityCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta2: Option<f64>,
    /// Present only when theta1 + theta2 < beta.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub twisted_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub twisted_r: Option<f64>,
}

/// Assemble the [`ConditionReport`] for a model. `delta` enables the
/// dissipativity probe; mean-field constants appear when declared.
pub fn condition_report(
    model: &BlockModel,
    delta: Option<f64>,
    plan: &ProbePlan,
) -> Result<ConditionReport> {
    let kalman = match kalman_index(&model.a, &model.b_mat) {
        Ok(k) => Some(k),
        Err(KelError::NotControllable { .. }) => None,
        Err(e) => return Err(e),
    };
    let dissipativity = match delta {
        Some(d) => Some(check_dissipativity(model, d, plan)?),
        None => None,
    };
    let (theta1, theta2, kap, ta, tr) = match &model.mean_field {
        Some(mf) => {
            let (t1, t2) = granular_thetas(mf.theta, mf.alpha, mf.beta);
            let k = kappa(mf.beta, t1, t2).ok();
            let (a, r) = twisted_constants(mf.beta);
            (Some(t1), Some(t2), k, Some(a), Some(r))
        }
        None => (None, None, None, None, None),
    };
    Ok(ConditionReport {
        kalman_index: kalman,
        dissipativity,
        theta1,
        theta2,
        kappa: kap,
        twisted_a: ta,
        twisted_r: tr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kalman_identity_b_is_index_zero() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        assert_eq!(kalman_index(&a, &b).unwrap(), 0);
    }

    #[test]
    fn kalman_chain_is_index_one() {
        // Oracle: rank[B, AB] with B = (0,1)^T, AB = (1,0)^T is 2 by
        // inspection, while rank[B] = 1.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(kalman_index(&a, &b).unwrap(), 1);
    }

    #[test]
    fn kalman_zero_pair_not_controllable() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 1);
        assert!(matches!(
            kalman_index(&a, &b),
            Err(KelError::NotControllable { .. })
        ));
    }

    /// Exact integer rank by fraction-free Gaussian elimination; the
    /// independent oracle for the random-matrix agreement property.
    fn bareiss_rank(mut m: Vec<Vec<i64>>) -> usize {
        let rows = m.len();
        if rows == 0 {
            return 0;
        }
        let cols = m[0].len();
        let mut rank = 0;
        let mut prev = 1i64;
        for col in 0..cols {
            if rank == rows {
                break;
            }
            let pivot = (rank..rows).find(|&r| m[r][col] != 0);
            let Some(p) = pivot else { continue };
            m.swap(rank, p);
            for r in 0..rows {
                if r == rank {
                    continue;
                }
                for c in 0..cols {
                    if c == col {
                        continue;
                    }
                    m[r][c] = (m[rank][col] * m[r][c] - m[r][col] * m[rank][c]) / prev;
                }
                m[r][col] = 0;
            }
            prev = m[rank][col];
            rank += 1;
        }
        rank
    }

    #[test]
    fn kalman_agrees_with_exact_integer_rank() {
        let mut buf = [0.0; 1];
        let mut int_at = |s: u64, c: u64| -> i64 {
            rng::fill_uniforms(99, s, c, &mut buf);
            (buf[0] * 7.0).floor() as i64 - 3
        };
        for trial in 0..200u64 {
            let d1 = 1 + (trial % 4) as usize;
            let d2 = 1 + (trial % 3) as usize;
            let mut a_i = vec![vec![0i64; d1]; d1];
            let mut b_i = vec![vec![0i64; d2]; d1];
            let mut ctr = 0u64;
            for r in 0..d1 {
                for c in 0..d1 {
                    a_i[r][c] = int_at(trial, ctr);
                    ctr += 1;
                }
                for c in 0..d2 {
                    b_i[r][c] = int_at(trial, ctr);
                    ctr += 1;
                }
            }
            let a = DMatrix::from_fn(d1, d1, |r, c| a_i[r][c] as f64);
            let b = DMatrix::from_fn(d1, d2, |r, c| b_i[r][c] as f64);

            // Brute-force oracle: smallest k with exact integer rank d1.
            let mut expect: Option<usize> = None;
            let mut stacked: Vec<Vec<i64>> = vec![vec![]; d1];
            let mut power_f = b.clone();
            let mut power_i: Vec<Vec<i64>> = b_i.clone();
            for k in 0..d1 {
                for r in 0..d1 {
                    stacked[r].extend(power_i[r].iter());
                }
                if bareiss_rank(stacked.clone()) == d1 {
                    expect = Some(k);
                    break;
                }
                power_f = &a * &power_f;
                power_i = (0..d1)
                    .map(|r| {
                        (0..d2)
                            .map(|c| {
                                (0..d1)
                                    .map(|j| a_i[r][j] * power_i[j][c])
                                    .sum::<i64>()
                            })
                            .collect()
                    })
                    .collect();
            }
            let _ = power_f;
            match (kalman_index(&a, &b), expect) {
                (Ok(k), Some(e)) => assert_eq!(k, e, "trial {trial}"),
                (Err(KelError::NotControllable { .. }), None) => {}
                (got, want) => panic!("trial {trial}: got {got:?}, want {want:?}"),
            }
        }
    }

    #[test]
    fn kappa_matches_closed_form() {
        // 2 / (5 + sqrt(5)) and 3.6 / (10 + sqrt(20)), evaluated directly.
        assert_relative_eq!(kappa(1.0, 0.0, 0.0).unwrap(), 0.276393202250021, epsilon = 1e-12);
        assert_relative_eq!(
            kappa(2.0, 0.1, 0.1).unwrap(),
            3.6 / (10.0 + 20f64.sqrt()),
            epsilon = 1e-14
        );
        assert_relative_eq!(kappa(2.0, 0.1, 0.1).unwrap(), 0.2487538820250189, epsilon = 1e-12);
    }

    #[test]
    fn kappa_rejects_non_contractive_thetas() {
        assert!(matches!(
            kappa(1.0, 0.6, 0.5),
            Err(KelError::RateNotPositive { .. })
        ));
    }

    #[test]
    fn twisted_constants_beta_one() {
        let (a, r) = twisted_constants(1.0);
        assert_relative_eq!(a, 1.5f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(r, 1.0 / 6f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(a * r, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn twisted_identities_hold_across_betas() {
        for beta in [0.5, 1.0, 2.0, 5.0] {
            let (a, r) = twisted_constants(beta);
            assert!(r > 0.0 && r < 1.0);
            assert!((a * a - beta - r * a).abs() < 1e-12, "beta {beta}");
            assert!((1.0 - r * a - beta / (1.0 + beta)).abs() < 1e-12, "beta {beta}");
            assert!((r * a * beta - beta / (1.0 + beta)).abs() < 1e-12, "beta {beta}");
        }
    }

    #[test]
    fn granular_thetas_examples() {
        let (t1, t2) = granular_thetas(0.05, 0.02, 1.0);
        assert_relative_eq!(t1, 0.1368033988749895, epsilon = 1e-12);
        assert_relative_eq!(t2, 0.0759016994374948, epsilon = 1e-12);
        let k = kappa(1.0, t1, t2).unwrap();
        assert_relative_eq!(k, 0.2176029589925279, epsilon = 1e-12);
        let (z1, z2) = granular_thetas(0.0, 0.0, 1.0);
        assert_eq!((z1, z2), (0.0, 0.0));
    }

    #[test]
    fn kappa_decreasing_in_theta_sum() {
        for beta in [0.5, 1.0, 3.0] {
            let mut prev = f64::INFINITY;
            for i in 0..20 {
                let s = beta * 0.9 * i as f64 / 20.0;
                let k = kappa(beta, s / 2.0, s / 2.0).unwrap();
                assert!(k < prev, "kappa not decreasing at beta {beta}, sum {s}");
                prev = k;
            }
        }
    }

    #[test]
    fn twisted_metric_basics() {
        let b = DMatrix::identity(1, 1);
        let x = [1.0, 2.0];
        assert_eq!(twisted_metric(&x, &x, 1.0, &b).unwrap(), 0.0);
        // Block-1-only difference reduces to a |delta1|.
        let y = [0.0, 2.0];
        let (a, _) = twisted_constants(1.0);
        assert_relative_eq!(twisted_metric(&x, &y, 1.0, &b).unwrap(), a, epsilon = 1e-12);
    }

    #[test]
    fn twisted_dominated_by_ac3_constant() {
        // psi_bar^2 <= (2 + 2 beta + beta^2 + sqrt(beta^4 + 4)) / (2 (1 + beta)) psi^2
        let mut buf = [0.0; 4];
        for beta in [0.5, 1.0, 2.0] {
            let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.8]);
            let form = TwistedForm::new(beta, &b);
            let c = (2.0 + 2.0 * beta + beta * beta + (beta.powi(4) + 4.0).sqrt())
                / (2.0 * (1.0 + beta));
            for i in 0..200 {
                rng::fill_normals(5, i, 0, &mut buf);
                let x = buf.to_vec();
                let y = [0.0; 4];
                let psibar2 = form.squared(&x, &y);
                let d2v = DVector::from_column_slice(&x[2..]);
                let psi2 = x[0] * x[0] + x[1] * x[1] + (&b * d2v).norm_squared();
                assert!(
                    psibar2 <= c * psi2 + 1e-10,
                    "AC3 violated at beta {beta}: {psibar2} > {}",
                    c * psi2
                );
            }
        }
    }

    #[test]
    fn twisted_metric_axioms_on_sampled_triples() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.9]);
        let form = TwistedForm::new(0.8, &b);
        let mut buf = [0.0; 12];
        for i in 0..300 {
            rng::fill_normals(17, i, 0, &mut buf);
            let x = &buf[0..4];
            let y = &buf[4..8];
            let z = &buf[8..12];
            let dxy = form.distance(x, y).unwrap();
            let dyx = form.distance(y, x).unwrap();
            assert_eq!(dxy, dyx);
            let dxz = form.distance(x, z).unwrap();
            let dzy = form.distance(z, y).unwrap();
            assert!(dxy <= dxz + dzy + 1e-10, "triangle violated");
        }
    }

    #[test]
    fn twisted_equivalence_with_euclidean() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.9]);
        let form = TwistedForm::new(0.8, &b);
        let c = form.equivalence_constant();
        let mut buf = [0.0; 8];
        for i in 0..200 {
            rng::fill_normals(23, i, 0, &mut buf);
            let x = &buf[0..4];
            let y = &buf[4..8];
            let e: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let d = form.distance(x, y).unwrap();
            assert!(d <= c * e + 1e-12 && d >= e / c - 1e-12);
        }
    }

    #[test]
    fn dissipativity_zero_drift_passes() {
        let model = BlockModel::kinetic_ou(2);
        let plan = ProbePlan {
            n_states: 200,
            n_dirs: 20,
            ..ProbePlan::default()
        };
        let check = check_dissipativity(&model, 0.3, &plan).unwrap();
        assert!(check.pass);
        // For b = 0 the margin is exactly delta |B^T v|^2 = delta.
        assert_relative_eq!(check.worst_margin, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn dissipativity_small_sine_passes_large_negative_fails() {
        // b(x) = eps sin(x2) componentwise with B = I: the worst inner
        // product is -eps |v|^2 >= -delta |v|^2 for eps < delta.
        let eps = 0.1;
        let mut model = BlockModel::kinetic_ou(2);
        model.drift = Drift::Custom(Arc::new(move |x: &[f64], _| {
            DVector::from_column_slice(&[eps * x[2].sin(), eps * x[3].sin()])
        }));
        let plan = ProbePlan {
            n_states: 500,
            n_dirs: 30,
            ..ProbePlan::default()
        };
        let check = check_dissipativity(&model, 0.2, &plan).unwrap();
        assert!(check.pass, "worst margin {}", check.worst_margin);

        // b(x) = -x2: inner product is -|v|^2 < -0.5 |v|^2.
        let mut model = BlockModel::kinetic_ou(2);
        model.drift = Drift::Custom(Arc::new(|x: &[f64], _| {
            DVector::from_column_slice(&[-x[2], -x[3]])
        }));
        let check = check_dissipativity(&model, 0.5, &plan).unwrap();
        assert!(!check.pass);
        assert!(check.worst_margin < 0.0);
    }

    #[test]
    fn condition_report_granular_preset() {
        let model = BlockModel::granular(1, 1.0, 0.05, 0.02);
        let plan = ProbePlan {
            n_states: 100,
            n_dirs: 10,
            ..ProbePlan::default()
        };
        let rep = condition_report(&model, Some(0.5), &plan).unwrap();
        assert_eq!(rep.kalman_index, Some(0));
        assert!(rep.dissipativity.unwrap().pass);
        let k = rep.kappa.unwrap();
        assert_relative_eq!(k, 0.2176029589925279, epsilon = 1e-10);
        let (a, r) = (rep.twisted_a.unwrap(), rep.twisted_r.unwrap());
        assert!((a * a - 1.0 - r * a).abs() < 1e-12);
    }
}
