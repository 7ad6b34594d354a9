//! Python bindings for the kel laboratory: closed-form constants, Gaussian
//! oracles, transport and entropy estimators, simulation, and the Gramian,
//! exposed over plain lists so no numpy dependency is required.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use kel::entropy_est::{self, DvBudget};
use kel::gaussian::{self, GaussianState};
use kel::gramian;
use kel::model::{self, BlockModel};
use kel::sde::{self, InitSampler, SimPlan};
use kel::transport::{self, DiscreteCloud, GroundCost, SinkhornParams};
use nalgebra::{DMatrix, DVector};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(format!("{e}"))
}

fn cloud(points: Vec<Vec<f64>>) -> PyResult<DiscreteCloud> {
    let dim = points.first().map(|r| r.len()).unwrap_or(0);
    if dim == 0 {
        return Err(PyValueError::new_err("empty point list"));
    }
    let mut flat = Vec::with_capacity(points.len() * dim);
    for row in &points {
        if row.len() != dim {
            return Err(PyValueError::new_err("ragged point list"));
        }
        flat.extend_from_slice(row);
    }
    DiscreteCloud::new(flat, dim).map_err(err)
}

fn gaussian_state(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<GaussianState> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("covariance shape mismatch"));
    }
    let m = DMatrix::from_fn(d, d, |r, c| cov[r][c]);
    GaussianState::new(DVector::from_column_slice(&mean), m).map_err(err)
}

fn matrix_to_lists(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

/// Contraction rate kappa(beta, theta1, theta2).
#[pyfunction]
fn kappa(beta: f64, theta1: f64, theta2: f64) -> PyResult<f64> {
    model::kappa(beta, theta1, theta2).map_err(err)
}

/// Twisted-metric coefficients (a, r) for the given beta.
#[pyfunction]
fn twisted_constants(beta: f64) -> (f64, f64) {
    model::twisted_constants(beta)
}

/// (theta1, theta2) for the granular kernel constants.
#[pyfunction]
fn granular_thetas(theta: f64, alpha: f64, beta: f64) -> (f64, f64) {
    model::granular_thetas(theta, alpha, beta)
}

/// Smallest k with rank[B, AB, ..., A^k B] = d1; raises when uncontrollable.
#[pyfunction]
fn kalman_index(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<usize> {
    let d1 = a.len();
    let d2 = b.first().map(|r| r.len()).unwrap_or(0);
    let am = DMatrix::from_fn(d1, d1, |r, c| a[r][c]);
    let bm = DMatrix::from_fn(d1, d2, |r, c| b[r][c]);
    model::kalman_index(&am, &bm).map_err(err)
}

/// Twisted distance psi_bar(x, y) for block dimension d = len(x)/2.
#[pyfunction]
fn twisted_metric(x: Vec<f64>, y: Vec<f64>, beta: f64) -> PyResult<f64> {
    let d = x.len() / 2;
    model::twisted_metric(&x, &y, beta, &DMatrix::identity(d, d)).map_err(err)
}

/// Condition report for a preset, as a JSON string.
#[pyfunction]
#[pyo3(signature = (preset, d=1, beta=1.0, theta=0.0, alpha=0.0, delta=None))]
fn check_preset(
    preset: &str,
    d: usize,
    beta: f64,
    theta: f64,
    alpha: f64,
    delta: Option<f64>,
) -> PyResult<String> {
    let m = BlockModel::preset(preset, d, beta, theta, alpha).map_err(err)?;
    let plan = model::ProbePlan {
        n_states: 1000,
        n_dirs: 32,
        ..model::ProbePlan::default()
    };
    let rep = model::condition_report(&m, delta, &plan).map_err(err)?;
    serde_json::to_string_pretty(&rep).map_err(err)
}

/// KL(p || q) between Gaussians given (mean, covariance) pairs.
#[pyfunction]
fn gaussian_kl(
    mean_p: Vec<f64>,
    cov_p: Vec<Vec<f64>>,
    mean_q: Vec<f64>,
    cov_q: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let p = gaussian_state(mean_p, cov_p)?;
    let q = gaussian_state(mean_q, cov_q)?;
    gaussian::gaussian_kl(&p, &q).map_err(err)
}

/// W2 between Gaussians given (mean, covariance) pairs.
#[pyfunction]
fn gaussian_w2(
    mean_p: Vec<f64>,
    cov_p: Vec<Vec<f64>>,
    mean_q: Vec<f64>,
    cov_q: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let p = gaussian_state(mean_p, cov_p)?;
    let q = gaussian_state(mean_q, cov_q)?;
    Ok(gaussian::gaussian_w2(&p, &q))
}

/// Exact W2 between equal-size clouds by optimal assignment.
#[pyfunction]
fn w2_exact(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let cx = cloud(x)?;
    let cy = cloud(y)?;
    transport::w2_exact(&cx, &cy, &GroundCost::SquaredEuclidean)
        .map(|e| e.value)
        .map_err(err)
}

/// Debiased entropic W2 estimate (epsilon = 0 uses 0.01 x median cost).
#[pyfunction]
#[pyo3(signature = (x, y, epsilon=0.0))]
fn w2_sinkhorn(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, epsilon: f64) -> PyResult<f64> {
    let cx = cloud(x)?;
    let cy = cloud(y)?;
    let params = SinkhornParams {
        epsilon,
        ..SinkhornParams::default()
    };
    transport::w2_sinkhorn(&cx, &cy, &GroundCost::SquaredEuclidean, &params)
        .map(|e| e.value)
        .map_err(err)
}

/// Two-sample k-NN KL estimate.
#[pyfunction]
#[pyo3(signature = (p, q, k=5))]
fn knn_kl(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let cp = cloud(p)?;
    let cq = cloud(q)?;
    entropy_est::knn_kl(&cp, &cq, k).map(|e| e.value).map_err(err)
}

/// Donsker-Varadhan lower bound over the quadratic family.
#[pyfunction]
fn dv_lower_bound(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    let cp = cloud(p)?;
    let cq = cloud(q)?;
    entropy_est::dv_lower_bound(&cp, &cq, &DvBudget::default())
        .map(|e| e.value)
        .map_err(err)
}

/// Integrate a preset from a point start; returns the terminal ensemble as a
/// list of states.
#[pyfunction]
#[pyo3(signature = (preset, x0, n, h, t_end, seed=0, d=1, beta=1.0, theta=0.0, alpha=0.0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    preset: &str,
    x0: Vec<f64>,
    n: usize,
    h: f64,
    t_end: f64,
    seed: u64,
    d: usize,
    beta: f64,
    theta: f64,
    alpha: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let m = BlockModel::preset(preset, d, beta, theta, alpha).map_err(err)?;
    let plan = SimPlan {
        n,
        h,
        t_grid: vec![t_end],
        seed,
    };
    let snaps = sde::simulate(&m, &InitSampler::Point(x0), &plan).map_err(err)?;
    let ens = snaps.last().unwrap();
    Ok((0..ens.n).map(|i| ens.particle(i).to_vec()).collect())
}

/// Weighted controllability Gramian Q_{t,s} of a preset; returns
/// (Q as nested lists, lambda_min).
#[pyfunction]
#[pyo3(signature = (preset, t, s, nodes=64, d=1))]
fn gramian_q(preset: &str, t: f64, s: f64, nodes: usize, d: usize) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let m = BlockModel::preset(preset, d, 1.0, 0.0, 0.0).map_err(err)?;
    let g = gramian::gramian_q(&m, t, s, nodes).map_err(err)?;
    let q = g.q_matrix();
    Ok((matrix_to_lists(&q), g.lambda_min))
}

/// Exact kernel entropy curve of a linear preset from two starts; returns
/// (t, kl) pairs, skipping numerically singular times.
#[pyfunction]
#[pyo3(signature = (preset, x, y, t_grid, d=1))]
fn entropy_cost_curve(
    preset: &str,
    x: Vec<f64>,
    y: Vec<f64>,
    t_grid: Vec<f64>,
    d: usize,
) -> PyResult<Vec<(f64, f64)>> {
    let m = BlockModel::preset(preset, d, 1.0, 0.0, 0.0).map_err(err)?;
    let curve = gaussian::entropy_cost_curve(&m, &x, &y, &t_grid, 1e4).map_err(err)?;
    Ok(curve
        .into_iter()
        .filter_map(|(t, kl)| kl.map(|v| (t, v)))
        .collect())
}

#[pymodule]
fn kel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kappa, m)?)?;
    m.add_function(wrap_pyfunction!(twisted_constants, m)?)?;
    m.add_function(wrap_pyfunction!(granular_thetas, m)?)?;
    m.add_function(wrap_pyfunction!(kalman_index, m)?)?;
    m.add_function(wrap_pyfunction!(twisted_metric, m)?)?;
    m.add_function(wrap_pyfunction!(check_preset, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_w2, m)?)?;
    m.add_function(wrap_pyfunction!(w2_exact, m)?)?;
    m.add_function(wrap_pyfunction!(w2_sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(knn_kl, m)?)?;
    m.add_function(wrap_pyfunction!(dv_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(gramian_q, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_cost_curve, m)?)?;
    Ok(())
}
