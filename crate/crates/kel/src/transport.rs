//! Wasserstein-2 distances between uniform empirical measures.
//!
//! Two solvers over a shared squared ground cost (Euclidean or the twisted
//! psi_bar form): an exact assignment solver (shortest augmenting path, the
//! scipy `linear_sum_assignment` algorithm) for N up to a cap, and a
//! log-domain Sinkhorn solver with epsilon annealing and divergence
//! debiasing for larger clouds.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{KelError, Result};
use crate::model::TwistedForm;
use crate::rng;

/// Default size cap for the exact assignment route.
pub const EXACT_CAP: usize = 2048;

/// Uniformly weighted point cloud (rows are points).
#[derive(Debug, Clone)]
pub struct DiscreteCloud {
    pub points: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

impl DiscreteCloud {
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(KelError::Invalid(format!(
                "point buffer length {} is not a multiple of dim {dim}",
                points.len()
            )));
        }
        Ok(DiscreteCloud {
            n: points.len() / dim,
            points,
            dim,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Apply a linear map L^T to every point (used to realize the twisted
    /// cost as a Euclidean one).
    pub fn transformed(&self, lt: &DMatrix<f64>) -> DiscreteCloud {
        let mut out = vec![0.0; self.points.len()];
        for i in 0..self.n {
            let p = self.row(i);
            for r in 0..self.dim {
                let mut acc = 0.0;
                for c in 0..self.dim {
                    acc += lt[(r, c)] * p[c];
                }
                out[i * self.dim + r] = acc;
            }
        }
        DiscreteCloud {
            points: out,
            n: self.n,
            dim: self.dim,
        }
    }
}

/// Ground cost for the squared transport problem.
#[derive(Debug, Clone)]
pub enum GroundCost {
    SquaredEuclidean,
    /// psi_bar^2 with the given (beta, B); realized by a Cholesky
    /// pre-transform of the coordinates.
    TwistedSquared { beta: f64, b_mat: DMatrix<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    ExactAssignment,
    Sinkhorn,
    GaussianClosedForm,
    KnnKl,
    DvLowerBound,
}

/// A divergence value with its estimator identity and optional uncertainty.
#[derive(Debug, Clone, Serialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub estimator: EstimatorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl DivergenceEstimate {
    pub fn new(value: f64, estimator: EstimatorKind) -> Self {
        DivergenceEstimate {
            value,
            estimator,
            uncertainty: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Dense squared-cost matrix between clouds under the chosen ground cost.
pub fn cost_matrix(x: &DiscreteCloud, y: &DiscreteCloud, cost: &GroundCost) -> Result<Vec<f64>> {
    if x.dim != y.dim {
        return Err(KelError::Invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim, y.dim
        )));
    }
    let (xt, yt);
    let (xs, ys) = match cost {
        GroundCost::SquaredEuclidean => (x, y),
        GroundCost::TwistedSquared { beta, b_mat } => {
            let form = TwistedForm::new(*beta, b_mat);
            let lt = form.cholesky_factor()?.transpose();
            xt = x.transformed(&lt);
            yt = y.transformed(&lt);
            (&xt, &yt)
        }
    };
    let m = ys.n;
    let mut out = vec![0.0; xs.n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let xi = xs.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = sq_dist(xi, ys.row(j));
        }
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Exact assignment (shortest augmenting path, square cost matrix)
// ---------------------------------------------------------------------------

/// Solve the square linear sum assignment problem on an n x n cost matrix
/// (row-major). Returns the column assigned to each row. Dijkstra-style
/// shortest augmenting path with dual potentials, O(n^3).
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    const FREE: usize = usize::MAX;
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n]; // row potentials
    let mut v = vec![0.0; n]; // column potentials
    let mut col4row = vec![FREE; n]; // column assigned to each row
    let mut row4col = vec![FREE; n]; // row assigned to each column

    let mut shortest = vec![inf; n];
    let mut path = vec![FREE; n]; // row that reached column j on the tree
    let mut in_tree_col = vec![false; n];
    let mut in_tree_row = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);

    for cur_row in 0..n {
        shortest.iter_mut().for_each(|s| *s = inf);
        in_tree_col.iter_mut().for_each(|s| *s = false);
        in_tree_row.iter_mut().for_each(|s| *s = false);
        remaining.clear();
        remaining.extend(0..n);

        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink;
        loop {
            in_tree_row[i] = true;
            let mut lowest = inf;
            let mut index = usize::MAX;
            for (pos, &j) in remaining.iter().enumerate() {
                let r = min_val + cost[i * n + j] - u[i] - v[j];
                if r < shortest[j] {
                    shortest[j] = r;
                    path[j] = i;
                }
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row4col[j] == FREE)
                {
                    lowest = shortest[j];
                    index = pos;
                }
            }
            debug_assert!(index != usize::MAX, "assignment infeasible");
            min_val = lowest;
            let j = remaining.swap_remove(index);
            in_tree_col[j] = true;
            if row4col[j] == FREE {
                sink = j;
                break;
            }
            i = row4col[j];
        }

        u[cur_row] += min_val;
        for i2 in 0..n {
            if in_tree_row[i2] && i2 != cur_row {
                u[i2] += min_val - shortest[col4row[i2]];
            }
        }
        for j in 0..n {
            if in_tree_col[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        // Augment along predecessor rows back to the root.
        let mut j = sink;
        loop {
            let i2 = path[j];
            row4col[j] = i2;
            std::mem::swap(&mut col4row[i2], &mut j);
            if i2 == cur_row {
                break;
            }
        }
    }
    col4row
}

/// Exact W2 between equal-size uniform clouds via optimal assignment.
/// Returns the estimate and the matching (y index for each x index).
pub fn w2_exact_with_matching(
    x: &DiscreteCloud,
    y: &DiscreteCloud,
    cost: &GroundCost,
    cap: usize,
) -> Result<(DivergenceEstimate, Vec<usize>)> {
    if x.n != y.n {
        return Err(KelError::Invalid(format!(
            "clouds must have equal size, got {} and {}",
            x.n, y.n
        )));
    }
    if x.n == 0 {
        return Err(KelError::Invalid("empty clouds".into()));
    }
    if x.n > cap {
        return Err(KelError::TooLarge { n: x.n, cap });
    }
    let c = cost_matrix(x, y, cost)?;
    let matching = solve_assignment(&c, x.n);
    let total: f64 = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| c[i * x.n + j])
        .sum();
    let value = (total / x.n as f64).max(0.0).sqrt();
    let est = DivergenceEstimate::new(value, EstimatorKind::ExactAssignment)
        .with_meta("n", serde_json::json!(x.n));
    Ok((est, matching))
}

/// Exact W2 with the default cap.
pub fn w2_exact(x: &DiscreteCloud, y: &DiscreteCloud, cost: &GroundCost) -> Result<DivergenceEstimate> {
    w2_exact_with_matching(x, y, cost, EXACT_CAP).map(|(e, _)| e)
}

// ---------------------------------------------------------------------------
// Sinkhorn
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SinkhornParams {
    /// Target regularization, absolute (squared-cost units).
    pub epsilon: f64,
    pub max_iters: usize,
    /// L1 marginal violation tolerance.
    pub tol: f64,
    /// Geometric annealing stages from the median cost down to epsilon.
    pub anneal_stages: usize,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: 0.0, // caller sets; 0 means "0.01 x median cost"
            max_iters: 2000,
            tol: 1e-9,
            anneal_stages: 4,
        }
    }
}

struct SinkhornState {
    f: Vec<f64>,
    g: Vec<f64>,
    iters: usize,
    violation: f64,
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Balanced log-domain Sinkhorn on a dense squared-cost matrix with uniform
/// marginals. Returns potentials at the last iterate.
fn sinkhorn_core(
    c: &[f64],
    n: usize,
    m: usize,
    eps: f64,
    max_iters: usize,
    tol: f64,
    f0: Option<Vec<f64>>,
    g0: Option<Vec<f64>>,
    symmetric: bool,
) -> SinkhornState {
    let la = -(n as f64).ln();
    let lb = -(m as f64).ln();
    let mut f = f0.unwrap_or_else(|| vec![0.0; n]);
    let mut g = g0.unwrap_or_else(|| vec![0.0; m]);
    let mut violation = f64::INFINITY;
    let mut iters = 0;
    for it in 0..max_iters {
        iters = it + 1;
        let f_new: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| -eps * logsumexp((0..m).map(|j| (g[j] - c[i * m + j]) / eps + lb)))
            .collect();
        if symmetric {
            // Symmetric fixed point for self-transport: average to damp the
            // two-cycle, then mirror.
            f = f
                .iter()
                .zip(&f_new)
                .map(|(old, new)| 0.5 * (old + new))
                .collect();
            g.copy_from_slice(&f);
        } else {
            f = f_new;
            g = (0..m)
                .into_par_iter()
                .map(|j| -eps * logsumexp((0..n).map(|i| (f[i] - c[i * m + j]) / eps + la)))
                .collect();
        }
        // Row-marginal L1 violation of the implied plan.
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                logsumexp((0..m).map(|j| (f[i] + g[j] - c[i * m + j]) / eps + la + lb)).exp()
            })
            .collect();
        violation = rows.iter().map(|r| (r - 1.0 / n as f64).abs()).sum();
        if violation < tol {
            break;
        }
    }
    SinkhornState {
        f,
        g,
        iters,
        violation,
    }
}

fn dual_value(st: &SinkhornState) -> f64 {
    st.f.iter().sum::<f64>() / st.f.len() as f64 + st.g.iter().sum::<f64>() / st.g.len() as f64
}

/// Primal transport cost <P, C> of the implied plan.
fn primal_cost(c: &[f64], n: usize, m: usize, eps: f64, st: &SinkhornState) -> f64 {
    let la = -(n as f64).ln();
    let lb = -(m as f64).ln();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    let lp = (st.f[i] + st.g[j] - c[i * m + j]) / eps + la + lb;
                    lp.exp() * c[i * m + j]
                })
                .sum()
        })
        .collect();
    rows.iter().sum()
}

/// Entropic W2 estimate: log-domain Sinkhorn with epsilon annealing and
/// Sinkhorn-divergence debiasing (subtracting the self-transport terms).
/// A non-converged run still returns its last iterate, flagged in metadata.
pub fn w2_sinkhorn(
    x: &DiscreteCloud,
    y: &DiscreteCloud,
    cost: &GroundCost,
    params: &SinkhornParams,
) -> Result<DivergenceEstimate> {
    if x.n == 0 || y.n == 0 {
        return Err(KelError::Invalid("empty clouds".into()));
    }
    let cxy = cost_matrix(x, y, cost)?;
    let mut sorted = cxy.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2].max(1e-300);
    let eps_target = if params.epsilon > 0.0 {
        params.epsilon
    } else {
        0.01 * median
    };

    // Geometric annealing from the median cost down to the target.
    let stages = params.anneal_stages.max(1);
    let mut f = None;
    let mut g = None;
    let mut last = None;
    for k in 0..stages {
        let frac = (k + 1) as f64 / stages as f64;
        let eps = median.powf(1.0 - frac) * eps_target.powf(frac);
        let st = sinkhorn_core(
            &cxy, x.n, y.n, eps, params.max_iters, params.tol, f, g, false,
        );
        f = Some(st.f.clone());
        g = Some(st.g.clone());
        last = Some((st, eps));
    }
    let (st, eps) = last.expect("at least one stage");
    let converged = st.violation < params.tol;
    let ot_xy = dual_value(&st);
    let raw = primal_cost(&cxy, x.n, y.n, eps, &st);

    let self_term = |cloud: &DiscreteCloud| -> Result<f64> {
        let cc = cost_matrix(cloud, cloud, cost)?;
        let st = sinkhorn_core(
            &cc,
            cloud.n,
            cloud.n,
            eps,
            params.max_iters,
            params.tol,
            None,
            None,
            true,
        );
        Ok(dual_value(&st))
    };
    let ot_xx = self_term(x)?;
    let ot_yy = self_term(y)?;

    let debiased = (ot_xy - 0.5 * (ot_xx + ot_yy)).max(0.0);
    let est = DivergenceEstimate::new(debiased.sqrt(), EstimatorKind::Sinkhorn)
        .with_meta("epsilon", serde_json::json!(eps))
        .with_meta("iterations", serde_json::json!(st.iters))
        .with_meta("marginal_violation", serde_json::json!(st.violation))
        .with_meta("converged", serde_json::json!(converged))
        .with_meta("raw_primal_cost", serde_json::json!(raw))
        .with_meta("dual_value", serde_json::json!(ot_xy));
    Ok(est)
}

/// Split-half bootstrap noise floor: the W2 between two disjoint halves of
/// one cloud, repeated over `resamples` random splits. Returns (mean, sd).
pub fn split_half_floor(
    cloud: &DiscreteCloud,
    cost: &GroundCost,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let half = cloud.n / 2;
    if half == 0 {
        return Err(KelError::Invalid("cloud too small to split".into()));
    }
    let mut vals = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut idx: Vec<usize> = (0..cloud.n).collect();
        // Fisher-Yates with the counter RNG.
        let mut u = vec![0.0; cloud.n];
        rng::fill_uniforms(seed, r as u64, 3, &mut u);
        for i in (1..cloud.n).rev() {
            let j = (u[i] * (i + 1) as f64) as usize;
            idx.swap(i, j.min(i));
        }
        let take = |ids: &[usize]| -> DiscreteCloud {
            let mut pts = Vec::with_capacity(ids.len() * cloud.dim);
            for &i in ids {
                pts.extend_from_slice(cloud.row(i));
            }
            DiscreteCloud::new(pts, cloud.dim).unwrap()
        };
        let a = take(&idx[..half]);
        let b = take(&idx[half..2 * half]);
        let (est, _) = w2_exact_with_matching(&a, &b, cost, EXACT_CAP)?;
        vals.push(est.value);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(2.0);
    Ok((mean, var.sqrt()))
}
