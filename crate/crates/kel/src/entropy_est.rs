//! Sample-based relative-entropy estimation.
//!
//! Two instruments measuring the same KL from opposite sides: a k-nearest
//! neighbor two-sample estimator (consistent, biased at finite N), and a
//! variational lower bound maximizing the dual objective
//! `mean_P[log f] - log mean_Q[f]` over a quadratic log-density family —
//! every test function yields a valid lower bound, so the optimizer can only
//! undershoot the truth (up to sampling error).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{KelError, Result};
use crate::rng;
use crate::transport::{DiscreteCloud, DivergenceEstimate, EstimatorKind};

/// Test function with log f(x) = x^T Q x + l^T x + c. The constant c cancels
/// in the dual objective and is kept only so the family matches its
/// mathematical description.
#[derive(Debug, Clone)]
pub struct QuadraticTestFunction {
    pub q: DMatrix<f64>,
    pub l: DVector<f64>,
    pub c: f64,
}

impl QuadraticTestFunction {
    pub fn identity(dim: usize) -> Self {
        QuadraticTestFunction {
            q: DMatrix::zeros(dim, dim),
            l: DVector::zeros(dim),
            c: 0.0,
        }
    }

    pub fn log_f(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (xv.transpose() * &self.q * &xv)[(0, 0)] + self.l.dot(&xv) + self.c
    }
}

fn k_smallest_distance(query: &[f64], cloud: &DiscreteCloud, k: usize, skip: Option<usize>) -> f64 {
    // Insertion into a fixed-size sorted buffer; k is small.
    let mut best = vec![f64::INFINITY; k];
    for j in 0..cloud.n {
        if skip == Some(j) {
            continue;
        }
        let d: f64 = query
            .iter()
            .zip(cloud.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best[k - 1] {
            let mut pos = k - 1;
            while pos > 0 && best[pos - 1] > d {
                best[pos] = best[pos - 1];
                pos -= 1;
            }
            best[pos] = d;
        }
    }
    best[k - 1].sqrt()
}

fn jitter_duplicates(p: &DiscreteCloud, q: &DiscreteCloud) -> Option<DiscreteCloud> {
    use std::collections::HashSet;
    let mut q_keys: HashSet<Vec<u64>> = HashSet::with_capacity(q.n);
    for j in 0..q.n {
        q_keys.insert(q.row(j).iter().map(|v| v.to_bits()).collect());
    }
    let mut dup_rows = Vec::new();
    for i in 0..p.n {
        let key: Vec<u64> = p.row(i).iter().map(|v| v.to_bits()).collect();
        if q_keys.contains(&key) {
            dup_rows.push(i);
        }
    }
    if dup_rows.is_empty() {
        return None;
    }
    eprintln!(
        "warning: {} duplicate points across samples; jittering by 1e-12",
        dup_rows.len()
    );
    let mut pts = p.points.clone();
    for &i in &dup_rows {
        for d in 0..p.dim {
            pts[i * p.dim + d] += 1e-12 * ((i + d + 1) as f64);
        }
    }
    Some(DiscreteCloud::new(pts, p.dim).unwrap())
}

/// Two-sample k-NN KL estimate
/// `(d/N) sum_i ln(nu_k(i) / rho_k(i)) + ln(M / (N-1))`, clipped at zero.
/// `rho_k(i)` is the k-NN radius of P-sample i within P (self excluded) and
/// `nu_k(i)` its k-NN radius into Q. Exact duplicates across the two sets are
/// jittered by 1e-12; a zero radius after jitter is an error.
pub fn knn_kl(p: &DiscreteCloud, q: &DiscreteCloud, k: usize) -> Result<DivergenceEstimate> {
    if p.dim != q.dim {
        return Err(KelError::Invalid("dimension mismatch".into()));
    }
    if k == 0 || k >= p.n.min(q.n) {
        return Err(KelError::Invalid(format!(
            "k = {k} must satisfy 1 <= k < min(N, M) = {}",
            p.n.min(q.n)
        )));
    }
    let jittered = jitter_duplicates(p, q);
    let p_eff = jittered.as_ref().unwrap_or(p);

    let logs: Vec<f64> = (0..p_eff.n)
        .into_par_iter()
        .map(|i| {
            let query = p_eff.row(i);
            let rho = k_smallest_distance(query, p_eff, k, Some(i));
            let nu = k_smallest_distance(query, q, k, None);
            if rho == 0.0 || nu == 0.0 {
                f64::NAN
            } else {
                (nu / rho).ln()
            }
        })
        .collect();
    if logs.iter().any(|v| v.is_nan()) {
        return Err(KelError::DegenerateGeometry);
    }
    let d = p_eff.dim as f64;
    let n = p_eff.n as f64;
    let m = q.n as f64;
    let raw = d / n * logs.iter().sum::<f64>() + (m / (n - 1.0)).ln();
    let est = DivergenceEstimate::new(raw.max(0.0), EstimatorKind::KnnKl)
        .with_meta("k", serde_json::json!(k))
        .with_meta("raw", serde_json::json!(raw));
    Ok(est)
}

/// Bootstrap standard error of the k-NN estimate over `resamples` paired
/// resamples of both clouds.
pub fn knn_kl_bootstrap(
    p: &DiscreteCloud,
    q: &DiscreteCloud,
    k: usize,
    resamples: usize,
    seed: u64,
) -> Result<DivergenceEstimate> {
    let mut base = knn_kl(p, q, k)?;
    let mut vals = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let rp = resample(p, seed, 2 * r as u64);
        let rq = resample(q, seed, 2 * r as u64 + 1);
        vals.push(knn_kl(&rp, &rq, k)?.value);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    base.uncertainty = Some(var.sqrt());
    Ok(base)
}

fn resample(cloud: &DiscreteCloud, seed: u64, stream: u64) -> DiscreteCloud {
    let mut u = vec![0.0; cloud.n];
    rng::fill_uniforms(seed, stream, 4, &mut u);
    let mut pts = Vec::with_capacity(cloud.points.len());
    for ui in u {
        let idx = ((ui * cloud.n as f64) as usize).min(cloud.n - 1);
        pts.extend_from_slice(cloud.row(idx));
    }
    DiscreteCloud::new(pts, cloud.dim).unwrap()
}

/// Optimization budget for the variational bound.
#[derive(Debug, Clone)]
pub struct DvBudget {
    pub sweeps: usize,
    pub restarts: usize,
    pub golden_iters: usize,
    pub seed: u64,
}

impl Default for DvBudget {
    fn default() -> Self {
        DvBudget {
            sweeps: 3,
            restarts: 3,
            golden_iters: 32,
            seed: 0xD5,
        }
    }
}

/// Empirical dual objective mean_P[log f] - log mean_Q[f] for the candidate
/// parameters; -inf when the Q-side expectation is not finite.
fn dv_objective(p: &DiscreteCloud, q: &DiscreteCloud, f: &QuadraticTestFunction) -> f64 {
    let lp: f64 = (0..p.n)
        .into_par_iter()
        .map(|i| f.log_f(p.row(i)))
        .sum::<f64>()
        / p.n as f64;
    let lqs: Vec<f64> = (0..q.n).into_par_iter().map(|j| f.log_f(q.row(j))).collect();
    let mx = lqs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() || mx > 650.0 {
        return f64::NEG_INFINITY;
    }
    let lse = mx + (lqs.iter().map(|v| (v - mx).exp()).sum::<f64>() / q.n as f64).ln();
    lp - lse
}

fn golden_section(mut a: f64, mut b: f64, iters: usize, f: &mut impl FnMut(f64) -> f64) -> f64 {
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Donsker-Varadhan lower bound over the quadratic family, maximized by
/// coordinate-wise golden-section sweeps with seeded random restarts.
/// Failure to improve returns the trivial bound 0 (f = 1). The returned
/// uncertainty is a bootstrap standard error of the objective at the
/// maximizing test function.
pub fn dv_lower_bound(
    p: &DiscreteCloud,
    q: &DiscreteCloud,
    budget: &DvBudget,
) -> Result<DivergenceEstimate> {
    if p.n == 0 || q.n == 0 {
        return Err(KelError::Invalid("empty sample sets".into()));
    }
    if p.dim != q.dim {
        return Err(KelError::Invalid("dimension mismatch".into()));
    }
    let dim = p.dim;
    let mut best = QuadraticTestFunction::identity(dim);
    let mut best_val = 0.0; // f = 1 gives exactly 0

    let mut noise = vec![0.0; dim];
    for restart in 0..budget.restarts.max(1) {
        let mut cand = QuadraticTestFunction::identity(dim);
        if restart > 0 {
            rng::fill_normals(budget.seed, restart as u64, 5, &mut noise);
            for (li, ni) in cand.l.iter_mut().zip(&noise) {
                *li = 0.3 * ni;
            }
        }
        for _ in 0..budget.sweeps {
            for comp in 0..dim {
                let center = cand.l[comp];
                let opt = golden_section(center - 2.0, center + 2.0, budget.golden_iters, &mut |v| {
                    let mut c2 = cand.clone();
                    c2.l[comp] = v;
                    dv_objective(p, q, &c2)
                });
                cand.l[comp] = opt;
            }
            for i in 0..dim {
                for j in i..dim {
                    let center = cand.q[(i, j)];
                    let opt =
                        golden_section(center - 0.5, center + 0.5, budget.golden_iters, &mut |v| {
                            let mut c2 = cand.clone();
                            c2.q[(i, j)] = v;
                            c2.q[(j, i)] = v;
                            dv_objective(p, q, &c2)
                        });
                    cand.q[(i, j)] = opt;
                    cand.q[(j, i)] = opt;
                }
            }
        }
        let val = dv_objective(p, q, &cand);
        if val > best_val {
            best_val = val;
            best = cand;
        }
    }

    // Bootstrap s.e. of the objective at the fixed maximizer.
    let resamples = 20;
    let mut vals = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let rp = resample(p, budget.seed ^ 0xB001, 2 * r as u64);
        let rq = resample(q, budget.seed ^ 0xB007, 2 * r as u64 + 1);
        vals.push(dv_objective(&rp, &rq, &best));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);

    let est = DivergenceEstimate::new(best_val.max(0.0), EstimatorKind::DvLowerBound)
        .with_meta("sweeps", serde_json::json!(budget.sweeps))
        .with_meta("restarts", serde_json::json!(budget.restarts));
    let mut est = est;
    est.uncertainty = Some(var.sqrt());
    Ok(est)
}
