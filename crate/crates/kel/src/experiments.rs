//! The paper-level experiments: entropy-bound verification, short-time
//! scaling fits, coupling contraction, and ergodicity runs, each packaged as
//! a reproducible [`ExperimentReport`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::entropy_est;
use crate::error::{KelError, Result};
use crate::gaussian::{self, GaussianState};
use crate::linalg::{self, gauss_legendre_on, ols};
use crate::model::{self, BlockModel, TwistedForm};
use crate::sde::{self, InitCoupling, InitSampler, SimPlan};
use crate::transport::{self, GroundCost};

/// Cap on exact-assignment cloud sizes inside experiments; larger ensembles
/// are strided down to this size before W2 evaluation.
pub const W2_SUBSAMPLE_CAP: usize = 1024;

pub fn version_string() -> String {
    option_env!("KEL_GIT_DESCRIBE")
        .unwrap_or(env!("CARGO_PKG_VERSION"))
        .to_string()
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).unwrap_or_default();
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordRow {
    pub t: f64,
    pub quantity: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// ln(value) against t: slope is the exponential rate.
    Exponential,
    /// ln(value) against ln(t): slope is the power-law exponent.
    PowerLaw,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub mode: FitMode,
    pub points_used: usize,
}

/// Least-squares rate fit on (t, value) pairs with positive values.
/// `window` restricts to t in [lo, hi] when given.
pub fn rate_fit(
    series: &[(f64, f64)],
    mode: FitMode,
    window: Option<(f64, f64)>,
) -> Result<FitResult> {
    let filtered: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, _)| window.is_none_or(|(lo, hi)| *t >= lo && *t <= hi))
        .cloned()
        .collect();
    if filtered.len() < 4 {
        return Err(KelError::DegenerateSeries);
    }
    for (i, &(_, v)) in filtered.iter().enumerate() {
        if !(v > 0.0) {
            return Err(KelError::NonPositiveValue { value: v, index: i });
        }
    }
    let xs: Vec<f64> = filtered
        .iter()
        .map(|&(t, _)| match mode {
            FitMode::Exponential => t,
            FitMode::PowerLaw => t.ln(),
        })
        .collect();
    let ys: Vec<f64> = filtered.iter().map(|&(_, v)| v.ln()).collect();
    let (slope, intercept, r2) = ols(&xs, &ys);
    Ok(FitResult {
        slope,
        intercept,
        r_squared: r2,
        mode,
        points_used: filtered.len(),
    })
}

/// One experiment's full, reproducible output. Wall-clock time is kept out
/// of the serialized form unless explicitly enabled so identical
/// configurations serialize byte-identically.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub t_grid: Vec<f64>,
    pub records: Vec<RecordRow>,
    pub fits: BTreeMap<String, FitResult>,
    pub flags: BTreeMap<String, bool>,
    pub scalars: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config: serde_json::Value, seed: u64) -> Self {
        ExperimentReport {
            schema_version: 1,
            experiment: experiment.to_string(),
            version: version_string(),
            config_hash: config_hash(&config),
            config,
            seed,
            t_grid: Vec::new(),
            records: Vec::new(),
            fits: BTreeMap::new(),
            flags: BTreeMap::new(),
            scalars: BTreeMap::new(),
            wall_clock_seconds: None,
        }
    }

    pub fn push(&mut self, t: f64, quantity: &str, value: f64, stderr: Option<f64>) {
        self.records.push(RecordRow {
            t,
            quantity: quantity.to_string(),
            value,
            stderr,
        });
    }

    pub fn series(&self, quantity: &str) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.quantity == quantity)
            .map(|r| (r.t, r.value))
            .collect()
    }

    /// Flat CSV with a metadata comment line, columns t,quantity,value,stderr.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# experiment={} version={} config_hash={}\n",
            self.experiment, self.version, self.config_hash
        );
        out.push_str("t,quantity,value,stderr\n");
        for r in &self.records {
            let se = r.stderr.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.t, r.quantity, r.value, se));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Theorem-level entropy bound
// ---------------------------------------------------------------------------

/// Spatial grid for estimating sup-norms of coefficient differences.
#[derive(Debug, Clone, Serialize)]
pub struct SupGrid {
    pub n_points: usize,
    pub box_half: f64,
    pub seed: u64,
}

impl Default for SupGrid {
    fn default() -> Self {
        SupGrid {
            n_points: 256,
            box_half: 10.0,
            seed: 0x5B6,
        }
    }
}

impl SupGrid {
    fn states(&self, dim: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_points + 1);
        out.push(vec![0.0; dim]);
        let mut buf = vec![0.0; dim];
        for i in 0..self.n_points {
            crate::rng::fill_uniforms(self.seed, i as u64, 6, &mut buf);
            out.push(buf.iter().map(|u| (2.0 * u - 1.0) * self.box_half).collect());
        }
        out
    }
}

/// Norm of the minimal preimage of `v` under a2^{1/2}; errors when `v` has a
/// component outside range(a2^{1/2}).
fn seminorm_a2(a2: &DMatrix<f64>, v: &DVector<f64>) -> Result<f64> {
    let (vals, vecs) = linalg::sym_eigen_clipped(a2);
    let scale = vals.iter().cloned().fold(0.0_f64, f64::max).max(1e-300);
    let proj = vecs.transpose() * v;
    let mut w = DVector::zeros(v.len());
    for i in 0..v.len() {
        let sv = vals[i].max(0.0).sqrt();
        if sv <= 1e-12 * scale.sqrt() {
            if proj[i].abs() > 1e-9 * v.norm().max(1e-300) {
                return Err(KelError::DriftDifferenceOutsideRange);
            }
        } else {
            w[i] = proj[i] / sv;
        }
    }
    Ok(w.norm())
}

/// Right-hand side of the entropy inequality:
/// `1/4 int_{t0}^t { ||a2^{-1/2}(Z1 - Z2)||_{s,inf} + xi_s * sum_j ||a2^{-1/2}(a1 - a2) e_j|| }^2 ds`.
///
/// Both models must agree in the noise-free block (A, B, b); a difference
/// there leaves range(a2^{1/2}) and the bound is infinite. The xi_s rate is
/// `xi_scale * s^{-2k-1/2}` when Z1 does not depend on x1, `s^{-2k-3/2}`
/// otherwise; it only enters when the diffusion matrices differ, and then a
/// strictly positive `t0` is required for integrability.
pub fn bound_rhs_theorem21(
    m1: &BlockModel,
    m2: &BlockModel,
    t: f64,
    t0: f64,
    nodes: usize,
    grid: &SupGrid,
    xi_scale: f64,
) -> Result<f64> {
    if m1.d1 != m2.d1 || m1.d2 != m2.d2 {
        return Err(KelError::Invalid("models must share dimensions".into()));
    }
    let dim = m1.dim();
    let states = grid.states(dim);

    // Block-1 drift must match everywhere probed.
    let a_diff = (&m1.a - &m2.a).iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
    let b_diff = (&m1.b_mat - &m2.b_mat)
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max);
    let mut drift_diff = 0.0_f64;
    for x in &states {
        let d = m1.drift_b(x, None) - m2.drift_b(x, None);
        drift_diff = drift_diff.max(d.amax());
    }
    if a_diff.max(b_diff).max(drift_diff) > 1e-12 {
        return Err(KelError::DriftDifferenceOutsideRange);
    }

    let k = model::kalman_index(&m2.a, &m2.b_mat)?;
    let xi_exponent = if m1.z_depends_on_x1 {
        -(2.0 * k as f64) - 1.5
    } else {
        -(2.0 * k as f64) - 0.5
    };

    let sigma_differs = {
        let s1 = m1.a2(t, None);
        let s2 = m2.a2(t, None);
        (&s1 - &s2).iter().map(|v| v.abs()).fold(0.0_f64, f64::max) > 1e-14
    };
    if sigma_differs && !(t0 > 0.0) {
        return Err(KelError::Invalid(
            "differing diffusion matrices require a positive t0 cutoff".into(),
        ));
    }

    let (ss, ws) = gauss_legendre_on(nodes, t0, t);
    let mut total = 0.0;
    for (s, w) in ss.iter().zip(&ws) {
        let a2 = m2.a2(*s, None);
        let mut sup = 0.0_f64;
        for x in &states {
            let dz = m1.z_drift(*s, x, None, None) - m2.z_drift(*s, x, None, None);
            sup = sup.max(seminorm_a2(&a2, &dz)?);
        }
        let mut aterm = 0.0;
        if sigma_differs {
            let da = m1.a2(*s, None) - m2.a2(*s, None);
            let xi = xi_scale * s.powf(xi_exponent);
            let mut sum = 0.0;
            for j in 0..m2.d2 {
                let col = da.column(j).clone_owned();
                sum += seminorm_a2(&a2, &col)?;
            }
            aterm = xi * sum;
        }
        total += w * (sup + aterm) * (sup + aterm);
    }
    Ok(total / 4.0)
}

/// Exact-KL verification of the entropy inequality for a linear pair from a
/// shared Gaussian initial law.
pub fn verify_entropy_inequality_gaussian(
    m1: &BlockModel,
    m2: &BlockModel,
    nu: &GaussianState,
    t_grid: &[f64],
    nodes: usize,
    grid: &SupGrid,
) -> Result<ExperimentReport> {
    let l1 = gaussian::linearize(m1)
        .ok_or_else(|| KelError::Invalid("model 1 is not linear".into()))?;
    let l2 = gaussian::linearize(m2)
        .ok_or_else(|| KelError::Invalid("model 2 is not linear".into()))?;
    let config = serde_json::json!({
        "experiment": "entropy-inequality-gaussian",
        "m1": m1.name, "m2": m2.name, "t_grid": t_grid, "nodes": nodes,
    });
    let mut report = ExperimentReport::new("entropy-inequality-gaussian", config, 0);
    report.t_grid = t_grid.to_vec();
    let mut all_nonneg = true;
    for &t in t_grid {
        let p1 = gaussian::propagate_linear(&l1.f, &l1.g, &l1.u, nu, t, 2e3);
        let p2 = gaussian::propagate_linear(&l2.f, &l2.g, &l2.u, nu, t, 2e3);
        let kl = gaussian::gaussian_kl(&p1, &p2)?;
        let bound = bound_rhs_theorem21(m1, m2, t, 0.0, nodes, grid, 1.0)?;
        let margin = bound - kl;
        all_nonneg &= margin > 0.0 || (kl == 0.0 && bound == 0.0);
        report.push(t, "kl", kl, None);
        report.push(t, "bound", bound, None);
        report.push(t, "margin", margin, None);
        if bound > 0.0 {
            report.push(t, "ratio", kl / bound, None);
        }
    }
    report.flags.insert("margins_nonnegative".into(), all_nonneg);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Short-time scaling
// ---------------------------------------------------------------------------

/// Fit the short-time exponent of the exact kernel entropy between starts
/// x and y; the comparison exponent is -(4k+3) with k the Kalman index.
pub fn shorttime_scaling(
    model: &BlockModel,
    x: &[f64],
    y: &[f64],
    t_grid: &[f64],
) -> Result<ExperimentReport> {
    let k = model::kalman_index(&model.a, &model.b_mat)?;
    let config = serde_json::json!({
        "experiment": "shorttime-scaling",
        "model": model.name, "x": x, "y": y, "t_grid": t_grid,
    });
    let mut report = ExperimentReport::new("shorttime-scaling", config, 0);
    report.t_grid = t_grid.to_vec();
    let curve = gaussian::entropy_cost_curve(model, x, y, t_grid, 1e4)?;
    let mut series = Vec::new();
    for (t, kl) in curve {
        match kl {
            Some(v) => {
                report.push(t, "kl", v, None);
                series.push((t, v));
            }
            None => {
                report.push(t, "kl_skipped_singular", f64::NAN, None);
            }
        }
    }
    let fit = rate_fit(&series, FitMode::PowerLaw, None)?;
    report
        .scalars
        .insert("expected_slope".into(), -(4.0 * k as f64 + 3.0));
    report.scalars.insert("kalman_index".into(), k as f64);
    report.fits.insert("log_kl_vs_log_t".into(), fit);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Coupling contraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ContractionConfig {
    pub n: usize,
    pub h: f64,
    pub t_end: f64,
    pub snapshots: usize,
    pub seed: u64,
    pub burn_in_fraction: f64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig {
            n: 4096,
            h: 1e-3,
            t_end: 20.0,
            snapshots: 100,
            seed: 0xC0,
            burn_in_fraction: 0.1,
        }
    }
}

fn snapshot_grid(t_end: f64, h: f64, snapshots: usize) -> Vec<f64> {
    let total_steps = (t_end / h).round() as u64;
    let mut grid = Vec::with_capacity(snapshots);
    for i in 1..=snapshots {
        let steps = (total_steps * i as u64) / snapshots as u64;
        grid.push(steps as f64 * h);
    }
    grid.dedup();
    grid
}

/// Synchronous-coupling contraction experiment: fits the exponential decay
/// rate of E[psi_bar^2] after burn-in and compares it with 2 * 0.9 * kappa.
pub fn coupling_contraction(
    model: &BlockModel,
    coupling: &InitCoupling,
    cfg: &ContractionConfig,
) -> Result<ExperimentReport> {
    let mf = model
        .mean_field
        .as_ref()
        .ok_or_else(|| KelError::Invalid("contraction experiment needs a mean-field model".into()))?;
    let (t1, t2) = model::granular_thetas(mf.theta, mf.alpha, mf.beta);
    let kappa = model::kappa(mf.beta, t1, t2)?;
    let form = TwistedForm::new(mf.beta, &model.b_mat);

    let config = serde_json::json!({
        "experiment": "coupling-contraction",
        "model": model.name, "beta": mf.beta, "theta": mf.theta, "alpha": mf.alpha,
        "n": cfg.n, "h": cfg.h, "t_end": cfg.t_end, "snapshots": cfg.snapshots,
        "seed": cfg.seed, "burn_in_fraction": cfg.burn_in_fraction,
    });
    let mut report = ExperimentReport::new("coupling-contraction", config, cfg.seed);

    let plan = SimPlan {
        n: cfg.n,
        h: cfg.h,
        t_grid: snapshot_grid(cfg.t_end, cfg.h, cfg.snapshots),
        seed: cfg.seed,
    };
    report.t_grid = plan.t_grid.clone();
    let snaps = sde::couple_simulate(model, model, coupling, &plan, Some(&form), false)?;
    let mut series = Vec::new();
    for s in &snaps {
        let psi2 = s.mean_psibar_sq.expect("twisted form supplied");
        report.push(s.t, "psibar_sq", psi2, None);
        report.push(s.t, "xi_sq", s.mean_xi_sq, None);
        series.push((s.t, psi2));
    }
    if series.iter().all(|&(_, v)| v <= 1e-280) {
        return Err(KelError::DegenerateSeries);
    }
    let burn_in = cfg.burn_in_fraction * cfg.t_end;
    let fit = rate_fit(&series, FitMode::Exponential, Some((burn_in, cfg.t_end)))?;
    let fitted_rate = -fit.slope;
    let required = 2.0 * 0.9 * kappa;
    report.scalars.insert("kappa".into(), kappa);
    report.scalars.insert("theta1".into(), t1);
    report.scalars.insert("theta2".into(), t2);
    report.scalars.insert("fitted_rate".into(), fitted_rate);
    report.scalars.insert("required_rate".into(), required);
    report.flags.insert("contraction_pass".into(), fitted_rate >= required);
    report.fits.insert("ln_psibar_sq_vs_t".into(), fit);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ergodicity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicityConfig {
    pub n: usize,
    pub h: f64,
    /// Equilibration horizon for the reference chain.
    pub t_end: f64,
    pub t_grid: Vec<f64>,
    pub seed: u64,
    pub burn_in_fraction: f64,
    pub knn_k: usize,
    pub bootstrap: usize,
}

impl Default for ErgodicityConfig {
    fn default() -> Self {
        ErgodicityConfig {
            n: 2048,
            h: 1e-3,
            t_end: 20.0,
            t_grid: (1..=15).map(|i| i as f64).collect(),
            seed: 0xE6,
            burn_in_fraction: 0.1,
            knn_k: 5,
            bootstrap: 20,
        }
    }
}

/// Exponential ergodicity run: equilibrate a reference chain, audit its
/// stationarity, then track W2(mu_t, mu_bar) and a corroborating k-NN KL
/// estimate along the grid and fit both decay rates.
pub fn ergodicity_experiment(
    model: &BlockModel,
    mu0: &InitSampler,
    cfg: &ErgodicityConfig,
) -> Result<ExperimentReport> {
    let mf = model
        .mean_field
        .as_ref()
        .ok_or_else(|| KelError::Invalid("ergodicity experiment needs a mean-field model".into()))?;
    let (t1, t2) = model::granular_thetas(mf.theta, mf.alpha, mf.beta);
    let kappa = model::kappa(mf.beta, t1, t2)?;

    let config = serde_json::json!({
        "experiment": "ergodicity",
        "model": model.name, "beta": mf.beta, "theta": mf.theta, "alpha": mf.alpha,
        "n": cfg.n, "h": cfg.h, "t_end": cfg.t_end, "t_grid": cfg.t_grid,
        "seed": cfg.seed, "knn_k": cfg.knn_k, "bootstrap": cfg.bootstrap,
    });
    let mut report = ExperimentReport::new("ergodicity", config, cfg.seed);
    report.t_grid = cfg.t_grid.clone();

    // Reference chain (independent seed stream) equilibrated to t_end.
    let ref_seed = cfg.seed ^ 0x9E37_79B9_7F4A_7C15;
    let audit_t = {
        let k = (0.8 * cfg.t_end / cfg.h).round();
        k * cfg.h
    };
    let ref_plan = SimPlan {
        n: cfg.n,
        h: cfg.h,
        t_grid: vec![audit_t, cfg.t_end],
        seed: ref_seed,
    };
    let ref_snaps = sde::simulate(model, mu0, &ref_plan)?;
    let mu_bar = ref_snaps.last().unwrap();
    let mu_bar_cloud = mu_bar.subsampled_cloud(W2_SUBSAMPLE_CAP);
    let audit_cloud = ref_snaps[0].subsampled_cloud(W2_SUBSAMPLE_CAP);

    // Noise floor: W2 between independent halves of the terminal ensemble.
    let cost = GroundCost::SquaredEuclidean;
    let (floor, floor_sd) =
        transport::split_half_floor(&mu_bar_cloud, &cost, 8, cfg.seed ^ 0xF1)?;
    let audit_w2 = transport::w2_exact(&audit_cloud, &mu_bar_cloud, &cost)?.value;
    let audit_tol = 1.5 * floor;
    report.scalars.insert("noise_floor_w2".into(), floor);
    report.scalars.insert("noise_floor_sd".into(), floor_sd);
    report.scalars.insert("stationarity_audit_w2".into(), audit_w2);
    if audit_w2 > audit_tol {
        return Err(KelError::NotStationary {
            w2: audit_w2,
            tol: audit_tol,
        });
    }

    // Measured trajectory from mu0.
    let plan = SimPlan {
        n: cfg.n,
        h: cfg.h,
        t_grid: cfg.t_grid.clone(),
        seed: cfg.seed,
    };
    let snaps = sde::simulate(model, mu0, &plan)?;
    let mut w2_series = Vec::new();
    let mut kl_series = Vec::new();
    for ens in &snaps {
        let cloud = ens.subsampled_cloud(W2_SUBSAMPLE_CAP);
        let w2 = transport::w2_exact(&cloud, &mu_bar_cloud, &cost)?.value;
        report.push(ens.time, "w2", w2, Some(floor_sd));
        w2_series.push((ens.time, w2));

        let kl_cloud = ens.subsampled_cloud(2 * W2_SUBSAMPLE_CAP);
        let kl_ref = mu_bar.subsampled_cloud(2 * W2_SUBSAMPLE_CAP);
        let kl = entropy_est::knn_kl_bootstrap(
            &kl_cloud,
            &kl_ref,
            cfg.knn_k,
            cfg.bootstrap,
            cfg.seed ^ 0x5E,
        )?;
        report.push(ens.time, "kl", kl.value, kl.uncertainty);
        kl_series.push((ens.time, kl.value, kl.uncertainty.unwrap_or(0.0)));
    }

    // W2^2 decay rate over points above twice the noise floor, past burn-in.
    let t_max = cfg.t_grid.last().cloned().unwrap_or(cfg.t_end);
    let burn_in = cfg.burn_in_fraction * t_max;
    let w2sq_series: Vec<(f64, f64)> = w2_series
        .iter()
        .filter(|&&(t, v)| t >= burn_in && v > 2.0 * floor)
        .map(|&(t, v)| (t, v * v))
        .collect();
    let w2_fit = rate_fit(&w2sq_series, FitMode::Exponential, None)?;
    let w2_rate = -w2_fit.slope;
    let required = 2.0 * 0.8 * kappa;
    report.scalars.insert("kappa".into(), kappa);
    report.scalars.insert("w2sq_rate".into(), w2_rate);
    report.scalars.insert("required_rate".into(), required);
    report.flags.insert("w2_rate_pass".into(), w2_rate >= required);
    report.fits.insert("ln_w2sq_vs_t".into(), w2_fit);

    // KL: monotone decay up to estimator noise after burn-in, and a decay
    // rate fit over the same kind of window (flagged corroborative).
    let mut monotone = true;
    let included: Vec<&(f64, f64, f64)> =
        kl_series.iter().filter(|&&(t, _, _)| t >= burn_in).collect();
    for pair in included.windows(2) {
        let (_, v0, s0) = *pair[0];
        let (_, v1, s1) = *pair[1];
        let allowance = 2.0 * (s0 * s0 + s1 * s1).sqrt();
        if v1 > v0 + allowance {
            monotone = false;
        }
    }
    report.flags.insert("kl_monotone_within_noise".into(), monotone);
    let kl_floor = included
        .iter()
        .map(|&&(_, _, s)| s)
        .fold(0.0_f64, f64::max)
        .max(1e-4);
    let kl_fit_series: Vec<(f64, f64)> = kl_series
        .iter()
        .filter(|&&(t, v, _)| t >= burn_in && v > 2.0 * kl_floor)
        .map(|&(t, v, _)| (t, v))
        .collect();
    if let Ok(fit) = rate_fit(&kl_fit_series, FitMode::Exponential, None) {
        report.scalars.insert("kl_rate".into(), -fit.slope);
        report.fits.insert("ln_kl_vs_t".into(), fit);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rate_fit_exact_exponential_and_power() {
        let series: Vec<(f64, f64)> = (0..26)
            .map(|i| {
                let t = 0.2 * i as f64;
                (t, (-2.0 * t).exp())
            })
            .collect();
        let fit = rate_fit(&series, FitMode::Exponential, None).unwrap();
        assert_relative_eq!(fit.slope, -2.0, epsilon = 1e-10);
        assert!(fit.r_squared > 1.0 - 1e-12);

        let series: Vec<(f64, f64)> = (1..20)
            .map(|i| {
                let t = 0.1 * i as f64;
                (t, t.powi(-3))
            })
            .collect();
        let fit = rate_fit(&series, FitMode::PowerLaw, None).unwrap();
        assert_relative_eq!(fit.slope, -3.0, epsilon = 1e-10);
    }

    #[test]
    fn rate_fit_constant_series_convention() {
        let series: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 5.0)).collect();
        let fit = rate_fit(&series, FitMode::Exponential, None).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.r_squared, 0.0);
    }

    #[test]
    fn rate_fit_rejects_nonpositive_values() {
        let series = vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.0), (3.0, 0.1)];
        assert!(matches!(
            rate_fit(&series, FitMode::Exponential, None),
            Err(KelError::NonPositiveValue { .. })
        ));
    }

    #[test]
    fn bound_zero_for_identical_models() {
        let m = BlockModel::kinetic_ou(1);
        let b = bound_rhs_theorem21(&m, &m, 1.0, 0.0, 32, &SupGrid::default(), 1.0).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn bound_constant_shift_is_exact() {
        // Block-2 shift delta with a2 = I: bound = delta^2 t / 4.
        let m1 = BlockModel::kinetic_ou(1);
        let mut m2 = BlockModel::kinetic_ou(1);
        if let crate::model::ZDrift::Affine { c0, .. } = &mut m2.z {
            c0[0] = 0.5;
        }
        for t in [0.5, 1.0, 4.0] {
            let b = bound_rhs_theorem21(&m1, &m2, t, 0.0, 32, &SupGrid::default(), 1.0).unwrap();
            assert_relative_eq!(b, 0.25 * 0.25 * t / 4.0 * 4.0, epsilon = 1e-12);
            // delta^2 t / 4 with delta = 0.5
            assert_relative_eq!(b, 0.0625 * t, epsilon = 1e-12);
        }
    }

    #[test]
    fn bound_block1_shift_is_infinite() {
        let m1 = BlockModel::kinetic_ou(1);
        let mut m2 = BlockModel::kinetic_ou(1);
        m2.drift = crate::model::Drift::Affine {
            j1: DMatrix::zeros(1, 1),
            j2: DMatrix::zeros(1, 1),
            c: DVector::from_column_slice(&[0.3]),
        };
        assert!(matches!(
            bound_rhs_theorem21(&m1, &m2, 1.0, 0.0, 32, &SupGrid::default(), 1.0),
            Err(KelError::DriftDifferenceOutsideRange)
        ));
    }

    #[test]
    fn entropy_inequality_margins_positive_for_shift() {
        let m1 = BlockModel::kinetic_ou(1);
        let mut m2 = BlockModel::kinetic_ou(1);
        if let crate::model::ZDrift::Affine { c0, .. } = &mut m2.z {
            c0[0] = 0.5;
        }
        let nu = GaussianState::point(&[0.0, 0.0]);
        let grid: Vec<f64> = (1..=20).map(|i| 0.25 * i as f64).collect();
        let rep =
            verify_entropy_inequality_gaussian(&m1, &m2, &nu, &grid, 32, &SupGrid::default())
                .unwrap();
        assert!(rep.flags["margins_nonnegative"]);
        for (_, ratio) in rep.series("ratio") {
            assert!(ratio <= 1.0);
        }
    }

    #[test]
    fn shorttime_scaling_kinetic_ou_slopes() {
        let model = BlockModel::kinetic_ou(1);
        let grid: Vec<f64> = (0..10).map(|i| 1e-3 * 10f64.powf(i as f64 / 9.0)).collect();
        let rep = shorttime_scaling(&model, &[1.0, 0.0], &[0.0, 0.0], &grid).unwrap();
        let slope = rep.fits["log_kl_vs_log_t"].slope;
        assert!((slope + 3.0).abs() < 0.3, "slope {slope}");
        assert_eq!(rep.scalars["expected_slope"], -3.0);

        let rep = shorttime_scaling(&model, &[0.0, 1.0], &[0.0, 0.0], &grid).unwrap();
        let slope = rep.fits["log_kl_vs_log_t"].slope;
        assert!((slope + 1.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn shorttime_scaling_stable_under_half_step_shift() {
        let model = BlockModel::kinetic_ou(1);
        let grid: Vec<f64> = (0..10).map(|i| 1e-3 * 10f64.powf(i as f64 / 9.0)).collect();
        let shifted: Vec<f64> = grid.iter().map(|t| t * 10f64.powf(0.5 / 9.0)).collect();
        let a = shorttime_scaling(&model, &[1.0, 0.0], &[0.0, 0.0], &grid).unwrap();
        let b = shorttime_scaling(&model, &[1.0, 0.0], &[0.0, 0.0], &shifted).unwrap();
        let da = a.fits["log_kl_vs_log_t"].slope;
        let db = b.fits["log_kl_vs_log_t"].slope;
        assert!((da - db).abs() <= 0.1, "fit unstable: {da} vs {db}");
    }

    #[test]
    fn contraction_identical_initial_coupling_is_degenerate() {
        let model = BlockModel::granular(1, 1.0, 0.05, 0.0);
        let cfg = ContractionConfig {
            n: 64,
            h: 1e-2,
            t_end: 2.0,
            snapshots: 10,
            ..ContractionConfig::default()
        };
        let coupling = InitCoupling::SamePoint(InitSampler::Point(vec![1.0, 0.0]));
        assert!(matches!(
            coupling_contraction(&model, &coupling, &cfg),
            Err(KelError::DegenerateSeries)
        ));
    }

    #[test]
    fn contraction_kinetic_pair_beats_rate_floor() {
        // theta = 0, alpha = 0: pure kinetic pair; the deterministic
        // difference ODE has envelope rate 1, far above 2 * 0.9 * kappa.
        let model = BlockModel::granular(1, 1.0, 0.0, 0.0);
        let cfg = ContractionConfig {
            n: 512,
            h: 1e-3,
            t_end: 10.0,
            snapshots: 50,
            ..ContractionConfig::default()
        };
        let coupling = InitCoupling::TwoPoints {
            x: vec![0.0, 0.0],
            y: vec![2.0, 0.0],
        };
        let rep = coupling_contraction(&model, &coupling, &cfg).unwrap();
        assert!(rep.flags["contraction_pass"], "fitted {} required {}",
            rep.scalars["fitted_rate"], rep.scalars["required_rate"]);
    }

    #[test]
    fn report_csv_shape() {
        let mut rep = ExperimentReport::new("demo", serde_json::json!({"a": 1}), 7);
        rep.push(0.5, "kl", 0.25, Some(0.01));
        let csv = rep.to_csv();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# experiment=demo"));
        assert_eq!(lines.next().unwrap(), "t,quantity,value,stderr");
        assert_eq!(lines.next().unwrap(), "0.5,kl,0.25,0.01");
    }
}
