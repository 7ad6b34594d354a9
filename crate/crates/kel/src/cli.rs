//! Command-line interface: single binary, JSON configuration, deterministic
//! seeding, machine-readable outputs on stdout/files and diagnostics on
//! stderr. Exit codes: 0 ok, 2 validation error, 3 numerical failure,
//! 1 internal error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{KelError, Result};
use crate::experiments::{
    self, ContractionConfig, ErgodicityConfig, ExperimentReport, SupGrid,
};
use crate::gaussian::GaussianState;
use crate::gramian;
use crate::model::{self, BlockModel, ProbePlan};
use crate::plot::{self, Axes};
use crate::sde::{self, InitCoupling, InitSampler, SimPlan};
use crate::selftest;
use crate::transport::{self, DiscreteCloud, GroundCost, SinkhornParams};
use crate::entropy_est::{self, DvBudget};

#[derive(Parser, Debug)]
#[command(name = "kel", version, about = "Numerical lab for degenerate kinetic SDEs")]
pub struct Cli {
    /// Worker threads (fallback: env KEL_THREADS, then available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file supplying subcommand parameters (strict keys);
    /// explicit flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Structural conditions and closed-form constants for a preset.
    Check(ModelArgs),
    /// Weighted controllability Gramian; optionally the scaling fit.
    Gramian(GramianArgs),
    /// Integrate an ensemble and dump snapshots.
    Simulate(SimulateArgs),
    /// Synchronous coupling of two copies sharing one Brownian path.
    Couple(CoupleArgs),
    /// Divergence estimate between two point clouds read from files.
    Divergence(DivergenceArgs),
    /// Composed experiments.
    Experiment(ExperimentArgs),
    /// Run the acceptance suite and print a pass/fail table.
    Selftest(SelftestArgs),
}

/// Model parameters shared by most subcommands; serializable so a JSON file
/// can supply them (unknown keys rejected).
#[derive(Args, Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelArgs {
    /// Preset name: kinetic-ou | chain | granular.
    #[arg(long)]
    pub preset: Option<String>,
    /// Block dimension d (d1 = d2 = d) for kinetic-ou/granular.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Dissipativity constant to probe (check subcommand).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Output directory for reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ModelArgs {
    fn merge(&mut self, file: &serde_json::Value) -> Result<()> {
        let from_file: ModelArgs = serde_json::from_value(file.clone())?;
        if self.preset.is_none() {
            self.preset = from_file.preset;
        }
        if self.d.is_none() {
            self.d = from_file.d;
        }
        if self.beta.is_none() {
            self.beta = from_file.beta;
        }
        if self.theta.is_none() {
            self.theta = from_file.theta;
        }
        if self.alpha.is_none() {
            self.alpha = from_file.alpha;
        }
        if self.delta.is_none() {
            self.delta = from_file.delta;
        }
        if self.out.is_none() {
            self.out = from_file.out;
        }
        Ok(())
    }

    pub fn build(&self) -> Result<BlockModel> {
        let preset = self
            .preset
            .as_deref()
            .ok_or_else(|| KelError::Invalid("--preset is required".into()))?;
        BlockModel::preset(
            preset,
            self.d.unwrap_or(1),
            self.beta.unwrap_or(1.0),
            self.theta.unwrap_or(0.0),
            self.alpha.unwrap_or(0.0),
        )
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or_default()
    }
}

#[derive(Args, Debug)]
pub struct GramianArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    #[arg(long, default_value_t = 1.0)]
    pub s: f64,
    #[arg(long, default_value_t = 64)]
    pub nodes: usize,
    /// Fit the lambda_min scaling over a log grid in s instead.
    #[arg(long, default_value_t = false)]
    pub scaling: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub s_lo: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub s_hi: f64,
    #[arg(long, default_value_t = 10)]
    pub s_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpFormat {
    Csv,
    Bin,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated snapshot times (whole multiples of h).
    #[arg(long, default_value = "1.0")]
    pub t_grid: String,
    /// Initial condition: "point:x1,x2,..." or "gauss:m1,m2;s1,s2".
    #[arg(long, default_value = "point:0,0")]
    pub init: String,
    #[arg(long, value_enum, default_value_t = DumpFormat::Csv)]
    pub format: DumpFormat,
}

#[derive(Args, Debug)]
pub struct CoupleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "1.0")]
    pub t_grid: String,
    /// Coupling kind: same-point | two-points | independent | comonotone | assignment.
    #[arg(long, default_value = "two-points")]
    pub coupling: String,
    /// First margin start, e.g. "0,0".
    #[arg(long, default_value = "0,0")]
    pub x: String,
    /// Second margin start.
    #[arg(long, default_value = "1,0")]
    pub y: String,
    #[arg(long, default_value_t = false)]
    pub svg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    W2Exact,
    Sinkhorn,
    KnnKl,
    Dv,
    GaussianW2,
    GaussianKl,
}

#[derive(Args, Debug)]
pub struct DivergenceArgs {
    /// CSV file of sample points (one comma-separated point per line).
    #[arg(long)]
    pub p: PathBuf,
    #[arg(long)]
    pub q: PathBuf,
    #[arg(long, value_enum)]
    pub estimator: Estimator,
    /// Sinkhorn regularization (absolute; 0 means 0.01 x median cost).
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// entropy-gaussian | shorttime | contraction | ergodicity.
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Drift shift for entropy-gaussian.
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    #[arg(long, default_value_t = false)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Shrink the long Monte Carlo criteria (smoke mode).
    #[arg(long, default_value_t = false)]
    pub quick: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| KelError::Invalid(format!("bad number `{p}`: {e}")))
        })
        .collect()
}

fn parse_init(spec: &str, dim: usize) -> Result<InitSampler> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| KelError::Invalid(format!("bad init spec `{spec}`")))?;
    match kind {
        "point" => {
            let x = parse_f64_list(rest)?;
            if x.len() != dim {
                return Err(KelError::Invalid(format!(
                    "init point has {} coords, model needs {dim}",
                    x.len()
                )));
            }
            Ok(InitSampler::Point(x))
        }
        "gauss" => {
            let (m, s) = rest
                .split_once(';')
                .ok_or_else(|| KelError::Invalid("gauss init needs mean;std".into()))?;
            let mean = parse_f64_list(m)?;
            let std = parse_f64_list(s)?;
            if mean.len() != dim || std.len() != dim {
                return Err(KelError::Invalid("gauss init dims mismatch".into()));
            }
            Ok(InitSampler::GaussianIid { mean, std })
        }
        other => Err(KelError::Invalid(format!("unknown init kind `{other}`"))),
    }
}

fn load_cloud(path: &Path) -> Result<DiscreteCloud> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    let mut dim = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = parse_f64_list(line)
            .map_err(|e| KelError::Invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if dim == 0 {
            dim = row.len();
        } else if row.len() != dim {
            return Err(KelError::Invalid(format!(
                "{}:{}: ragged row",
                path.display(),
                lineno + 1
            )));
        }
        pts.extend(row);
    }
    DiscreteCloud::new(pts, dim.max(1))
}

fn write_report(report: &ExperimentReport, out: Option<&Path>, svg: Option<Axes>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let base = dir.join(&report.experiment);
            fs::write(base.with_extension("json"), &json)?;
            fs::write(base.with_extension("csv"), report.to_csv())?;
            if let Some(axes) = svg {
                let chart = plot::report_chart(report, axes);
                let chart = format!(
                    "<!-- version={} config_hash={} -->\n{chart}",
                    report.version, report.config_hash
                );
                fs::write(base.with_extension("svg"), chart)?;
            }
            eprintln!("wrote {}.(json|csv)", base.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn load_config_value(path: Option<&Path>) -> Result<serde_json::Value> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(serde_json::json!({})),
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("KEL_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok(); // already built in tests is fine

    let file_cfg = load_config_value(cli.config.as_deref())?;

    match cli.command {
        Command::Check(mut args) => {
            args.merge(&file_cfg)?;
            let model = args.build()?;
            let report = model::condition_report(&model, args.delta, &ProbePlan::default())?;
            let payload = serde_json::json!({
                "version": experiments::version_string(),
                "config": args.echo(),
                "config_hash": experiments::config_hash(&args.echo()),
                "report": report,
            });
            let text = serde_json::to_string_pretty(&payload)?;
            if let Some(dir) = &args.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("check.json"), &text)?;
            }
            println!("{text}");
            Ok(0)
        }
        Command::Gramian(mut gargs) => {
            gargs.model.merge(&file_cfg)?;
            let model = gargs.model.build()?;
            let payload = if gargs.scaling {
                let grid: Vec<f64> = (0..gargs.s_points)
                    .map(|i| {
                        gargs.s_lo
                            * (gargs.s_hi / gargs.s_lo)
                                .powf(i as f64 / (gargs.s_points - 1) as f64)
                    })
                    .collect();
                serde_json::to_value(gramian::verify_gramian_scaling(
                    &model, gargs.t, &grid, gargs.nodes,
                )?)?
            } else {
                serde_json::to_value(gramian::gramian_q(&model, gargs.t, gargs.s, gargs.nodes)?)?
            };
            let out = serde_json::json!({
                "version": experiments::version_string(),
                "config_hash": experiments::config_hash(&serde_json::to_value(&gargs.model.echo())?),
                "result": payload,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(0)
        }
        Command::Simulate(mut sargs) => {
            sargs.model.merge(&file_cfg)?;
            let model = sargs.model.build()?;
            let init = parse_init(&sargs.init, model.dim())?;
            let plan = SimPlan {
                n: sargs.n,
                h: sargs.h,
                t_grid: parse_f64_list(&sargs.t_grid)?,
                seed: sargs.seed,
            };
            let snaps = sde::simulate(&model, &init, &plan)?;
            let dir = sargs
                .model
                .out
                .clone()
                .ok_or_else(|| KelError::Invalid("simulate requires --out".into()))?;
            fs::create_dir_all(&dir)?;
            for (i, ens) in snaps.iter().enumerate() {
                match sargs.format {
                    DumpFormat::Csv => {
                        let mut buf = Vec::new();
                        sde::dump_csv(ens, model.d1, &mut buf)?;
                        fs::write(dir.join(format!("snapshot_{i:03}.csv")), buf)?;
                    }
                    DumpFormat::Bin => {
                        let mut buf = Vec::new();
                        sde::dump_binary(ens, model.d1, &mut buf)?;
                        fs::write(dir.join(format!("snapshot_{i:03}.bin")), buf)?;
                    }
                }
            }
            eprintln!("wrote {} snapshots to {}", snaps.len(), dir.display());
            Ok(0)
        }
        Command::Couple(mut cargs) => {
            cargs.model.merge(&file_cfg)?;
            let model = cargs.model.build()?;
            let dim = model.dim();
            let coupling = match cargs.coupling.as_str() {
                "same-point" => InitCoupling::SamePoint(parse_init(&format!("point:{}", cargs.x), dim)?),
                "two-points" => InitCoupling::TwoPoints {
                    x: parse_f64_list(&cargs.x)?,
                    y: parse_f64_list(&cargs.y)?,
                },
                "independent" => InitCoupling::Independent {
                    x: parse_init(&cargs.x, dim)?,
                    y: parse_init(&cargs.y, dim)?,
                },
                "comonotone" => InitCoupling::ComonotoneByIndex {
                    x: parse_init(&cargs.x, dim)?,
                    y: parse_init(&cargs.y, dim)?,
                },
                "assignment" => InitCoupling::OptimalAssignment {
                    x: parse_init(&cargs.x, dim)?,
                    y: parse_init(&cargs.y, dim)?,
                },
                other => return Err(KelError::Invalid(format!("unknown coupling `{other}`"))),
            };
            let beta = model.mean_field.as_ref().map(|m| m.beta).unwrap_or(1.0);
            let form = model::TwistedForm::new(beta, &model.b_mat);
            let plan = SimPlan {
                n: cargs.n,
                h: cargs.h,
                t_grid: parse_f64_list(&cargs.t_grid)?,
                seed: cargs.seed,
            };
            let snaps = sde::couple_simulate(&model, &model, &coupling, &plan, Some(&form), false)?;
            let config = serde_json::json!({
                "model": cargs.model.echo(), "n": cargs.n, "h": cargs.h,
                "coupling": cargs.coupling, "x": cargs.x, "y": cargs.y,
            });
            let mut report = ExperimentReport::new("couple", config, cargs.seed);
            report.t_grid = plan.t_grid.clone();
            for s in &snaps {
                report.push(s.t, "xi_sq", s.mean_xi_sq, None);
                if let Some(p) = s.mean_psibar_sq {
                    report.push(s.t, "psibar_sq", p, None);
                }
            }
            write_report(
                &report,
                cargs.model.out.as_deref(),
                cargs.svg.then_some(Axes { log_x: false, log_y: true }),
            )?;
            Ok(0)
        }
        Command::Divergence(dargs) => {
            let p = load_cloud(&dargs.p)?;
            let q = load_cloud(&dargs.q)?;
            let est = match dargs.estimator {
                Estimator::W2Exact => {
                    transport::w2_exact(&p, &q, &GroundCost::SquaredEuclidean)?
                }
                Estimator::Sinkhorn => {
                    let params = SinkhornParams {
                        epsilon: dargs.epsilon,
                        ..SinkhornParams::default()
                    };
                    transport::w2_sinkhorn(&p, &q, &GroundCost::SquaredEuclidean, &params)?
                }
                Estimator::KnnKl => entropy_est::knn_kl(&p, &q, dargs.k)?,
                Estimator::Dv => entropy_est::dv_lower_bound(&p, &q, &DvBudget::default())?,
                Estimator::GaussianW2 | Estimator::GaussianKl => {
                    let fit = |c: &DiscreteCloud| -> Result<GaussianState> {
                        let ens = sde::Ensemble {
                            states: c.points.clone(),
                            n: c.n,
                            dim: c.dim,
                            time: 0.0,
                            seed: 0,
                            step_index: 0,
                        };
                        let s = ens.summary(true);
                        GaussianState::new(s.mean, s.cov.unwrap())
                    };
                    let (gp, gq) = (fit(&p)?, fit(&q)?);
                    let mut est = match dargs.estimator {
                        Estimator::GaussianW2 => transport::DivergenceEstimate::new(
                            crate::gaussian::gaussian_w2(&gp, &gq),
                            transport::EstimatorKind::GaussianClosedForm,
                        ),
                        _ => transport::DivergenceEstimate::new(
                            crate::gaussian::gaussian_kl(&gp, &gq)?,
                            transport::EstimatorKind::GaussianClosedForm,
                        ),
                    };
                    est.metadata.insert(
                        "note".into(),
                        serde_json::json!("moment-matched gaussian closed form"),
                    );
                    est
                }
            };
            println!("{}", serde_json::to_string_pretty(&est)?);
            Ok(0)
        }
        Command::Experiment(mut eargs) => {
            eargs.model.merge(&file_cfg)?;
            match eargs.kind.as_str() {
                "entropy-gaussian" => {
                    let m1 = eargs.model.build()?;
                    let mut m2 = m1.clone();
                    if let model::ZDrift::Affine { c0, .. } = &mut m2.z {
                        c0[0] += eargs.shift;
                    } else {
                        return Err(KelError::Invalid(
                            "entropy-gaussian needs an affine-Z preset (kinetic-ou or chain)".into(),
                        ));
                    }
                    let nu = GaussianState::point(&vec![0.0; m1.dim()]);
                    let grid: Vec<f64> = (0..50).map(|i| 0.1 + 4.9 * i as f64 / 49.0).collect();
                    let report = verify_gaussian(&m1, &m2, &nu, &grid)?;
                    write_report(
                        &report,
                        eargs.model.out.as_deref(),
                        eargs.svg.then_some(Axes { log_x: false, log_y: false }),
                    )?;
                    Ok(0)
                }
                "shorttime" => {
                    let m = eargs.model.build()?;
                    let grid: Vec<f64> =
                        (0..10).map(|i| 1e-3 * 10f64.powf(i as f64 / 9.0)).collect();
                    let mut x = vec![0.0; m.dim()];
                    x[0] = 1.0;
                    let y = vec![0.0; m.dim()];
                    let report = experiments::shorttime_scaling(&m, &x, &y, &grid)?;
                    write_report(
                        &report,
                        eargs.model.out.as_deref(),
                        eargs.svg.then_some(Axes { log_x: true, log_y: true }),
                    )?;
                    Ok(0)
                }
                "contraction" => {
                    let m = eargs.model.build()?;
                    let cfg = ContractionConfig {
                        n: eargs.n.unwrap_or(4096),
                        h: eargs.h.unwrap_or(1e-3),
                        t_end: eargs.t_end.unwrap_or(20.0),
                        seed: eargs.seed,
                        ..ContractionConfig::default()
                    };
                    let coupling = InitCoupling::Independent {
                        x: InitSampler::GaussianIid {
                            mean: vec![2.0, 0.0],
                            std: vec![0.5, 0.5],
                        },
                        y: InitSampler::GaussianIid {
                            mean: vec![-1.0, 0.5],
                            std: vec![0.5, 0.5],
                        },
                    };
                    let report = experiments::coupling_contraction(&m, &coupling, &cfg)?;
                    write_report(
                        &report,
                        eargs.model.out.as_deref(),
                        eargs.svg.then_some(Axes { log_x: false, log_y: true }),
                    )?;
                    Ok(0)
                }
                "ergodicity" => {
                    let m = eargs.model.build()?;
                    let cfg = ErgodicityConfig {
                        n: eargs.n.unwrap_or(2048),
                        h: eargs.h.unwrap_or(1e-3),
                        t_end: eargs.t_end.unwrap_or(20.0),
                        seed: eargs.seed,
                        ..ErgodicityConfig::default()
                    };
                    let mu0 = InitSampler::Point(vec![4.0, 0.0]);
                    let report = experiments::ergodicity_experiment(&m, &mu0, &cfg)?;
                    write_report(
                        &report,
                        eargs.model.out.as_deref(),
                        eargs.svg.then_some(Axes { log_x: false, log_y: true }),
                    )?;
                    Ok(0)
                }
                other => Err(KelError::Invalid(format!("unknown experiment kind `{other}`"))),
            }
        }
        Command::Selftest(stargs) => {
            let results = selftest::run_all(stargs.quick);
            let mut all_pass = true;
            for r in &results {
                println!("{}", r.table_line());
                all_pass &= r.pass;
            }
            if let Some(dir) = &stargs.out {
                fs::create_dir_all(dir)?;
                fs::write(
                    dir.join("selftest.json"),
                    serde_json::to_string_pretty(&results)?,
                )?;
                let mut csv = String::from("criterion,name,pass,runtime_seconds\n");
                for r in &results {
                    csv.push_str(&format!(
                        "{},{},{},{}\n",
                        r.id, r.name, r.pass, r.runtime_seconds
                    ));
                }
                fs::write(dir.join("selftest.csv"), csv)?;
            }
            Ok(if all_pass { 0 } else { 3 })
        }
    }
}

fn verify_gaussian(
    m1: &BlockModel,
    m2: &BlockModel,
    nu: &GaussianState,
    grid: &[f64],
) -> Result<ExperimentReport> {
    experiments::verify_entropy_inequality_gaussian(m1, m2, nu, grid, 32, &SupGrid::default())
}
