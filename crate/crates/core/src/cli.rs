//! Command-line entry points: `regress`, `netflow`, `rate`, `proptest`.
//!
//! Configuration is JSON with format tag "minimax-spp/1"; unknown keys are
//! rejected. `--set key=value` overrides apply after the file loads (dotted
//! paths address nested fields).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::driver::{
    self, contraction_estimate, log_linear_slope, DeltaSchedule, DriverError, InitPoint,
    RunReport, SolverConfig,
};
use crate::experiments::netflow::SnmsppAttackConfig;
use crate::experiments::regression::gen_regression;
use crate::experiments::synthetic::{gen_quadratic, QuadCatalogParams};
use crate::experiments::{mean_rho_by_strategy, run_netflow_cell};
use crate::io::FORMAT;
use crate::problem::ProblemSpec;
use crate::props;
use crate::report::{atomic_write, fmt_f64, svg_line_chart, Csv, Series};
use crate::sampling::{SampleMode, SamplerConfig};
use crate::ssn::NewtonParams;

#[derive(Parser)]
#[command(name = "minimax-spp")]
#[command(about = "Stochastic implicit proximal-point solver benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Constrained regression saddle benchmark over a step-size grid.
    Regress(CommonArgs),
    /// Adversarial network-flow attack comparison.
    Netflow(CommonArgs),
    /// Contraction-rate measurement against the theoretical ratio.
    Rate(CommonArgs),
    /// Randomized invariant suites.
    Proptest(CommonArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// key=value override on the loaded configuration (dotted paths).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override '{spec}' is not KEY=VALUE"))?;
    let mut cursor = &mut *value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| format!("path '{path}' does not address an object"))?;
        if i + 1 == parts.len() {
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert((*key).to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry((*key).to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

fn load_config<T: Serialize + DeserializeOwned + Default>(
    args: &CommonArgs,
) -> Result<T, String> {
    let mut value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("reading {}: {e}", path.display()))?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| e.to_string())?
        }
        None => serde_json::to_value(T::default()).map_err(|e| e.to_string())?,
    };
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == FORMAT => {}
        Some(f) => return Err(format!("config format '{f}' != '{FORMAT}'")),
        None => return Err("config missing the 'format' field".into()),
    }
    if let Some(seed) = args.seed {
        apply_override(&mut value, &format!("seed={seed}"))?;
    }
    if let Some(trials) = args.trials {
        apply_override(&mut value, &format!("trials={trials}"))?;
    }
    for spec in &args.set {
        apply_override(&mut value, spec)?;
    }
    serde_json::from_value(value).map_err(|e| format!("invalid config: {e}"))
}

fn default_format() -> String {
    FORMAT.to_string()
}

// ---------------------------------------------------------------------------
// regress
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressConfig {
    pub format: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub n_components: usize,
    pub sigma: f64,
    pub alphas: Vec<f64>,
    pub inner_iters: usize,
    pub batch_size: usize,
    pub outer_iters: usize,
    /// Repeated experiments (trial averaging).
    pub trials: usize,
    pub eps_sub: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub newton_log: bool,
}

impl Default for RegressConfig {
    fn default() -> Self {
        RegressConfig {
            format: default_format(),
            n: 40,
            m: 40,
            p: 20,
            n_components: 1000,
            sigma: 0.01,
            alphas: vec![1.6, 2.8, 5.0, 9.0, 16.0],
            inner_iters: 30,
            batch_size: 20,
            outer_iters: 30,
            trials: 7,
            eps_sub: 1e-14,
            seed: 1,
            init_scale: 1.0,
            newton_log: false,
        }
    }
}

fn regress_solver_config(cfg: &RegressConfig, alpha: f64, trial: usize) -> SolverConfig {
    SolverConfig {
        outer_iters: cfg.outer_iters,
        inner_iters: cfg.inner_iters,
        alpha,
        sampler: SamplerConfig {
            mode: SampleMode::WithoutReplacement,
            batch_size: cfg.batch_size,
            seed: cfg
                .seed
                .wrapping_mul(69069)
                .wrapping_add(trial as u64 + 1),
        },
        delta: DeltaSchedule::Constant(0.0),
        eps_floor: cfg.eps_sub,
        project_each_outer: true,
        newton: NewtonParams::regression(),
        init: InitPoint::Gaussian {
            scale: cfg.init_scale,
        },
        log_newton: cfg.newton_log,
    }
}

/// Relative gradient percentage trajectory of one run:
/// 100 * kkt_residual(s) / kkt_residual(0), one entry per report row.
pub fn relative_gradient_percent(report: &RunReport) -> Vec<f64> {
    let r0 = report.rows[0].kkt_residual.max(1e-300);
    report
        .rows
        .iter()
        .map(|r| 100.0 * r.kkt_residual / r0)
        .collect()
}

pub fn run_regress(args: &CommonArgs) -> i32 {
    let cfg: RegressConfig = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let problem = gen_regression(cfg.n, cfg.m, cfg.p, cfg.n_components, cfg.sigma, cfg.seed);
    let reference = problem.solve_kkt_reference().ok();
    let jobs: Vec<(usize, usize)> = (0..cfg.alphas.len())
        .flat_map(|a| (0..cfg.trials).map(move |t| (a, t)))
        .collect();
    let outcomes: Vec<(usize, usize, Result<RunReport, DriverError>)> = jobs
        .par_iter()
        .map(|&(ai, trial)| {
            let scfg = regress_solver_config(&cfg, cfg.alphas[ai], trial);
            let result = driver::outer_loop(&problem, &scfg, reference.as_ref())
                .map(|(_, report)| report);
            (ai, trial, result)
        })
        .collect();

    let mut runs = Csv::new(&[
        "alpha",
        "trial",
        "s",
        "dist_sq_primal",
        "dist_sq_dual",
        "constraint_violation",
        "kkt_residual",
        "mean_newton_iters",
        "wall_ms",
    ]);
    let mut diverged = 0usize;
    // mean rel-grad-pct per (alpha, s).
    let mut sums = vec![vec![0.0f64; cfg.outer_iters + 1]; cfg.alphas.len()];
    let mut counts = vec![0usize; cfg.alphas.len()];
    for (ai, trial, result) in &outcomes {
        let report = match result {
            Ok(r) => r,
            Err(DriverError::Divergence { report, .. }) => {
                diverged += 1;
                report
            }
            Err(e) => {
                eprintln!("error: run alpha={} trial={trial}: {e}", cfg.alphas[*ai]);
                return 1;
            }
        };
        for row in &report.rows {
            runs.push(vec![
                fmt_f64(cfg.alphas[*ai]),
                trial.to_string(),
                row.s.to_string(),
                row.dist_sq_primal.map_or("".into(), fmt_f64),
                row.dist_sq_dual.map_or("".into(), fmt_f64),
                fmt_f64(row.constraint_violation),
                fmt_f64(row.kkt_residual),
                fmt_f64(row.mean_newton_iters),
                fmt_f64(row.wall_ms.round()),
            ]);
        }
        if result.is_ok() {
            let rel = relative_gradient_percent(report);
            for (s, v) in rel.iter().enumerate() {
                sums[*ai][s] += v;
            }
            counts[*ai] += 1;
        }
    }
    let mut summary = Csv::new(&["alpha", "s", "mean_rel_grad_pct", "completed_trials"]);
    let mut series = Vec::new();
    for (ai, alpha) in cfg.alphas.iter().enumerate() {
        let denom = counts[ai].max(1) as f64;
        let mut pts = Vec::new();
        for s in 0..=cfg.outer_iters {
            let mean = sums[ai][s] / denom;
            summary.push(vec![
                fmt_f64(*alpha),
                s.to_string(),
                fmt_f64(mean),
                counts[ai].to_string(),
            ]);
            pts.push((s as f64, mean));
        }
        series.push(Series {
            name: format!("alpha={alpha}"),
            points: pts,
        });
    }
    let svg = svg_line_chart(
        "Relative gradient percentage vs epoch",
        "epoch",
        "relative gradient %",
        &series,
        true,
    );
    let out = &args.out;
    if let Err(e) = atomic_write(&out.join("regress_runs.csv"), &runs.to_bytes())
        .and_then(|_| atomic_write(&out.join("regress_summary.csv"), &summary.to_bytes()))
        .and_then(|_| atomic_write(&out.join("regress_convergence.svg"), svg.as_bytes()))
    {
        eprintln!("error: writing outputs: {e}");
        return 1;
    }
    println!(
        "regress: {} runs ({} diverged) -> {}",
        outcomes.len(),
        diverged,
        out.display()
    );
    0
}

// ---------------------------------------------------------------------------
// netflow
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub p_er: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnmCfg {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub eps_sub: f64,
}

impl Default for SnmCfg {
    fn default() -> Self {
        let d = SnmsppAttackConfig::default();
        SnmCfg {
            outer_iters: d.outer_iters,
            inner_iters: d.inner_iters,
            alpha: d.alpha,
            batch_size: d.batch_size,
            eps_sub: d.eps_sub,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetflowConfig {
    pub format: String,
    pub n_nodes: usize,
    pub cells: Vec<CellConfig>,
    pub m_samples: usize,
    pub budget_fracs: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub snm: SnmCfg,
}

impl Default for NetflowConfig {
    fn default() -> Self {
        NetflowConfig {
            format: default_format(),
            n_nodes: 10,
            cells: vec![
                CellConfig { p_er: 0.3, sigma: 0.001 },
                CellConfig { p_er: 0.3, sigma: 0.01 },
                CellConfig { p_er: 0.7, sigma: 0.001 },
                CellConfig { p_er: 0.7, sigma: 0.01 },
            ],
            m_samples: 2000,
            budget_fracs: vec![0.1, 0.2, 0.3, 0.4],
            trials: 15,
            seed: 1,
            snm: SnmCfg::default(),
        }
    }
}

pub fn run_netflow(args: &CommonArgs) -> i32 {
    let cfg: NetflowConfig = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let snm = SnmsppAttackConfig {
        outer_iters: cfg.snm.outer_iters,
        inner_iters: cfg.snm.inner_iters,
        alpha: cfg.snm.alpha,
        batch_size: cfg.snm.batch_size,
        eps_sub: cfg.snm.eps_sub,
        seed: cfg.seed,
    };
    let mut trials_csv = Csv::new(&[
        "p_er",
        "sigma",
        "trial",
        "strategy",
        "budget_frac",
        "budget",
        "rho",
        "feasible",
        "q_clean",
        "q_attacked",
    ]);
    let mut summary_csv = Csv::new(&[
        "p_er",
        "sigma",
        "budget_frac",
        "strategy",
        "mean_rho",
        "n_feasible",
        "n_excluded",
    ]);
    for cell in &cfg.cells {
        let rows = match run_netflow_cell(
            cfg.n_nodes,
            cell.p_er,
            cell.sigma,
            cfg.m_samples,
            &cfg.budget_fracs,
            cfg.trials,
            cfg.seed,
            &snm,
        ) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: cell (p={}, sigma={}): {e}", cell.p_er, cell.sigma);
                return 1;
            }
        };
        for r in &rows {
            trials_csv.push(vec![
                fmt_f64(r.p_er),
                fmt_f64(r.sigma),
                r.trial.to_string(),
                r.strategy.to_string(),
                fmt_f64(r.budget_frac),
                fmt_f64(r.budget),
                fmt_f64(r.rho),
                (r.feasible as u8).to_string(),
                fmt_f64(r.q_clean),
                fmt_f64(r.q_attacked),
            ]);
        }
        let mut series = Vec::new();
        for strategy in crate::experiments::netflow::Strategy::ALL {
            let mut pts = Vec::new();
            for (strat, frac, mean, n_feasible, n_excluded) in mean_rho_by_strategy(&rows) {
                if strat != strategy {
                    continue;
                }
                summary_csv.push(vec![
                    fmt_f64(cell.p_er),
                    fmt_f64(cell.sigma),
                    fmt_f64(frac),
                    strat.to_string(),
                    fmt_f64(mean),
                    n_feasible.to_string(),
                    n_excluded.to_string(),
                ]);
                if mean.is_finite() {
                    pts.push((frac, mean));
                }
            }
            series.push(Series {
                name: strategy.to_string(),
                points: pts,
            });
        }
        let svg = svg_line_chart(
            &format!("Mean relative cost increase (p={}, sigma={})", cell.p_er, cell.sigma),
            "budget fraction of total capacity",
            "mean rho",
            &series,
            false,
        );
        let name = format!(
            "netflow_rho_p{}_sigma{}.svg",
            cell.p_er.to_string().replace('.', "_"),
            cell.sigma.to_string().replace('.', "_")
        );
        if let Err(e) = atomic_write(&args.out.join(name), svg.as_bytes()) {
            eprintln!("error: writing outputs: {e}");
            return 1;
        }
    }
    if let Err(e) = atomic_write(&args.out.join("netflow_trials.csv"), &trials_csv.to_bytes())
        .and_then(|_| atomic_write(&args.out.join("netflow_summary.csv"), &summary_csv.to_bytes()))
    {
        eprintln!("error: writing outputs: {e}");
        return 1;
    }
    println!("netflow: {} cells -> {}", cfg.cells.len(), args.out.display());
    0
}

// ---------------------------------------------------------------------------
// rate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceConfig {
    Regression {
        n: usize,
        m: usize,
        p: usize,
        n_components: usize,
        sigma: f64,
    },
    Quadratic {
        n: usize,
        m: usize,
        q: usize,
        n_components: usize,
        mu: f64,
        spread: f64,
        coupling: f64,
    },
}

impl InstanceConfig {
    pub fn build(&self, seed: u64) -> ProblemSpec {
        match *self {
            InstanceConfig::Regression {
                n,
                m,
                p,
                n_components,
                sigma,
            } => gen_regression(n, m, p, n_components, sigma, seed),
            InstanceConfig::Quadratic {
                n,
                m,
                q,
                n_components,
                mu,
                spread,
                coupling,
            } => {
                gen_quadratic(
                    n,
                    m,
                    q,
                    n_components,
                    seed,
                    QuadCatalogParams {
                        mu,
                        spread,
                        coupling,
                        ..Default::default()
                    },
                )
                .problem
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    pub format: String,
    pub instance: InstanceConfig,
    /// Number of independent seeds averaged.
    pub trials: usize,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub batch_size: usize,
    /// alpha = alpha_frac * theoretical bound unless `alpha` overrides.
    pub alpha_frac: f64,
    pub alpha: Option<f64>,
    pub delta_initial: f64,
    pub delta_factor: f64,
    pub eps_floor: f64,
    pub seed: u64,
    pub init_scale: f64,
    /// CI gate: fail when fitted > theoretical + margin.
    pub gate_margin: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            format: default_format(),
            instance: InstanceConfig::Regression {
                n: 20,
                m: 20,
                p: 10,
                n_components: 50,
                sigma: 0.01,
            },
            trials: 20,
            outer_iters: 30,
            inner_iters: 5,
            batch_size: 10,
            alpha_frac: 0.9,
            alpha: None,
            delta_initial: 0.5,
            delta_factor: 0.5,
            eps_floor: 1e-12,
            seed: 1,
            init_scale: 1.0,
            gate_margin: 0.1,
        }
    }
}

pub fn run_rate(args: &CommonArgs) -> i32 {
    let cfg: RateConfig = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let problem = cfg.instance.build(cfg.seed);
    let reference = match problem.solve_kkt_reference() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: reference solve: {e}");
            return 1;
        }
    };
    let bound = driver::theoretical_alpha_bound(&problem, cfg.inner_iters, cfg.batch_size);
    let alpha = cfg.alpha.unwrap_or(cfg.alpha_frac * bound);
    let reports: Vec<Result<RunReport, DriverError>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let scfg = SolverConfig {
                outer_iters: cfg.outer_iters,
                inner_iters: cfg.inner_iters,
                alpha,
                sampler: SamplerConfig {
                    mode: SampleMode::WithoutReplacement,
                    batch_size: cfg.batch_size,
                    seed: cfg.seed.wrapping_mul(2654435761).wrapping_add(trial as u64),
                },
                delta: DeltaSchedule::Geometric {
                    initial: cfg.delta_initial,
                    factor: cfg.delta_factor,
                },
                eps_floor: cfg.eps_floor,
                project_each_outer: false,
                newton: NewtonParams::regression(),
                init: InitPoint::Gaussian {
                    scale: cfg.init_scale,
                },
                log_newton: false,
            };
            driver::outer_loop(&problem, &scfg, Some(&reference)).map(|(_, r)| r)
        })
        .collect();
    let mut csv = Csv::new(&[
        "trial",
        "s",
        "dist_sq_primal",
        "dist_sq_dual",
        "constraint_violation",
        "kkt_residual",
        "mean_newton_iters",
        "wall_ms",
    ]);
    let rows_per = cfg.outer_iters + 1;
    let mut mean_primal = vec![0.0f64; rows_per];
    let mut mean_dual = vec![0.0f64; rows_per];
    let mut completed = 0usize;
    for (trial, rep) in reports.iter().enumerate() {
        match rep {
            Ok(report) => {
                for row in &report.rows {
                    csv.push(vec![
                        trial.to_string(),
                        row.s.to_string(),
                        row.dist_sq_primal.map_or("".into(), fmt_f64),
                        row.dist_sq_dual.map_or("".into(), fmt_f64),
                        fmt_f64(row.constraint_violation),
                        fmt_f64(row.kkt_residual),
                        fmt_f64(row.mean_newton_iters),
                        fmt_f64(row.wall_ms.round()),
                    ]);
                    mean_primal[row.s] += row.dist_sq_primal.unwrap_or(f64::NAN);
                    mean_dual[row.s] += row.dist_sq_dual.unwrap_or(f64::NAN);
                }
                completed += 1;
            }
            Err(e) => {
                eprintln!("error: trial {trial}: {e}");
                return 1;
            }
        }
    }
    for v in mean_primal.iter_mut().chain(mean_dual.iter_mut()) {
        *v /= completed.max(1) as f64;
    }
    let (fitted, theoretical) = contraction_estimate(&mean_primal, &problem, alpha);
    let dual_slope = log_linear_slope(&mean_dual);
    let pass = fitted <= theoretical + cfg.gate_margin;
    let summary = serde_json::json!({
        "format": FORMAT,
        "alpha": alpha,
        "theoretical_alpha_bound": bound,
        "fitted_ratio": fitted,
        "theoretical_ratio": theoretical,
        "gate_margin": cfg.gate_margin,
        "dual_log_slope": dual_slope,
        "trials": completed,
        "pass": pass,
    });
    let series = vec![
        Series {
            name: "mean primal dist^2".into(),
            points: mean_primal.iter().enumerate().map(|(s, &v)| (s as f64, v)).collect(),
        },
        Series {
            name: "mean dual dist^2".into(),
            points: mean_dual.iter().enumerate().map(|(s, &v)| (s as f64, v)).collect(),
        },
    ];
    let svg = svg_line_chart(
        "Squared distance to the saddle point",
        "epoch",
        "mean squared distance",
        &series,
        true,
    );
    let out = &args.out;
    if let Err(e) = atomic_write(&out.join("rate_trajectories.csv"), &csv.to_bytes())
        .and_then(|_| {
            atomic_write(
                &out.join("rate_summary.json"),
                serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
            )
        })
        .and_then(|_| atomic_write(&out.join("rate_distances.svg"), svg.as_bytes()))
    {
        eprintln!("error: writing outputs: {e}");
        return 1;
    }
    println!(
        "rate: fitted {fitted:.4} vs theoretical {theoretical:.4} (+{}) -> {}",
        cfg.gate_margin,
        out.display()
    );
    if pass {
        0
    } else {
        1
    }
}

// ---------------------------------------------------------------------------
// proptest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProptestConfig {
    pub format: String,
    pub samples: usize,
    pub seed: u64,
    /// Replay one suite at one case seed.
    pub replay_suite: Option<String>,
    pub replay_case: Option<u64>,
}

impl Default for ProptestConfig {
    fn default() -> Self {
        ProptestConfig {
            format: default_format(),
            samples: 1000,
            seed: 1,
            replay_suite: None,
            replay_case: None,
        }
    }
}

pub fn run_proptest(args: &CommonArgs) -> i32 {
    let cfg: ProptestConfig = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let outcomes = match (&cfg.replay_suite, cfg.replay_case) {
        (Some(name), Some(case)) => {
            // Cases derive deterministically from (seed, case index), so
            // rerunning the suite through the failing index reproduces it.
            match props::run_suite(name, case as usize + 1, cfg.seed) {
                Some(outcome) => vec![outcome],
                None => {
                    eprintln!("error: unknown suite '{name}'");
                    return 2;
                }
            }
        }
        _ => props::run_all(cfg.samples, cfg.seed),
    };
    let mut failed = false;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        match o.failing_case {
            Some(case) => println!(
                "{status} {name} [{cases} cases]: {detail} (replay: --set replay_suite=\"{name}\" --set replay_case={case})",
                name = o.name,
                cases = o.cases,
                detail = o.detail,
                case = case
            ),
            None => println!(
                "{status} {name} [{cases} cases]: {detail}",
                name = o.name,
                cases = o.cases,
                detail = o.detail
            ),
        }
        failed |= !o.passed;
    }
    if failed {
        1
    } else {
        0
    }
}

pub fn write_newton_log(path: &Path, rows: &[driver::NewtonLogRow]) -> std::io::Result<()> {
    let mut csv = Csv::new(&["s", "k", "block", "iter", "f_norm", "step", "cg_iters", "eta"]);
    for r in rows {
        csv.push(vec![
            r.s.to_string(),
            r.k.to_string(),
            r.block.to_string(),
            r.iter.to_string(),
            fmt_f64(r.f_norm),
            fmt_f64(r.step),
            r.cg_iters.to_string(),
            fmt_f64(r.eta),
        ]);
    }
    atomic_write(path, &csv.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_to_nested_paths() {
        let mut v = serde_json::json!({"a": {"b": 1}, "seed": 0});
        apply_override(&mut v, "a.b=42").unwrap();
        apply_override(&mut v, "seed=9").unwrap();
        apply_override(&mut v, "name=hello").unwrap();
        assert_eq!(v["a"]["b"], 42);
        assert_eq!(v["seed"], 9);
        assert_eq!(v["name"], "hello");
        assert!(apply_override(&mut v, "broken").is_err());
    }

    #[test]
    fn default_configs_round_trip_through_loader() {
        let args = CommonArgs {
            config: None,
            seed: Some(7),
            trials: Some(3),
            out: PathBuf::from("out"),
            set: vec!["outer_iters=5".into()],
        };
        let cfg: RegressConfig = load_config(&args).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.outer_iters, 5);
        let cfg: NetflowConfig = load_config(&CommonArgs {
            config: None,
            seed: None,
            trials: None,
            out: PathBuf::from("out"),
            set: vec!["snm.alpha=0.01".into()],
        })
        .unwrap();
        assert_eq!(cfg.snm.alpha, 0.01);
        assert_eq!(cfg.trials, 15);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let args = CommonArgs {
            config: None,
            seed: None,
            trials: None,
            out: PathBuf::from("out"),
            set: vec!["no_such_key=1".into()],
        };
        assert!(load_config::<ProptestConfig>(&args).is_err());
    }
}
