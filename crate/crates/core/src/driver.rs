//! Outer/inner loop of the variance-reduced implicit proximal-point method.
//!
//! Each epoch refreshes the reference point and its cached full gradients,
//! then runs `inner_iters` stochastic implicit steps: sample a batch, build
//! the SVRG corrections and drift vectors, solve the y-subproblem at the
//! frozen x, then the x-subproblem at the fresh y, then ascend the
//! multiplier on the constraint violation. Subproblems are solved to the
//! epoch tolerance produced by the natural-residual schedule.

use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::problem::{BlockId, IterateState, ProblemSpec, SaddlePoint};
use crate::sampling::{self, SamplerConfig, SamplingError};
use crate::ssn::{self, NewtonParams, SsnError, SubproblemSpec};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("subproblem failed at epoch {s}, inner step {k}, block {block}: {source}")]
    Subproblem {
        s: usize,
        k: usize,
        block: BlockId,
        source: SsnError,
    },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("divergence: non-finite iterate at epoch {s}, inner step {k}")]
    Divergence {
        s: usize,
        k: usize,
        report: RunReport,
    },
    #[error("constraint matrix [A B] is rank deficient: {0}")]
    RankDeficient(String),
    #[error("invalid solver configuration: {0}")]
    Invalid(String),
}

/// Subproblem tolerance decay across epochs.
#[derive(Debug, Clone, Copy)]
pub enum DeltaSchedule {
    Constant(f64),
    /// delta_s = initial * factor^s.
    Geometric { initial: f64, factor: f64 },
}

impl DeltaSchedule {
    pub fn value(&self, s: usize) -> f64 {
        match self {
            DeltaSchedule::Constant(v) => *v,
            DeltaSchedule::Geometric { initial, factor } => initial * factor.powi(s as i32),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            DeltaSchedule::Constant(v) if *v >= 0.0 => Ok(()),
            DeltaSchedule::Geometric { initial, factor }
                if *initial >= 0.0 && *factor >= 0.0 && *factor <= 1.0 =>
            {
                Ok(())
            }
            _ => Err("delta schedule must be nonnegative and nonincreasing".into()),
        }
    }
}

/// Starting point policy.
#[derive(Debug, Clone)]
pub enum InitPoint {
    Zero,
    /// Independent standard normals scaled by `scale`; lambda starts at zero.
    Gaussian { scale: f64 },
    Given {
        x: DVector<f64>,
        y: DVector<f64>,
        lambda: DVector<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Outer iterations S.
    pub outer_iters: usize,
    /// Inner iterations per epoch.
    pub inner_iters: usize,
    /// Constant step size.
    pub alpha: f64,
    pub sampler: SamplerConfig,
    pub delta: DeltaSchedule,
    /// Minimum subproblem tolerance.
    pub eps_floor: f64,
    /// Project the iterate onto the constraint manifold after each epoch.
    pub project_each_outer: bool,
    pub newton: NewtonParams,
    pub init: InitPoint,
    /// Collect per-iteration Newton rows into the report.
    pub log_newton: bool,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        if self.outer_iters < 1 || self.inner_iters < 1 {
            return Err(DriverError::Invalid(
                "outer_iters and inner_iters must be >= 1".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(DriverError::Invalid(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.eps_floor > 0.0) {
            return Err(DriverError::Invalid(
                "eps_floor must be positive (subproblem tolerances cannot reach zero)".into(),
            ));
        }
        self.delta.validate().map_err(DriverError::Invalid)?;
        self.newton.validate().map_err(DriverError::Invalid)?;
        Ok(())
    }
}

/// One per-epoch row of the run report. Row 0 is the initial point.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub s: usize,
    /// ||(x~, y~) - (x*, y*)||^2 when a reference saddle point is known.
    pub dist_sq_primal: Option<f64>,
    pub dist_sq_dual: Option<f64>,
    pub constraint_violation: f64,
    pub kkt_residual: f64,
    pub mean_newton_iters: f64,
    pub wall_ms: f64,
}

/// Per-iteration Newton log row (s, k, block, iter, f_norm, step, cg_iters, eta).
#[derive(Debug, Clone)]
pub struct NewtonLogRow {
    pub s: usize,
    pub k: usize,
    pub block: BlockId,
    pub iter: usize,
    pub f_norm: f64,
    pub step: f64,
    pub cg_iters: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    pub eps_history: Vec<f64>,
    pub warnings: Vec<String>,
    pub newton_rows: Vec<NewtonLogRow>,
}

impl RunReport {
    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            r.constraint_violation.is_finite()
                && r.kkt_residual.is_finite()
                && r.dist_sq_primal.map_or(true, |v| v.is_finite())
                && r.dist_sq_dual.map_or(true, |v| v.is_finite())
        })
    }
}

/// Step-size bound of the q-linear rate theorem:
///
/// ```text
/// min over both block orderings of
///   ( L_v + sqrt(2 m (m-1)) L_v / sqrt(b) + sqrt(m (m-1)) L_u / sqrt(2 b) )^{-1}
/// ```
///
/// With m = 1 this collapses to min(1/L_x, 1/L_y).
pub fn theoretical_alpha_bound(p: &ProblemSpec, m_inner: usize, b: usize) -> f64 {
    assert!(m_inner >= 1 && b >= 1);
    let lx = p.l_phi_x();
    let ly = p.l_phi_y();
    let mm = (m_inner * (m_inner - 1)) as f64;
    let bf = b as f64;
    let term = |l_same: f64, l_other: f64| -> f64 {
        l_same + (2.0 * mm / bf).sqrt() * l_same + (mm / (2.0 * bf)).sqrt() * l_other
    };
    (1.0 / term(ly, lx)).min(1.0 / term(lx, ly))
}

/// Epoch tolerance: max(eps_floor, delta_s * min of the two natural-residual
/// norms at the reference point). Satisfies both schedule inequalities with
/// a practical floor.
pub fn tolerance_schedule(
    p: &ProblemSpec,
    x_ref: &DVector<f64>,
    y_ref: &DVector<f64>,
    lambda_ref: &DVector<f64>,
    delta_s: f64,
    eps_floor: f64,
) -> f64 {
    assert!(delta_s >= 0.0, "delta_s must be nonnegative");
    if delta_s == 0.0 {
        return eps_floor;
    }
    let rx = p
        .natural_residual(BlockId::X, x_ref, y_ref, lambda_ref, 1.0)
        .norm();
    let ry = p
        .natural_residual(BlockId::Y, x_ref, y_ref, lambda_ref, 1.0)
        .norm();
    eps_floor.max(delta_s * rx.min(ry))
}

/// Cached factorization of A A' + B B' for projections onto the constraint
/// manifold C = {(x, y) : A x + B y + c = 0}.
pub struct ConstraintProjector {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ConstraintProjector {
    pub fn new(p: &ProblemSpec) -> Result<Self, DriverError> {
        let gram = &p.a * p.a.transpose() + &p.b * p.b.transpose();
        let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
            DriverError::RankDeficient(
                "A A' + B B' is not positive definite; [A B] must have full row rank".into(),
            )
        })?;
        Ok(ConstraintProjector { chol })
    }

    /// Projects (x, y) onto C; returns (x', y', zeta) with the correction
    /// x' = x - A'zeta, y' = y - B'zeta.
    pub fn project(
        &self,
        p: &ProblemSpec,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let zeta = self.chol.solve(&p.constraint_residual(x, y));
        (
            x - p.a.transpose() * &zeta,
            y - p.b.transpose() * &zeta,
            zeta,
        )
    }
}

fn initial_state(p: &ProblemSpec, cfg: &SolverConfig) -> IterateState {
    match &cfg.init {
        InitPoint::Zero => IterateState::new(
            p,
            DVector::zeros(p.n),
            DVector::zeros(p.m_dim),
            DVector::zeros(p.q_dim),
        ),
        InitPoint::Gaussian { scale } => {
            // Keyed off the sampler seed with a reserved counter so the
            // initial point never collides with a batch stream.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.sampler.seed ^ 0xA55A_5AA5_55AA_AA55);
            let x = DVector::from_fn(p.n, |_, _| *scale * rng.sample::<f64, _>(StandardNormal));
            let y =
                DVector::from_fn(p.m_dim, |_, _| *scale * rng.sample::<f64, _>(StandardNormal));
            IterateState::new(p, x, y, DVector::zeros(p.q_dim))
        }
        InitPoint::Given { x, y, lambda } => {
            IterateState::new(p, x.clone(), y.clone(), lambda.clone())
        }
    }
}

/// Outcome of one inner step: Newton iteration counts for the two blocks.
pub struct InnerStepStats {
    pub newton_iters_y: usize,
    pub newton_iters_x: usize,
}

/// One stochastic implicit step: sample, correct, solve Y then X, ascend
/// lambda on the constraint violation.
pub fn inner_step(
    state: &mut IterateState,
    p: &ProblemSpec,
    cfg: &SolverConfig,
    s: usize,
    k: usize,
    eps_k: f64,
    report: Option<&mut RunReport>,
) -> Result<InnerStepStats, DriverError> {
    let counter = (s * cfg.inner_iters + k) as u64;
    let batch = sampling::draw_batch(&cfg.sampler, p.n_components(), counter)?;
    let (v_x, v_y) = sampling::svrg_correction(p, &batch, state, state.reference_token())?;
    let (hat_x, hat_y) =
        sampling::drift_vectors(&v_x, &v_y, &state.lambda, cfg.alpha, &p.a, &p.b);

    // Y block first, at the frozen x^k.
    let spec_y = SubproblemSpec {
        problem: p,
        block: BlockId::Y,
        anchor: state.y.clone(),
        other: state.x.clone(),
        alpha: cfg.alpha,
        batch: batch.clone(),
        drift: hat_y,
        eps_sub: eps_k,
        params: cfg.newton,
    };
    let (xi_y, rep_y) = ssn::solve_subproblem(&spec_y, None).map_err(|source| {
        DriverError::Subproblem {
            s,
            k,
            block: BlockId::Y,
            source,
        }
    })?;
    let y_next = ssn::recover_primal(&spec_y, &xi_y);

    // X block at the fresh y^{k+1}.
    let spec_x = SubproblemSpec {
        problem: p,
        block: BlockId::X,
        anchor: state.x.clone(),
        other: y_next.clone(),
        alpha: cfg.alpha,
        batch,
        drift: hat_x,
        eps_sub: eps_k,
        params: cfg.newton,
    };
    let (xi_x, rep_x) = ssn::solve_subproblem(&spec_x, None).map_err(|source| {
        DriverError::Subproblem {
            s,
            k,
            block: BlockId::X,
            source,
        }
    })?;
    let x_next = ssn::recover_primal(&spec_x, &xi_x);

    state.lambda += (&p.a * &x_next + &p.b * &y_next + &p.c) * cfg.alpha;
    state.x = x_next;
    state.y = y_next;

    if let Some(rep) = report {
        for (block, nr) in [(BlockId::Y, &rep_y), (BlockId::X, &rep_x)] {
            for row in &nr.rows {
                rep.newton_rows.push(NewtonLogRow {
                    s,
                    k,
                    block,
                    iter: row.iter,
                    f_norm: row.f_norm,
                    step: row.step,
                    cg_iters: row.cg_iters,
                    eta: row.eta,
                });
            }
        }
    }
    Ok(InnerStepStats {
        newton_iters_y: rep_y.iterations,
        newton_iters_x: rep_x.iterations,
    })
}

fn epoch_row(
    p: &ProblemSpec,
    state: &IterateState,
    reference: Option<&SaddlePoint>,
    s: usize,
    mean_newton: f64,
    wall_ms: f64,
) -> EpochRow {
    let (dp, dd) = match reference {
        Some(r) => (
            Some((&state.x - &r.x).norm_squared() + (&state.y - &r.y).norm_squared()),
            Some((&state.lambda - &r.lambda).norm_squared()),
        ),
        None => (None, None),
    };
    EpochRow {
        s,
        dist_sq_primal: dp,
        dist_sq_dual: dd,
        constraint_violation: p.constraint_residual(&state.x, &state.y).norm(),
        kkt_residual: p.kkt_residual(&state.x, &state.y, &state.lambda),
        mean_newton_iters: mean_newton,
        wall_ms,
    }
}

/// Runs S epochs of m inner steps. Row 0 of the report is the initial point;
/// row s+1 is the state after epoch s (post-projection when enabled).
pub fn outer_loop(
    p: &ProblemSpec,
    cfg: &SolverConfig,
    reference: Option<&SaddlePoint>,
) -> Result<(IterateState, RunReport), DriverError> {
    cfg.validate()?;
    let mut report = RunReport::default();
    let bound = theoretical_alpha_bound(p, cfg.inner_iters, cfg.sampler.batch_size);
    if cfg.alpha > bound {
        let msg = format!(
            "step size {} exceeds the theoretical bound {:.6e}; proceeding (the bound is advisory)",
            cfg.alpha, bound
        );
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    let projector = if cfg.project_each_outer {
        Some(ConstraintProjector::new(p)?)
    } else {
        None
    };
    let mut state = initial_state(p, cfg);
    report
        .rows
        .push(epoch_row(p, &state, reference, 0, 0.0, 0.0));
    for s in 0..cfg.outer_iters {
        let t0 = Instant::now();
        state.refresh_reference(p);
        let eps_k = tolerance_schedule(
            p,
            &state.x_ref,
            &state.y_ref,
            &state.lambda_ref,
            cfg.delta.value(s),
            cfg.eps_floor,
        );
        report.eps_history.push(eps_k);
        let mut newton_total = 0usize;
        for k in 0..cfg.inner_iters {
            let log = if cfg.log_newton {
                Some(&mut report)
            } else {
                None
            };
            let stats = inner_step(&mut state, p, cfg, s, k, eps_k, log)?;
            newton_total += stats.newton_iters_x + stats.newton_iters_y;
            if !state.is_finite() {
                report
                    .rows
                    .push(epoch_row(p, &state, reference, s + 1, f64::NAN, 0.0));
                return Err(DriverError::Divergence { s, k, report });
            }
        }
        if let Some(proj) = &projector {
            let (xp, yp, _) = proj.project(p, &state.x, &state.y);
            state.x = xp;
            state.y = yp;
        }
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let mean_newton = newton_total as f64 / (2 * cfg.inner_iters) as f64;
        report
            .rows
            .push(epoch_row(p, &state, reference, s + 1, mean_newton, wall_ms));
    }
    Ok((state, report))
}

/// Fits the per-epoch contraction of the mean squared primal distance over
/// the tail half of the run and pairs it with the theoretical ratio
/// 1 - 2 a mu_min / (1 + 2 a mu_min).
///
/// `dists` must hold one squared distance per report row (row 0 = initial).
pub fn contraction_estimate(dists: &[f64], p: &ProblemSpec, alpha: f64) -> (f64, f64) {
    assert!(
        dists.len() >= 11,
        "contraction fit needs at least 10 epochs, got {}",
        dists.len().saturating_sub(1)
    );
    let floor = 1e-24;
    let start = dists.len() / 2;
    // Truncate the window at the floating-point floor.
    let mut end = dists.len() - 1;
    for (i, &d) in dists.iter().enumerate().skip(start + 1) {
        if d < floor {
            end = i - 1;
            break;
        }
    }
    let end = end.max(start + 1);
    let fitted = (dists[end] / dists[start]).powf(1.0 / (end - start) as f64);
    let mu_min = p.mu_x.min(p.mu_y);
    let theoretical = 1.0 - 2.0 * alpha * mu_min / (1.0 + 2.0 * alpha * mu_min);
    (fitted, theoretical)
}

/// Theoretical q-linear ratio by itself.
pub fn theoretical_ratio(mu_min: f64, alpha: f64) -> f64 {
    1.0 - 2.0 * alpha * mu_min / (1.0 + 2.0 * alpha * mu_min)
}

/// Least-squares slope of log(values) against the epoch index; used for the
/// r-linear multiplier check.
pub fn log_linear_slope(values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0 && v.is_finite())
        .map(|(i, &v)| (i as f64, v.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 0.0;
    }
    let sx: f64 = pts.iter().map(|(x, _)| x).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::synthetic::{gen_quadratic, QuadCatalogParams};
    use crate::sampling::SampleMode;
    use crate::testkit;
    use nalgebra::dvector;

    fn base_config(seed: u64, b: usize) -> SolverConfig {
        SolverConfig {
            outer_iters: 10,
            inner_iters: 5,
            alpha: 0.1,
            sampler: SamplerConfig {
                mode: SampleMode::WithoutReplacement,
                batch_size: b,
                seed,
            },
            delta: DeltaSchedule::Geometric {
                initial: 0.5,
                factor: 0.5,
            },
            eps_floor: 1e-12,
            project_each_outer: false,
            newton: NewtonParams::network(),
            init: InitPoint::Gaussian { scale: 1.0 },
            log_newton: false,
        }
    }

    #[test]
    fn alpha_bound_arithmetic() {
        // m = 1 collapses both correction terms.
        let mut inst = gen_quadratic(3, 3, 1, 2, 1, Default::default());
        inst.problem.l_g_bar = 2.0;
        inst.problem.l_h_bar = 2.0;
        inst.problem.l_f_bar = 0.0;
        assert!((theoretical_alpha_bound(&inst.problem, 1, 4) - 0.5).abs() < 1e-15);
        // L_x = L_y = 1, m = 5, b = 10: 1/(1 + 2 + 1) = 0.25.
        inst.problem.l_g_bar = 1.0;
        inst.problem.l_h_bar = 1.0;
        assert!((theoretical_alpha_bound(&inst.problem, 5, 10) - 0.25).abs() < 1e-15);
        // Decreasing in m, increasing in b.
        let mut prev = f64::INFINITY;
        for m in 1..6 {
            let v = theoretical_alpha_bound(&inst.problem, m, 10);
            assert!(v <= prev);
            prev = v;
        }
        let mut prev = 0.0;
        for b in 1..6 {
            let v = theoretical_alpha_bound(&inst.problem, 5, b);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn tolerance_schedule_cases() {
        let inst = gen_quadratic(4, 3, 2, 5, 7, Default::default());
        let p = &inst.problem;
        let x = dvector![1.0, 0.5, -0.5, 0.2];
        let y = dvector![0.1, -0.3, 0.8];
        let l = dvector![0.0, 0.0];
        // delta = 0 gives the floor.
        assert_eq!(tolerance_schedule(p, &x, &y, &l, 0.0, 1e-10), 1e-10);
        // At the saddle the residuals vanish, so the floor is returned.
        let sp = p.solve_kkt_reference().unwrap();
        let eps = tolerance_schedule(p, &sp.x, &sp.y, &sp.lambda, 0.1, 1e-10);
        assert!((eps - 1e-10).abs() < 1e-22);
        // Scale-and-min selection.
        let rx = p.natural_residual(BlockId::X, &x, &y, &l, 1.0).norm();
        let ry = p.natural_residual(BlockId::Y, &x, &y, &l, 1.0).norm();
        let eps = tolerance_schedule(p, &x, &y, &l, 0.1, 1e-12);
        assert!((eps - 0.1 * rx.min(ry)).abs() < 1e-15);
    }

    #[test]
    fn lambda_update_exactness() {
        let inst = gen_quadratic(3, 2, 2, 6, 11, Default::default());
        let p = &inst.problem;
        let cfg = base_config(5, 3);
        let mut state = initial_state(p, &cfg);
        state.refresh_reference(p);
        let lam_before = state.lambda.clone();
        inner_step(&mut state, p, &cfg, 0, 0, 1e-10, None).unwrap();
        // lambda^{k+1} - lambda^k - alpha (A x^{k+1} + B y^{k+1} + c) = 0.
        let residual =
            (&state.lambda - &lam_before) - p.constraint_residual(&state.x, &state.y) * cfg.alpha;
        assert!(residual.norm() < 1e-14, "{}", residual.norm());
    }

    #[test]
    fn one_dim_lambda_arithmetic() {
        // A = B = [1], c = 0, alpha = 0.1, x+ = 0.3, y+ = 0.2, lambda = 0:
        // the ascent update gives +0.05.
        let lam: f64 = 0.0 + 0.1 * (0.3 + 0.2);
        assert!((lam - 0.05).abs() < 1e-15);
    }

    #[test]
    fn full_batch_inner_step_matches_deterministic_update() {
        let inst = gen_quadratic(4, 3, 2, 6, 13, Default::default());
        let p = &inst.problem;
        let mut cfg = base_config(3, 6);
        cfg.sampler.batch_size = p.n_components();
        cfg.delta = DeltaSchedule::Constant(0.0);
        cfg.eps_floor = 1e-13;
        let mut state = initial_state(p, &cfg);
        state.refresh_reference(p);
        let (x0, y0, l0) = (state.x.clone(), state.y.clone(), state.lambda.clone());
        inner_step(&mut state, p, &cfg, 0, 0, 1e-13, None).unwrap();
        let (xe, ye, le) = testkit::deterministic_step(p, &x0, &y0, &l0, cfg.alpha);
        assert!((&state.x - &xe).norm() < 1e-10);
        assert!((&state.y - &ye).norm() < 1e-10);
        assert!((&state.lambda - &le).norm() < 1e-10);
    }

    #[test]
    fn saddle_point_is_fixed_point() {
        let inst = gen_quadratic(4, 3, 2, 6, 17, Default::default());
        let p = &inst.problem;
        let sp = p.solve_kkt_reference().unwrap();
        let mut cfg = base_config(9, p.n_components());
        cfg.delta = DeltaSchedule::Constant(0.0);
        cfg.eps_floor = 1e-13;
        let mut state = IterateState::new(p, sp.x.clone(), sp.y.clone(), sp.lambda.clone());
        inner_step(&mut state, p, &cfg, 0, 0, 1e-13, None).unwrap();
        assert!((&state.x - &sp.x).norm() < 1e-8);
        assert!((&state.y - &sp.y).norm() < 1e-8);
        assert!((&state.lambda - &sp.lambda).norm() < 1e-8);
    }

    #[test]
    fn outer_loop_converges_on_catalog() {
        let inst = gen_quadratic(6, 5, 3, 12, 23, QuadCatalogParams::default());
        let p = &inst.problem;
        let sp = p.solve_kkt_reference().unwrap();
        let mut cfg = base_config(31, 4);
        cfg.outer_iters = 25;
        cfg.alpha = 0.9 * theoretical_alpha_bound(p, cfg.inner_iters, 4);
        let (state, report) = outer_loop(p, &cfg, Some(&sp)).unwrap();
        assert!(report.all_finite());
        assert_eq!(report.rows.len(), 26);
        let d_last = report.rows.last().unwrap().dist_sq_primal.unwrap();
        let d_first = report.rows[0].dist_sq_primal.unwrap();
        assert!(
            d_last < 1e-3 * d_first.max(1.0),
            "no contraction: first {d_first:.3e}, last {d_last:.3e}"
        );
        assert!(state.is_finite());
    }

    #[test]
    fn zero_noise_single_component_matches_deterministic_trajectory() {
        let inst = gen_quadratic(3, 3, 2, 1, 29, Default::default());
        let p = &inst.problem;
        let mut cfg = base_config(7, 1);
        cfg.outer_iters = 5;
        cfg.inner_iters = 4;
        cfg.delta = DeltaSchedule::Constant(0.0);
        cfg.eps_floor = 1e-13;
        cfg.init = InitPoint::Given {
            x: dvector![1.0, -0.5, 0.25],
            y: dvector![0.4, 0.4, -0.1],
            lambda: dvector![0.0, 0.0],
        };
        let (state, _) = outer_loop(p, &cfg, None).unwrap();
        let traj = testkit::deterministic_trajectory(
            p,
            &dvector![1.0, -0.5, 0.25],
            &dvector![0.4, 0.4, -0.1],
            &dvector![0.0, 0.0],
            cfg.alpha,
            20,
        );
        let (xe, ye, le) = traj.last().unwrap();
        assert!((&state.x - xe).norm() < 1e-9);
        assert!((&state.y - ye).norm() < 1e-9);
        assert!((&state.lambda - le).norm() < 1e-9);
    }

    #[test]
    fn projector_cases() {
        let inst = gen_quadratic(4, 3, 2, 4, 37, Default::default());
        let p = &inst.problem;
        let proj = ConstraintProjector::new(p).unwrap();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let (xp, yp, zeta) = proj.project(p, &x, &y);
            assert!(p.constraint_residual(&xp, &yp).norm() <= 1e-10);
            // Correction lies in the row space by construction.
            assert!(((&x - &xp) - p.a.transpose() * &zeta).norm() < 1e-14);
            assert!(((&y - &yp) - p.b.transpose() * &zeta).norm() < 1e-14);
            // Idempotence.
            let (xpp, ypp, z2) = proj.project(p, &xp, &yp);
            assert!((&xpp - &xp).norm() < 1e-12 && (&ypp - &yp).norm() < 1e-12);
            assert!(z2.norm() < 1e-10);
        }
        // Feasible input comes back unchanged.
        let sp = p.solve_kkt_reference().unwrap();
        let (xp, yp, zeta) = proj.project(p, &sp.x, &sp.y);
        assert!(zeta.norm() < 1e-10);
        assert!((&xp - &sp.x).norm() < 1e-10 && (&yp - &sp.y).norm() < 1e-10);
    }

    #[test]
    fn projection_one_dimensional_example() {
        // A = B = [1], c = 0, (x, y) = (1, 1): zeta = 1, projection (0, 0).
        use crate::problem::{Coupling, QuadraticComponent, SymOp};
        use nalgebra::dmatrix;
        let p = ProblemSpec::new(
            1,
            1,
            1,
            vec![QuadraticComponent {
                p: SymOp::dense(dmatrix![1.0]).unwrap(),
                p_lin: dvector![0.0],
                q: SymOp::dense(dmatrix![1.0]).unwrap(),
                q_lin: dvector![0.0],
                r: Coupling::Zero { n: 1, m: 1 },
            }],
            crate::prox::Regularizer::Zero,
            crate::prox::Regularizer::Zero,
            dmatrix![1.0],
            dmatrix![1.0],
            dvector![0.0],
            1.0,
            1.0,
            1.0,
            1.0,
            0.0,
        )
        .unwrap();
        let proj = ConstraintProjector::new(&p).unwrap();
        let (xp, yp, zeta) = proj.project(&p, &dvector![1.0], &dvector![1.0]);
        assert!((zeta[0] - 1.0).abs() < 1e-14);
        assert!(xp.norm() < 1e-14 && yp.norm() < 1e-14);
    }

    #[test]
    fn projection_minimality_against_feasible_competitors() {
        let inst = gen_quadratic(4, 3, 2, 4, 43, Default::default());
        let p = &inst.problem;
        let proj = ConstraintProjector::new(p).unwrap();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(47);
        let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let (xp, yp, _) = proj.project(p, &x, &y);
        let d_star = ((&x - &xp).norm_squared() + (&y - &yp).norm_squared()).sqrt();
        for _ in 0..100 {
            // Random feasible competitor: project a random point.
            let u = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let v = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let (uf, vf, _) = proj.project(p, &u, &v);
            let d = ((&x - &uf).norm_squared() + (&y - &vf).norm_squared()).sqrt();
            assert!(d_star <= d + 1e-10);
        }
    }

    #[test]
    fn contraction_estimate_arithmetic() {
        // alpha = 0.25, mu_min = 1 gives the 2/3 ratio.
        assert!((theoretical_ratio(1.0, 0.25) - 2.0 / 3.0).abs() < 1e-15);
        // mu -> large drives the ratio to 0.
        assert!(theoretical_ratio(1e9, 1.0) < 1e-8);
        // Geometric sequence is fitted exactly.
        let inst = gen_quadratic(3, 3, 1, 2, 53, Default::default());
        let dists: Vec<f64> = (0..21).map(|s| 0.5f64.powi(s)).collect();
        let (fitted, _) = contraction_estimate(&dists, &inst.problem, 0.1);
        assert!((fitted - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alpha_above_bound_warns_not_errors() {
        let inst = gen_quadratic(3, 2, 1, 4, 59, Default::default());
        let p = &inst.problem;
        let mut cfg = base_config(61, 2);
        cfg.outer_iters = 2;
        cfg.alpha = 100.0 * theoretical_alpha_bound(p, cfg.inner_iters, 2);
        // May or may not diverge; it must not reject the configuration.
        match outer_loop(p, &cfg, None) {
            Ok((_, report)) => assert!(!report.warnings.is_empty()),
            Err(DriverError::Divergence { report, .. }) => assert!(!report.warnings.is_empty()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn three_point_inequality_identity() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(67);
        for _ in 0..1000 {
            let a = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let b = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let c = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let rho: f64 = rng.random_range(0.01..0.99);
            let lhs = (&a - &b).norm_squared();
            let rhs = (1.0 - rho) * (&c - &b).norm_squared()
                + (1.0 - 1.0 / rho) * (&a - &c).norm_squared();
            assert!(lhs >= rhs - 1e-12);
        }
    }
}
