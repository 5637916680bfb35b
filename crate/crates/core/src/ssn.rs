//! Globalized semismooth Newton solver for the conjugate-space subproblems.
//!
//! Each inner iteration of the driver produces, per block, a nonsmooth system
//! F(xi) = 0 over the stacked conjugate variables xi = (xi_1, ..., xi_b):
//!
//! ```text
//! F_i(xi) = conj_grad_{k(i)}(xi_i) - prox_{alpha reg}(u),
//! u = anchor - drift - (alpha/b) sum_j xi_j.
//! ```
//!
//! F is the gradient of a strongly convex merit function I, so a damped
//! Newton direction with Armijo backtracking converges globally and
//! q-superlinearly. The Newton matrix W = H + (alpha b) A U A' is applied
//! matrix-free: materializing the cross-block coupling would be dense in
//! (b * dim)^2.

use nalgebra::DVector;
use thiserror::Error;

use crate::problem::{BlockId, ConjJacobian, ProblemSpec};
use crate::prox::ProxJacobian;
use crate::sampling::BatchSample;

#[derive(Debug, Error)]
pub enum SsnError {
    #[error("conjugate domain violation in block {block_index}")]
    DomainViolation { block_index: usize },
    #[error("CG stalled: {iters} iterations, residual {residual:.3e} > tol {tol:.3e}")]
    CgStall {
        iters: usize,
        residual: f64,
        tol: f64,
    },
    #[error("NaN encountered in Newton matvec")]
    NonFinite,
    #[error("line search failed after {tried} backtracks (directional derivative {slope:.3e})")]
    LineSearchFailed { tried: usize, slope: f64 },
    #[error("Newton did not converge in {max_iters} iterations (final residual {final_residual:.3e})")]
    MaxIterations {
        max_iters: usize,
        final_residual: f64,
        report: NewtonReport,
    },
}

/// Line-search and damping parameters of the Newton solver.
#[derive(Debug, Clone, Copy)]
pub struct NewtonParams {
    /// Armijo slope fraction, in (0, 0.5).
    pub gamma_hat: f64,
    /// Backtracking factor rho, in (0, 1).
    pub backtrack: f64,
    /// CG tolerance exponent tau, in (0, 1].
    pub tau: f64,
    /// Damping schedule factor tau_1, in (0, 1).
    pub tau1: f64,
    /// Damping schedule cap tau_2, in (0, 1).
    pub tau2: f64,
    /// Damping floor eta (>= 0); eta_j = max(eta, tau1 * min(tau2, ||F_j||)).
    pub eta_floor: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
    /// Record the iterate path in the report (diagnostics; off by default).
    pub record_path: bool,
}

impl NewtonParams {
    /// Configuration used by the network experiment.
    pub fn network() -> Self {
        NewtonParams {
            gamma_hat: 0.4,
            backtrack: 0.99,
            tau: 0.1,
            tau1: 0.01,
            tau2: 1e-6,
            eta_floor: 1e-7,
            max_iters: 100,
            max_backtracks: 200,
            record_path: false,
        }
    }

    /// Configuration used by the regression experiment.
    pub fn regression() -> Self {
        NewtonParams {
            backtrack: 0.9,
            ..NewtonParams::network()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma_hat > 0.0 && self.gamma_hat < 0.5) {
            return Err(format!("gamma_hat must lie in (0, 0.5), got {}", self.gamma_hat));
        }
        for (name, v) in [
            ("backtrack", self.backtrack),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.eta_floor < 0.0 {
            return Err(format!("eta_floor must be >= 0, got {}", self.eta_floor));
        }
        Ok(())
    }
}

impl Default for NewtonParams {
    fn default() -> Self {
        NewtonParams::network()
    }
}

/// One conjugate-space Newton subproblem, frozen at a driver step.
pub struct SubproblemSpec<'a> {
    pub problem: &'a ProblemSpec,
    pub block: BlockId,
    /// Base point of the implicit step (x^k or y^k).
    pub anchor: DVector<f64>,
    /// Frozen other-block point (y^{k+1} for X, x^k for Y).
    pub other: DVector<f64>,
    pub alpha: f64,
    pub batch: BatchSample,
    /// Drift vector v_hat for this block.
    pub drift: DVector<f64>,
    /// Termination tolerance on ||F||.
    pub eps_sub: f64,
    pub params: NewtonParams,
}

impl<'a> SubproblemSpec<'a> {
    pub fn block_dim(&self) -> usize {
        self.problem.block_dim(self.block)
    }

    pub fn batch_size(&self) -> usize {
        self.batch.len()
    }

    fn regularizer(&self) -> &crate::prox::Regularizer {
        self.problem.regularizer(self.block)
    }

    fn conj_grad(&self, idx: usize, xi_i: &DVector<f64>) -> DVector<f64> {
        let comp = &self.problem.components[self.batch.indices[idx]];
        match self.block {
            BlockId::X => comp.conj_grad_x(xi_i, &self.other),
            BlockId::Y => comp.conj_grad_y(xi_i, &self.other),
        }
    }

    fn conj_jac(&self, idx: usize, xi_i: &DVector<f64>) -> ConjJacobian {
        let comp = &self.problem.components[self.batch.indices[idx]];
        match self.block {
            BlockId::X => comp.conj_jac_x(xi_i, &self.other),
            BlockId::Y => comp.conj_jac_y(xi_i, &self.other),
        }
    }

    fn conj_val(&self, idx: usize, xi_i: &DVector<f64>) -> f64 {
        let comp = &self.problem.components[self.batch.indices[idx]];
        match self.block {
            BlockId::X => comp.conj_val_x(xi_i, &self.other),
            BlockId::Y => comp.conj_val_y(xi_i, &self.other),
        }
    }

    /// Conjugate strong-convexity modulus for this block.
    pub fn mu_star(&self) -> f64 {
        match self.block {
            BlockId::X => self.problem.mu_star_x(),
            BlockId::Y => self.problem.mu_star_y(),
        }
    }

    /// Forward-gradient initialization: xi^0_i = grad phi_{k(i)}(anchor).
    /// Lies in the conjugate domain by construction.
    pub fn default_init(&self) -> XiVector {
        let d = self.block_dim();
        let b = self.batch_size();
        let mut data = DVector::zeros(b * d);
        for i in 0..b {
            let comp = &self.problem.components[self.batch.indices[i]];
            let g = match self.block {
                BlockId::X => comp.grad_phi_x(&self.anchor, &self.other),
                BlockId::Y => comp.grad_phi_y(&self.anchor, &self.other),
            };
            data.rows_mut(i * d, d).copy_from(&g);
        }
        XiVector {
            data,
            block_dim: d,
        }
    }
}

/// Stacked conjugate variable: b blocks of the ambient block dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct XiVector {
    pub data: DVector<f64>,
    pub block_dim: usize,
}

impl XiVector {
    pub fn from_blocks(blocks: &[DVector<f64>]) -> Self {
        let d = blocks[0].len();
        let mut data = DVector::zeros(d * blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            data.rows_mut(i * d, d).copy_from(b);
        }
        XiVector {
            data,
            block_dim: d,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.data.len() / self.block_dim
    }

    pub fn block(&self, i: usize) -> DVector<f64> {
        DVector::from(self.data.rows(i * self.block_dim, self.block_dim).clone_owned())
    }

    /// Sum of blocks.
    pub fn block_sum(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.block_dim);
        for i in 0..self.n_blocks() {
            acc += self.data.rows(i * self.block_dim, self.block_dim);
        }
        acc
    }
}

/// Shared prox argument u = anchor - drift - (alpha/b) sum_j xi_j.
pub fn prox_argument(spec: &SubproblemSpec, xi: &XiVector) -> DVector<f64> {
    let b = spec.batch_size() as f64;
    &spec.anchor - &spec.drift - xi.block_sum() * (spec.alpha / b)
}

/// Residual map F(xi); component i is conj_grad(xi_i) - prox(u).
pub fn residual(spec: &SubproblemSpec, xi: &XiVector) -> Result<DVector<f64>, SsnError> {
    let d = spec.block_dim();
    let b = spec.batch_size();
    let u = prox_argument(spec, xi);
    let pu = spec.regularizer().prox(spec.alpha, &u);
    let mut out = DVector::zeros(b * d);
    for i in 0..b {
        let xi_i = xi.block(i);
        let cg = spec.conj_grad(i, &xi_i);
        if !cg.iter().all(|v| v.is_finite()) {
            return Err(SsnError::DomainViolation { block_index: i });
        }
        out.rows_mut(i * d, d).copy_from(&(cg - &pu));
    }
    Ok(out)
}

/// Merit function I(xi) whose gradient is F:
///
/// ```text
/// I = sum_i (phi_{k(i)})*(xi_i) + (b / 2 alpha) ||z||^2 - b env_{reg, alpha}(z)
/// ```
///
/// with z the shared prox argument. The conjugate values come from the
/// inversion identity, (phi)*(xi) = <x_hat, xi> - phi(x_hat).
pub fn objective(spec: &SubproblemSpec, xi: &XiVector) -> Result<f64, SsnError> {
    let b = spec.batch_size();
    let z = prox_argument(spec, xi);
    let mut val = 0.0;
    for i in 0..b {
        let xi_i = xi.block(i);
        let v = spec.conj_val(i, &xi_i);
        if !v.is_finite() {
            return Err(SsnError::DomainViolation { block_index: i });
        }
        val += v;
    }
    let bf = b as f64;
    val += bf / (2.0 * spec.alpha) * z.norm_squared();
    val -= bf * spec.regularizer().moreau_envelope(spec.alpha, &z);
    Ok(val)
}

/// Matrix-free element of the surrogate differential at xi:
/// (W d)_i = H_i d_i + (alpha/b) U (sum_j d_j).
pub struct WOperator {
    h_blocks: Vec<ConjJacobian>,
    u_jac: ProxJacobian,
    alpha_over_b: f64,
    block_dim: usize,
}

impl WOperator {
    pub fn dim(&self) -> usize {
        self.block_dim * self.h_blocks.len()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let d = self.block_dim;
        let b = self.h_blocks.len();
        let mut sum = DVector::zeros(d);
        for i in 0..b {
            sum += v.rows(i * d, d);
        }
        let coupled = self.u_jac.apply(&sum) * self.alpha_over_b;
        let mut out = DVector::zeros(b * d);
        for i in 0..b {
            let vi = DVector::from(v.rows(i * d, d).clone_owned());
            let hi = self.h_blocks[i].apply(&vi);
            out.rows_mut(i * d, d).copy_from(&(hi + &coupled));
        }
        out
    }
}

/// Builds the Newton operator at xi.
pub fn jacobian(spec: &SubproblemSpec, xi: &XiVector) -> WOperator {
    let b = spec.batch_size();
    let u = prox_argument(spec, xi);
    let u_jac = spec.regularizer().prox_jacobian(spec.alpha, &u);
    let h_blocks = (0..b).map(|i| spec.conj_jac(i, &xi.block(i))).collect();
    WOperator {
        h_blocks,
        u_jac,
        alpha_over_b: spec.alpha / b as f64,
        block_dim: spec.block_dim(),
    }
}

/// Conjugate gradient solve of (op + eta I) d = rhs to absolute residual
/// `tol`. The iteration cap is 10x the system dimension; exceeding it is an
/// error.
pub fn cg_solve<F>(
    op: F,
    dim: usize,
    eta: f64,
    rhs: &DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, usize), SsnError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    assert!(eta >= 0.0, "damping must be nonnegative");
    let cap = 10 * dim;
    let mut d = DVector::zeros(dim);
    if rhs.norm() <= tol {
        return Ok((d, 0));
    }
    let apply = |v: &DVector<f64>| -> Result<DVector<f64>, SsnError> {
        let out = op(v) + v * eta;
        if !out.iter().all(|x| x.is_finite()) {
            return Err(SsnError::NonFinite);
        }
        Ok(out)
    };
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut iters = 0;
    loop {
        if iters >= cap {
            return Err(SsnError::CgStall {
                iters,
                residual: rs.sqrt(),
                tol,
            });
        }
        let ap = apply(&p)?;
        let denom = p.dot(&ap);
        if denom <= 0.0 {
            // Numerically lost positive definiteness; bail with the residual.
            return Err(SsnError::CgStall {
                iters,
                residual: rs.sqrt(),
                tol,
            });
        }
        let alpha = rs / denom;
        d += &p * alpha;
        r -= ap * alpha;
        iters += 1;
        let rs_new = r.norm_squared();
        if rs_new.sqrt() <= tol {
            // Confirm with the true residual before accepting.
            let true_r = rhs - apply(&d)?;
            let tn = true_r.norm();
            if tn <= tol {
                return Ok((d, iters));
            }
            r = true_r;
            rs = r.norm_squared();
            p = r.clone();
            continue;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        p = &r + &p * beta;
    }
}

/// Armijo backtracking along d from xi. Returns (step, accepted point, ell).
pub fn armijo_search(
    spec: &SubproblemSpec,
    xi: &XiVector,
    d: &DVector<f64>,
    f_xi: &DVector<f64>,
) -> Result<(f64, XiVector, usize), SsnError> {
    let slope = f_xi.dot(d);
    if slope >= 0.0 {
        return Err(SsnError::LineSearchFailed { tried: 0, slope });
    }
    let i0 = objective(spec, xi)?;
    let rho = spec.params.backtrack;
    let gamma = spec.params.gamma_hat;
    // Once the predicted decrease falls below round-off in I, the inequality
    // cannot be evaluated reliably; the guard keeps the final Newton steps
    // from stalling on noise.
    let machine_slack = f64::EPSILON * (1.0 + i0.abs());
    let mut step = 1.0;
    for ell in 0..=spec.params.max_backtracks {
        let cand = XiVector {
            data: &xi.data + d * step,
            block_dim: xi.block_dim,
        };
        // A candidate outside the conjugate domain fails the evaluation and
        // backtracks further in.
        match objective(spec, &cand) {
            Ok(val) if val <= i0 + gamma * step * slope + machine_slack => {
                return Ok((step, cand, ell));
            }
            Ok(_) | Err(SsnError::DomainViolation { .. }) => {}
            Err(e) => return Err(e),
        }
        step *= rho;
    }
    Err(SsnError::LineSearchFailed {
        tried: spec.params.max_backtracks,
        slope,
    })
}

/// Per-iteration record of the Newton run.
#[derive(Debug, Clone)]
pub struct NewtonRow {
    pub iter: usize,
    pub f_norm: f64,
    pub step: f64,
    pub cg_iters: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct NewtonReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub rows: Vec<NewtonRow>,
    /// Iterate path (initial point first) when `record_path` is set.
    pub path: Vec<DVector<f64>>,
}

/// Runs Algorithm-2-style damped semismooth Newton until ||F|| <= eps_sub.
pub fn solve_subproblem(
    spec: &SubproblemSpec,
    warm_start: Option<XiVector>,
) -> Result<(XiVector, NewtonReport), SsnError> {
    debug_assert!(spec.params.validate().is_ok(), "invalid Newton parameters");
    assert!(spec.alpha > 0.0 && spec.eps_sub > 0.0);
    let mut xi = warm_start.unwrap_or_else(|| spec.default_init());
    let mut report = NewtonReport::default();
    if spec.params.record_path {
        report.path.push(xi.data.clone());
    }
    let mut f = residual(spec, &xi)?;
    let mut f_norm = f.norm();
    let mut j = 0;
    while f_norm > spec.eps_sub {
        if j >= spec.params.max_iters {
            report.iterations = j;
            report.final_residual = f_norm;
            report.converged = false;
            return Err(SsnError::MaxIterations {
                max_iters: spec.params.max_iters,
                final_residual: f_norm,
                report,
            });
        }
        let eta = spec
            .params
            .eta_floor
            .max(spec.params.tau1 * spec.params.tau2.min(f_norm));
        let cg_tol = eta.min(f_norm.powf(1.0 + spec.params.tau));
        let w = jacobian(spec, &xi);
        let rhs = -&f;
        let (d, cg_iters) = cg_solve(|v| w.apply(v), w.dim(), eta, &rhs, cg_tol)?;
        let (step, next, _ell) = armijo_search(spec, &xi, &d, &f)?;
        xi = next;
        if spec.params.record_path {
            report.path.push(xi.data.clone());
        }
        f = residual(spec, &xi)?;
        f_norm = f.norm();
        j += 1;
        report.rows.push(NewtonRow {
            iter: j,
            f_norm,
            step,
            cg_iters,
            eta,
        });
    }
    report.iterations = j;
    report.final_residual = f_norm;
    report.converged = true;
    Ok((xi, report))
}

/// Maps the subproblem solution back to the primal update,
/// prox_{alpha reg}(anchor - drift - (alpha/b) sum xi_i).
pub fn recover_primal(spec: &SubproblemSpec, xi: &XiVector) -> DVector<f64> {
    let u = prox_argument(spec, xi);
    spec.regularizer().prox(spec.alpha, &u)
}

/// Propagated primal error bound alpha * eps / (mu_star * b).
pub fn inexactness_bound(eps_sub: f64, alpha: f64, b: usize, mu_star: f64) -> f64 {
    alpha * eps_sub / (mu_star * b as f64)
}
