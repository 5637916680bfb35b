//! Constrained minimax problem definition and component oracles.
//!
//! A problem is
//!
//! ```text
//! min_x max_y  phi(x) + g(x) + f(x,y) - h(y) - psi(y)
//! subject to   A x + B y + c = 0,
//! ```
//!
//! where g, h, f are averages of N component functions. The shipped catalog
//! is quadratic-bilinear:
//!
//! ```text
//! g_i(x) = 1/2 x'P_i x + p_i'x,   h_i(y) = 1/2 y'Q_i y + q_i'y,
//! f_i(x,y) = x'R_i y,
//! ```
//!
//! which keeps every conjugate-gradient oracle a structured linear solve.
//!
//! Sign convention: the multiplier enters the x-block as `+A'lambda`, the
//! y-block as `-B'lambda`, and the dual step ascends the constraint
//! violation. A KKT point solves
//!
//! ```text
//! grad g + grad_x f + A'lambda in -d phi(x),
//! grad h - grad_y f + B'lambda in -d psi(y),
//! A x + B y + c = 0.
//! ```

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::prox::Regularizer;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem data: {0}")]
    Invalid(String),
    #[error("singular KKT system: {0}")]
    SingularKkt(String),
    #[error("unsupported problem for this operation: {0}")]
    Unsupported(String),
}

/// Symmetric positive definite operator in structured form.
#[derive(Debug, Clone)]
pub enum SymOp {
    /// c * I on `dim` coordinates.
    Scaled { dim: usize, c: f64 },
    /// Diagonal with the given positive entries.
    Diag(DVector<f64>),
    /// Dense SPD matrix with a cached Cholesky factor.
    Dense {
        mat: DMatrix<f64>,
        chol: Arc<nalgebra::Cholesky<f64, Dyn>>,
    },
}

impl SymOp {
    pub fn scaled(dim: usize, c: f64) -> Self {
        SymOp::Scaled { dim, c }
    }

    pub fn dense(mat: DMatrix<f64>) -> Result<Self, ProblemError> {
        let chol = nalgebra::Cholesky::new(mat.clone())
            .ok_or_else(|| ProblemError::Invalid("dense component block not SPD".into()))?;
        Ok(SymOp::Dense {
            mat,
            chol: Arc::new(chol),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            SymOp::Scaled { dim, .. } => *dim,
            SymOp::Diag(d) => d.len(),
            SymOp::Dense { mat, .. } => mat.nrows(),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymOp::Scaled { c, .. } => v * *c,
            SymOp::Diag(d) => d.component_mul(v),
            SymOp::Dense { mat, .. } => mat * v,
        }
    }

    /// Solves M z = v.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymOp::Scaled { c, .. } => v / *c,
            SymOp::Diag(d) => v.component_div(d),
            SymOp::Dense { chol, .. } => chol.solve(v),
        }
    }

    /// Quadratic form 1/2 v'Mv.
    pub fn quad(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&self.apply(v))
    }

    pub fn min_eig(&self) -> f64 {
        match self {
            SymOp::Scaled { c, .. } => *c,
            SymOp::Diag(d) => d.min(),
            SymOp::Dense { mat, .. } => mat.clone().symmetric_eigen().eigenvalues.min(),
        }
    }

    pub fn max_eig(&self) -> f64 {
        match self {
            SymOp::Scaled { c, .. } => *c,
            SymOp::Diag(d) => d.max(),
            SymOp::Dense { mat, .. } => mat.clone().symmetric_eigen().eigenvalues.max(),
        }
    }

    /// The inverse as a conjugate-Jacobian operator.
    pub fn inverse_op(&self) -> ConjJacobian {
        match self {
            SymOp::Scaled { dim, c } => ConjJacobian::Scaled {
                dim: *dim,
                c: 1.0 / c,
            },
            SymOp::Diag(d) => ConjJacobian::Diag(d.map(|x| 1.0 / x)),
            SymOp::Dense { chol, .. } => ConjJacobian::CholSolve(chol.clone()),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymOp::Scaled { dim, c } => DMatrix::identity(*dim, *dim) * *c,
            SymOp::Diag(d) => DMatrix::from_diagonal(d),
            SymOp::Dense { mat, .. } => mat.clone(),
        }
    }
}

/// Bilinear coupling operator R in f(x,y) = x'Ry.
#[derive(Debug, Clone)]
pub enum Coupling {
    Zero { n: usize, m: usize },
    Dense(DMatrix<f64>),
    /// First `w.len()` rows carry diag(w), remaining x-rows are zero.
    /// Used by the flow experiment where the min block is (x, z).
    DiagFirstRows { w: DVector<f64>, n: usize },
}

impl Coupling {
    pub fn nrows(&self) -> usize {
        match self {
            Coupling::Zero { n, .. } => *n,
            Coupling::Dense(r) => r.nrows(),
            Coupling::DiagFirstRows { n, .. } => *n,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Coupling::Zero { m, .. } => *m,
            Coupling::Dense(r) => r.ncols(),
            Coupling::DiagFirstRows { w, .. } => w.len(),
        }
    }

    /// R y (the x-gradient of f).
    pub fn apply_y(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Coupling::Zero { n, .. } => DVector::zeros(*n),
            Coupling::Dense(r) => r * y,
            Coupling::DiagFirstRows { w, n } => {
                let mut out = DVector::zeros(*n);
                for i in 0..w.len() {
                    out[i] = w[i] * y[i];
                }
                out
            }
        }
    }

    /// R'x (the y-gradient of f).
    pub fn apply_tx(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Coupling::Zero { m, .. } => DVector::zeros(*m),
            Coupling::Dense(r) => r.transpose() * x,
            Coupling::DiagFirstRows { w, .. } => {
                DVector::from_fn(w.len(), |i, _| w[i] * x[i])
            }
        }
    }

    pub fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&self.apply_y(y))
    }

    /// Spectral norm; exact for the structured variants, SVD for dense.
    pub fn spectral_norm(&self) -> f64 {
        match self {
            Coupling::Zero { .. } => 0.0,
            Coupling::DiagFirstRows { w, .. } => w.abs().max(),
            Coupling::Dense(r) => r.clone().svd(false, false).singular_values.max(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Coupling::Zero { n, m } => DMatrix::zeros(*n, *m),
            Coupling::Dense(r) => r.clone(),
            Coupling::DiagFirstRows { w, n } => {
                let mut out = DMatrix::zeros(*n, w.len());
                for i in 0..w.len() {
                    out[(i, i)] = w[i];
                }
                out
            }
        }
    }
}

/// Element of the generalized Jacobian of a conjugate gradient map.
///
/// Symmetric positive definite; for the shipped catalog it is the inverse of
/// the component Hessian block.
#[derive(Debug, Clone)]
pub enum ConjJacobian {
    Scaled { dim: usize, c: f64 },
    Diag(DVector<f64>),
    CholSolve(Arc<nalgebra::Cholesky<f64, Dyn>>),
}

impl ConjJacobian {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ConjJacobian::Scaled { c, .. } => v * *c,
            ConjJacobian::Diag(d) => d.component_mul(v),
            ConjJacobian::CholSolve(chol) => chol.solve(v),
        }
    }
}

/// One quadratic-bilinear component of the finite sum.
#[derive(Debug, Clone)]
pub struct QuadraticComponent {
    /// Hessian of g_i.
    pub p: SymOp,
    /// Linear part of g_i.
    pub p_lin: DVector<f64>,
    /// Hessian of h_i.
    pub q: SymOp,
    /// Linear part of h_i.
    pub q_lin: DVector<f64>,
    /// Bilinear coupling of f_i.
    pub r: Coupling,
}

impl QuadraticComponent {
    pub fn g_val(&self, x: &DVector<f64>) -> f64 {
        self.p.quad(x) + self.p_lin.dot(x)
    }

    pub fn grad_g(&self, x: &DVector<f64>) -> DVector<f64> {
        self.p.apply(x) + &self.p_lin
    }

    pub fn h_val(&self, y: &DVector<f64>) -> f64 {
        self.q.quad(y) + self.q_lin.dot(y)
    }

    pub fn grad_h(&self, y: &DVector<f64>) -> DVector<f64> {
        self.q.apply(y) + &self.q_lin
    }

    pub fn f_val(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.r.bilinear(x, y)
    }

    pub fn grad_f_x(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.r.apply_y(y)
    }

    pub fn grad_f_y(&self, x: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        self.r.apply_tx(x)
    }

    /// Gradient of the x-block component map at x with y frozen:
    /// grad g_i(x) + grad_x f_i(x, y).
    pub fn grad_phi_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.grad_g(x) + self.grad_f_x(x, y)
    }

    /// Gradient of the y-block component map at y with x frozen:
    /// grad h_i(y) - grad_y f_i(x, y).
    pub fn grad_phi_y(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.grad_h(y) - self.grad_f_y(x, y)
    }

    /// Inverts the x-block gradient map: the unique x with
    /// grad g_i(x) + grad_x f_i(x,y) = xi.
    pub fn conj_grad_x(&self, xi: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.p.solve(&(xi - &self.p_lin - self.r.apply_y(y)))
    }

    /// Inverts the y-block gradient map: the unique y with
    /// grad h_i(y) - grad_y f_i(x,y) = xi.
    pub fn conj_grad_y(&self, xi: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.q.solve(&(xi - &self.q_lin + self.r.apply_tx(x)))
    }

    /// Element of the generalized Jacobian of the x-block conjugate map.
    pub fn conj_jac_x(&self, _xi: &DVector<f64>, _y: &DVector<f64>) -> ConjJacobian {
        self.p.inverse_op()
    }

    /// Element of the generalized Jacobian of the y-block conjugate map.
    pub fn conj_jac_y(&self, _xi: &DVector<f64>, _x: &DVector<f64>) -> ConjJacobian {
        self.q.inverse_op()
    }

    /// Conjugate function value (phi^x_{y,i})*(xi) = <x_hat, xi> - g_i(x_hat) - f_i(x_hat, y).
    pub fn conj_val_x(&self, xi: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let xh = self.conj_grad_x(xi, y);
        xh.dot(xi) - self.g_val(&xh) - self.f_val(&xh, y)
    }

    /// Conjugate function value (phi^y_{x,i})*(xi) = <y_hat, xi> - h_i(y_hat) + f_i(x, y_hat).
    pub fn conj_val_y(&self, xi: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let yh = self.conj_grad_y(xi, x);
        yh.dot(xi) - self.h_val(&yh) + self.f_val(x, &yh)
    }
}

/// Which primal block an operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockId {
    X,
    Y,
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockId::X => write!(f, "x"),
            BlockId::Y => write!(f, "y"),
        }
    }
}

/// Finite-sum linearly constrained minimax problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub n: usize,
    pub m_dim: usize,
    pub q_dim: usize,
    pub components: Vec<QuadraticComponent>,
    pub phi: Regularizer,
    pub psi: Regularizer,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Strong convexity modulus of x -> g(x) + f(x,y) (instance level).
    pub mu_x: f64,
    /// Strong concavity modulus of y -> -h(y) + f(x,y) (instance level).
    pub mu_y: f64,
    pub l_g_bar: f64,
    pub l_h_bar: f64,
    pub l_f_bar: f64,
    mu_star_x: Option<f64>,
    mu_star_y: Option<f64>,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        m_dim: usize,
        q_dim: usize,
        components: Vec<QuadraticComponent>,
        phi: Regularizer,
        psi: Regularizer,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        mu_x: f64,
        mu_y: f64,
        l_g_bar: f64,
        l_h_bar: f64,
        l_f_bar: f64,
    ) -> Result<Self, ProblemError> {
        if components.is_empty() {
            return Err(ProblemError::Invalid("component count N must be >= 1".into()));
        }
        if a.nrows() != q_dim || a.ncols() != n {
            return Err(ProblemError::Invalid(format!(
                "A is {}x{}, expected {q_dim}x{n}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != q_dim || b.ncols() != m_dim {
            return Err(ProblemError::Invalid(format!(
                "B is {}x{}, expected {q_dim}x{m_dim}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.len() != q_dim {
            return Err(ProblemError::Invalid(format!(
                "c has length {}, expected {q_dim}",
                c.len()
            )));
        }
        for (i, comp) in components.iter().enumerate() {
            if comp.p.dim() != n
                || comp.p_lin.len() != n
                || comp.q.dim() != m_dim
                || comp.q_lin.len() != m_dim
                || comp.r.nrows() != n
                || comp.r.ncols() != m_dim
            {
                return Err(ProblemError::Invalid(format!(
                    "component {i} dimensions inconsistent with (n={n}, m={m_dim})"
                )));
            }
        }
        phi.validate(n).map_err(ProblemError::Invalid)?;
        psi.validate(m_dim).map_err(ProblemError::Invalid)?;
        if !(mu_x > 0.0 && mu_y > 0.0) {
            return Err(ProblemError::Invalid(format!(
                "strong convexity moduli must be positive (mu_x={mu_x}, mu_y={mu_y})"
            )));
        }
        let spec = ProblemSpec {
            n,
            m_dim,
            q_dim,
            components,
            phi,
            psi,
            a,
            b,
            c,
            mu_x,
            mu_y,
            l_g_bar,
            l_h_bar,
            l_f_bar,
            mu_star_x: None,
            mu_star_y: None,
        };
        if spec.l_phi_x() < mu_x || spec.l_phi_y() < mu_y {
            return Err(ProblemError::Invalid(
                "smoothness constants below strong convexity moduli".into(),
            ));
        }
        Ok(spec)
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Smoothness constant of the x-block component maps, L_f + L_g.
    pub fn l_phi_x(&self) -> f64 {
        self.l_f_bar + self.l_g_bar
    }

    /// Smoothness constant of the y-block component maps, L_f + L_h.
    pub fn l_phi_y(&self) -> f64 {
        self.l_f_bar + self.l_h_bar
    }

    /// Conjugate strong convexity modulus for the x block.
    /// Defaults to 1/L_phi_x unless overridden.
    pub fn mu_star_x(&self) -> f64 {
        self.mu_star_x.unwrap_or(1.0 / self.l_phi_x())
    }

    /// Conjugate strong convexity modulus for the y block.
    pub fn mu_star_y(&self) -> f64 {
        self.mu_star_y.unwrap_or(1.0 / self.l_phi_y())
    }

    pub fn set_mu_star(&mut self, mu_star_x: Option<f64>, mu_star_y: Option<f64>) {
        self.mu_star_x = mu_star_x;
        self.mu_star_y = mu_star_y;
    }

    pub fn mu_star_overrides(&self) -> (Option<f64>, Option<f64>) {
        (self.mu_star_x, self.mu_star_y)
    }

    pub fn regularizer(&self, block: BlockId) -> &Regularizer {
        match block {
            BlockId::X => &self.phi,
            BlockId::Y => &self.psi,
        }
    }

    pub fn block_dim(&self, block: BlockId) -> usize {
        match block {
            BlockId::X => self.n,
            BlockId::Y => self.m_dim,
        }
    }

    /// Constraint residual A x + B y + c.
    pub fn constraint_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * y + &self.c
    }

    /// Lagrangian value phi + g + f - h - psi + <lambda, Ax + By + c>.
    ///
    /// Returns +infinity when x (or y) is outside dom phi (dom psi).
    pub fn lagrangian_value(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> f64 {
        assert_eq!(x.len(), self.n, "x dimension mismatch");
        assert_eq!(y.len(), self.m_dim, "y dimension mismatch");
        assert_eq!(lambda.len(), self.q_dim, "lambda dimension mismatch");
        let phi_v = self.phi.value(x);
        let psi_v = self.psi.value(y);
        if phi_v.is_infinite() || psi_v.is_infinite() {
            return f64::INFINITY;
        }
        let nn = self.n_components() as f64;
        let mut g = 0.0;
        let mut h = 0.0;
        let mut f = 0.0;
        for comp in &self.components {
            g += comp.g_val(x);
            h += comp.h_val(y);
            f += comp.f_val(x, y);
        }
        phi_v + g / nn + f / nn - h / nn - psi_v + lambda.dot(&self.constraint_residual(x, y))
    }

    /// Full-batch block gradients:
    /// gx = (1/N) sum grad g_i + grad_x f_i, gy = (1/N) sum grad h_i - grad_y f_i.
    pub fn full_gradients(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        assert_eq!(x.len(), self.n, "x dimension mismatch");
        assert_eq!(y.len(), self.m_dim, "y dimension mismatch");
        let mut gx = DVector::zeros(self.n);
        let mut gy = DVector::zeros(self.m_dim);
        // Sequential reduction in component order keeps runs bit-reproducible.
        for comp in &self.components {
            gx += comp.grad_phi_x(x, y);
            gy += comp.grad_phi_y(y, x);
        }
        let nn = self.n_components() as f64;
        (gx / nn, gy / nn)
    }

    /// Natural residual of one block at step size `alpha`.
    ///
    /// X: x - prox_{a phi}(x - a(grad g + grad_x f + A'lambda));
    /// Y: y - prox_{a psi}(y + a(grad_y f - grad h - B'lambda)).
    pub fn natural_residual(
        &self,
        block: BlockId,
        x: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
        alpha: f64,
    ) -> DVector<f64> {
        assert!(alpha > 0.0, "natural_residual requires alpha > 0");
        let (gx, gy) = self.full_gradients(x, y);
        match block {
            BlockId::X => {
                let step = x - (gx + self.a.transpose() * lambda) * alpha;
                x - self.phi.prox(alpha, &step)
            }
            BlockId::Y => {
                // gy = grad h - grad_y f, so the drift is -(gy + B'lambda).
                let step = y - (gy + self.b.transpose() * lambda) * alpha;
                y - self.psi.prox(alpha, &step)
            }
        }
    }

    /// Aggregate stationarity measure:
    /// max of the two natural residual norms (alpha = 1) and the feasibility gap.
    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let rx = self.natural_residual(BlockId::X, x, y, lambda, 1.0).norm();
        let ry = self.natural_residual(BlockId::Y, x, y, lambda, 1.0).norm();
        let rc = self.constraint_residual(x, y).norm();
        rx.max(ry).max(rc)
    }

    /// Averaged Hessian blocks of the quadratic instance.
    pub fn averaged_blocks(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let nn = self.n_components() as f64;
        let mut pb = DMatrix::zeros(self.n, self.n);
        let mut qb = DMatrix::zeros(self.m_dim, self.m_dim);
        let mut rb = DMatrix::zeros(self.n, self.m_dim);
        let mut plin = DVector::zeros(self.n);
        let mut qlin = DVector::zeros(self.m_dim);
        for comp in &self.components {
            pb += comp.p.to_dense();
            qb += comp.q.to_dense();
            rb += comp.r.to_dense();
            plin += &comp.p_lin;
            qlin += &comp.q_lin;
        }
        (pb / nn, qb / nn, rb / nn, plin / nn, qlin / nn)
    }

    /// Direct KKT reference solve for the quadratic, unregularized catalog.
    ///
    /// Assembles and solves
    ///
    /// ```text
    /// [  Pb   Rb  A' ] [x]   [-pb]
    /// [ -Rb'  Qb  B' ] [y] = [-qb]
    /// [  A    B   0  ] [l]   [-c ]
    /// ```
    ///
    /// Valid test oracle whenever phi = psi = Zero and [A B] has full row rank.
    pub fn solve_kkt_reference(&self) -> Result<SaddlePoint, ProblemError> {
        if self.phi != Regularizer::Zero || self.psi != Regularizer::Zero {
            return Err(ProblemError::Unsupported(
                "KKT reference requires phi = psi = Zero".into(),
            ));
        }
        let (pb, qb, rb, plin, qlin) = self.averaged_blocks();
        let d = self.n + self.m_dim + self.q_dim;
        let mut kkt = DMatrix::zeros(d, d);
        kkt.view_mut((0, 0), (self.n, self.n)).copy_from(&pb);
        kkt.view_mut((0, self.n), (self.n, self.m_dim)).copy_from(&rb);
        kkt.view_mut((0, self.n + self.m_dim), (self.n, self.q_dim))
            .copy_from(&self.a.transpose());
        kkt.view_mut((self.n, 0), (self.m_dim, self.n))
            .copy_from(&(-rb.transpose()));
        kkt.view_mut((self.n, self.n), (self.m_dim, self.m_dim))
            .copy_from(&qb);
        kkt.view_mut((self.n, self.n + self.m_dim), (self.m_dim, self.q_dim))
            .copy_from(&self.b.transpose());
        kkt.view_mut((self.n + self.m_dim, 0), (self.q_dim, self.n))
            .copy_from(&self.a);
        kkt.view_mut((self.n + self.m_dim, self.n), (self.q_dim, self.m_dim))
            .copy_from(&self.b);
        let mut rhs = DVector::zeros(d);
        rhs.rows_mut(0, self.n).copy_from(&(-plin));
        rhs.rows_mut(self.n, self.m_dim).copy_from(&(-qlin));
        rhs.rows_mut(self.n + self.m_dim, self.q_dim)
            .copy_from(&(-&self.c));
        let lu = kkt.lu();
        let sol = lu.solve(&rhs).ok_or_else(|| {
            ProblemError::SingularKkt(
                "LU solve failed; check that [A B] has full row rank and the Hessian blocks are SPD"
                    .into(),
            )
        })?;
        let x = DVector::from(sol.rows(0, self.n).clone_owned());
        let y = DVector::from(sol.rows(self.n, self.m_dim).clone_owned());
        let lambda = DVector::from(sol.rows(self.n + self.m_dim, self.q_dim).clone_owned());
        let res = self.kkt_residual(&x, &y, &lambda);
        if !res.is_finite() || res > 1e-8 {
            return Err(ProblemError::SingularKkt(format!(
                "reference point residual {res:.3e} exceeds tolerance; system nearly singular"
            )));
        }
        Ok(SaddlePoint {
            x,
            y,
            lambda,
            kkt_residual: res,
        })
    }
}

/// Reference saddle point produced by the direct KKT solve.
#[derive(Debug, Clone)]
pub struct SaddlePoint {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub kkt_residual: f64,
}

/// Solver state: current primal-dual point plus the SVRG reference and its
/// cached full gradients.
#[derive(Debug, Clone)]
pub struct IterateState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub x_ref: DVector<f64>,
    pub y_ref: DVector<f64>,
    pub lambda_ref: DVector<f64>,
    /// (1/N) sum grad g_i(x~) + grad_x f_i(x~, y~).
    pub grad_x_ref: DVector<f64>,
    /// -(1/N) sum grad h_i(y~) - grad_y f_i(x~, y~); the paper's cached
    /// -grad h + grad_y f term.
    pub grad_y_ref: DVector<f64>,
    token: u64,
}

impl IterateState {
    /// Builds a state whose reference is the given point, with fresh caches.
    pub fn new(p: &ProblemSpec, x: DVector<f64>, y: DVector<f64>, lambda: DVector<f64>) -> Self {
        let (gx, gy) = p.full_gradients(&x, &y);
        IterateState {
            x_ref: x.clone(),
            y_ref: y.clone(),
            lambda_ref: lambda.clone(),
            grad_x_ref: gx,
            grad_y_ref: -gy,
            x,
            y,
            lambda,
            token: 1,
        }
    }

    /// Moves the reference to the current iterate and refreshes the cached
    /// full gradients atomically.
    pub fn refresh_reference(&mut self, p: &ProblemSpec) {
        self.x_ref = self.x.clone();
        self.y_ref = self.y.clone();
        self.lambda_ref = self.lambda.clone();
        let (gx, gy) = p.full_gradients(&self.x_ref, &self.y_ref);
        self.grad_x_ref = gx;
        self.grad_y_ref = -gy;
        self.token += 1;
    }

    /// Monotone counter bumped on every reference refresh; used to detect
    /// stale gradient caches.
    pub fn reference_token(&self) -> u64 {
        self.token
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite())
            && self.y.iter().all(|v| v.is_finite())
            && self.lambda.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    /// Single component g = 1/2 x'Px + p'x etc. with dense blocks.
    fn dense_component(
        p: DMatrix<f64>,
        p_lin: DVector<f64>,
        q: DMatrix<f64>,
        q_lin: DVector<f64>,
        r: DMatrix<f64>,
    ) -> QuadraticComponent {
        QuadraticComponent {
            p: SymOp::dense(p).unwrap(),
            p_lin,
            q: SymOp::dense(q).unwrap(),
            q_lin,
            r: Coupling::Dense(r),
        }
    }

    fn one_dim_spec() -> ProblemSpec {
        // g = x^2/2, h = y^2/2, f = 0, A = B = [1], c = [-2].
        let comp = dense_component(
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![0.0],
        );
        ProblemSpec::new(
            1,
            1,
            1,
            vec![comp],
            Regularizer::Zero,
            Regularizer::Zero,
            dmatrix![1.0],
            dmatrix![1.0],
            dvector![-2.0],
            1.0,
            1.0,
            1.0,
            1.0,
            0.0,
        )
        .unwrap()
    }

    fn random_spec(n: usize, m: usize, q: usize, n_comp: usize, seed: u64) -> ProblemSpec {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut comps = Vec::new();
        let mut l_g: f64 = 0.0;
        let mut l_h: f64 = 0.0;
        let mut l_f: f64 = 0.0;
        for _ in 0..n_comp {
            let gp = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
            let p = &gp * gp.transpose() + DMatrix::identity(n, n);
            let gq = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
            let qm = &gq * gq.transpose() + DMatrix::identity(m, m);
            let r = DMatrix::from_fn(n, m, |_, _| rng.random_range(-0.3..0.3));
            l_g = l_g.max(p.clone().symmetric_eigen().eigenvalues.max());
            l_h = l_h.max(qm.clone().symmetric_eigen().eigenvalues.max());
            l_f = l_f.max(r.clone().svd(false, false).singular_values.max());
            comps.push(dense_component(
                p,
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                qm,
                DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
                r,
            ));
        }
        let a = DMatrix::from_fn(q, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(q, m, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
        ProblemSpec::new(
            n,
            m,
            q,
            comps,
            Regularizer::Zero,
            Regularizer::Zero,
            a,
            b,
            c,
            1.0,
            1.0,
            l_g,
            l_h,
            l_f,
        )
        .unwrap()
    }

    #[test]
    fn lagrangian_all_zero_instance() {
        // All-zero point of a c=0 instance: every term vanishes.
        let mut p = one_dim_spec();
        p.c = dvector![0.0];
        let z = dvector![0.0];
        assert_eq!(p.lagrangian_value(&z, &z, &z), 0.0);
    }

    #[test]
    fn lagrangian_lambda_invariance_on_feasible_manifold() {
        let p = random_spec(3, 2, 2, 4, 5);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            // Build a feasible (x, y): pick x, solve B y = -c - A x by least squares.
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let rhs = -&p.c - &p.a * &x;
            let bt = p.b.transpose();
            let gram = &p.b * &bt;
            let y = &bt * gram.clone().lu().solve(&rhs).unwrap();
            assert!(p.constraint_residual(&x, &y).norm() < 1e-10);
            let l1 = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let l2 = &l1 * 2.0;
            let v1 = p.lagrangian_value(&x, &y, &l1);
            let v2 = p.lagrangian_value(&x, &y, &l2);
            assert!((v1 - v2).abs() <= 1e-12 * (1.0 + v1.abs()));
        }
    }

    #[test]
    fn lagrangian_matches_termwise_evaluation() {
        // Independent oracle: accumulate each term separately from raw data.
        let p = random_spec(3, 3, 2, 5, 11);
        let x = dvector![0.3, -0.7, 1.1];
        let y = dvector![0.2, 0.9, -0.4];
        let lam = dvector![1.5, -0.3];
        let nn = p.n_components() as f64;
        let mut expected = 0.0;
        for comp in &p.components {
            let pd = comp.p.to_dense();
            let qd = comp.q.to_dense();
            let rd = comp.r.to_dense();
            expected += (0.5 * (x.transpose() * &pd * &x)[(0, 0)] + comp.p_lin.dot(&x)) / nn;
            expected += (x.transpose() * &rd * &y)[(0, 0)] / nn;
            expected -= (0.5 * (y.transpose() * &qd * &y)[(0, 0)] + comp.q_lin.dot(&y)) / nn;
        }
        expected += lam.dot(&(&p.a * &x + &p.b * &y + &p.c));
        let got = p.lagrangian_value(&x, &y, &lam);
        assert!((got - expected).abs() < 1e-12 * (1.0 + expected.abs()));
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn lagrangian_dimension_mismatch_panics() {
        let p = one_dim_spec();
        p.lagrangian_value(&dvector![1.0, 2.0], &dvector![0.0], &dvector![0.0]);
    }

    #[test]
    fn lagrangian_infinite_outside_box_domain() {
        let mut p = one_dim_spec();
        p.phi = Regularizer::BoxIndicator {
            lo: vec![0.0],
            hi: vec![1.0],
        };
        let v = p.lagrangian_value(&dvector![5.0], &dvector![0.0], &dvector![0.0]);
        assert!(v.is_infinite());
    }

    #[test]
    fn full_gradients_identity_hessian() {
        let p = one_dim_spec();
        let (gx, _) = p.full_gradients(&dvector![2.0], &dvector![0.0]);
        assert_eq!(gx, dvector![2.0]);
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        let p = random_spec(4, 3, 2, 6, 23);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let nn = p.n_components() as f64;
        let value_x = |x: &DVector<f64>, y: &DVector<f64>| -> f64 {
            p.components
                .iter()
                .map(|c| c.g_val(x) + c.f_val(x, y))
                .sum::<f64>()
                / nn
        };
        let value_y = |x: &DVector<f64>, y: &DVector<f64>| -> f64 {
            p.components
                .iter()
                .map(|c| c.h_val(y) - c.f_val(x, y))
                .sum::<f64>()
                / nn
        };
        for _ in 0..10 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let (gx, gy) = p.full_gradients(&x, &y);
            let hx = 1e-6 * (1.0 + x.norm());
            for j in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += hx;
                xm[j] -= hx;
                let fd = (value_x(&xp, &y) - value_x(&xm, &y)) / (2.0 * hx);
                assert!(
                    (fd - gx[j]).abs() <= 1e-6 * (1.0 + gx[j].abs()),
                    "x-grad fd mismatch: {fd} vs {}",
                    gx[j]
                );
            }
            let hy = 1e-6 * (1.0 + y.norm());
            for j in 0..3 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += hy;
                ym[j] -= hy;
                let fd = (value_y(&x, &yp) - value_y(&x, &ym)) / (2.0 * hy);
                assert!(
                    (fd - gy[j]).abs() <= 1e-6 * (1.0 + gy[j].abs()),
                    "y-grad fd mismatch: {fd} vs {}",
                    gy[j]
                );
            }
        }
    }

    #[test]
    fn kkt_reference_one_dimensional_elimination() {
        // x + l = 0, y + l = 0, x + y = 2  =>  (1, 1, -1).
        let p = one_dim_spec();
        let sp = p.solve_kkt_reference().unwrap();
        assert!((sp.x[0] - 1.0).abs() < 1e-12);
        assert!((sp.y[0] - 1.0).abs() < 1e-12);
        assert!((sp.lambda[0] + 1.0).abs() < 1e-12);
        assert!(sp.kkt_residual <= 1e-10);
    }

    #[test]
    fn kkt_reference_symmetric_origin() {
        let mut p = one_dim_spec();
        p.c = dvector![0.0];
        let sp = p.solve_kkt_reference().unwrap();
        assert!(sp.x.norm() < 1e-14 && sp.y.norm() < 1e-14 && sp.lambda.norm() < 1e-14);
    }

    #[test]
    fn kkt_reference_rejects_regularized_problem() {
        let mut p = one_dim_spec();
        p.phi = Regularizer::ScaledL1 { weight: 1.0 };
        assert!(matches!(
            p.solve_kkt_reference(),
            Err(ProblemError::Unsupported(_))
        ));
    }

    #[test]
    fn kkt_reference_names_rank_deficiency() {
        // Duplicate constraint rows: [A B] rank deficient.
        let comp = dense_component(
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![0.0],
        );
        let p = ProblemSpec::new(
            1,
            1,
            2,
            vec![comp],
            Regularizer::Zero,
            Regularizer::Zero,
            dmatrix![1.0; 1.0],
            dmatrix![1.0; 1.0],
            dvector![-2.0, -2.0],
            1.0,
            1.0,
            1.0,
            1.0,
            0.0,
        )
        .unwrap();
        match p.solve_kkt_reference() {
            Err(ProblemError::SingularKkt(msg)) => {
                assert!(msg.contains("full row rank") || msg.contains("singular"), "{msg}")
            }
            other => panic!("expected singular KKT error, got {other:?}"),
        }
    }

    #[test]
    fn natural_residual_zero_at_reference() {
        let p = random_spec(4, 3, 2, 6, 41);
        let sp = p.solve_kkt_reference().unwrap();
        let rx = p.natural_residual(BlockId::X, &sp.x, &sp.y, &sp.lambda, 1.0);
        let ry = p.natural_residual(BlockId::Y, &sp.x, &sp.y, &sp.lambda, 1.0);
        assert!(rx.norm() <= 1e-8, "{}", rx.norm());
        assert!(ry.norm() <= 1e-8, "{}", ry.norm());
        assert!(p.kkt_residual(&sp.x, &sp.y, &sp.lambda) <= 1e-8);
    }

    #[test]
    fn natural_residual_identity_quadratic() {
        // phi = 0, f = 0, g = x^2/2, lambda = 0, alpha = 1, x = 1 => residual = x.
        let mut p = one_dim_spec();
        p.c = dvector![0.0];
        let r = p.natural_residual(BlockId::X, &dvector![1.0], &dvector![0.0], &dvector![0.0], 1.0);
        assert!((r[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "alpha > 0")]
    fn natural_residual_rejects_bad_alpha() {
        let p = one_dim_spec();
        p.natural_residual(BlockId::X, &dvector![1.0], &dvector![0.0], &dvector![0.0], -1.0);
    }

    #[test]
    fn natural_residual_lipschitz_sample() {
        // ||F(x1) - F(x2)|| <= (2 + L_f + L_g) ||x1 - x2|| on random pairs.
        let p = random_spec(4, 3, 2, 6, 57);
        let lip = 2.0 + p.l_f_bar + p.l_g_bar;
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let y = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let lam = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..100 {
            let x1 = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let x2 = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let f1 = p.natural_residual(BlockId::X, &x1, &y, &lam, 1.0);
            let f2 = p.natural_residual(BlockId::X, &x2, &y, &lam, 1.0);
            assert!((&f1 - &f2).norm() <= lip * (&x1 - &x2).norm() + 1e-12);
        }
    }

    #[test]
    fn kkt_residual_cases() {
        let p = one_dim_spec();
        // x = y = 0 with c != 0: feasibility term dominates or ties.
        let z = dvector![0.0];
        assert!(p.kkt_residual(&z, &z, &z) >= p.c.norm() - 1e-15);
        // Feasible, non-stationary point: equals max of the residual norms.
        let x = dvector![2.0];
        let y = dvector![0.0];
        let lam = dvector![0.5];
        let rx = p.natural_residual(BlockId::X, &x, &y, &lam, 1.0).norm();
        let ry = p.natural_residual(BlockId::Y, &x, &y, &lam, 1.0).norm();
        assert_eq!(p.kkt_residual(&x, &y, &lam), rx.max(ry));
    }

    #[test]
    fn conjugate_inversion_identity() {
        let p = random_spec(4, 3, 2, 6, 77);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for comp in &p.components {
            for _ in 0..5 {
                let xi = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
                let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let xh = comp.conj_grad_x(&xi, &y);
                let back = comp.grad_g(&xh) + comp.grad_f_x(&xh, &y);
                assert!((back - &xi).norm() <= 1e-10 * (1.0 + xi.norm()));
                let zeta = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
                let yh = comp.conj_grad_y(&zeta, &x);
                let back = comp.grad_h(&yh) - comp.grad_f_y(&x, &yh);
                assert!((back - &zeta).norm() <= 1e-10 * (1.0 + zeta.norm()));
            }
        }
    }

    #[test]
    fn conj_jacobian_spd_with_modulus() {
        let p = random_spec(4, 3, 2, 6, 91);
        let mu_star = p.mu_star_x();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let y = DVector::zeros(3);
        for comp in &p.components {
            let jac = comp.conj_jac_x(&DVector::zeros(4), &y);
            for _ in 0..20 {
                let h = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
                let quad = h.dot(&jac.apply(&h));
                assert!(quad >= mu_star * h.norm_squared() - 1e-12);
            }
        }
    }

    #[test]
    fn strong_convexity_probe() {
        let p = random_spec(4, 3, 2, 6, 101);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let nn = p.n_components() as f64;
        for _ in 0..50 {
            let x1 = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let x2 = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let g1: DVector<f64> = p
                .components
                .iter()
                .map(|c| c.grad_phi_x(&x1, &y))
                .fold(DVector::zeros(4), |a, b| a + b)
                / nn;
            let g2: DVector<f64> = p
                .components
                .iter()
                .map(|c| c.grad_phi_x(&x2, &y))
                .fold(DVector::zeros(4), |a, b| a + b)
                / nn;
            let lhs = (g1 - g2).dot(&(&x1 - &x2));
            assert!(lhs >= p.mu_x * (&x1 - &x2).norm_squared() - 1e-10);
        }
    }

    #[test]
    fn iterate_state_cache_consistency() {
        let p = random_spec(3, 2, 1, 4, 3);
        let st = IterateState::new(
            &p,
            dvector![1.0, 2.0, -0.5],
            dvector![0.3, 0.4],
            dvector![0.0],
        );
        let (gx, gy) = p.full_gradients(&st.x_ref, &st.y_ref);
        assert_eq!(st.grad_x_ref, gx);
        assert_eq!(st.grad_y_ref, -gy);
    }
}
