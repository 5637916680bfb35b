//! Synthetic quadratic-bilinear instances with exactly known constants.
//!
//! Used by the rate-measurement command, the property suites and the test
//! oracles: every modulus and smoothness constant is computed from the drawn
//! spectra rather than estimated.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::problem::{Coupling, ProblemSpec, QuadraticComponent, SymOp};
use crate::prox::Regularizer;

/// Shape parameters of the random catalog.
#[derive(Debug, Clone, Copy)]
pub struct QuadCatalogParams {
    /// Smallest Hessian eigenvalue per component.
    pub mu: f64,
    /// Eigenvalue spread above `mu`.
    pub spread: f64,
    /// Spectral norm of each bilinear coupling block.
    pub coupling: f64,
    /// Scale of the linear terms.
    pub lin_scale: f64,
    /// Scale of the constraint offset c.
    pub c_scale: f64,
}

impl Default for QuadCatalogParams {
    fn default() -> Self {
        QuadCatalogParams {
            mu: 1.0,
            spread: 0.1,
            coupling: 0.1,
            lin_scale: 0.5,
            c_scale: 1.0,
        }
    }
}

/// Generated instance plus the exact instance-level constants.
#[derive(Debug, Clone)]
pub struct QuadInstance {
    pub problem: ProblemSpec,
}

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    g.qr().q()
}

fn random_spd(dim: usize, mu: f64, spread: f64, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, f64) {
    let u = random_orthogonal(dim, rng);
    let eigs = DVector::from_fn(dim, |_, _| mu + spread * rng.random::<f64>());
    let m = &u * DMatrix::from_diagonal(&eigs) * u.transpose();
    // Symmetrize away round-off so the Cholesky stays clean.
    let m = (&m + m.transpose()) * 0.5;
    (m, eigs.max())
}

/// Draws a quadratic-bilinear catalog with `n_comp` components.
pub fn gen_quadratic(
    n: usize,
    m_dim: usize,
    q_dim: usize,
    n_comp: usize,
    seed: u64,
    params: QuadCatalogParams,
) -> QuadInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps = Vec::with_capacity(n_comp);
    let mut l_g: f64 = 0.0;
    let mut l_h: f64 = 0.0;
    let mut l_f: f64 = 0.0;
    let mut p_sum = DMatrix::zeros(n, n);
    let mut q_sum = DMatrix::zeros(m_dim, m_dim);
    for _ in 0..n_comp {
        let (p_mat, p_max) = random_spd(n, params.mu, params.spread, &mut rng);
        let (q_mat, q_max) = random_spd(m_dim, params.mu, params.spread, &mut rng);
        let mut r = DMatrix::from_fn(n, m_dim, |_, _| rng.random_range(-1.0..1.0));
        if params.coupling > 0.0 {
            let sn = r.clone().svd(false, false).singular_values.max();
            r *= params.coupling / sn;
            l_f = l_f.max(params.coupling);
        } else {
            r *= 0.0;
        }
        l_g = l_g.max(p_max);
        l_h = l_h.max(q_max);
        p_sum += &p_mat;
        q_sum += &q_mat;
        comps.push(QuadraticComponent {
            p: SymOp::dense(p_mat).expect("SPD by construction"),
            p_lin: DVector::from_fn(n, |_, _| rng.random_range(-params.lin_scale..params.lin_scale)),
            q: SymOp::dense(q_mat).expect("SPD by construction"),
            q_lin: DVector::from_fn(m_dim, |_, _| {
                rng.random_range(-params.lin_scale..params.lin_scale)
            }),
            r: Coupling::Dense(r),
        });
    }
    // Instance-level moduli: smallest eigenvalue of the averaged Hessians.
    let mu_x = (p_sum / n_comp as f64).symmetric_eigen().eigenvalues.min();
    let mu_y = (q_sum / n_comp as f64).symmetric_eigen().eigenvalues.min();
    let a = DMatrix::from_fn(q_dim, n, |_, _| rng.random_range(-1.0..1.0)) / (n as f64).sqrt();
    let b =
        DMatrix::from_fn(q_dim, m_dim, |_, _| rng.random_range(-1.0..1.0)) / (m_dim as f64).sqrt();
    let c = DVector::from_fn(q_dim, |_, _| rng.random_range(-params.c_scale..params.c_scale));
    let problem = ProblemSpec::new(
        n,
        m_dim,
        q_dim,
        comps,
        Regularizer::Zero,
        Regularizer::Zero,
        a,
        b,
        c,
        mu_x,
        mu_y,
        l_g,
        l_h,
        l_f,
    )
    .expect("catalog construction is dimensionally consistent");
    QuadInstance { problem }
}
