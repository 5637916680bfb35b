//! Constrained linear-regression saddle instances.
//!
//! The primal regression loss is reformulated through the conjugate of the
//! quadratic into a bilinear saddle problem with joint linear constraints:
//!
//! ```text
//! min_x max_y (1/m)[ -1/2 ||y||^2 - b'y + (1/N) sum_i y'K_i x ] + (lam/2)||x||^2
//! s.t.  A x + B y + c = 0,
//! ```
//!
//! mapped onto components g_i = (lam/2)||x||^2, h_i = (1/m)(1/2||y||^2 + b'y),
//! f_i = (1/m) y'K_i x, with phi = psi = 0. All conjugate oracles are scaled
//! identity solves.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::problem::{Coupling, ProblemSpec, QuadraticComponent, SymOp};
use crate::prox::Regularizer;

/// Draws a regression instance: K_i, A, B Gaussian(0, sigma), c = 0,
/// b = 0, lam = 1/m.
pub fn gen_regression(
    n: usize,
    m_dim: usize,
    p_rows: usize,
    n_comp: usize,
    sigma: f64,
    seed: u64,
) -> ProblemSpec {
    assert!(n >= 1 && m_dim >= 1 && p_rows >= 1 && n_comp >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda_reg = 1.0 / m_dim as f64;
    let inv_m = 1.0 / m_dim as f64;
    let mut comps = Vec::with_capacity(n_comp);
    let mut l_f: f64 = 0.0;
    for _ in 0..n_comp {
        let k = DMatrix::from_fn(m_dim, n, |_, _| {
            sigma * rng.sample::<f64, _>(StandardNormal)
        });
        // f_i = (1/m) y'K x = x'(K'/m) y.
        let r = k.transpose() * inv_m;
        l_f = l_f.max(r.clone().svd(false, false).singular_values.max());
        comps.push(QuadraticComponent {
            p: SymOp::scaled(n, lambda_reg),
            p_lin: DVector::zeros(n),
            q: SymOp::scaled(m_dim, inv_m),
            q_lin: DVector::zeros(m_dim),
            r: Coupling::Dense(r),
        });
    }
    let a = DMatrix::from_fn(p_rows, n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(p_rows, m_dim, |_, _| {
        sigma * rng.sample::<f64, _>(StandardNormal)
    });
    let c = DVector::zeros(p_rows);
    ProblemSpec::new(
        n,
        m_dim,
        p_rows,
        comps,
        Regularizer::Zero,
        Regularizer::Zero,
        a,
        b,
        c,
        lambda_reg,
        inv_m,
        lambda_reg,
        inv_m,
        l_f,
    )
    .expect("regression instance construction")
}
