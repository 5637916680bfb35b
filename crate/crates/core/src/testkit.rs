//! Independent reference computations for tests and the acceptance suite.
//!
//! Everything here deliberately avoids the solver's own code paths: the
//! subproblem oracle assembles and LU-solves the optimality system densely,
//! and the deterministic trajectory advances the implicit update by direct
//! linear solves. Test-support surface, not part of the solver API.

use nalgebra::{DMatrix, DVector};

use crate::problem::{BlockId, ProblemSpec};
use crate::prox::Regularizer;
use crate::ssn::{SubproblemSpec, XiVector};

/// Dense direct solve of a Zero-regularizer quadratic subproblem.
///
/// The optimality system per block i is
/// `M_i^{-1}(xi_i - o_i) + (alpha/b) sum_j xi_j - t = 0` with
/// `t = anchor - drift`; multiplying by `M_i` gives the linear system
/// assembled below.
pub fn solve_subproblem_dense(spec: &SubproblemSpec) -> Result<XiVector, String> {
    if *spec.problem.regularizer(spec.block) != Regularizer::Zero {
        return Err("dense subproblem oracle supports the Zero regularizer only".into());
    }
    let d = spec.block_dim();
    let b = spec.batch_size();
    let t = &spec.anchor - &spec.drift;
    let scale = spec.alpha / b as f64;
    let mut mat = DMatrix::zeros(b * d, b * d);
    let mut rhs = DVector::zeros(b * d);
    for i in 0..b {
        let comp = &spec.problem.components[spec.batch.indices[i]];
        let (m_i, o_i) = match spec.block {
            BlockId::X => (comp.p.to_dense(), &comp.p_lin + comp.r.apply_y(&spec.other)),
            BlockId::Y => (comp.q.to_dense(), &comp.q_lin - comp.r.apply_tx(&spec.other)),
        };
        for j in 0..b {
            let mut blk = mat.view_mut((i * d, j * d), (d, d));
            blk.copy_from(&(&m_i * scale));
            if i == j {
                for k in 0..d {
                    blk[(k, k)] += 1.0;
                }
            }
        }
        rhs.rows_mut(i * d, d).copy_from(&(&o_i + &m_i * &t));
    }
    let sol = mat
        .lu()
        .solve(&rhs)
        .ok_or_else(|| "singular dense subproblem system".to_string())?;
    Ok(XiVector {
        data: sol,
        block_dim: d,
    })
}

/// One exact implicit proximal-point step on a Zero-regularizer quadratic
/// instance (full batch, no variance reduction), by direct linear solves:
///
/// ```text
/// (I + a Qb) y+ = y + a (Rb'x - q_lin - B'l)
/// (I + a Pb) x+ = x - a (p_lin + Rb y+ + A'l)
/// l+ = l + a (A x+ + B y+ + c)
/// ```
pub fn deterministic_step(
    p: &ProblemSpec,
    x: &DVector<f64>,
    y: &DVector<f64>,
    lambda: &DVector<f64>,
    alpha: f64,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    assert_eq!(*p.regularizer(BlockId::X), Regularizer::Zero);
    assert_eq!(*p.regularizer(BlockId::Y), Regularizer::Zero);
    let (pb, qb, rb, plin, qlin) = p.averaged_blocks();
    let my = DMatrix::identity(p.m_dim, p.m_dim) + &qb * alpha;
    let rhs_y = y + (rb.transpose() * x - &qlin - p.b.transpose() * lambda) * alpha;
    let y_next = my.lu().solve(&rhs_y).expect("y-step system is SPD");
    let mx = DMatrix::identity(p.n, p.n) + &pb * alpha;
    let rhs_x = x - (&plin + &rb * &y_next + p.a.transpose() * lambda) * alpha;
    let x_next = mx.lu().solve(&rhs_x).expect("x-step system is SPD");
    let lambda_next = lambda + (&p.a * &x_next + &p.b * &y_next + &p.c) * alpha;
    (x_next, y_next, lambda_next)
}

/// Full deterministic implicit trajectory over `steps` iterations.
pub fn deterministic_trajectory(
    p: &ProblemSpec,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    lambda0: &DVector<f64>,
    alpha: f64,
    steps: usize,
) -> Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push((x0.clone(), y0.clone(), lambda0.clone()));
    let (mut x, mut y, mut l) = (x0.clone(), y0.clone(), lambda0.clone());
    for _ in 0..steps {
        let (xn, yn, ln) = deterministic_step(p, &x, &y, &l, alpha);
        x = xn;
        y = yn;
        l = ln;
        out.push((x.clone(), y.clone(), l.clone()));
    }
    out
}
