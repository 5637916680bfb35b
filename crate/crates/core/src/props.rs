//! Randomized invariant suites, runnable from the CLI.
//!
//! Each suite is a pure function of (samples, seed); a failure reports the
//! per-case seed so the exact case can be replayed with `--set
//! replay_suite=<name> --set replay_case=<seed>`.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::driver::ConstraintProjector;
use crate::experiments::synthetic::gen_quadratic;
use crate::problem::BlockId;
use crate::prox::{ProxJacobian, Regularizer};
use crate::sampling::{self, BatchSample, SampleMode, SamplerConfig};
use crate::ssn::{self, SubproblemSpec, XiVector};

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub passed: bool,
    pub detail: String,
    pub failing_case: Option<u64>,
}

impl SuiteOutcome {
    fn pass(name: &'static str, cases: usize, detail: String) -> Self {
        SuiteOutcome {
            name,
            cases,
            passed: true,
            detail,
            failing_case: None,
        }
    }

    fn fail(name: &'static str, cases: usize, case: u64, detail: String) -> Self {
        SuiteOutcome {
            name,
            cases,
            passed: false,
            detail,
            failing_case: Some(case),
        }
    }
}

fn case_rng(seed: u64, case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ case.wrapping_mul(0x9e3779b97f4a7c15))
}

fn random_regularizer(rng: &mut ChaCha8Rng, dim: usize) -> Regularizer {
    match rng.random_range(0..4) {
        0 => Regularizer::Zero,
        1 => Regularizer::ScaledL1 {
            weight: rng.random_range(0.1..2.0),
        },
        2 => Regularizer::SquaredL2 {
            weight: rng.random_range(0.1..2.0),
        },
        _ => {
            let lo: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..0.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|&l| l + rng.random_range(0.1..3.0)).collect();
            Regularizer::BoxIndicator { lo, hi }
        }
    }
}

/// Prox identities: nonexpansiveness, firm nonexpansiveness, Moreau identity,
/// envelope gradient, Jacobian element bounds.
pub fn suite_prox(samples: usize, seed: u64) -> SuiteOutcome {
    const NAME: &str = "prox_identities";
    let dim = 5;
    for case in 0..samples as u64 {
        let mut rng = case_rng(seed, case);
        let reg = random_regularizer(&mut rng, dim);
        let alpha = rng.random_range(0.05..4.0);
        let a = DVector::from_fn(dim, |_, _| rng.random_range(-4.0..4.0));
        let b = DVector::from_fn(dim, |_, _| rng.random_range(-4.0..4.0));
        let pa = reg.prox(alpha, &a);
        let pb = reg.prox(alpha, &b);
        if (&pa - &pb).norm() > (&a - &b).norm() + 1e-12 {
            return SuiteOutcome::fail(NAME, samples, case, "nonexpansiveness violated".into());
        }
        let inner = (&pa - &pb).dot(&(&a - &b));
        if inner < (&pa - &pb).norm_squared() - 1e-12 {
            return SuiteOutcome::fail(NAME, samples, case, "firm nonexpansiveness violated".into());
        }
        let gap = reg.moreau_identity_gap(alpha, &a);
        if gap > 1e-12 {
            return SuiteOutcome::fail(
                NAME,
                samples,
                case,
                format!("Moreau identity residual {gap:.3e}"),
            );
        }
        // Envelope gradient vs central differences, away from kinks.
        let grad = reg.envelope_gradient(alpha, &a);
        let h = 1e-6;
        let mut fd_ok = true;
        for j in 0..dim {
            let mut up = a.clone();
            let mut dn = a.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (reg.moreau_envelope(alpha, &up) - reg.moreau_envelope(alpha, &dn)) / (2.0 * h);
            // Skip coordinates within FD reach of a kink.
            let near_kink = match &reg {
                Regularizer::ScaledL1 { weight } => (a[j].abs() - alpha * weight).abs() < 1e-4,
                Regularizer::BoxIndicator { lo, hi } => {
                    (a[j] - lo[j]).abs() < 1e-4 || (a[j] - hi[j]).abs() < 1e-4
                }
                _ => false,
            };
            if !near_kink && (fd - grad[j]).abs() > 1e-6 * (1.0 + grad[j].abs()) {
                fd_ok = false;
            }
        }
        if !fd_ok {
            return SuiteOutcome::fail(NAME, samples, case, "envelope gradient mismatch".into());
        }
        let jac = reg.prox_jacobian(alpha, &a);
        let hvec = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let jh = jac.apply(&hvec);
        if hvec.dot(&jh) < -1e-12 || jh.norm() > hvec.norm() + 1e-12 {
            return SuiteOutcome::fail(NAME, samples, case, "jacobian element out of [0,1]".into());
        }
        if let ProxJacobian::Diag(d) = &jac {
            if d.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return SuiteOutcome::fail(NAME, samples, case, "diag entry outside [0,1]".into());
            }
        }
    }
    SuiteOutcome::pass(NAME, samples, "prox identities hold".into())
}

/// Exhaustive unbiasedness on a tiny catalog: enumeration mean equals the
/// full gradient to 1e-13 for both sampling modes.
pub fn suite_unbiasedness(samples: usize, seed: u64) -> SuiteOutcome {
    const NAME: &str = "unbiasedness_enumeration";
    let cases = samples.min(20).max(1);
    for case in 0..cases as u64 {
        let mut rng = case_rng(seed, case);
        let inst = gen_quadratic(3, 2, 1, 6, rng.random::<u64>(), Default::default());
        let p = &inst.problem;
        let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let xr = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let yr = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let (gx_full, gy_full) = p.full_gradients(&x, &y);
        let (gx_ref, gy_ref) = p.full_gradients(&xr, &yr);
        for mode in [SampleMode::WithReplacement, SampleMode::WithoutReplacement] {
            for b in [1usize, 2, 3] {
                let batches = sampling::enumerate_batches(mode, 6, b);
                let mut mean_x = DVector::zeros(3);
                let mut mean_y = DVector::zeros(2);
                for batch in &batches {
                    mean_x += sampling::batch_grad_x(p, batch, &x, &y)
                        - sampling::batch_grad_x(p, batch, &xr, &yr)
                        + &gx_ref;
                    mean_y += sampling::batch_grad_y(p, batch, &y, &x)
                        - sampling::batch_grad_y(p, batch, &yr, &xr)
                        + &gy_ref;
                }
                mean_x /= batches.len() as f64;
                mean_y /= batches.len() as f64;
                if (mean_x - &gx_full).abs().max() > 1e-13
                    || (mean_y - &gy_full).abs().max() > 1e-13
                {
                    return SuiteOutcome::fail(
                        NAME,
                        cases,
                        case,
                        format!("estimator biased ({mode:?}, b={b})"),
                    );
                }
            }
        }
    }
    SuiteOutcome::pass(NAME, cases, "estimator mean equals the full gradient".into())
}

/// Finite-difference check that the subproblem merit gradient equals the
/// residual map.
pub fn suite_gradient_potential(samples: usize, seed: u64) -> SuiteOutcome {
    const NAME: &str = "gradient_potential";
    let cases = samples.min(200).max(1);
    for case in 0..cases as u64 {
        let mut rng = case_rng(seed, case);
        let inst = gen_quadratic(3, 3, 2, 5, rng.random::<u64>(), Default::default());
        let p = &inst.problem;
        let block = if rng.random::<bool>() {
            BlockId::X
        } else {
            BlockId::Y
        };
        let b = rng.random_range(1..4usize);
        let spec = SubproblemSpec {
            problem: p,
            block,
            anchor: DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
            other: DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
            alpha: rng.random_range(0.05..0.5),
            batch: BatchSample {
                indices: (0..b).map(|_| rng.random_range(0..5)).collect(),
            },
            drift: DVector::from_fn(3, |_, _| rng.random_range(-0.2..0.2)),
            eps_sub: 1e-10,
            params: Default::default(),
        };
        let dim = 3 * b;
        let xi = XiVector {
            data: DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)),
            block_dim: 3,
        };
        let f = match ssn::residual(&spec, &xi) {
            Ok(f) => f,
            Err(e) => return SuiteOutcome::fail(NAME, cases, case, e.to_string()),
        };
        let h = 1e-6;
        for j in 0..dim {
            let mut up = xi.clone();
            let mut dn = xi.clone();
            up.data[j] += h;
            dn.data[j] -= h;
            let fd = (ssn::objective(&spec, &up).unwrap() - ssn::objective(&spec, &dn).unwrap())
                / (2.0 * h);
            if (fd - f[j]).abs() > 1e-6 * (1.0 + f[j].abs()) {
                return SuiteOutcome::fail(
                    NAME,
                    cases,
                    case,
                    format!("coordinate {j}: fd {fd} vs residual {}", f[j]),
                );
            }
        }
    }
    SuiteOutcome::pass(NAME, cases, "merit gradient equals the residual map".into())
}

/// Empirical estimator variance stays below the theoretical bound.
pub fn suite_variance_bound(samples: usize, seed: u64) -> SuiteOutcome {
    const NAME: &str = "variance_bound";
    let cases = samples.min(20).max(1);
    for case in 0..cases as u64 {
        let mut rng = case_rng(seed, case);
        let inst = gen_quadratic(4, 3, 2, 12, rng.random::<u64>(), Default::default());
        let p = &inst.problem;
        let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let xr = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let yr = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        for mode in [SampleMode::WithReplacement, SampleMode::WithoutReplacement] {
            let cfg = SamplerConfig {
                mode,
                batch_size: 4,
                seed: rng.random::<u64>(),
            };
            let rep = sampling::variance_probe(p, &cfg, &x, &y, &xr, &yr, 400);
            if rep.empirical_x > rep.bound_x * (1.0 + 1e-9)
                || rep.empirical_y > rep.bound_y * (1.0 + 1e-9)
            {
                return SuiteOutcome::fail(
                    NAME,
                    cases,
                    case,
                    format!(
                        "variance bound violated ({mode:?}): {:.3e} > {:.3e}",
                        rep.empirical_x, rep.bound_x
                    ),
                );
            }
        }
    }
    SuiteOutcome::pass(NAME, cases, "estimator variance within the bound".into())
}

/// Projection onto the constraint manifold: feasibility, idempotence,
/// row-space correction.
pub fn suite_projection(samples: usize, seed: u64) -> SuiteOutcome {
    const NAME: &str = "projection";
    let cases = samples.min(200).max(1);
    for case in 0..cases as u64 {
        let mut rng = case_rng(seed, case);
        let inst = gen_quadratic(4, 3, 2, 3, rng.random::<u64>(), Default::default());
        let p = &inst.problem;
        let proj = match ConstraintProjector::new(p) {
            Ok(pr) => pr,
            Err(e) => return SuiteOutcome::fail(NAME, cases, case, e.to_string()),
        };
        let x = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
        let y = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
        let (xp, yp, zeta) = proj.project(p, &x, &y);
        if p.constraint_residual(&xp, &yp).norm() > 1e-10 {
            return SuiteOutcome::fail(NAME, cases, case, "projection not feasible".into());
        }
        let (x2, y2, _) = proj.project(p, &xp, &yp);
        if (&x2 - &xp).norm() > 1e-12 || (&y2 - &yp).norm() > 1e-12 {
            return SuiteOutcome::fail(NAME, cases, case, "projection not idempotent".into());
        }
        if ((&x - &xp) - p.a.transpose() * &zeta).norm() > 1e-12 {
            return SuiteOutcome::fail(NAME, cases, case, "correction left the row space".into());
        }
    }
    SuiteOutcome::pass(NAME, cases, "projection properties hold".into())
}

/// Three-point inequality used by the rate analysis.
pub fn suite_three_point(samples: usize, seed: u64) -> SuiteOutcome {
    const NAME: &str = "three_point_inequality";
    for case in 0..samples as u64 {
        let mut rng = case_rng(seed, case);
        let dim = rng.random_range(1..8usize);
        let a = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let b = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let c = DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0));
        let rho: f64 = rng.random_range(0.001..0.999);
        let lhs = (&a - &b).norm_squared();
        let rhs =
            (1.0 - rho) * (&c - &b).norm_squared() + (1.0 - 1.0 / rho) * (&a - &c).norm_squared();
        if lhs < rhs - 1e-12 {
            return SuiteOutcome::fail(NAME, samples, case, format!("{lhs} < {rhs}"));
        }
    }
    SuiteOutcome::pass(NAME, samples, "inequality holds".into())
}

pub const SUITE_NAMES: [&str; 6] = [
    "prox_identities",
    "unbiasedness_enumeration",
    "gradient_potential",
    "variance_bound",
    "projection",
    "three_point_inequality",
];

pub fn run_suite(name: &str, samples: usize, seed: u64) -> Option<SuiteOutcome> {
    match name {
        "prox_identities" => Some(suite_prox(samples, seed)),
        "unbiasedness_enumeration" => Some(suite_unbiasedness(samples, seed)),
        "gradient_potential" => Some(suite_gradient_potential(samples, seed)),
        "variance_bound" => Some(suite_variance_bound(samples, seed)),
        "projection" => Some(suite_projection(samples, seed)),
        "three_point_inequality" => Some(suite_three_point(samples, seed)),
        _ => None,
    }
}

/// Runs every suite; outcomes in declaration order.
pub fn run_all(samples: usize, seed: u64) -> Vec<SuiteOutcome> {
    SUITE_NAMES
        .iter()
        .map(|name| run_suite(name, samples, seed).expect("known suite"))
        .collect()
}
