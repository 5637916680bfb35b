//! Proximal calculus for the regularizer catalog.
//!
//! Supplies proximal mappings, Moreau envelopes and diagonal elements of the
//! generalized Jacobian of the prox, for the four regularizer kinds used by
//! the solver. All three pieces must stay mutually consistent: the Newton
//! subsolver differentiates through the prox, and its merit function is built
//! from the envelope.

use nalgebra::DVector;

/// Closed catalog of extended-valued convex regularizers.
///
/// `BoxIndicator` bounds may be infinite (use `f64::INFINITY` /
/// `f64::NEG_INFINITY` for one-sided boxes). JSON serialization lives in the
/// instance document module, which maps infinite bounds to null.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    Zero,
    ScaledL1 {
        weight: f64,
    },
    BoxIndicator {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    SquaredL2 {
        weight: f64,
    },
}

/// Diagonal element of the generalized Jacobian of a prox map.
///
/// For the shipped catalog every element is diagonal with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub enum ProxJacobian {
    Identity,
    Scaled(f64),
    Diag(DVector<f64>),
}

impl ProxJacobian {
    /// Applies the operator to `v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ProxJacobian::Identity => v.clone(),
            ProxJacobian::Scaled(c) => v * *c,
            ProxJacobian::Diag(d) => {
                debug_assert_eq!(d.len(), v.len());
                DVector::from_fn(v.len(), |i, _| d[i] * v[i])
            }
        }
    }

    /// Diagonal entry `i`.
    pub fn diag_entry(&self, i: usize) -> f64 {
        match self {
            ProxJacobian::Identity => 1.0,
            ProxJacobian::Scaled(c) => *c,
            ProxJacobian::Diag(d) => d[i],
        }
    }
}

impl Regularizer {
    /// Checks internal consistency (weights nonnegative, lo <= hi).
    pub fn validate(&self, dim: usize) -> Result<(), String> {
        match self {
            Regularizer::Zero => Ok(()),
            Regularizer::ScaledL1 { weight } | Regularizer::SquaredL2 { weight } => {
                if *weight >= 0.0 {
                    Ok(())
                } else {
                    Err(format!("regularizer weight must be >= 0, got {weight}"))
                }
            }
            Regularizer::BoxIndicator { lo, hi } => {
                if lo.len() != dim || hi.len() != dim {
                    return Err(format!(
                        "box bounds length {}/{} does not match dimension {dim}",
                        lo.len(),
                        hi.len()
                    ));
                }
                for i in 0..dim {
                    if lo[i] > hi[i] {
                        return Err(format!("box lo[{i}]={} exceeds hi[{i}]={}", lo[i], hi[i]));
                    }
                }
                Ok(())
            }
        }
    }

    /// Function value r(v); returns `f64::INFINITY` outside the domain.
    pub fn value(&self, v: &DVector<f64>) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::ScaledL1 { weight } => weight * v.iter().map(|x| x.abs()).sum::<f64>(),
            Regularizer::SquaredL2 { weight } => 0.5 * weight * v.norm_squared(),
            Regularizer::BoxIndicator { lo, hi } => {
                // Tolerance absorbs prox round-off at active bounds.
                let tol = 1e-12;
                for i in 0..v.len() {
                    if v[i] < lo[i] - tol || v[i] > hi[i] + tol {
                        return f64::INFINITY;
                    }
                }
                0.0
            }
        }
    }

    /// prox_{alpha r}(v) = argmin_z r(z) + (1/2 alpha) ||v - z||^2.
    pub fn prox(&self, alpha: f64, v: &DVector<f64>) -> DVector<f64> {
        assert!(alpha > 0.0, "prox requires alpha > 0, got {alpha}");
        match self {
            Regularizer::Zero => v.clone(),
            Regularizer::ScaledL1 { weight } => {
                let t = alpha * weight;
                v.map(|x| {
                    if x > t {
                        x - t
                    } else if x < -t {
                        x + t
                    } else {
                        0.0
                    }
                })
            }
            Regularizer::BoxIndicator { lo, hi } => {
                DVector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i]))
            }
            Regularizer::SquaredL2 { weight } => v / (1.0 + alpha * weight),
        }
    }

    /// Moreau envelope value: r(prox) + (1/2 alpha)||v - prox||^2.
    pub fn moreau_envelope(&self, alpha: f64, v: &DVector<f64>) -> f64 {
        let p = self.prox(alpha, v);
        let r_val = match self {
            // The prox output of a box indicator is feasible by construction.
            Regularizer::BoxIndicator { .. } => 0.0,
            _ => self.value(&p),
        };
        r_val + (v - &p).norm_squared() / (2.0 * alpha)
    }

    /// Gradient of the envelope, (v - prox)/alpha.
    pub fn envelope_gradient(&self, alpha: f64, v: &DVector<f64>) -> DVector<f64> {
        (v - self.prox(alpha, v)) / alpha
    }

    /// One element of the generalized Jacobian of `prox_{alpha r}` at `v`.
    ///
    /// Ties at kink points (|v_j| = alpha*w, or v_j on a box bound) take the
    /// inactive 0 branch so runs stay deterministic.
    pub fn prox_jacobian(&self, alpha: f64, v: &DVector<f64>) -> ProxJacobian {
        assert!(alpha > 0.0, "prox_jacobian requires alpha > 0, got {alpha}");
        match self {
            Regularizer::Zero => ProxJacobian::Identity,
            Regularizer::SquaredL2 { weight } => ProxJacobian::Scaled(1.0 / (1.0 + alpha * weight)),
            Regularizer::ScaledL1 { weight } => {
                let t = alpha * weight;
                ProxJacobian::Diag(v.map(|x| if x.abs() > t { 1.0 } else { 0.0 }))
            }
            Regularizer::BoxIndicator { lo, hi } => ProxJacobian::Diag(DVector::from_fn(
                v.len(),
                |i, _| {
                    if v[i] > lo[i] && v[i] < hi[i] {
                        1.0
                    } else {
                        0.0
                    }
                },
            )),
        }
    }

    /// prox of the scaled conjugate, prox_{alpha^{-1} r*}(w).
    ///
    /// Shipped in closed form for the whole catalog; used by the Moreau
    /// identity self-test.
    pub fn conjugate_prox(&self, alpha: f64, w: &DVector<f64>) -> DVector<f64> {
        assert!(alpha > 0.0);
        let t = 1.0 / alpha;
        match self {
            // (0)* is the indicator of {0}; its prox is the zero map.
            Regularizer::Zero => DVector::zeros(w.len()),
            // (w|.|_1)* is the indicator of the box [-w, w].
            Regularizer::ScaledL1 { weight } => w.map(|x| x.clamp(-weight, *weight)),
            // (w/2 ||.||^2)* = (1/2w)||.||^2, so prox_{t r*}(w) = w / (1 + t/w_reg).
            Regularizer::SquaredL2 { weight } => {
                if *weight == 0.0 {
                    // r = 0; conjugate prox degenerates to the zero map.
                    DVector::zeros(w.len())
                } else {
                    w / (1.0 + t / weight)
                }
            }
            // Indicator conjugate is the support function; Moreau gives
            // prox_{t sigma_C}(w) = w - t Pi_C(w / t).
            Regularizer::BoxIndicator { lo, hi } => {
                let scaled = w / t;
                let proj = DVector::from_fn(w.len(), |i, _| scaled[i].clamp(lo[i], hi[i]));
                w - proj * t
            }
        }
    }

    /// Residual of Moreau's identity, ||prox_{ar}(v) + a prox_{a^{-1} r*}(v/a) - v||.
    pub fn moreau_identity_gap(&self, alpha: f64, v: &DVector<f64>) -> f64 {
        let p = self.prox(alpha, v);
        let q = self.conjugate_prox(alpha, &(v / alpha));
        (p + q * alpha - v).norm()
    }
}
