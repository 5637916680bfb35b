//! JSON serialization of problem instances ("minimax-spp/1").
//!
//! Dense matrices are stored row-major as arrays of rows. Infinite box
//! bounds are stored as null. Unknown keys are rejected.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::netflow::{gen_flow_network, FlowNetworkInstance};
use crate::problem::{Coupling, ProblemSpec, QuadraticComponent, SymOp};
use crate::prox::Regularizer;

pub const FORMAT: &str = "minimax-spp/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format mismatch: expected \"{FORMAT}\", got \"{0}\"")]
    Format(String),
    #[error("invalid document: {0}")]
    Invalid(String),
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, IoError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(IoError::Invalid(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn bound_to_json(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

fn bound_from_json(v: Option<f64>, positive: bool) -> f64 {
    match v {
        Some(x) => x,
        None if positive => f64::INFINITY,
        None => f64::NEG_INFINITY,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RegularizerJson {
    Zero,
    ScaledL1 { weight: f64 },
    Box {
        lo: Vec<Option<f64>>,
        hi: Vec<Option<f64>>,
    },
    SquaredL2 { weight: f64 },
}

impl RegularizerJson {
    fn from_reg(r: &Regularizer) -> Self {
        match r {
            Regularizer::Zero => RegularizerJson::Zero,
            Regularizer::ScaledL1 { weight } => RegularizerJson::ScaledL1 { weight: *weight },
            Regularizer::SquaredL2 { weight } => RegularizerJson::SquaredL2 { weight: *weight },
            Regularizer::BoxIndicator { lo, hi } => RegularizerJson::Box {
                lo: lo.iter().map(|&v| bound_to_json(v)).collect(),
                hi: hi.iter().map(|&v| bound_to_json(v)).collect(),
            },
        }
    }

    fn into_reg(self) -> Regularizer {
        match self {
            RegularizerJson::Zero => Regularizer::Zero,
            RegularizerJson::ScaledL1 { weight } => Regularizer::ScaledL1 { weight },
            RegularizerJson::SquaredL2 { weight } => Regularizer::SquaredL2 { weight },
            RegularizerJson::Box { lo, hi } => Regularizer::BoxIndicator {
                lo: lo.into_iter().map(|v| bound_from_json(v, false)).collect(),
                hi: hi.into_iter().map(|v| bound_from_json(v, true)).collect(),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SymOpJson {
    Scaled { dim: usize, c: f64 },
    Diag { entries: Vec<f64> },
    Dense { rows: Vec<Vec<f64>> },
}

impl SymOpJson {
    fn from_op(op: &SymOp) -> Self {
        match op {
            SymOp::Scaled { dim, c } => SymOpJson::Scaled { dim: *dim, c: *c },
            SymOp::Diag(d) => SymOpJson::Diag {
                entries: d.iter().copied().collect(),
            },
            SymOp::Dense { mat, .. } => SymOpJson::Dense {
                rows: mat_to_rows(mat),
            },
        }
    }

    fn into_op(self) -> Result<SymOp, IoError> {
        Ok(match self {
            SymOpJson::Scaled { dim, c } => SymOp::Scaled { dim, c },
            SymOpJson::Diag { entries } => SymOp::Diag(DVector::from_vec(entries)),
            SymOpJson::Dense { rows } => SymOp::dense(rows_to_mat(&rows, "dense block")?)
                .map_err(|e| IoError::Invalid(e.to_string()))?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CouplingJson {
    Zero { n: usize, m: usize },
    Dense { rows: Vec<Vec<f64>> },
    DiagFirstRows { w: Vec<f64>, n: usize },
}

impl CouplingJson {
    fn from_coupling(c: &Coupling) -> Self {
        match c {
            Coupling::Zero { n, m } => CouplingJson::Zero { n: *n, m: *m },
            Coupling::Dense(r) => CouplingJson::Dense {
                rows: mat_to_rows(r),
            },
            Coupling::DiagFirstRows { w, n } => CouplingJson::DiagFirstRows {
                w: w.iter().copied().collect(),
                n: *n,
            },
        }
    }

    fn into_coupling(self) -> Result<Coupling, IoError> {
        Ok(match self {
            CouplingJson::Zero { n, m } => Coupling::Zero { n, m },
            CouplingJson::Dense { rows } => Coupling::Dense(rows_to_mat(&rows, "coupling")?),
            CouplingJson::DiagFirstRows { w, n } => Coupling::DiagFirstRows {
                w: DVector::from_vec(w),
                n,
            },
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentJson {
    p: SymOpJson,
    p_lin: Vec<f64>,
    q: SymOpJson,
    q_lin: Vec<f64>,
    r: CouplingJson,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSpecJson {
    format: String,
    n: usize,
    m: usize,
    q: usize,
    mu_x: f64,
    mu_y: f64,
    l_g_bar: f64,
    l_h_bar: f64,
    l_f_bar: f64,
    mu_star_x: Option<f64>,
    mu_star_y: Option<f64>,
    phi: RegularizerJson,
    psi: RegularizerJson,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<f64>,
    components: Vec<ComponentJson>,
}

pub fn problem_to_json(p: &ProblemSpec) -> Result<String, IoError> {
    let (msx, msy) = p.mu_star_overrides();
    let doc = ProblemSpecJson {
        format: FORMAT.to_string(),
        n: p.n,
        m: p.m_dim,
        q: p.q_dim,
        mu_x: p.mu_x,
        mu_y: p.mu_y,
        l_g_bar: p.l_g_bar,
        l_h_bar: p.l_h_bar,
        l_f_bar: p.l_f_bar,
        mu_star_x: msx,
        mu_star_y: msy,
        phi: RegularizerJson::from_reg(&p.phi),
        psi: RegularizerJson::from_reg(&p.psi),
        a: mat_to_rows(&p.a),
        b: mat_to_rows(&p.b),
        c: p.c.iter().copied().collect(),
        components: p
            .components
            .iter()
            .map(|comp| ComponentJson {
                p: SymOpJson::from_op(&comp.p),
                p_lin: comp.p_lin.iter().copied().collect(),
                q: SymOpJson::from_op(&comp.q),
                q_lin: comp.q_lin.iter().copied().collect(),
                r: CouplingJson::from_coupling(&comp.r),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn problem_from_json(text: &str) -> Result<ProblemSpec, IoError> {
    let doc: ProblemSpecJson = serde_json::from_str(text)?;
    if doc.format != FORMAT {
        return Err(IoError::Format(doc.format));
    }
    let mut components = Vec::with_capacity(doc.components.len());
    for comp in doc.components {
        components.push(QuadraticComponent {
            p: comp.p.into_op()?,
            p_lin: DVector::from_vec(comp.p_lin),
            q: comp.q.into_op()?,
            q_lin: DVector::from_vec(comp.q_lin),
            r: comp.r.into_coupling()?,
        });
    }
    let mut spec = ProblemSpec::new(
        doc.n,
        doc.m,
        doc.q,
        components,
        doc.phi.into_reg(),
        doc.psi.into_reg(),
        rows_to_mat(&doc.a, "A")?,
        rows_to_mat(&doc.b, "B")?,
        DVector::from_vec(doc.c),
        doc.mu_x,
        doc.mu_y,
        doc.l_g_bar,
        doc.l_h_bar,
        doc.l_f_bar,
    )
    .map_err(|e| IoError::Invalid(e.to_string()))?;
    spec.set_mu_star(doc.mu_star_x, doc.mu_star_y);
    Ok(spec)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowNetworkJson {
    format: String,
    n_nodes: usize,
    p_er: f64,
    sigma: f64,
    m_samples: usize,
    budget: f64,
    seed: u64,
    /// Materialized for inspection; cost samples regenerate from the seed.
    edges: Vec<(usize, usize)>,
    capacity: Vec<f64>,
    base_cost: Vec<f64>,
    demand: f64,
    eta_y: f64,
}

pub fn network_to_json(net: &FlowNetworkInstance) -> Result<String, IoError> {
    let doc = FlowNetworkJson {
        format: FORMAT.to_string(),
        n_nodes: net.n_nodes,
        p_er: net.p_er,
        sigma: net.sigma,
        m_samples: net.cost_samples.len(),
        budget: net.budget,
        seed: net.seed,
        edges: net.edges.clone(),
        capacity: net.capacity.iter().copied().collect(),
        base_cost: net.base_cost.iter().copied().collect(),
        demand: net.demand,
        eta_y: net.eta_y,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Regenerates the instance from its stored seed and verifies the
/// materialized graph data matches.
pub fn network_from_json(text: &str) -> Result<FlowNetworkInstance, IoError> {
    let doc: FlowNetworkJson = serde_json::from_str(text)?;
    if doc.format != FORMAT {
        return Err(IoError::Format(doc.format));
    }
    let mut net = gen_flow_network(doc.n_nodes, doc.p_er, doc.sigma, doc.m_samples, 0.0, doc.seed)
        .map_err(|e| IoError::Invalid(e.to_string()))?;
    net.budget = doc.budget;
    if net.edges != doc.edges {
        return Err(IoError::Invalid(
            "regenerated edge list disagrees with the stored one".into(),
        ));
    }
    let cap_doc = DVector::from_vec(doc.capacity);
    if (&net.capacity - &cap_doc).abs().max() > 1e-12 {
        return Err(IoError::Invalid(
            "regenerated capacities disagree with the stored ones".into(),
        ));
    }
    Ok(net)
}

pub fn read_to_string(path: &std::path::Path) -> Result<String, IoError> {
    Ok(std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{regression::gen_regression, synthetic::gen_quadratic};

    #[test]
    fn problem_round_trip_quadratic() {
        let inst = gen_quadratic(4, 3, 2, 5, 9, Default::default());
        let text = problem_to_json(&inst.problem).unwrap();
        let back = problem_from_json(&text).unwrap();
        assert_eq!(back.n, 4);
        assert_eq!(back.a, inst.problem.a);
        assert_eq!(
            back.components[2].p_lin,
            inst.problem.components[2].p_lin
        );
        let x = nalgebra::DVector::from_element(4, 0.3);
        let y = nalgebra::DVector::from_element(3, -0.2);
        let l = nalgebra::DVector::from_element(2, 0.1);
        assert!(
            (back.lagrangian_value(&x, &y, &l) - inst.problem.lagrangian_value(&x, &y, &l)).abs()
                < 1e-14
        );
    }

    #[test]
    fn problem_round_trip_with_infinite_box() {
        let mut p = gen_regression(3, 3, 2, 2, 0.05, 4);
        p.phi = Regularizer::BoxIndicator {
            lo: vec![0.0, 0.0, 0.0],
            hi: vec![1.0, f64::INFINITY, 2.0],
        };
        let text = problem_to_json(&p).unwrap();
        let back = problem_from_json(&text).unwrap();
        match &back.phi {
            Regularizer::BoxIndicator { hi, .. } => {
                assert!(hi[1].is_infinite() && hi[0] == 1.0)
            }
            other => panic!("box expected, got {other:?}"),
        }
    }

    #[test]
    fn wrong_format_rejected() {
        let inst = gen_quadratic(2, 2, 1, 1, 1, Default::default());
        let text = problem_to_json(&inst.problem)
            .unwrap()
            .replace(FORMAT, "minimax-spp/99");
        assert!(matches!(problem_from_json(&text), Err(IoError::Format(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let inst = gen_quadratic(2, 2, 1, 1, 1, Default::default());
        let mut v: serde_json::Value =
            serde_json::from_str(&problem_to_json(&inst.problem).unwrap()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        assert!(problem_from_json(&v.to_string()).is_err());
    }

    #[test]
    fn network_round_trip() {
        let net = gen_flow_network(8, 0.35, 0.01, 4, 0.2, 123).unwrap();
        let text = network_to_json(&net).unwrap();
        let back = network_from_json(&text).unwrap();
        assert_eq!(back.edges, net.edges);
        assert_eq!(back.budget, net.budget);
        assert_eq!(back.cost_samples[2], net.cost_samples[2]);
    }
}
