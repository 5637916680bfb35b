//! Adversarial network-flow experiment: instance generation, the SAA
//! minimax reformulation with slacks, the min-cost-flow evaluator, and the
//! baseline attack strategies.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use thiserror::Error;

use crate::driver::{self, DeltaSchedule, DriverError, InitPoint, RunReport, SolverConfig};
use crate::problem::{Coupling, ProblemSpec, QuadraticComponent, SymOp};
use crate::prox::Regularizer;
use crate::sampling::{SampleMode, SamplerConfig};
use crate::ssn::NewtonParams;

/// Quadratic slack regularization keeping the min block strongly convex.
pub const EPS_SLACK: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("instance generation failed: {0}")]
    Generation(String),
    #[error("infeasible flow polytope: {0}")]
    Infeasible(String),
    #[error("projection did not converge: {0}")]
    Projection(String),
    #[error(transparent)]
    Solver(#[from] DriverError),
}

/// Attack strategies compared by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Snmmspp,
    Mgd,
    Random,
    MaxCapacity,
    Greedy,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Snmmspp,
        Strategy::Mgd,
        Strategy::Random,
        Strategy::MaxCapacity,
        Strategy::Greedy,
    ];
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Strategy::Snmmspp => "snmmspp",
            Strategy::Mgd => "mgd",
            Strategy::Random => "random",
            Strategy::MaxCapacity => "max_capacity",
            Strategy::Greedy => "greedy",
        };
        write!(f, "{name}")
    }
}

/// Directed flow network with sampled edge costs.
#[derive(Debug, Clone)]
pub struct FlowNetworkInstance {
    pub n_nodes: usize,
    /// Kept edges (u, v); every edge lies on some source-sink path.
    pub edges: Vec<(usize, usize)>,
    pub capacity: DVector<f64>,
    pub base_cost: DVector<f64>,
    /// M sampled cost vectors, N(base, sigma^2) per edge.
    pub cost_samples: Vec<DVector<f64>>,
    /// Per-edge mean of the samples.
    pub mean_cost: DVector<f64>,
    pub source: usize,
    pub sink: usize,
    /// Sink demand r_t = 0.5 * max flow.
    pub demand: f64,
    /// Attack budget.
    pub budget: f64,
    pub eta_y: f64,
    pub p_er: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl FlowNetworkInstance {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn total_capacity(&self) -> f64 {
        self.capacity.sum()
    }

    /// Expected total cost sum_e w_bar_e (x_e + y_e) x_e.
    pub fn expected_cost(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (0..self.n_edges())
            .map(|e| self.mean_cost[e] * (x[e] + y[e]) * x[e])
            .sum()
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z ^ (z >> 31)
}

/// Exact max flow by shortest augmenting paths on real capacities.
pub fn max_flow(
    n_nodes: usize,
    edges: &[(usize, usize)],
    capacity: &DVector<f64>,
    source: usize,
    sink: usize,
) -> f64 {
    const EPS: f64 = 1e-12;
    let m = edges.len();
    // Residual graph: forward arc 2e, backward arc 2e+1.
    let mut residual = vec![0.0f64; 2 * m];
    for e in 0..m {
        residual[2 * e] = capacity[e];
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for (e, &(u, v)) in edges.iter().enumerate() {
        adj[u].push(2 * e);
        adj[v].push(2 * e + 1);
    }
    let head = |arc: usize| -> usize {
        let (u, v) = edges[arc / 2];
        if arc % 2 == 0 {
            v
        } else {
            u
        }
    };
    let mut flow = 0.0;
    loop {
        // BFS for the shortest augmenting path.
        let mut prev_arc = vec![usize::MAX; n_nodes];
        let mut visited = vec![false; n_nodes];
        visited[source] = true;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            if u == sink {
                break;
            }
            for &arc in &adj[u] {
                let v = head(arc);
                if !visited[v] && residual[arc] > EPS {
                    visited[v] = true;
                    prev_arc[v] = arc;
                    queue.push_back(v);
                }
            }
        }
        if !visited[sink] {
            return flow;
        }
        // Bottleneck along the path.
        let mut bottleneck = f64::INFINITY;
        let mut v = sink;
        while v != source {
            let arc = prev_arc[v];
            bottleneck = bottleneck.min(residual[arc]);
            v = if arc % 2 == 0 {
                edges[arc / 2].0
            } else {
                edges[arc / 2].1
            };
        }
        let mut v = sink;
        while v != source {
            let arc = prev_arc[v];
            residual[arc] -= bottleneck;
            residual[arc ^ 1] += bottleneck;
            v = if arc % 2 == 0 {
                edges[arc / 2].0
            } else {
                edges[arc / 2].1
            };
        }
        flow += bottleneck;
    }
}

/// Samples an Erdos-Renyi instance, pruned to source-sink-useful edges so the
/// assembled constraint rows keep full row rank. Retries until the pruned
/// graph carries positive max flow.
pub fn gen_flow_network(
    n_nodes: usize,
    p_er: f64,
    sigma: f64,
    m_samples: usize,
    budget_frac: f64,
    seed: u64,
) -> Result<FlowNetworkInstance, ExperimentError> {
    assert!(n_nodes >= 3, "need at least source, sink and one relay");
    assert!(p_er > 0.0 && p_er < 1.0, "edge probability must lie in (0,1)");
    let source = 0;
    let sink = n_nodes - 1;
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, attempt));
        let mut raw_edges = Vec::new();
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                if i != j && rng.random::<f64>() < p_er {
                    raw_edges.push((i, j));
                }
            }
        }
        // Keep edges on some s-t path: u reachable from s, t reachable from v.
        let reach_fwd = reachable(n_nodes, &raw_edges, source, false);
        let reach_bwd = reachable(n_nodes, &raw_edges, sink, true);
        let edges: Vec<(usize, usize)> = raw_edges
            .into_iter()
            .filter(|&(u, v)| reach_fwd[u] && reach_bwd[v])
            .collect();
        if edges.is_empty() {
            continue;
        }
        let m = edges.len();
        let capacity = DVector::from_fn(m, |_, _| rng.random_range(1.0..2.0));
        let base_cost = DVector::from_fn(m, |_, _| rng.random_range(1.0..2.0));
        let mf = max_flow(n_nodes, &edges, &capacity, source, sink);
        if mf <= 1e-9 {
            continue;
        }
        let mut cost_samples = Vec::with_capacity(m_samples);
        let mut mean_cost = DVector::zeros(m);
        for _ in 0..m_samples {
            let w = DVector::from_fn(m, |e, _| {
                base_cost[e] + sigma * rng.sample::<f64, _>(StandardNormal)
            });
            mean_cost += &w;
            cost_samples.push(w);
        }
        mean_cost /= m_samples as f64;
        if cost_samples.iter().any(|w| w.min() <= 0.0) {
            // Nonpositive sampled cost would break convexity of the min block.
            continue;
        }
        let total_cap = capacity.sum();
        return Ok(FlowNetworkInstance {
            n_nodes,
            edges,
            capacity,
            base_cost,
            cost_samples,
            mean_cost,
            source,
            sink,
            demand: 0.5 * mf,
            budget: budget_frac * total_cap,
            eta_y: 1e-5,
            p_er,
            sigma,
            seed,
        });
    }
    Err(ExperimentError::Generation(format!(
        "no usable graph after 100 attempts (n={n_nodes}, p={p_er}); p_er too small"
    )))
}

fn reachable(n_nodes: usize, edges: &[(usize, usize)], start: usize, reverse: bool) -> Vec<bool> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for &(u, v) in edges {
        if reverse {
            adj[v].push(u);
        } else {
            adj[u].push(v);
        }
    }
    let mut seen = vec![false; n_nodes];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// Nodes of the pruned graph other than source and sink, ascending.
pub fn interior_nodes(net: &FlowNetworkInstance) -> Vec<usize> {
    let mut present = vec![false; net.n_nodes];
    for &(u, v) in &net.edges {
        present[u] = true;
        present[v] = true;
    }
    (0..net.n_nodes)
        .filter(|&v| present[v] && v != net.source && v != net.sink)
        .collect()
}

/// Conservation + demand rows over edge space, with a cached Gram
/// factorization for affine projections.
pub struct FlowAffine {
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl FlowAffine {
    pub fn new(net: &FlowNetworkInstance) -> Result<Self, ExperimentError> {
        let interior = interior_nodes(net);
        let m = net.n_edges();
        let n_rows = interior.len() + 1;
        let mut rows = DMatrix::zeros(n_rows, m);
        for (ri, &node) in interior.iter().enumerate() {
            for (e, &(u, v)) in net.edges.iter().enumerate() {
                if v == node {
                    rows[(ri, e)] += 1.0;
                }
                if u == node {
                    rows[(ri, e)] -= 1.0;
                }
            }
        }
        let demand_row = n_rows - 1;
        for (e, &(u, v)) in net.edges.iter().enumerate() {
            if v == net.sink {
                rows[(demand_row, e)] += 1.0;
            }
            if u == net.sink {
                rows[(demand_row, e)] -= 1.0;
            }
        }
        let mut rhs = DVector::zeros(n_rows);
        rhs[demand_row] = net.demand;
        let gram = &rows * rows.transpose();
        let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
            ExperimentError::Generation("conservation rows rank deficient after pruning".into())
        })?;
        Ok(FlowAffine { rows, rhs, chol })
    }

    pub fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.rows * v - &self.rhs
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let corr = self.chol.solve(&self.residual(v));
        v - self.rows.transpose() * corr
    }
}

/// Dykstra projection onto {affine rows} intersect [lo, hi].
pub fn project_affine_box(
    aff: &FlowAffine,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    v: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>, ExperimentError> {
    let mut x = v.clone();
    let mut p_corr = DVector::zeros(v.len());
    let mut q_corr = DVector::zeros(v.len());
    let mut prev = x.clone();
    for it in 0..max_iters {
        let u = aff.project(&(&x + &p_corr));
        p_corr = &x + &p_corr - &u;
        let w = &u + &q_corr;
        let clamped = DVector::from_fn(v.len(), |i, _| w[i].clamp(lo[i], hi[i]));
        q_corr = w - &clamped;
        x = clamped;
        if it % 4 == 3 {
            let moved = (&x - &prev).norm();
            if moved <= tol && aff.residual(&x).norm() <= tol {
                return Ok(x);
            }
            prev = x.clone();
        }
    }
    // Accept if the final point already satisfies both sets to tolerance.
    if aff.residual(&x).norm() <= tol * 10.0 {
        return Ok(x);
    }
    Err(ExperimentError::Projection(format!(
        "Dykstra hit the {max_iters}-iteration cap with affine residual {:.3e}",
        aff.residual(&x).norm()
    )))
}

/// Minimum expected-cost flow under an attack: solves
/// min_x sum_e w_bar_e (x_e + y_e) x_e over the flow polytope
/// {conservation, demand, 0 <= x <= p - y} by accelerated projected gradient
/// with Dykstra projections.
pub fn min_cost_flow_eval(
    net: &FlowNetworkInstance,
    y_attack: &DVector<f64>,
) -> Result<(DVector<f64>, f64), ExperimentError> {
    let m = net.n_edges();
    assert_eq!(y_attack.len(), m);
    let caps = DVector::from_fn(m, |e, _| (net.capacity[e] - y_attack[e]).max(0.0));
    // Feasibility: the attacked network must still route the demand.
    let mf = max_flow(net.n_nodes, &net.edges, &caps, net.source, net.sink);
    if mf < net.demand - 1e-9 {
        return Err(ExperimentError::Infeasible(format!(
            "attack chokes max flow to {mf:.6} below demand {:.6}",
            net.demand
        )));
    }
    let aff = FlowAffine::new(net)?;
    let lo = DVector::zeros(m);
    let proj = |v: &DVector<f64>| project_affine_box(&aff, &lo, &caps, v, 1e-11, 50_000);
    let w = &net.mean_cost;
    let grad = |x: &DVector<f64>| {
        DVector::from_fn(m, |e, _| 2.0 * w[e] * x[e] + w[e] * y_attack[e])
    };
    let lips = 2.0 * w.max();
    let step = 1.0 / lips;
    let obj = |x: &DVector<f64>| net.expected_cost(x, y_attack);
    let mut x = proj(&DVector::zeros(m))?;
    let mut v = x.clone();
    let mut t_prev = 1.0f64;
    let mut f_prev = obj(&x);
    let pg_tol = 1e-8;
    let max_iters = 100_000;
    let mut it = 0usize;
    loop {
        let x_new = proj(&(&v - grad(&v) * step))?;
        let f_new = obj(&x_new);
        // Adaptive restart keeps the momentum from overshooting.
        if f_new > f_prev {
            v = x.clone();
            t_prev = 1.0;
            let x_retry = proj(&(&v - grad(&v) * step))?;
            let f_retry = obj(&x_retry);
            let pg = (&v - &x_retry).norm() / step;
            x = x_retry;
            f_prev = f_retry;
            if pg <= pg_tol {
                break;
            }
        } else {
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt());
            let momentum = (t_prev - 1.0) / t_new;
            v = &x_new + (&x_new - &x) * momentum;
            x = x_new;
            t_prev = t_new;
            f_prev = f_new;
        }
        it += 1;
        if it % 8 == 0 || it >= max_iters {
            // Projected-gradient norm at the current iterate.
            let xp = proj(&(&x - grad(&x) * step))?;
            let pg = (&x - &xp).norm() / step;
            if pg <= pg_tol {
                x = xp;
                break;
            }
            if it >= max_iters {
                return Err(ExperimentError::Projection(format!(
                    "projected gradient stalled at {pg:.3e} after {it} iterations"
                )));
            }
        }
    }
    let q_tot = obj(&x);
    Ok((x, q_tot))
}

/// Assembles the SAA minimax problem with slacks. Min block u = (x, z),
/// max block y; rows: interior conservation, demand, x + y + z = p, budget.
pub fn reformulate_with_slacks(net: &FlowNetworkInstance) -> Result<ProblemSpec, ExperimentError> {
    let m = net.n_edges();
    let n_min = 2 * m;
    let interior = interior_nodes(net);
    let q_rows = interior.len() + 1 + m + 1;
    let aff = FlowAffine::new(net)?;
    let n_flow_rows = aff.rows.nrows();
    let mut a = DMatrix::zeros(q_rows, n_min);
    let mut b = DMatrix::zeros(q_rows, m);
    let mut rhs = DVector::zeros(q_rows);
    // Conservation + demand rows act on the x part only.
    a.view_mut((0, 0), (n_flow_rows, m)).copy_from(&aff.rows);
    rhs.rows_mut(0, n_flow_rows).copy_from(&aff.rhs);
    // Capacity rows x_e + z_e + y_e = p_e.
    for e in 0..m {
        let row = n_flow_rows + e;
        a[(row, e)] = 1.0;
        a[(row, m + e)] = 1.0;
        b[(row, e)] = 1.0;
        rhs[row] = net.capacity[e];
    }
    // Budget row sum_e y_e = budget.
    let budget_row = q_rows - 1;
    for e in 0..m {
        b[(budget_row, e)] = 1.0;
    }
    rhs[budget_row] = net.budget;
    let c = -rhs;

    let mut components = Vec::with_capacity(net.cost_samples.len());
    let mut w_min = f64::INFINITY;
    let mut w_max: f64 = 0.0;
    for w in &net.cost_samples {
        w_min = w_min.min(w.min());
        w_max = w_max.max(w.max());
        let mut diag = DVector::zeros(n_min);
        for e in 0..m {
            diag[e] = 2.0 * w[e];
            diag[m + e] = EPS_SLACK;
        }
        components.push(QuadraticComponent {
            p: SymOp::Diag(diag),
            p_lin: DVector::zeros(n_min),
            q: SymOp::scaled(m, net.eta_y),
            q_lin: DVector::zeros(m),
            r: Coupling::DiagFirstRows {
                w: w.clone(),
                n: n_min,
            },
        });
    }
    if w_min <= 0.0 {
        return Err(ExperimentError::Generation(
            "nonpositive sampled cost; min block would lose convexity".into(),
        ));
    }
    // Box constraints: 0 <= x <= p, z >= 0, 0 <= y <= p.
    let mut lo_u = vec![0.0; n_min];
    let mut hi_u = vec![f64::INFINITY; n_min];
    for e in 0..m {
        hi_u[e] = net.capacity[e];
        lo_u[m + e] = 0.0;
    }
    let phi = Regularizer::BoxIndicator { lo: lo_u, hi: hi_u };
    let psi = Regularizer::BoxIndicator {
        lo: vec![0.0; m],
        hi: net.capacity.iter().copied().collect(),
    };
    let mu_x = EPS_SLACK.min(2.0 * w_min);
    let mu_y = net.eta_y;
    ProblemSpec::new(
        n_min,
        m,
        q_rows,
        components,
        phi,
        psi,
        a,
        b,
        c,
        mu_x,
        mu_y,
        2.0 * w_max,
        net.eta_y,
        w_max,
    )
    .map_err(|e| ExperimentError::Generation(e.to_string()))
}

/// Projects an attack vector onto {0 <= y <= p, sum y = budget} (Dykstra with
/// the budget hyperplane).
pub fn project_budget_box(net: &FlowNetworkInstance, y: &DVector<f64>) -> DVector<f64> {
    let m = net.n_edges();
    let mut x = y.clone();
    let mut p_corr = DVector::zeros(m);
    let mut q_corr = DVector::zeros(m);
    for _ in 0..10_000 {
        let w = &x + &p_corr;
        let shift = (net.budget - w.sum()) / m as f64;
        let u = DVector::from_fn(m, |e, _| w[e] + shift);
        p_corr = w - &u;
        let w2 = &u + &q_corr;
        let clamped = DVector::from_fn(m, |e, _| w2[e].clamp(0.0, net.capacity[e]));
        q_corr = w2 - &clamped;
        let done = (x.sum() - net.budget).abs() <= 1e-12;
        x = clamped;
        if done && (x.sum() - net.budget).abs() <= 1e-12 {
            break;
        }
    }
    x
}

/// Random feasible allocation: exponential weights scaled to the budget,
/// then capped with iterative redistribution of the shortfall.
pub fn random_attack(
    net: &FlowNetworkInstance,
    seed: u64,
) -> Result<DVector<f64>, ExperimentError> {
    budget_check(net)?;
    let m = net.n_edges();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a11));
    let weights = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(Exp1).max(1e-12));
    let mut y = &weights * (net.budget / weights.sum());
    for _ in 0..200 {
        for e in 0..m {
            y[e] = y[e].clamp(0.0, net.capacity[e]);
        }
        let deficit = net.budget - y.sum();
        if deficit.abs() <= 1e-10 {
            return Ok(y);
        }
        let headroom = DVector::from_fn(m, |e, _| net.capacity[e] - y[e]);
        let total = headroom.sum();
        if total <= 1e-14 {
            break;
        }
        y += headroom * (deficit / total);
    }
    Ok(project_budget_box(net, &y))
}

/// Fills the largest-capacity edges first. Ties break by edge index.
pub fn max_capacity_attack(net: &FlowNetworkInstance) -> Result<DVector<f64>, ExperimentError> {
    budget_check(net)?;
    let mut order: Vec<usize> = (0..net.n_edges()).collect();
    order.sort_by(|&a, &b| {
        net.capacity[b]
            .partial_cmp(&net.capacity[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(fill_in_order(net, &order))
}

/// Fills the cheapest-mean-cost edges first. Ties break by edge index.
pub fn greedy_attack(net: &FlowNetworkInstance) -> Result<DVector<f64>, ExperimentError> {
    budget_check(net)?;
    let mut order: Vec<usize> = (0..net.n_edges()).collect();
    order.sort_by(|&a, &b| {
        net.mean_cost[a]
            .partial_cmp(&net.mean_cost[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(fill_in_order(net, &order))
}

fn budget_check(net: &FlowNetworkInstance) -> Result<(), ExperimentError> {
    if net.budget > net.total_capacity() + 1e-12 {
        return Err(ExperimentError::Infeasible(format!(
            "budget {:.4} exceeds total capacity {:.4}",
            net.budget,
            net.total_capacity()
        )));
    }
    Ok(())
}

fn fill_in_order(net: &FlowNetworkInstance, order: &[usize]) -> DVector<f64> {
    let mut y = DVector::zeros(net.n_edges());
    let mut remaining = net.budget;
    for &e in order {
        if remaining <= 0.0 {
            break;
        }
        let take = remaining.min(net.capacity[e]);
        y[e] = take;
        remaining -= take;
    }
    y
}

/// Internal state of the multiplier-gradient-descent baseline, exposed so
/// fixed-point behaviour can be tested directly.
#[derive(Debug, Clone)]
pub struct MgdState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    /// Multiplier on the coupling rows x + y <= p (componentwise, >= 0).
    pub theta: DVector<f64>,
    /// Multiplier on the budget row sum y = b.
    pub nu: f64,
}

/// One outer MGD step: K projected descent steps in x, K projected ascent
/// steps in y, then multiplier updates on coupling and budget.
pub fn mgd_step(
    net: &FlowNetworkInstance,
    aff: &FlowAffine,
    state: &mut MgdState,
    inner_steps: usize,
    step: f64,
) -> Result<(), ExperimentError> {
    let m = net.n_edges();
    let w = &net.mean_cost;
    let lo = DVector::zeros(m);
    for _ in 0..inner_steps {
        let grad_x =
            DVector::from_fn(m, |e, _| 2.0 * w[e] * state.x[e] + w[e] * state.y[e] + state.theta[e]);
        let moved = &state.x - grad_x * step;
        state.x = project_affine_box(aff, &lo, &net.capacity, &moved, 1e-10, 50_000)?;
    }
    for _ in 0..inner_steps {
        let grad_y = DVector::from_fn(m, |e, _| w[e] * state.x[e] - state.theta[e] - state.nu);
        let moved = &state.y + grad_y * step;
        state.y = DVector::from_fn(m, |e, _| moved[e].clamp(0.0, net.capacity[e]));
    }
    for e in 0..m {
        state.theta[e] = (state.theta[e] + step * (state.x[e] + state.y[e] - net.capacity[e])).max(0.0);
    }
    state.nu += step * (state.y.sum() - net.budget);
    if !state.x.iter().all(|v| v.is_finite()) || !state.y.iter().all(|v| v.is_finite()) {
        return Err(ExperimentError::Projection("MGD iterate went non-finite".into()));
    }
    Ok(())
}

/// Multiplier gradient descent on the average-cost problem.
pub fn mgd_attack(
    net: &FlowNetworkInstance,
    outer_steps: usize,
    inner_steps: usize,
    step: f64,
) -> Result<DVector<f64>, ExperimentError> {
    budget_check(net)?;
    let m = net.n_edges();
    let aff = FlowAffine::new(net)?;
    let lo = DVector::zeros(m);
    let x0 = project_affine_box(&aff, &lo, &net.capacity, &DVector::zeros(m), 1e-10, 50_000)?;
    let y0 = project_budget_box(net, &DVector::from_element(m, net.budget / m as f64));
    let mut state = MgdState {
        x: x0,
        y: y0,
        theta: DVector::zeros(m),
        nu: 0.0,
    };
    for _ in 0..outer_steps {
        mgd_step(net, &aff, &mut state, inner_steps, step)?;
    }
    Ok(project_budget_box(net, &state.y))
}

/// Solver knobs for the SAA attack.
#[derive(Debug, Clone, Copy)]
pub struct SnmsppAttackConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub eps_sub: f64,
    pub seed: u64,
}

impl Default for SnmsppAttackConfig {
    fn default() -> Self {
        SnmsppAttackConfig {
            outer_iters: 200,
            inner_iters: 5,
            alpha: 0.002,
            batch_size: 10,
            eps_sub: 1e-10,
            seed: 0,
        }
    }
}

/// Runs the stochastic saddle solver on the SAA reformulation and extracts
/// the attack vector (projected back onto the budget simplex-with-caps).
pub fn snmmspp_attack(
    net: &FlowNetworkInstance,
    cfg: &SnmsppAttackConfig,
) -> Result<(DVector<f64>, RunReport), ExperimentError> {
    budget_check(net)?;
    let problem = reformulate_with_slacks(net)?;
    let m = net.n_edges();
    // Warm start: clean flow, proportional attack, slacks absorbing the rest.
    let (x_clean, _) = min_cost_flow_eval(net, &DVector::zeros(m))?;
    let y0 = project_budget_box(
        net,
        &(&net.capacity * (net.budget / net.total_capacity())),
    );
    let mut u0 = DVector::zeros(2 * m);
    for e in 0..m {
        u0[e] = x_clean[e];
        u0[m + e] = (net.capacity[e] - x_clean[e] - y0[e]).max(0.0);
    }
    let solver_cfg = SolverConfig {
        outer_iters: cfg.outer_iters,
        inner_iters: cfg.inner_iters,
        alpha: cfg.alpha,
        sampler: SamplerConfig {
            mode: SampleMode::WithoutReplacement,
            batch_size: cfg.batch_size.min(problem.n_components()),
            seed: cfg.seed,
        },
        delta: DeltaSchedule::Constant(0.0),
        eps_floor: cfg.eps_sub,
        project_each_outer: true,
        newton: NewtonParams::network(),
        init: InitPoint::Given {
            x: u0,
            y: y0,
            lambda: DVector::zeros(problem.q_dim),
        },
        log_newton: false,
    };
    let (state, report) = driver::outer_loop(&problem, &solver_cfg, None)?;
    let y = project_budget_box(net, &state.y);
    Ok((y, report))
}

/// Outcome of evaluating one attack vector.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub strategy: Strategy,
    pub y: DVector<f64>,
    pub x_clean: DVector<f64>,
    pub x_attacked: Option<DVector<f64>>,
    pub q_clean: f64,
    pub q_attacked: f64,
    /// Relative cost increase; +infinity when the attack chokes the network.
    pub rho: f64,
    pub feasible: bool,
}

/// rho = (q_tot(x_att) - q_tot(x_cl)) / q_tot(x_cl).
pub fn relative_cost_increase(
    net: &FlowNetworkInstance,
    strategy: Strategy,
    y: &DVector<f64>,
) -> Result<AttackResult, ExperimentError> {
    let zero = DVector::zeros(net.n_edges());
    let (x_clean, q_clean) = min_cost_flow_eval(net, &zero)?;
    match min_cost_flow_eval(net, y) {
        Ok((x_att, q_att)) => Ok(AttackResult {
            strategy,
            y: y.clone(),
            x_clean,
            x_attacked: Some(x_att),
            q_clean,
            q_attacked: q_att,
            rho: (q_att - q_clean) / q_clean,
            feasible: true,
        }),
        Err(ExperimentError::Infeasible(_)) => Ok(AttackResult {
            strategy,
            y: y.clone(),
            x_clean,
            x_attacked: None,
            q_clean,
            q_attacked: f64::INFINITY,
            rho: f64::INFINITY,
            feasible: false,
        }),
        Err(e) => Err(e),
    }
}

/// Produces the attack vector for a strategy on one instance.
pub fn run_strategy(
    net: &FlowNetworkInstance,
    strategy: Strategy,
    seed: u64,
    snm: &SnmsppAttackConfig,
) -> Result<DVector<f64>, ExperimentError> {
    match strategy {
        Strategy::Random => random_attack(net, seed),
        Strategy::MaxCapacity => max_capacity_attack(net),
        Strategy::Greedy => greedy_attack(net),
        Strategy::Mgd => mgd_attack(net, 100, 5, 0.5),
        Strategy::Snmmspp => {
            let cfg = SnmsppAttackConfig { seed, ..*snm };
            snmmspp_attack(net, &cfg).map(|(y, _)| y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(
        edges: Vec<(usize, usize)>,
        caps: Vec<f64>,
        costs: Vec<f64>,
        n: usize,
    ) -> FlowNetworkInstance {
        let capacity = DVector::from_vec(caps);
        let base = DVector::from_vec(costs);
        let mf = max_flow(n, &edges, &capacity, 0, n - 1);
        FlowNetworkInstance {
            n_nodes: n,
            edges,
            capacity,
            base_cost: base.clone(),
            cost_samples: vec![base.clone()],
            mean_cost: base,
            source: 0,
            sink: n - 1,
            demand: 0.5 * mf,
            budget: 0.0,
            eta_y: 1e-5,
            p_er: 0.5,
            sigma: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn max_flow_single_edge() {
        let edges = vec![(0, 1)];
        let caps = DVector::from_vec(vec![1.5]);
        assert!((max_flow(2, &edges, &caps, 0, 1) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn max_flow_parallel_edges() {
        let edges = vec![(0, 1), (0, 1)];
        let caps = DVector::from_vec(vec![1.0, 2.0]);
        assert!((max_flow(2, &edges, &caps, 0, 1) - 3.0).abs() < 1e-12);
    }

    /// Independent oracle: max-flow equals the minimum s-t cut, enumerated
    /// over all vertex bipartitions.
    fn min_cut_enumeration(
        n_nodes: usize,
        edges: &[(usize, usize)],
        caps: &DVector<f64>,
        s: usize,
        t: usize,
    ) -> f64 {
        let free: Vec<usize> = (0..n_nodes).filter(|&v| v != s && v != t).collect();
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << free.len()) {
            let mut side = vec![false; n_nodes];
            side[s] = true;
            for (i, &v) in free.iter().enumerate() {
                side[v] = mask & (1 << i) != 0;
            }
            let cut: f64 = edges
                .iter()
                .enumerate()
                .filter(|(_, &(u, v))| side[u] && !side[v])
                .map(|(e, _)| caps[e])
                .sum();
            best = best.min(cut);
        }
        best
    }

    #[test]
    fn max_flow_matches_min_cut_on_random_graphs() {
        for seed in 0..6 {
            let net = gen_flow_network(8, 0.35, 0.001, 3, 0.2, seed).unwrap();
            let mf = max_flow(net.n_nodes, &net.edges, &net.capacity, net.source, net.sink);
            let cut = min_cut_enumeration(net.n_nodes, &net.edges, &net.capacity, net.source, net.sink);
            assert!((mf - cut).abs() <= 1e-9, "seed {seed}: flow {mf} vs cut {cut}");
            assert!((net.demand - 0.5 * mf).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_and_pruned() {
        let a = gen_flow_network(10, 0.3, 0.01, 5, 0.25, 77).unwrap();
        let b = gen_flow_network(10, 0.3, 0.01, 5, 0.25, 77).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.capacity, b.capacity);
        assert_eq!(a.cost_samples[3], b.cost_samples[3]);
        // Pruning: every edge endpoint reaches s/t appropriately.
        let fwd = reachable(a.n_nodes, &a.edges, a.source, false);
        let bwd = reachable(a.n_nodes, &a.edges, a.sink, true);
        for &(u, v) in &a.edges {
            assert!(fwd[u] && bwd[v]);
        }
    }

    #[test]
    fn mcf_single_edge_closed_form() {
        let net = tiny_net(vec![(0, 1)], vec![2.0], vec![1.5], 2);
        // demand = 1, w = 1.5, y = 0: x = 1, cost = 1.5.
        let (x, q) = min_cost_flow_eval(&net, &DVector::zeros(1)).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-7);
        assert!((q - 1.5).abs() < 1e-7);
    }

    #[test]
    fn mcf_parallel_edges_match_grid_search() {
        let net = tiny_net(vec![(0, 1), (0, 1)], vec![1.0, 2.0], vec![1.2, 1.2], 2);
        // demand = 1.5; objective w (x1^2 + x2^2); grid the split.
        let (_, q) = min_cost_flow_eval(&net, &DVector::zeros(2)).unwrap();
        let mut best = f64::INFINITY;
        let mut s: f64 = 0.0;
        while s <= 1.0 {
            let x1 = s.min(1.0);
            let x2 = net.demand - x1;
            if x2 >= 0.0 && x2 <= 2.0 {
                best = best.min(1.2 * (x1 * x1 + x2 * x2));
            }
            s += 1e-3;
        }
        assert!((q - best).abs() < 1e-4, "solver {q} vs grid {best}");
    }

    #[test]
    fn mcf_infeasible_attack_detected() {
        let net = tiny_net(vec![(0, 1)], vec![2.0], vec![1.0], 2);
        let y = DVector::from_vec(vec![1.5]);
        // caps drop to 0.5 < demand 1.0.
        assert!(matches!(
            min_cost_flow_eval(&net, &y),
            Err(ExperimentError::Infeasible(_))
        ));
    }

    #[test]
    fn attacks_respect_budget_and_caps() {
        let mut net = gen_flow_network(8, 0.4, 0.01, 4, 0.3, 5).unwrap();
        net.budget = 0.3 * net.total_capacity();
        for seed in 0..40 {
            let y = random_attack(&net, seed).unwrap();
            assert!((y.sum() - net.budget).abs() <= 1e-8, "budget violated");
            for e in 0..net.n_edges() {
                assert!(y[e] >= -1e-12 && y[e] <= net.capacity[e] + 1e-12);
            }
        }
        for y in [
            max_capacity_attack(&net).unwrap(),
            greedy_attack(&net).unwrap(),
            mgd_attack(&net, 20, 3, 0.5).unwrap(),
        ] {
            assert!((y.sum() - net.budget).abs() <= 1e-6);
            for e in 0..net.n_edges() {
                assert!(y[e] >= -1e-9 && y[e] <= net.capacity[e] + 1e-9);
            }
        }
    }

    #[test]
    fn fill_order_attacks_closed_form() {
        let mut net = tiny_net(
            vec![(0, 1), (0, 1), (0, 1)],
            vec![2.0, 1.5, 1.0],
            vec![1.9, 1.1, 1.5],
            2,
        );
        net.budget = 2.0;
        let y = max_capacity_attack(&net).unwrap();
        assert_eq!(y, DVector::from_vec(vec![2.0, 0.0, 0.0]));
        net.budget = 1.0;
        let y = greedy_attack(&net).unwrap();
        assert_eq!(y, DVector::from_vec(vec![0.0, 1.0, 0.0]));
    }

    #[test]
    fn mgd_fixed_point_on_single_edge() {
        // Single edge, cap 2, demand 1, budget 0.5: x* = 1 (pinned by the
        // demand row), y* = 0.5 interior, theta* = 0, nu* = w.
        let mut net = tiny_net(vec![(0, 1)], vec![2.0], vec![1.3], 2);
        net.budget = 0.5;
        let aff = FlowAffine::new(&net).unwrap();
        let mut state = MgdState {
            x: DVector::from_vec(vec![1.0]),
            y: DVector::from_vec(vec![0.5]),
            theta: DVector::zeros(1),
            nu: 1.3,
        };
        let before = state.clone();
        mgd_step(&net, &aff, &mut state, 5, 0.5).unwrap();
        assert!((state.x[0] - before.x[0]).abs() <= 1e-6);
        assert!((state.y[0] - before.y[0]).abs() <= 1e-6);
        assert!((state.nu - before.nu).abs() <= 1e-6);
    }

    #[test]
    fn rho_zero_attack_is_zero() {
        let net = tiny_net(vec![(0, 1), (0, 1)], vec![1.0, 2.0], vec![1.4, 1.6], 2);
        let res =
            relative_cost_increase(&net, Strategy::Random, &DVector::zeros(2)).unwrap();
        assert!(res.rho.abs() < 1e-9);
        assert!(res.feasible);
    }

    #[test]
    fn rho_nonnegative_for_feasible_attacks() {
        for seed in 0..8 {
            let mut net = gen_flow_network(7, 0.4, 0.005, 3, 0.15, 100 + seed).unwrap();
            net.budget = 0.15 * net.total_capacity();
            for strat in [Strategy::Random, Strategy::MaxCapacity, Strategy::Greedy] {
                let y = run_strategy(&net, strat, seed, &Default::default()).unwrap();
                let res = relative_cost_increase(&net, strat, &y).unwrap();
                if res.feasible {
                    assert!(res.rho >= -1e-7, "seed {seed} {strat}: rho {}", res.rho);
                }
            }
        }
    }

    #[test]
    fn reformulation_shape_and_feasibility() {
        let net = gen_flow_network(8, 0.35, 0.01, 6, 0.2, 9).unwrap();
        let p = reformulate_with_slacks(&net).unwrap();
        let m = net.n_edges();
        let interior = interior_nodes(&net).len();
        assert_eq!(p.q_dim, interior + 1 + m + 1);
        assert_eq!(p.n, 2 * m);
        assert_eq!(p.m_dim, m);
        assert_eq!(p.n_components(), net.cost_samples.len());
        // Clean flow with y = 0 and z = p - x is feasible for the assembly
        // except the budget row (y = 0 only meets a zero budget).
        let mut net0 = net.clone();
        net0.budget = 0.0;
        let p0 = reformulate_with_slacks(&net0).unwrap();
        let (x_cl, _) = min_cost_flow_eval(&net0, &DVector::zeros(m)).unwrap();
        let mut u = DVector::zeros(2 * m);
        for e in 0..m {
            u[e] = x_cl[e];
            u[m + e] = net0.capacity[e] - x_cl[e];
        }
        let res = p0.constraint_residual(&u, &DVector::zeros(m));
        assert!(res.norm() <= 1e-7, "feasibility residual {}", res.norm());
        // Min-block Hessian eigenvalue floor.
        assert!((p.mu_x - EPS_SLACK).abs() < 1e-20 || p.mu_x <= 2.0 * 2.1);
    }

    #[test]
    fn budget_projection_invariants() {
        let mut net = gen_flow_network(7, 0.4, 0.01, 3, 0.2, 44).unwrap();
        net.budget = 0.2 * net.total_capacity();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v = DVector::from_fn(net.n_edges(), |_, _| rng.random_range(-1.0..3.0));
            let y = project_budget_box(&net, &v);
            assert!((y.sum() - net.budget).abs() <= 1e-8);
            for e in 0..net.n_edges() {
                assert!(y[e] >= -1e-12 && y[e] <= net.capacity[e] + 1e-12);
            }
        }
    }
}
