//! Instance generators and evaluators for the benchmark experiments.

pub mod netflow;
pub mod regression;
pub mod synthetic;

use nalgebra::DVector;
use rayon::prelude::*;

use netflow::{
    gen_flow_network, relative_cost_increase, run_strategy, ExperimentError,
    FlowNetworkInstance, SnmsppAttackConfig, Strategy,
};

/// One evaluated (cell, trial, strategy, budget) outcome.
#[derive(Debug, Clone)]
pub struct NetflowTrialRow {
    pub p_er: f64,
    pub sigma: f64,
    pub trial: usize,
    pub strategy: Strategy,
    pub budget_frac: f64,
    pub budget: f64,
    pub rho: f64,
    pub feasible: bool,
    pub q_clean: f64,
    pub q_attacked: f64,
}

/// Runs every strategy on `trials` independent instances of one
/// (p_er, sigma) cell across a budget grid. Trials are independent and run
/// in parallel; rows come back in deterministic (trial, budget, strategy)
/// order.
#[allow(clippy::too_many_arguments)]
pub fn run_netflow_cell(
    n_nodes: usize,
    p_er: f64,
    sigma: f64,
    m_samples: usize,
    budget_fracs: &[f64],
    trials: usize,
    seed: u64,
    snm: &SnmsppAttackConfig,
) -> Result<Vec<NetflowTrialRow>, ExperimentError> {
    let jobs: Vec<(usize, f64)> = (0..trials)
        .flat_map(|t| budget_fracs.iter().map(move |&f| (t, f)))
        .collect();
    let results: Vec<Result<Vec<NetflowTrialRow>, ExperimentError>> = jobs
        .par_iter()
        .map(|&(trial, frac)| {
            let inst_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add(trial as u64 * 7919);
            let mut net = gen_flow_network(n_nodes, p_er, sigma, m_samples, frac, inst_seed)?;
            net.budget = frac * net.total_capacity();
            let mut rows = Vec::new();
            for strategy in Strategy::ALL {
                let y = run_strategy(&net, strategy, inst_seed ^ 0x5eed, snm)?;
                let res = relative_cost_increase(&net, strategy, &y)?;
                rows.push(NetflowTrialRow {
                    p_er,
                    sigma,
                    trial,
                    strategy,
                    budget_frac: frac,
                    budget: net.budget,
                    rho: res.rho,
                    feasible: res.feasible,
                    q_clean: res.q_clean,
                    q_attacked: res.q_attacked,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean rho per (strategy, budget_frac), excluding infeasible trials; also
/// reports how many trials were excluded.
pub fn mean_rho_by_strategy(
    rows: &[NetflowTrialRow],
) -> Vec<(Strategy, f64, f64, usize, usize)> {
    let mut out = Vec::new();
    let mut fracs: Vec<f64> = rows.iter().map(|r| r.budget_frac).collect();
    fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fracs.dedup();
    for strategy in Strategy::ALL {
        for &frac in &fracs {
            let group: Vec<&NetflowTrialRow> = rows
                .iter()
                .filter(|r| r.strategy == strategy && r.budget_frac == frac)
                .collect();
            let feasible: Vec<f64> = group
                .iter()
                .filter(|r| r.feasible)
                .map(|r| r.rho)
                .collect();
            let excluded = group.len() - feasible.len();
            let mean = if feasible.is_empty() {
                f64::NAN
            } else {
                feasible.iter().sum::<f64>() / feasible.len() as f64
            };
            out.push((strategy, frac, mean, feasible.len(), excluded));
        }
    }
    out
}

/// Evaluates one externally supplied attack on a fresh instance; used by the
/// SAA consistency check.
pub fn evaluate_attack(
    net: &FlowNetworkInstance,
    strategy: Strategy,
    y: &DVector<f64>,
) -> Result<netflow::AttackResult, ExperimentError> {
    relative_cost_increase(net, strategy, y)
}
