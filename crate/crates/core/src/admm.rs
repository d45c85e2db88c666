//! Distributed ADMM for the optimal consensus weights.
//!
//! Each agent `i` keeps its own estimate `W_i` of the whole weight matrix
//! together with dual variables `a_i`, `b_i` (row and column sums) and `M_i`
//! (agreement with neighbours). [`parallel_round`] is the production engine:
//! every agent solves its primal update from round-`k` data, the new matrices
//! are exchanged, then duals are updated from round-`k+1` data.
//!
//! [`serial_round`] runs the textbook ADMM on the formulation with explicit
//! edge variables `X_ij` and multipliers `C_ij`, `D_ij`. It exists so the two
//! engines can be compared round by round.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::spectral::{averaging_matrix, frobenius_norm, operator_norm, Matrix, Vector};
use crate::subproblem::{solve_primal, PrimalInstance, SolverOptions, SubproblemError};
use crate::weights::{assemble_from_rows, WeightError, WeightMatrix};

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("graph is not connected")]
    Disconnected,
    #[error("round {round}: {source}")]
    Subproblem {
        round: usize,
        #[source]
        source: SubproblemError,
    },
    #[error("state has {states} agents but graph has {nodes} nodes")]
    SizeMismatch { states: usize, nodes: usize },
    #[error(transparent)]
    Weight(#[from] WeightError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub max_outer: usize,
    pub solver: SolverOptions,
    /// Let agents whose residual is already below `epsilon` hold their
    /// variables fixed until it rises again.
    pub local_freeze: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { rho: 1.0 / 16.0, epsilon: 1e-3, max_outer: 5_000, solver: SolverOptions::default(), local_freeze: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub w: Matrix,
    pub a: Vector,
    pub b: Vector,
    pub m: Matrix,
    pub frozen: bool,
}

impl AgentState {
    pub fn zeros(n: usize) -> Self {
        Self { w: Matrix::zeros(n, n), a: Vector::zeros(n), b: Vector::zeros(n), m: Matrix::zeros(n, n), frozen: false }
    }
}

pub fn initial_states(n: usize) -> Vec<AgentState> {
    vec![AgentState::zeros(n); n]
}

/// Residuals of the constraints at one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `‖W_i1 − 1‖/√n`
    pub r1: f64,
    /// `‖W_iᵀ1 − 1‖/√n`
    pub r2: f64,
    /// `‖W_i − W_j‖_F/n` for proper neighbours `j`.
    pub r3: Vec<(usize, f64)>,
    /// `|(W_i)_ij|` for non-neighbours `j`.
    pub r4: Vec<(usize, f64)>,
    pub max: f64,
}

impl ResidualReport {
    pub fn max_r3(&self) -> f64 {
        self.r3.iter().map(|&(_, r)| r).fold(0.0, f64::max)
    }
}

pub fn residuals(agent: usize, w_i: &Matrix, neighbor_ws: &[(usize, &Matrix)], g: &Graph) -> ResidualReport {
    let n = g.len();
    let sqrt_n = (n as f64).sqrt();
    let ones = Vector::from_element(n, 1.0);
    let r1 = (w_i * &ones - &ones).norm() / sqrt_n;
    let r2 = (w_i.transpose() * &ones - &ones).norm() / sqrt_n;
    let r3: Vec<(usize, f64)> = neighbor_ws
        .iter()
        .filter(|(j, _)| *j != agent)
        .map(|&(j, w_j)| (j, frobenius_norm(&(w_i - w_j)) / n as f64))
        .collect();
    let r4: Vec<(usize, f64)> =
        (0..n).filter(|&j| !g.has_edge(agent, j)).map(|j| (j, w_i[(agent, j)].abs())).collect();
    let max = r3.iter().chain(&r4).map(|&(_, r)| r).fold(r1.max(r2), f64::max);
    ResidualReport { r1, r2, r3, r4, max }
}

pub fn agent_residuals(states: &[AgentState], g: &Graph) -> Vec<ResidualReport> {
    (0..g.len())
        .map(|i| {
            let neighbors: Vec<(usize, &Matrix)> = g.proper_neighbors(i).map(|j| (j, &states[j].w)).collect();
            residuals(i, &states[i].w, &neighbors, g)
        })
        .collect()
}

pub fn stopping_satisfied(reports: &[ResidualReport], epsilon: f64) -> bool {
    reports.iter().all(|r| r.max <= epsilon)
}

/// The primal update of agent `i` with anchors `(W_i(k) + W_j(k))/2`.
pub fn primal_instance(agent: usize, states: &[AgentState], g: &Graph, rho: f64) -> PrimalInstance {
    let own = &states[agent];
    let anchors = g.neighbors(agent).iter().map(|&j| (&own.w + &states[j].w) * 0.5).collect();
    PrimalInstance {
        agent,
        n: g.len(),
        neighbors: g.neighbors(agent).to_vec(),
        a: own.a.clone(),
        b: own.b.clone(),
        m: own.m.clone(),
        anchors,
        rho,
    }
}

fn check_sizes(states: &[AgentState], g: &Graph) -> Result<(), AdmmError> {
    let n = g.len();
    if states.len() != n || states.iter().any(|s| s.w.nrows() != n) {
        return Err(AdmmError::SizeMismatch { states: states.len(), nodes: n });
    }
    Ok(())
}

/// One synchronous round: primal updates, exchange, dual updates.
pub fn parallel_round(
    states: &[AgentState],
    g: &Graph,
    cfg: &AdmmConfig,
    k: usize,
) -> Result<Vec<AgentState>, AdmmError> {
    check_sizes(states, g)?;
    let n = g.len();
    let rho = cfg.rho;
    let frozen: Vec<bool> = if cfg.local_freeze {
        agent_residuals(states, g).iter().map(|r| r.max <= cfg.epsilon).collect()
    } else {
        vec![false; n]
    };

    let primal: Vec<Matrix> = (0..n)
        .into_par_iter()
        .map(|i| {
            if frozen[i] {
                return Ok(states[i].w.clone());
            }
            let inst = primal_instance(i, states, g, rho);
            solve_primal(&inst, &cfg.solver, Some(&states[i].w)).map(|r| r.w)
        })
        .collect::<Result<_, _>>()
        .map_err(|source| AdmmError::Subproblem { round: k, source })?;

    // exchange barrier: from here on only round-(k+1) matrices are read
    let ones = Vector::from_element(n, 1.0);
    let next = (0..n)
        .map(|i| {
            let old = &states[i];
            if frozen[i] {
                return AgentState { frozen: true, ..old.clone() };
            }
            let w = &primal[i];
            let a = &old.a + (w * &ones - &ones) * rho;
            let b = &old.b + (w.transpose() * &ones - &ones) * rho;
            let mut m = old.m.clone();
            for j in g.proper_neighbors(i) {
                m += (w - &primal[j]) * (rho / 2.0);
            }
            AgentState { w: w.clone(), a, b, m, frozen: false }
        })
        .collect();
    Ok(next)
}

/// Edge variables of the serial formulation. For the edge `{i, j}` stored
/// under `(min, max)`, `c` multiplies `W_min = X` and `d` multiplies
/// `W_max = X`; `x` is the shared value `X_ij = X_ji`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVariables {
    pub x: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialState {
    pub edges: BTreeMap<(usize, usize), EdgeVariables>,
}

impl SerialState {
    /// Zero variables for every edge, self-loops included.
    pub fn zeros(g: &Graph) -> Self {
        let n = g.len();
        let zero = EdgeVariables { x: Matrix::zeros(n, n), c: Matrix::zeros(n, n), d: Matrix::zeros(n, n) };
        let edges =
            (0..n).flat_map(|i| g.neighbors(i).iter().filter(move |&&j| j >= i).map(move |&j| (i, j))).map(|e| (e, zero.clone())).collect();
        Self { edges }
    }

    fn key(i: usize, j: usize) -> (usize, usize) {
        (i.min(j), i.max(j))
    }

    pub fn x(&self, i: usize, j: usize) -> &Matrix {
        &self.edges[&Self::key(i, j)].x
    }

    /// The multiplier attached to agent `i`'s side of edge `{i, j}`
    /// (`C_ij` in the agent-centric notation).
    pub fn multiplier(&self, i: usize, j: usize) -> &Matrix {
        let vars = &self.edges[&Self::key(i, j)];
        if i <= j {
            &vars.c
        } else {
            &vars.d
        }
    }

    /// `Σ_{j∈N_i} C_ij`, which the parallel engine carries as `M_i`.
    pub fn aggregated_multiplier(&self, i: usize, g: &Graph) -> Matrix {
        let n = g.len();
        g.neighbors(i).iter().fold(Matrix::zeros(n, n), |acc, &j| acc + self.multiplier(i, j))
    }
}

/// One pass of the serial engine. Agents update in index order; each update
/// minimizes the augmented Lagrangian in `W_i` with the edge variables of
/// round `k`. Then `X` takes its closed form and all multipliers step.
pub fn serial_round(
    states: &[AgentState],
    serial: &SerialState,
    g: &Graph,
    cfg: &AdmmConfig,
    k: usize,
) -> Result<(Vec<AgentState>, SerialState), AdmmError> {
    check_sizes(states, g)?;
    let n = g.len();
    let rho = cfg.rho;
    let ones = Vector::from_element(n, 1.0);

    let mut next: Vec<AgentState> = states.to_vec();
    for i in 0..n {
        let inst = PrimalInstance {
            agent: i,
            n,
            neighbors: g.neighbors(i).to_vec(),
            a: states[i].a.clone(),
            b: states[i].b.clone(),
            m: serial.aggregated_multiplier(i, g),
            anchors: g.neighbors(i).iter().map(|&j| serial.x(i, j).clone()).collect(),
            rho,
        };
        let report = solve_primal(&inst, &cfg.solver, Some(&states[i].w))
            .map_err(|source| AdmmError::Subproblem { round: k, source })?;
        next[i].w = report.w;
    }

    let mut updated = serial.clone();
    for (&(i, j), vars) in updated.edges.iter_mut() {
        let (wi, wj) = (&next[i].w, &next[j].w);
        let x = (&vars.c + &vars.d) / (2.0 * rho) + (wi + wj) * 0.5;
        vars.c += (wi - &x) * rho;
        vars.d += (wj - &x) * rho;
        vars.x = x;
    }

    for i in 0..n {
        let w = next[i].w.clone();
        next[i].a += (&w * &ones - &ones) * rho;
        next[i].b += (w.transpose() * &ones - &ones) * rho;
        next[i].m = updated.aggregated_multiplier(i, g);
    }
    Ok((next, updated))
}

/// The augmented Lagrangian of the edge-variable formulation. Self-loop
/// edges contribute a single agreement term, matching the primal update.
pub fn augmented_lagrangian(states: &[AgentState], serial: &SerialState, g: &Graph, rho: f64) -> f64 {
    let n = g.len();
    let ones = Vector::from_element(n, 1.0);
    let j = averaging_matrix(n);
    let mut total = 0.0;
    for s in states {
        let row = &s.w * &ones - &ones;
        let col = s.w.transpose() * &ones - &ones;
        total += operator_norm(&(&s.w - &j)) / n as f64;
        total += s.a.dot(&row) + s.b.dot(&col);
        total += 0.5 * rho * (row.norm_squared() + col.norm_squared());
    }
    for (&(i, k), vars) in &serial.edges {
        let gap_i = &states[i].w - &vars.x;
        total += gap_i.dot(&vars.c) + 0.5 * rho * gap_i.norm_squared();
        if i != k {
            let gap_k = &states[k].w - &vars.x;
            total += gap_k.dot(&vars.d) + 0.5 * rho * gap_k.norm_squared();
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub agent: usize,
    /// `‖W_i(k) − J‖₂`
    pub objective: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub r1: f64,
    pub r2: f64,
    pub max_r3: f64,
}

#[derive(Debug, Clone)]
pub struct AdmmRun {
    pub states: Vec<AgentState>,
    pub rounds_used: usize,
    /// False when `max_outer` ran out before the stopping rule held.
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

impl AdmmRun {
    /// Row `i` of each `W_i`, stacked.
    pub fn assembled(&self, g: &Graph) -> Result<WeightMatrix, WeightError> {
        assemble_from_rows(&own_rows(&self.states), g)
    }

    pub fn final_residuals(&self, g: &Graph) -> Vec<ResidualReport> {
        agent_residuals(&self.states, g)
    }
}

pub fn own_rows(states: &[AgentState]) -> Vec<Vector> {
    states.iter().enumerate().map(|(i, s)| s.w.row(i).transpose()).collect()
}

fn trace_rows(round: usize, states: &[AgentState], reports: &[ResidualReport]) -> Vec<TraceRow> {
    let n = states.len();
    let j = averaging_matrix(n);
    let objectives: Vec<f64> = states.iter().map(|s| operator_norm(&(&s.w - &j))).collect();
    reports.iter().enumerate().map(|(agent, rep)| TraceRow {
        round,
        agent: agent + 1,
        objective: objectives[agent],
        r: rep.max,
        r1: rep.r1,
        r2: rep.r2,
        max_r3: rep.max_r3(),
    }).collect()
}

/// Runs [`parallel_round`] from zero until every agent's residual is at
/// most `epsilon` or `max_outer` rounds have passed.
pub fn run_until_stop(g: &Graph, cfg: &AdmmConfig) -> Result<AdmmRun, AdmmError> {
    if !g.is_connected() {
        return Err(AdmmError::Disconnected);
    }
    let mut states = initial_states(g.len());
    let mut reports = agent_residuals(&states, g);
    let mut trace = trace_rows(0, &states, &reports);
    if stopping_satisfied(&reports, cfg.epsilon) {
        return Ok(AdmmRun { states, rounds_used: 0, converged: true, trace });
    }
    for k in 0..cfg.max_outer {
        states = parallel_round(&states, g, cfg, k)?;
        reports = agent_residuals(&states, g);
        trace.extend(trace_rows(k + 1, &states, &reports));
        if stopping_satisfied(&reports, cfg.epsilon) {
            return Ok(AdmmRun { states, rounds_used: k + 1, converged: true, trace });
        }
    }
    Ok(AdmmRun { states, rounds_used: cfg.max_outer, converged: false, trace })
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("round,agent,objective,R,r1,r2,max_r3\n");
    for row in trace {
        writeln!(
            out,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            row.round, row.agent, row.objective, row.r, row.r1, row.r2, row.max_r3
        )
        .unwrap();
    }
    out
}
