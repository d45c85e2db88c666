//! The linear consensus protocol `x(t+1) = W x(t)`, and the live variant in
//! which the weights are refined by one ADMM round per step while agents may
//! join the network.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{own_rows, parallel_round, AdmmConfig, AdmmError, AgentState};
use crate::graph::{Graph, GraphError};
use crate::spectral::{averaging_matrix, Matrix, Vector};
use crate::weights::{convergence_factor, metropolis, WeightError, WeightMatrix};

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("weight matrix is {rows}x{cols} but the state has {len} entries")]
    DimensionMismatch { rows: usize, cols: usize, len: usize },
    #[error("initial graph is not connected")]
    Disconnected,
    #[error("event at t = {time} would leave the graph disconnected")]
    DisconnectingEvent { time: usize },
    #[error("event times must be strictly increasing (saw {time} after {previous})")]
    UnorderedEvents { time: usize, previous: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error("ADMM round at t = {time}: {source}")]
    Admm {
        time: usize,
        #[source]
        source: AdmmError,
    },
}

/// Values `x(t)` and errors `‖x(t) − x̄‖` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: Vec<Vector>,
    pub error_norms: Vec<f64>,
    /// The average the protocol should reach (the last one, if it changed).
    pub target: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// First `t ≥ from` with `‖e(t)‖ < threshold`.
    pub fn first_crossing(&self, threshold: f64, from: usize) -> Option<usize> {
        first_crossing(&self.error_norms, threshold, from)
    }
}

pub fn first_crossing(error_norms: &[f64], threshold: f64, from: usize) -> Option<usize> {
    error_norms.iter().enumerate().skip(from).find(|(_, &e)| e < threshold).map(|(t, _)| t)
}

pub fn mean(x: &Vector) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.sum() / x.len() as f64
    }
}

fn error_norm(x: &Vector, target: f64) -> f64 {
    x.iter().map(|v| (v - target).powi(2)).sum::<f64>().sqrt()
}

/// Runs `steps` updates with a fixed matrix.
pub fn run_protocol(w: &Matrix, x0: &Vector, steps: usize) -> Result<Trajectory, ConsensusError> {
    if w.nrows() != x0.len() || w.ncols() != x0.len() {
        return Err(ConsensusError::DimensionMismatch { rows: w.nrows(), cols: w.ncols(), len: x0.len() });
    }
    let target = mean(x0);
    let mut values = Vec::with_capacity(steps + 1);
    let mut error_norms = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for t in 0..=steps {
        error_norms.push(error_norm(&x, target));
        if t < steps {
            let next = w * &x;
            values.push(std::mem::replace(&mut x, next));
        } else {
            values.push(x.clone());
        }
    }
    Ok(Trajectory { values, error_norms, target })
}

/// Stacks row `i` of each agent's `W_i`. No feasibility is implied.
pub fn build_hat_w(states: &[AgentState]) -> Matrix {
    let rows = own_rows(states);
    Matrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j])
}

/// Symmetrizes by keeping the smaller of each pair of off-diagonal entries
/// and setting the diagonal so every row sums to one.
pub fn symmetrize_bar_w(hat: &Matrix, g: &Graph) -> Result<WeightMatrix, WeightError> {
    // validates shape and support
    let hat = WeightMatrix::new(hat.clone(), g.clone())?.into_matrix();
    let n = g.len();
    let mut bar = Matrix::zeros(n, n);
    for i in 0..n {
        for j in g.proper_neighbors(i) {
            bar[(i, j)] = hat[(i, j)].min(hat[(j, i)]);
        }
    }
    for i in 0..n {
        let off: f64 = g.proper_neighbors(i).map(|j| bar[(i, j)]).sum();
        bar[(i, i)] = 1.0 - off;
    }
    WeightMatrix::new(bar, g.clone())
}

/// Each agent's matrix holds its Metropolis row and zeros elsewhere; duals
/// start at zero.
pub fn live_initial_states(g: &Graph) -> Result<Vec<AgentState>, WeightError> {
    let wm = metropolis(g)?.into_matrix();
    let n = g.len();
    Ok((0..n)
        .map(|i| {
            let mut state = AgentState::zeros(n);
            state.w.set_row(i, &wm.row(i));
            state
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub value: f64,
    /// 1-based labels of the agents the newcomer links to. Newcomers in the
    /// same event are numbered after the current population in listed order,
    /// so they may link to each other.
    pub attach: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveEvent {
    pub time: usize,
    pub arrivals: Vec<Arrival>,
}

/// One protocol step of a live run.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveStep {
    pub t: usize,
    /// Population at time `t`, after any arrivals at `t`.
    pub n: usize,
    pub x: Vector,
    pub target: f64,
    pub error_norm: f64,
    /// `‖W̄(t) − J‖₂`
    pub cf_bar: f64,
    /// Convergence factor of the Metropolis matrix of the current graph.
    pub cf_metropolis: f64,
    /// `ρ(W̄(t) − J) < 1` is not guaranteed early on; logged only.
    pub bar_spectral_radius: f64,
    pub bar_has_negative_entry: bool,
    /// Largest `|row sum − 1|` of `W̄(t)`.
    pub bar_row_sum_error: f64,
    pub bar_is_symmetric: bool,
}

#[derive(Debug, Clone)]
pub struct LiveRun {
    pub steps: Vec<LiveStep>,
    pub graph: Graph,
    /// Time of the last arrival, 0 without events.
    pub last_event: usize,
}

impl LiveRun {
    pub fn error_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.error_norm).collect()
    }

    /// First `t` at or after the last arrival with `‖e(t)‖ < threshold`.
    pub fn first_crossing(&self, threshold: f64) -> Option<usize> {
        first_crossing(&self.error_norms(), threshold, self.last_event)
    }
}

pub fn live_convergence_factor_trace(run: &LiveRun) -> Vec<f64> {
    run.steps.iter().map(|s| s.cf_bar).collect()
}

/// How the weights of a live run evolve.
enum Weights<'a> {
    Admm(&'a AdmmConfig),
    Metropolis,
}

/// ADMM live: at every `t`, `x(t+1) = W̄(t) x(t)` where `W̄(t)` is the
/// symmetrized stack of the agents' current rows, then every agent does one
/// ADMM round. Arrivals reset all ADMM states to the Metropolis rows of the
/// enlarged graph.
pub fn run_admm_live(
    g0: &Graph,
    x0: &Vector,
    events: &[LiveEvent],
    cfg: &AdmmConfig,
    steps: usize,
) -> Result<LiveRun, ConsensusError> {
    run_live(g0, x0, events, Weights::Admm(cfg), steps)
}

/// The baseline for [`run_admm_live`]: Metropolis weights of the current
/// graph, recomputed after every arrival.
pub fn run_metropolis_live(
    g0: &Graph,
    x0: &Vector,
    events: &[LiveEvent],
    steps: usize,
) -> Result<LiveRun, ConsensusError> {
    run_live(g0, x0, events, Weights::Metropolis, steps)
}

fn run_live(
    g0: &Graph,
    x0: &Vector,
    events: &[LiveEvent],
    weights: Weights<'_>,
    steps: usize,
) -> Result<LiveRun, ConsensusError> {
    if x0.len() != g0.len() {
        return Err(ConsensusError::DimensionMismatch { rows: g0.len(), cols: g0.len(), len: x0.len() });
    }
    if !g0.is_connected() {
        return Err(ConsensusError::Disconnected);
    }
    for pair in events.windows(2) {
        if pair[1].time <= pair[0].time {
            return Err(ConsensusError::UnorderedEvents { time: pair[1].time, previous: pair[0].time });
        }
    }

    let mut g = g0.clone();
    let mut x = x0.clone();
    let mut target = mean(&x);
    let mut wm = metropolis(&g)?;
    let mut cf_metropolis = wm.convergence_factor();
    let mut states = live_initial_states(&g)?;
    let mut pending = events.iter().peekable();
    let mut last_event = 0;
    let mut trace = Vec::with_capacity(steps + 1);

    for t in 0..=steps {
        while let Some(event) = pending.next_if(|e| e.time <= t) {
            if event.arrivals.is_empty() {
                continue;
            }
            let base = g.len();
            let mut pairs = Vec::new();
            for (offset, arrival) in event.arrivals.iter().enumerate() {
                for &other in &arrival.attach {
                    pairs.push((base + offset + 1, other));
                }
            }
            let grown = g.add_agents(event.arrivals.len(), &pairs)?;
            if !grown.is_connected() {
                return Err(ConsensusError::DisconnectingEvent { time: event.time });
            }
            g = grown;
            let values: Vec<f64> = x.iter().copied().chain(event.arrivals.iter().map(|a| a.value)).collect();
            x = Vector::from_vec(values);
            target = mean(&x);
            wm = metropolis(&g)?;
            cf_metropolis = wm.convergence_factor();
            states = live_initial_states(&g)?;
            last_event = t;
        }

        let w = match weights {
            Weights::Admm(_) => symmetrize_bar_w(&build_hat_w(&states), &g)?,
            Weights::Metropolis => wm.clone(),
        };
        let bar = w.matrix();
        let n = g.len();
        let row_sum_error = bar.column_sum().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        trace.push(LiveStep {
            t,
            n,
            x: x.clone(),
            target,
            error_norm: error_norm(&x, target),
            cf_bar: convergence_factor(bar),
            cf_metropolis,
            bar_spectral_radius: crate::spectral::spectral_radius(&(bar - averaging_matrix(n)), 1e-10).value,
            bar_has_negative_entry: bar.iter().any(|&v| v < 0.0),
            bar_row_sum_error: row_sum_error,
            bar_is_symmetric: *bar == bar.transpose(),
        });
        if t == steps {
            break;
        }
        x = bar * &x;
        if let Weights::Admm(cfg) = weights {
            states = parallel_round(&states, &g, cfg, t).map_err(|source| ConsensusError::Admm { time: t, source })?;
        }
    }
    Ok(LiveRun { steps: trace, graph: g, last_event })
}

/// CSV with one line per agent per step.
pub fn live_to_csv(run: &LiveRun) -> String {
    let mut out = String::from("t,agent,value,error_norm,cf_bar,cf_metropolis\n");
    for step in &run.steps {
        for (i, v) in step.x.iter().enumerate() {
            writeln!(
                out,
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
                step.t,
                i + 1,
                v,
                step.error_norm,
                step.cf_bar,
                step.cf_metropolis
            )
            .unwrap();
        }
    }
    out
}

/// CSV of a fixed-matrix trajectory, same columns as [`live_to_csv`] with
/// the factor repeated.
pub fn trajectory_to_csv(traj: &Trajectory, cf: f64, cf_metropolis: f64) -> String {
    let mut out = String::from("t,agent,value,error_norm,cf_bar,cf_metropolis\n");
    for (t, (x, e)) in traj.values.iter().zip(&traj.error_norms).enumerate() {
        for (i, v) in x.iter().enumerate() {
            writeln!(out, "{},{},{:.17e},{:.17e},{:.17e},{:.17e}", t, i + 1, v, e, cf, cf_metropolis).unwrap();
        }
    }
    out
}
