//! Experiment runner: fixed-network comparison, live arrivals, and the
//! random-graph sweep. Everything is a pure function of the
//! [`ExperimentSpec`]; outputs are returned as in-memory artifacts so callers
//! decide where they go.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{run_until_stop, trace_to_csv, AdmmConfig, AdmmError};
use crate::centralized::{solve_p2, CentralError};
use crate::consensus::{
    live_to_csv, run_admm_live, run_metropolis_live, run_protocol, symmetrize_bar_w, trajectory_to_csv,
    ConsensusError, LiveEvent,
};
use crate::graph::{Graph, GraphError};
use crate::spectral::Vector;
use crate::weights::{check_consensus_condition, matrix_to_csv, metropolis, WeightError};

/// Error level at which a trajectory counts as having reached consensus.
pub const CROSSING_THRESHOLD: f64 = 0.1;

/// Contextual values from a published six-agent instance whose edge list is
/// not available; shown for orientation only.
pub const REFERENCE_NOTE: &str =
    "reference six-agent instance (edge list unavailable, not reproduced): cf(W*) = 0.4492, cf(W_M) = 0.6724, cf(W_admm) = 0.4519";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Central(#[from] CentralError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("initial values have {got} entries for {expected} agents")]
    InitialValues { expected: usize, got: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Fixed,
    Live,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GraphSource {
    /// 1-based edge list.
    Edges { n: usize, edges: Vec<(usize, usize)> },
    ErdosRenyi { n: usize, p: f64, seed: u64 },
    Complete { n: usize },
    Path { n: usize },
    Cycle { n: usize },
}

impl GraphSource {
    pub fn build(&self) -> Result<Graph, GraphError> {
        match *self {
            GraphSource::Edges { n, ref edges } => Graph::from_edge_list(n, edges),
            GraphSource::ErdosRenyi { n, p, seed } => Graph::er_random(n, p, seed),
            GraphSource::Complete { n } => Ok(Graph::complete(n)),
            GraphSource::Path { n } => Ok(Graph::path(n)),
            GraphSource::Cycle { n } => Ok(Graph::cycle(n)),
        }
    }

    pub fn from_graph(g: &Graph) -> Self {
        GraphSource::Edges { n: g.len(), edges: g.edge_pairs() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialValues {
    Explicit { values: Vec<f64> },
    /// Uniform draws from `[low, high)` seeded by the spec seed.
    Uniform { low: f64, high: f64 },
}

impl InitialValues {
    pub fn build(&self, n: usize, seed: u64) -> Result<Vector, HarnessError> {
        match self {
            InitialValues::Explicit { values } => {
                if values.len() != n {
                    return Err(HarnessError::InitialValues { expected: n, got: values.len() });
                }
                Ok(Vector::from_vec(values.clone()))
            }
            InitialValues::Uniform { low, high } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(Vector::from_fn(n, |_, _| rng.gen_range(*low..*high)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n: usize,
    pub p_values: Vec<f64>,
    pub repetitions: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { n: 10, p_values: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9], repetitions: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub graph: GraphSource,
    pub cfg: AdmmConfig,
    pub x0: InitialValues,
    pub events: Vec<LiveEvent>,
    pub sweep: SweepGrid,
    pub seed: u64,
    /// Protocol steps simulated.
    pub horizon: usize,
    /// Tolerance of the centralized reference.
    pub central_tol: f64,
}

impl ExperimentSpec {
    pub fn fixed(graph: GraphSource) -> Self {
        Self {
            kind: ExperimentKind::Fixed,
            graph,
            cfg: AdmmConfig::default(),
            x0: InitialValues::Uniform { low: 0.0, high: 100.0 },
            events: Vec::new(),
            sweep: SweepGrid::default(),
            seed: 0,
            horizon: 500,
            central_tol: 1e-8,
        }
    }

    pub fn live(graph: GraphSource, events: Vec<LiveEvent>) -> Self {
        Self { kind: ExperimentKind::Live, events, horizon: 150, ..Self::fixed(graph) }
    }

    pub fn sweep(grid: SweepGrid) -> Self {
        Self {
            kind: ExperimentKind::Sweep,
            cfg: AdmmConfig { epsilon: 1e-2, ..AdmmConfig::default() },
            sweep: grid,
            ..Self::fixed(GraphSource::Complete { n: 1 })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub central: f64,
    pub metropolis: f64,
    pub admm: f64,
}

/// Outcome of the consensus-condition check on one reported matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub passes: bool,
    pub row_residual: f64,
    pub col_residual: f64,
    pub spectral_radius: f64,
}

impl ConditionSummary {
    fn of(w: &crate::spectral::Matrix, tol: f64) -> Self {
        let r = check_consensus_condition(w, tol);
        Self { passes: r.passes(), row_residual: r.row_residual, col_residual: r.col_residual, spectral_radius: r.rho_value }
    }
}

/// A file produced by an experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedReport {
    pub spec: ExperimentSpec,
    pub factors: Factors,
    pub stop_round: usize,
    pub admm_converged: bool,
    /// First `t` with `‖e(t)‖ < 0.1` under each matrix.
    pub crossings: BTreeMap<String, Option<usize>>,
    pub trace_files: Vec<String>,
    /// The stacked ADMM rows are only feasible up to the stopping tolerance;
    /// their min-symmetrization is exactly feasible.
    pub admm_symmetrized_factor: f64,
    pub conditions: BTreeMap<String, ConditionSummary>,
    pub reference: String,
    #[serde(skip)]
    pub artifacts: Vec<Artifact>,
}

/// Tolerance for the consensus check of exactly feasible matrices.
const FEASIBLE_CHECK_TOL: f64 = 1e-9;

fn connected_graph(spec: &ExperimentSpec) -> Result<Graph, HarnessError> {
    let g = spec.graph.build()?;
    g.require_connected()?;
    Ok(g)
}

pub fn run_fixed(spec: &ExperimentSpec) -> Result<FixedReport, HarnessError> {
    let g = connected_graph(spec)?;
    let n = g.len();
    let x0 = spec.x0.build(n, spec.seed)?;

    let central = solve_p2(&g, spec.central_tol)?;
    let wm = metropolis(&g)?;
    let run = run_until_stop(&g, &spec.cfg)?;
    let admm = run.assembled(&g)?;
    let symmetrized = symmetrize_bar_w(admm.matrix(), &g)?;

    let factors = Factors {
        central: central.factor,
        metropolis: wm.convergence_factor(),
        admm: admm.convergence_factor(),
    };
    let matrices = [("central", central.w_star.matrix()), ("metropolis", wm.matrix()), ("admm", admm.matrix())];

    let mut crossings = BTreeMap::new();
    let mut conditions = BTreeMap::new();
    let mut artifacts = vec![Artifact { name: "admm_trace.csv".into(), contents: trace_to_csv(&run.trace) }];
    for (name, w) in matrices {
        let traj = run_protocol(w, &x0, spec.horizon)?;
        crossings.insert(name.to_string(), traj.first_crossing(CROSSING_THRESHOLD, 0));
        let cf = crate::weights::convergence_factor(w);
        artifacts.push(Artifact { name: format!("trajectory_{name}.csv"), contents: trajectory_to_csv(&traj, cf, factors.metropolis) });
        artifacts.push(Artifact { name: format!("w_{name}.csv"), contents: matrix_to_csv(w) });
        conditions.insert(name.to_string(), ConditionSummary::of(w, FEASIBLE_CHECK_TOL));
    }
    conditions.insert("admm_symmetrized".into(), ConditionSummary::of(symmetrized.matrix(), FEASIBLE_CHECK_TOL));

    Ok(FixedReport {
        spec: spec.clone(),
        factors,
        stop_round: run.rounds_used,
        admm_converged: run.converged,
        crossings,
        trace_files: artifacts.iter().map(|a| a.name.clone()).collect(),
        admm_symmetrized_factor: symmetrized.convergence_factor(),
        conditions,
        reference: REFERENCE_NOTE.into(),
        artifacts,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LiveReport {
    pub spec: ExperimentSpec,
    /// Factors on the final graph; `admm` is `‖W̄(T) − J‖`.
    pub factors: Factors,
    pub stop_round: Option<usize>,
    /// First `t` at or after the last arrival with `‖e(t)‖ < 0.1`.
    pub crossings: BTreeMap<String, Option<usize>>,
    pub trace_files: Vec<String>,
    pub final_errors: BTreeMap<String, f64>,
    /// First `t` after the last arrival at which `W̄(t)` beats Metropolis.
    pub first_step_below_metropolis: Option<usize>,
    /// Steps where `W̄(t)` had a negative entry.
    pub steps_with_negative_weights: usize,
    /// Steps where `ρ(W̄(t) − J) ≥ 1`.
    pub steps_without_contraction: usize,
    pub max_row_sum_error: f64,
    pub all_symmetric: bool,
    #[serde(skip)]
    pub artifacts: Vec<Artifact>,
}

pub fn run_live(spec: &ExperimentSpec) -> Result<LiveReport, HarnessError> {
    let g = connected_graph(spec)?;
    let x0 = spec.x0.build(g.len(), spec.seed)?;
    let live = run_admm_live(&g, &x0, &spec.events, &spec.cfg, spec.horizon)?;
    let baseline = run_metropolis_live(&g, &x0, &spec.events, spec.horizon)?;

    let final_graph = &live.graph;
    let central = solve_p2(final_graph, spec.central_tol)?;
    let last = live.steps.last().expect("a live run records t = 0");
    let factors = Factors { central: central.factor, metropolis: last.cf_metropolis, admm: last.cf_bar };

    let mut crossings = BTreeMap::new();
    crossings.insert("admm_live".to_string(), live.first_crossing(CROSSING_THRESHOLD));
    crossings.insert("metropolis".to_string(), baseline.first_crossing(CROSSING_THRESHOLD));
    let mut final_errors = BTreeMap::new();
    final_errors.insert("admm_live".to_string(), last.error_norm);
    final_errors.insert("metropolis".to_string(), baseline.steps.last().map(|s| s.error_norm).unwrap_or(0.0));

    let artifacts = vec![
        Artifact { name: "live_admm.csv".into(), contents: live_to_csv(&live) },
        Artifact { name: "live_metropolis.csv".into(), contents: live_to_csv(&baseline) },
    ];
    Ok(LiveReport {
        spec: spec.clone(),
        factors,
        stop_round: None,
        crossings,
        trace_files: artifacts.iter().map(|a| a.name.clone()).collect(),
        final_errors,
        first_step_below_metropolis: live
            .steps
            .iter()
            .find(|s| s.t > live.last_event && s.cf_bar < s.cf_metropolis)
            .map(|s| s.t),
        steps_with_negative_weights: live.steps.iter().filter(|s| s.bar_has_negative_entry).count(),
        steps_without_contraction: live.steps.iter().filter(|s| s.bar_spectral_radius >= 1.0).count(),
        max_row_sum_error: live.steps.iter().map(|s| s.bar_row_sum_error).fold(0.0, f64::max),
        all_symmetric: live.steps.iter().all(|s| s.bar_is_symmetric),
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSample {
    pub seed: u64,
    pub rounds: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub p: f64,
    pub mean_rounds: f64,
    /// Disconnected draws that were replaced.
    pub redraws: usize,
    pub samples: Vec<SweepSample>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub spec: ExperimentSpec,
    pub rows: Vec<SweepRow>,
    pub trace_files: Vec<String>,
    #[serde(skip)]
    pub artifacts: Vec<Artifact>,
}

/// Draws `count` connected graphs, incrementing the seed past disconnected
/// draws. Returns the graphs with their seeds and the number of redraws.
pub fn connected_draws(n: usize, p: f64, first_seed: u64, count: usize) -> Result<(Vec<(u64, Graph)>, usize), GraphError> {
    let mut out = Vec::with_capacity(count);
    let mut redraws = 0;
    let mut seed = first_seed;
    while out.len() < count {
        let g = Graph::er_random(n, p, seed)?;
        if g.is_connected() {
            out.push((seed, g));
        } else {
            redraws += 1;
        }
        seed += 1;
    }
    Ok((out, redraws))
}

pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepReport, HarnessError> {
    let grid = &spec.sweep;
    let mut cells = Vec::with_capacity(grid.p_values.len());
    for &p in &grid.p_values {
        cells.push((p, connected_draws(grid.n, p, spec.seed, grid.repetitions)?));
    }
    let jobs: Vec<(usize, u64, &Graph)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, (_, (draws, _)))| draws.iter().map(move |(seed, g)| (c, *seed, g)))
        .collect();
    let results: Vec<(usize, SweepSample)> = jobs
        .par_iter()
        .map(|&(c, seed, g)| {
            run_until_stop(g, &spec.cfg).map(|run| (c, SweepSample { seed, rounds: run.rounds_used, converged: run.converged }))
        })
        .collect::<Result<_, _>>()?;

    let rows: Vec<SweepRow> = cells
        .iter()
        .enumerate()
        .map(|(c, (p, (_, redraws)))| {
            let samples: Vec<SweepSample> = results.iter().filter(|(cell, _)| *cell == c).map(|(_, s)| s.clone()).collect();
            let mean_rounds = if samples.is_empty() {
                0.0
            } else {
                samples.iter().map(|s| s.rounds as f64).sum::<f64>() / samples.len() as f64
            };
            SweepRow { p: *p, mean_rounds, redraws: *redraws, samples }
        })
        .collect();

    let artifacts = vec![Artifact { name: "sweep.csv".into(), contents: sweep_to_csv(&rows) }];
    Ok(SweepReport { spec: spec.clone(), rows, trace_files: artifacts.iter().map(|a| a.name.clone()).collect(), artifacts })
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,seed,rounds,converged\n");
    for row in rows {
        for s in &row.samples {
            writeln!(out, "{},{},{},{}", row.p, s.seed, s.rounds, s.converged).unwrap();
        }
    }
    out
}

/// Writes artifacts into `dir`, creating it if needed.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<(), HarnessError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for a in artifacts {
        let path = dir.join(&a.name);
        fs::write(&path, &a.contents).map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_graph_factors_vanish() {
        let report = run_fixed(&ExperimentSpec::fixed(GraphSource::Complete { n: 6 })).unwrap();
        assert!(report.factors.central < 1e-7);
        assert!(report.factors.metropolis < 1e-12);
        assert!(report.factors.admm < 1e-2);
        assert!(report.conditions["central"].passes && report.conditions["metropolis"].passes);
        assert!(report.trace_files.contains(&"admm_trace.csv".to_string()));
    }

    #[test]
    fn fixed_run_is_deterministic() {
        let spec = ExperimentSpec::fixed(GraphSource::Cycle { n: 5 });
        let a = run_fixed(&spec).unwrap();
        let b = run_fixed(&spec).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let spec = ExperimentSpec::fixed(GraphSource::Edges { n: 3, edges: vec![(1, 2)] });
        assert!(matches!(run_fixed(&spec), Err(HarnessError::Graph(GraphError::Disconnected))));
    }

    #[test]
    fn wrong_length_initial_values() {
        let mut spec = ExperimentSpec::fixed(GraphSource::Path { n: 3 });
        spec.x0 = InitialValues::Explicit { values: vec![1.0] };
        assert!(matches!(run_fixed(&spec), Err(HarnessError::InitialValues { expected: 3, got: 1 })));
    }

    #[test]
    fn live_on_complete_graph_is_immediate() {
        let mut spec = ExperimentSpec::live(GraphSource::Complete { n: 4 }, vec![]);
        spec.x0 = InitialValues::Explicit { values: vec![1.0, 2.0, 3.0, 10.0] };
        spec.horizon = 10;
        let report = run_live(&spec).unwrap();
        assert!(report.crossings["metropolis"].unwrap() <= 2);
        assert!(report.crossings["admm_live"].unwrap() <= 2);
    }

    #[test]
    fn zero_horizon_live() {
        let mut spec = ExperimentSpec::live(GraphSource::Cycle { n: 4 }, vec![]);
        spec.horizon = 0;
        let report = run_live(&spec).unwrap();
        assert!(report.all_symmetric);
    }

    #[test]
    fn redraws_are_counted() {
        let (draws, redraws) = connected_draws(8, 0.2, 0, 3).unwrap();
        assert_eq!(draws.len(), 3);
        assert!(draws.iter().all(|(_, g)| g.is_connected()));
        let last_seed = draws.last().unwrap().0;
        assert_eq!(last_seed as usize + 1, 3 + redraws);
    }

    #[test]
    fn sweep_single_repetition_is_reproducible() {
        let spec = ExperimentSpec::sweep(SweepGrid { n: 6, p_values: vec![0.8], repetitions: 1 });
        let a = run_sweep(&spec).unwrap();
        let b = run_sweep(&spec).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.artifacts, b.artifacts);
    }
}
