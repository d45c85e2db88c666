//! `fastavg` command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fastavg::admm::{run_until_stop, trace_to_csv, AdmmConfig};
use fastavg::centralized::solve_p2;
use fastavg::consensus::{Arrival, LiveEvent};
use fastavg::harness::{
    run_fixed, run_live, run_sweep, write_artifacts, Artifact, ExperimentSpec, GraphSource, InitialValues, SweepGrid,
};
use fastavg::weights::{matrix_to_csv, metropolis};
use fastavg::Graph;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fastavg", version, about = "Optimal average-consensus weights by distributed ADMM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Centralized optimum of the weight problem.
    SolveCentral(Common),
    /// Distributed ADMM until the stopping rule holds.
    RunAdmm(Common),
    /// Compare optimal, Metropolis and ADMM weights on one graph.
    RunFixed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        values: Values,
    },
    /// ADMM live with optional arrivals, against a Metropolis baseline.
    RunLive {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        values: Values,
        /// Arrival `TIME:VALUE:A+B+...` (1-based attachment labels; agents
        /// arriving at the same time are numbered in the order given).
        #[arg(long = "arrive")]
        arrivals: Vec<String>,
    },
    /// Stop-round statistics over random graphs.
    RunSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Comma-separated edge probabilities.
        #[arg(long, default_value = "0.4,0.5,0.6,0.7,0.8,0.9")]
        p: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Metropolis weights of a graph.
    Metropolis(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Edge-list file: first line `n`, then one `i j` pair per line.
    #[arg(long, conflicts_with = "er")]
    graph: Option<PathBuf>,
    /// Random graph `n,p,seed`.
    #[arg(long)]
    er: Option<String>,
    #[arg(long, default_value_t = 1.0 / 16.0)]
    rho: f64,
    /// Stopping tolerance; defaults to 1e-3, or 1e-2 for sweeps.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Tolerance of the centralized solver.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_outer: usize,
}

#[derive(Args, Clone)]
struct Values {
    /// Comma-separated initial values; uniform on [0, 100) from `--seed` if absent.
    #[arg(long)]
    x0: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Common {
    fn graph_source(&self) -> Result<GraphSource> {
        match (&self.graph, &self.er) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(GraphSource::from_graph(&Graph::parse(&text)?))
            }
            (None, Some(spec)) => {
                let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    bail!("--er expects n,p,seed");
                }
                Ok(GraphSource::ErdosRenyi { n: parts[0].parse()?, p: parts[1].parse()?, seed: parts[2].parse()? })
            }
            (None, None) => bail!("one of --graph or --er is required"),
        }
    }

    fn admm_config(&self, default_eps: f64) -> AdmmConfig {
        AdmmConfig {
            rho: self.rho,
            epsilon: self.eps.unwrap_or(default_eps),
            max_outer: self.max_outer,
            ..AdmmConfig::default()
        }
    }

    fn spec(&self, mut spec: ExperimentSpec, default_eps: f64) -> ExperimentSpec {
        spec.cfg = self.admm_config(default_eps);
        spec.seed = self.seed;
        spec.central_tol = self.tol;
        spec
    }
}

impl Values {
    fn apply(&self, spec: &mut ExperimentSpec) -> Result<()> {
        if let Some(text) = &self.x0 {
            let values = parse_list(text)?;
            spec.x0 = InitialValues::Explicit { values };
        }
        if let Some(h) = self.horizon {
            spec.horizon = h;
        }
        Ok(())
    }
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',').map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number {s:?}"))).collect()
}

fn parse_arrivals(items: &[String]) -> Result<Vec<LiveEvent>> {
    let mut by_time: BTreeMap<usize, Vec<Arrival>> = BTreeMap::new();
    for item in items {
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() != 3 {
            bail!("--arrive expects TIME:VALUE:A+B, got {item:?}");
        }
        let attach = parts[2]
            .split('+')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad label {s:?}")))
            .collect::<Result<_>>()?;
        by_time.entry(parts[0].parse()?).or_default().push(Arrival { value: parts[1].parse()?, attach });
    }
    Ok(by_time.into_iter().map(|(time, arrivals)| LiveEvent { time, arrivals }).collect())
}

/// Prints `value` as pretty JSON or as flattened `key,value` lines.
fn emit<T: Serialize>(value: &T, format: Format) -> Result<String> {
    let json = serde_json::to_value(value)?;
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(&json)? + "\n",
        Format::Csv => {
            let mut out = String::from("key,value\n");
            flatten("", &json, &mut out);
            out
        }
    })
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix},\"{}\"\n", s.replace('"', "\"\""))),
        other => out.push_str(&format!("{prefix},{other}\n")),
    }
}

fn finish<T: Serialize>(report: &T, artifacts: Vec<Artifact>, common: &Common) -> Result<()> {
    let rendered = emit(report, common.format)?;
    if let Some(dir) = &common.out {
        write_artifacts(dir, &artifacts)?;
        let name = match common.format {
            Format::Json => "report.json",
            Format::Csv => "report.csv",
        };
        fs::write(Path::new(dir).join(name), &rendered).with_context(|| format!("writing into {}", dir.display()))?;
    }
    print!("{rendered}");
    Ok(())
}

#[derive(Serialize)]
struct CentralSummary {
    graph: GraphSource,
    factor: f64,
    certificate: f64,
    iterations: usize,
    trace_files: Vec<String>,
}

#[derive(Serialize)]
struct AdmmSummary {
    graph: GraphSource,
    cfg: AdmmConfig,
    stop_round: usize,
    converged: bool,
    factor: f64,
    trace_files: Vec<String>,
}

#[derive(Serialize)]
struct MetropolisSummary {
    graph: GraphSource,
    factor: f64,
    trace_files: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SolveCentral(common) => {
            let source = common.graph_source()?;
            let g = source.build()?;
            let sol = solve_p2(&g, common.tol)?;
            let artifacts = vec![Artifact { name: "w_star.csv".into(), contents: sol.w_star.to_csv() }];
            let summary = CentralSummary {
                graph: source,
                factor: sol.factor,
                certificate: sol.certificate,
                iterations: sol.iterations,
                trace_files: artifacts.iter().map(|a| a.name.clone()).collect(),
            };
            finish(&summary, artifacts, &common)
        }
        Command::RunAdmm(common) => {
            let source = common.graph_source()?;
            let g = source.build()?;
            let cfg = common.admm_config(1e-3);
            let run = run_until_stop(&g, &cfg)?;
            let w = run.assembled(&g)?;
            let artifacts = vec![
                Artifact { name: "admm_trace.csv".into(), contents: trace_to_csv(&run.trace) },
                Artifact { name: "w_admm.csv".into(), contents: matrix_to_csv(w.matrix()) },
            ];
            let summary = AdmmSummary {
                graph: source,
                cfg,
                stop_round: run.rounds_used,
                converged: run.converged,
                factor: w.convergence_factor(),
                trace_files: artifacts.iter().map(|a| a.name.clone()).collect(),
            };
            finish(&summary, artifacts, &common)
        }
        Command::RunFixed { common, values } => {
            let mut spec = common.spec(ExperimentSpec::fixed(common.graph_source()?), 1e-3);
            values.apply(&mut spec)?;
            let report = run_fixed(&spec)?;
            let artifacts = report.artifacts.clone();
            finish(&report, artifacts, &common)
        }
        Command::RunLive { common, values, arrivals } => {
            let events = parse_arrivals(&arrivals)?;
            let mut spec = common.spec(ExperimentSpec::live(common.graph_source()?, events), 1e-3);
            values.apply(&mut spec)?;
            let report = run_live(&spec)?;
            let artifacts = report.artifacts.clone();
            finish(&report, artifacts, &common)
        }
        Command::RunSweep { common, n, p, reps } => {
            let grid = SweepGrid { n, p_values: parse_list(&p)?, repetitions: reps };
            let spec = common.spec(ExperimentSpec::sweep(grid), 1e-2);
            let report = run_sweep(&spec)?;
            let artifacts = report.artifacts.clone();
            finish(&report, artifacts, &common)
        }
        Command::Metropolis(common) => {
            let source = common.graph_source()?;
            let w = metropolis(&source.build()?)?;
            let artifacts = vec![Artifact { name: "w_metropolis.csv".into(), contents: w.to_csv() }];
            let summary = MetropolisSummary {
                graph: source,
                factor: w.convergence_factor(),
                trace_files: artifacts.iter().map(|a| a.name.clone()).collect(),
            };
            finish(&summary, artifacts, &common)
        }
    }
}

fn main() -> Result<()> {
    run(Cli::parse())
}
