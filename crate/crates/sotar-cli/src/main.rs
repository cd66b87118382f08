//! Command-line front end binding the solver, curve extraction, trip
//! simulation, and kernel dumps into reproducible runs.
//!
//! Every command writes its artifacts into one output directory along
//! with a manifest recording the full configuration and a SHA-256 hash
//! per output file. Runs are deterministic: the same flags, seed, and
//! inputs produce byte-identical files.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sotar::evaluation::{
    extract_curve, policy_switches, simulate_trips, FailureEvent, FailureSpec, ReplanMode,
    TripStart,
};
use sotar::network::{benchmark_grid, load_network, Link};
use sotar::reliability::{
    default_max_iter, load_solution, query, save_solution, solve_classic, solve_robust, Solution,
    DEFAULT_EPSILON,
};
use sotar::{KernelStore, LinkParams, Network, RobustnessWeights, TimeGrid};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sotar",
    version,
    about = "Reliability-optimal and robust routing on stochastic networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve arrival-probability tables for each weight vector and dump
    /// the solutions with their convergence logs.
    Solve(SolveArgs),
    /// Extract reliability and policy curves for one edge state from
    /// previously dumped solutions.
    Curves(CurvesArgs),
    /// Simulate trips under a previously dumped policy.
    Simulate(SimulateArgs),
    /// Write one conditional kernel as CSV, row per upstream cell.
    DumpKernel(DumpKernelArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Network source: the builtin "benchmark" grid or a JSON file path.
    #[arg(long, default_value = "benchmark")]
    network: String,
    /// Time grid step, in time units.
    #[arg(long, default_value_t = 0.5)]
    dt: f64,
    /// Time grid horizon; must be a multiple of the step.
    #[arg(long, default_value_t = 80.0)]
    horizon: f64,
    /// Robustness weights: a comma-separated vector ("0.9,0.1") or a
    /// single leading weight ("0.9") spread over the out-degree.
    /// Repeatable; defaults to the sweep 1, 0.9, 0.8, 0.7.
    #[arg(long = "psi")]
    psi: Vec<String>,
    /// Convergence tolerance on the sup-norm residual.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Sweep cap; defaults to four sweeps per node.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Seed for the simulation random streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; the SOTAR_OUT environment variable overrides
    /// this flag when set.
    #[arg(long, default_value = "out")]
    out: String,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CurvesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Edge state to trace, as "tail,head".
    #[arg(long)]
    edge: String,
    /// Realized travel time on the upstream link.
    #[arg(long, default_value_t = 9.0)]
    y: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Start the trips at a node with no history.
    #[arg(long, conflicts_with = "edge")]
    origin: Option<u32>,
    /// Start the trips on this edge, as "tail,head", with --y realized.
    #[arg(long)]
    edge: Option<String>,
    /// Realized upstream travel time for an --edge start.
    #[arg(long, default_value_t = 9.0)]
    y: f64,
    /// Time budget for on-time arrival.
    #[arg(long)]
    budget: f64,
    /// Number of independent trips.
    #[arg(long, default_value_t = 10_000)]
    trips: u64,
    /// Link failure event, as "tail,head@time". Repeatable.
    #[arg(long = "fail")]
    fail: Vec<String>,
    /// How trips respond to a failed link.
    #[arg(long, value_enum, default_value_t = ReplanArg::Nextbest)]
    replan: ReplanArg,
}

#[derive(Args)]
struct DumpKernelArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// "tail,head" for a trip-start kernel, or "k,i,j" for the kernel of
    /// the pair (k,i) -> (i,j).
    #[arg(long)]
    edge: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReplanArg {
    Subgraph,
    Nextbest,
}

impl From<ReplanArg> for ReplanMode {
    fn from(arg: ReplanArg) -> ReplanMode {
        match arg {
            ReplanArg::Subgraph => ReplanMode::Subgraph,
            ReplanArg::Nextbest => ReplanMode::NextBest,
        }
    }
}

/// Everything a run depended on, as recorded in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    command: String,
    network: String,
    dt: f64,
    horizon: f64,
    psi: Vec<String>,
    epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_iter: Option<usize>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trips: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fail: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    replan: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    outputs: Vec<OutputEntry>,
}

#[derive(Serialize, Deserialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

impl CommonArgs {
    fn psi_list(&self) -> Vec<String> {
        if self.psi.is_empty() {
            ["1", "0.9", "0.8", "0.7"].map(String::from).to_vec()
        } else {
            self.psi.clone()
        }
    }

    fn config(&self, command: &str) -> RunConfig {
        RunConfig {
            command: command.to_string(),
            network: self.network.clone(),
            dt: self.dt,
            horizon: self.horizon,
            psi: self.psi_list(),
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            seed: self.seed,
            edge: None,
            y: None,
            origin: None,
            budget: None,
            trips: None,
            fail: None,
            replan: None,
        }
    }

    fn out_dir(&self) -> PathBuf {
        match std::env::var("SOTAR_OUT") {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&self.out),
        }
    }

    fn load_network(&self) -> Result<(Network, LinkParams), String> {
        if self.network == "benchmark" {
            Ok(benchmark_grid())
        } else {
            load_network(Path::new(&self.network)).map_err(|e| e.to_string())
        }
    }

    fn grid(&self) -> Result<TimeGrid, String> {
        TimeGrid::new(self.dt, self.horizon).map_err(|e| e.to_string())
    }
}

/// Output directory handle that hashes every file it writes, so the
/// closing manifest can record all of them.
struct RunOutputs {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl RunOutputs {
    fn create(dir: PathBuf) -> Result<Self, String> {
        fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        Ok(Self {
            dir,
            entries: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), String> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        self.entries.push(OutputEntry {
            path: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    /// Hashes a file another layer already wrote into the directory.
    fn note(&mut self, name: &str) -> Result<(), String> {
        let path = self.path(name);
        let bytes =
            fs::read(&path).map_err(|e| format!("cannot read back {}: {e}", path.display()))?;
        self.entries.push(OutputEntry {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn finish(mut self, config: RunConfig) -> Result<(), String> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let name = format!("manifest_{}.json", config.command);
        let manifest = Manifest {
            config,
            outputs: self.entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
        let path = self.dir.join(name);
        fs::write(&path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(64), |mut hex, byte| {
            let _ = write!(hex, "{byte:02x}");
            hex
        })
}

fn parse_ids(text: &str) -> Result<Vec<u32>, String> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map_err(|_| format!("bad node id {part:?} in {text:?}"))
        })
        .collect()
}

fn parse_edge(text: &str) -> Result<Link, String> {
    match parse_ids(text)?.as_slice() {
        &[tail, head] => Ok((tail, head)),
        _ => Err(format!("expected \"tail,head\", got {text:?}")),
    }
}

/// A comma-separated vector is taken verbatim; a single number is the
/// leading weight, with the remainder spread evenly.
fn parse_psi(text: &str, lambda: usize) -> Result<RobustnessWeights, String> {
    let values: Vec<f64> = text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad weight {part:?} in {text:?}"))
        })
        .collect::<Result<_, _>>()?;
    if values.len() == 1 {
        RobustnessWeights::from_leading(values[0], lambda)
    } else if values.len() == lambda {
        RobustnessWeights::new(values)
    } else {
        return Err(format!(
            "weight vector {text:?} has {} entries but the network needs {lambda}",
            values.len()
        ));
    }
    .map_err(|e| format!("psi {text:?}: {e}"))
}

fn psi_label(text: &str) -> String {
    text.replace(',', "_").replace(char::is_whitespace, "")
}

fn parse_failure(text: &str) -> Result<FailureEvent, String> {
    let (link_part, at_part) = text
        .split_once('@')
        .ok_or_else(|| format!("expected \"tail,head@time\", got {text:?}"))?;
    let at = at_part
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("bad failure time {at_part:?} in {text:?}"))?;
    Ok(FailureEvent {
        link: parse_edge(link_part)?,
        at,
    })
}

fn solution_name(label: &str) -> String {
    format!("solution_psi_{label}.json")
}

/// Loads one dumped solution and checks it was solved on the grid the
/// current flags describe.
fn load_dump(
    outputs: &RunOutputs,
    label: &str,
    common: &CommonArgs,
) -> Result<(Solution, LinkParams), String> {
    let path = outputs.path(&solution_name(label));
    let (sol, params) = load_solution(&path).map_err(|e| e.to_string())?;
    let grid = sol.grid();
    if grid.step() != common.dt || grid.horizon() != common.horizon {
        return Err(format!(
            "{} was solved on a {} x {} grid, not {} x {}",
            path.display(),
            grid.step(),
            grid.horizon(),
            common.dt,
            common.horizon,
        ));
    }
    Ok((sol, params))
}

fn fmt_successor(successor: Option<u32>) -> String {
    successor.map(|s| s.to_string()).unwrap_or_default()
}

fn cmd_solve(args: SolveArgs) -> Result<i32, String> {
    let common = &args.common;
    let (net, params) = common.load_network()?;
    let grid = common.grid()?;
    let lambda = net.max_out_degree();
    let specs = common.psi_list();
    let weights = specs
        .iter()
        .map(|spec| parse_psi(spec, lambda))
        .collect::<Result<Vec<_>, _>>()?;
    let kernels = KernelStore::build(&net, &params, &grid).map_err(|e| e.to_string())?;
    let max_iter = common.max_iter.unwrap_or_else(|| default_max_iter(&net));
    let mut outputs = RunOutputs::create(common.out_dir())?;
    let mut all_converged = true;
    for (spec, w) in specs.iter().zip(&weights) {
        let sol = if w.is_classic() {
            solve_classic(&net, &kernels, grid, common.epsilon, max_iter)
        } else {
            solve_robust(&net, &kernels, grid, w, common.epsilon, max_iter)
        }
        .map_err(|e| e.to_string())?;
        if !sol.converged() {
            eprintln!("psi {spec}: residual above epsilon after {max_iter} sweeps");
            all_converged = false;
        }
        let label = psi_label(spec);
        save_solution(&outputs.path(&solution_name(&label)), &sol, &params)
            .map_err(|e| e.to_string())?;
        outputs.note(&solution_name(&label))?;
        let mut log = String::from("iter,residual\n");
        for (sweep, residual) in sol.residuals().iter().enumerate() {
            let _ = writeln!(log, "{},{}", sweep + 1, residual);
        }
        outputs.write(&format!("convergence_psi_{label}.csv"), &log)?;
    }
    outputs.finish(common.config("solve"))?;
    Ok(if all_converged { 0 } else { 2 })
}

fn cmd_curves(args: CurvesArgs) -> Result<i32, String> {
    let common = &args.common;
    let edge = parse_edge(&args.edge)?;
    let mut outputs = RunOutputs::create(common.out_dir())?;
    let mut summary = String::from("psi,switch_count,thresholds\n");
    for spec in common.psi_list() {
        let label = psi_label(&spec);
        let (sol, _) = load_dump(&outputs, &label, common)?;
        let curve = extract_curve(&sol, edge, args.y).map_err(|e| e.to_string())?;
        let mut csv = String::from("t,u,successor\n");
        for point in &curve {
            let _ = writeln!(
                csv,
                "{},{},{}",
                point.t,
                point.u,
                fmt_successor(point.successor)
            );
        }
        outputs.write(&format!("curve_psi_{label}.csv"), &csv)?;
        let switches = policy_switches(&curve);
        let thresholds = switches
            .iter()
            .map(|(t, _, _)| t.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(summary, "{spec},{},{thresholds}", switches.len());
    }
    outputs.write("summary.csv", &summary)?;
    let mut config = common.config("curves");
    config.edge = Some(vec![edge.0, edge.1]);
    config.y = Some(args.y);
    outputs.finish(config)?;
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, String> {
    let common = &args.common;
    let start = match (args.origin, &args.edge) {
        (Some(origin), None) => TripStart::Origin(origin),
        (None, Some(edge)) => TripStart::EdgeState {
            edge: parse_edge(edge)?,
            y: args.y,
        },
        _ => return Err("exactly one of --origin and --edge is required".to_string()),
    };
    let failures = if args.fail.is_empty() {
        None
    } else {
        let events = args
            .fail
            .iter()
            .map(|text| parse_failure(text))
            .collect::<Result<Vec<_>, _>>()?;
        Some(FailureSpec {
            events,
            mode: args.replan.into(),
        })
    };
    let mut outputs = RunOutputs::create(common.out_dir())?;
    let mut kernels = None;
    for spec in common.psi_list() {
        let label = psi_label(&spec);
        let (sol, params) = load_dump(&outputs, &label, common)?;
        // The dumps of one solve run share network, parameters, and grid,
        // so the kernel store is built once and reused across the sweep.
        let kernels = match &kernels {
            Some(store) => store,
            None => {
                let store = KernelStore::build(sol.network(), &params, &sol.grid())
                    .map_err(|e| e.to_string())?;
                kernels.insert(store)
            }
        };
        let stats = simulate_trips(
            kernels,
            &sol,
            start,
            args.budget,
            args.trips,
            common.seed,
            failures.as_ref(),
        )
        .map_err(|e| e.to_string())?;
        let grid = sol.grid();
        let table_u = match start {
            TripStart::Origin(origin) => {
                query(&sol, origin, args.budget)
                    .map_err(|e| e.to_string())?
                    .0
            }
            TripStart::EdgeState { edge, y } => sol
                .edge_table(edge)
                .expect("validated by simulate_trips")
                .value(grid.floor_index(args.budget), grid.upper_index(y)),
        };
        let mut csv = String::from("budget,empirical,ci99,table_u\n");
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            args.budget, stats.probability, stats.ci99_half_width, table_u
        );
        outputs.write(&format!("stats_psi_{label}.csv"), &csv)?;
    }
    let mut config = common.config("simulate");
    match start {
        TripStart::Origin(origin) => config.origin = Some(origin),
        TripStart::EdgeState { edge, y } => {
            config.edge = Some(vec![edge.0, edge.1]);
            config.y = Some(y);
        }
    }
    config.budget = Some(args.budget);
    config.trips = Some(args.trips);
    if !args.fail.is_empty() {
        config.fail = Some(args.fail.clone());
        config.replan = Some(
            match args.replan {
                ReplanArg::Subgraph => "subgraph",
                ReplanArg::Nextbest => "nextbest",
            }
            .to_string(),
        );
    }
    outputs.finish(config)?;
    Ok(0)
}

fn cmd_dump_kernel(args: DumpKernelArgs) -> Result<i32, String> {
    let common = &args.common;
    let (net, params) = common.load_network()?;
    let grid = common.grid()?;
    let kernels = KernelStore::build(&net, &params, &grid).map_err(|e| e.to_string())?;
    let ids = parse_ids(&args.edge)?;
    let (kernel, name) = match *ids.as_slice() {
        [tail, head] => (
            kernels
                .source((tail, head))
                .ok_or(format!("no trip-start kernel for link ({tail}, {head})"))?,
            format!("kernel_{tail}_{head}.csv"),
        ),
        [k, i, j] => (
            kernels
                .pair((k, i), (i, j))
                .ok_or(format!("no kernel for the pair ({k}, {i}) -> ({i}, {j})"))?,
            format!("kernel_{k}_{i}_{j}.csv"),
        ),
        _ => {
            return Err(format!(
                "expected \"tail,head\" or \"k,i,j\", got {:?}",
                args.edge
            ))
        }
    };
    let mut csv = String::from("y_idx");
    for c in 0..grid.cells() {
        let _ = write!(csv, ",{}", grid.midpoint(c));
    }
    csv.push('\n');
    for y_idx in 0..kernel.y_rows() {
        let _ = write!(csv, "{y_idx}");
        for mass in kernel.row(y_idx) {
            let _ = write!(csv, ",{mass}");
        }
        csv.push('\n');
    }
    let mut outputs = RunOutputs::create(common.out_dir())?;
    outputs.write(&name, &csv)?;
    let mut config = common.config("dump-kernel");
    config.edge = Some(ids);
    outputs.finish(config)?;
    Ok(0)
}

fn main() {
    let code = match Cli::parse().command {
        Command::Solve(args) => cmd_solve(args),
        Command::Curves(args) => cmd_curves(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::DumpKernel(args) => cmd_dump_kernel(args),
    }
    .unwrap_or_else(|message| {
        eprintln!("error: {message}");
        1
    });
    std::process::exit(code);
}
