//! `lanemix` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use lanemix::control::{
    evaluate_cost, optimize_controls, ControlSignal, OptimizerConfig, RunningCost,
};
use lanemix::measures::{generalized_wasserstein_with, Atom, DiscreteMeasure, WassersteinCosts};
use lanemix::scenarios::{self, run_trials, ScenarioConfig, ScenarioError, TrialsReport};
use lanemix::state::Topology;
use lanemix::AUTONOMOUS;

/// Environment variable that overrides the root of relative output paths.
const OUT_ROOT_ENV: &str = "LANEMIX_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "lanemix",
    version,
    about = "Multi-lane, multi-class hybrid traffic simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run seeded trials of one scenario and write metrics.
    Run(RunArgs),
    /// Run trials for several scenarios (default: the three truck-penetration presets).
    Sweep(SweepArgs),
    /// Optimize piecewise-constant controls of the autonomous vehicles.
    Optimize(OptimizeArgs),
    /// Check a scenario without simulating it.
    Validate(ValidateArgs),
    /// Generalized Wasserstein distance between two measures given as JSON atom lists.
    Wasserstein(WassersteinArgs),
}

#[derive(Args, Debug, Clone)]
struct Source {
    /// Named preset (paper-10pct, paper-20pct, paper-30pct, av-mixed, av-tracking).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Scenario file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct Output {
    /// Output directory (relative paths resolve against $LANEMIX_OUT_ROOT when set).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Base seed; trial i uses seed + i. Defaults to the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Presets to run, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = ["paper-10pct".to_string(), "paper-20pct".to_string(), "paper-30pct".to_string()])]
    presets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum CostKind {
    /// Control effort only.
    None,
    /// Mean squared deviation from --v-ref.
    Tracking,
    /// Per-lane velocity variance.
    Spread,
    /// The scenario's configured running cost.
    Config,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_enum, default_value_t = CostKind::Config)]
    cost: CostKind,
    /// Reference speed for the tracking cost, m/s.
    #[arg(long, default_value_t = 4.0)]
    v_ref: f64,
    #[arg(long, default_value_t = 4)]
    knots: usize,
    /// Maximum number of cost evaluations.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Points of the constant-control grid search reported as a baseline.
    #[arg(long, default_value_t = 41)]
    grid: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    source: Source,
    /// Print the resolved scenario as TOML.
    #[arg(long)]
    print: bool,
}

#[derive(Args, Debug)]
struct WassersteinArgs {
    /// JSON file with an array of {"x", "v", "mass"} atoms.
    mu: PathBuf,
    nu: PathBuf,
    /// Cost per unit of created or destroyed mass.
    #[arg(long, default_value_t = 1.0)]
    creation: f64,
    /// Treat positions as living on a ring of this length.
    #[arg(long)]
    ring: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Io(String),
    Simulation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
            Failure::Simulation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Io(m) | Failure::Simulation(m) => m,
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse(_)
            | ScenarioError::Invalid(_)
            | ScenarioError::Infeasible { .. }
            | ScenarioError::NeedsRing => Failure::Validation(e.to_string()),
            ScenarioError::State(_) => Failure::Validation(e.to_string()),
            ScenarioError::Engine(_) => Failure::Simulation(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn load(source: &Source) -> CliResult<ScenarioConfig> {
    let config = match (&source.preset, &source.config) {
        (Some(name), _) => scenarios::preset(name).ok_or_else(|| {
            let names: Vec<String> = scenarios::presets().into_iter().map(|p| p.name).collect();
            Failure::Validation(format!(
                "unknown preset {name:?}; available: {}",
                names.join(", ")
            ))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            ScenarioConfig::from_toml(&text)
                .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
        }
        (None, None) => {
            return Err(Failure::Validation(
                "either --preset or --config is required".into(),
            ))
        }
    };
    config.validate()?;
    Ok(config)
}

fn out_dir(output: &Output, default_name: &str) -> PathBuf {
    let path = output
        .out
        .clone()
        .unwrap_or_else(|| Path::new("out").join(default_name));
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn create(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn header(config: &ScenarioConfig, seed: u64) -> String {
    format!(
        "# scenario={} horizon={} dt={} seed={}\n",
        config.name, config.horizon, config.dt, seed
    )
}

fn manifest(command: &str, config: &ScenarioConfig, extra: serde_json::Value) -> String {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut m = json!({
        "tool": "lanemix",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "arguments": args,
        "schema_version": scenarios::SCHEMA_VERSION,
        "config": config,
        "seed_derivation": "trial seed = base seed + trial index; decision stream = vehicle id, 64-word block per epoch; initialization stream = 2^64 - 1",
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    to_json(&m)
}

fn write_report(
    dir: &Path,
    config: &ScenarioConfig,
    report: &TrialsReport,
    base_seed: u64,
    format: Format,
) -> CliResult<()> {
    let head = header(config, base_seed);
    match format {
        Format::Csv => {
            write(dir, "metrics.csv", &(head.clone() + &report.metrics_csv()))?;
            write(dir, "aggregate.csv", &(head + &report.aggregate_csv()))?;
        }
        Format::Json => {
            let rows: Vec<serde_json::Value> = report
                .trials
                .iter()
                .filter(|t| t.failure.is_none())
                .flat_map(|t| {
                    t.vehicles.iter().map(move |v| {
                        json!({"trial": t.trial, "seed": t.seed, "vehicle_id": v.vehicle_id, "class": v.class_id, "max_var": v.max_var, "total_var": v.total_var})
                    })
                })
                .collect();
            write(
                dir,
                "metrics.json",
                &to_json(&json!({"horizon": config.horizon, "dt": config.dt, "rows": rows})),
            )?;
            write(
                dir,
                "aggregate.json",
                &to_json(
                    &json!({"horizon": config.horizon, "dt": config.dt, "classes": report.aggregates, "all": report.all}),
                ),
            )?;
        }
    }
    let events: Vec<serde_json::Value> = report
        .trials
        .iter()
        .map(|t| json!({"trial": t.trial, "seed": t.seed, "events": t.events}))
        .collect();
    write(dir, "events.json", &to_json(&events))
}

fn trial_summary(report: &TrialsReport) -> serde_json::Value {
    let failures: Vec<serde_json::Value> = report
        .trials
        .iter()
        .filter_map(|t| {
            t.failure
                .as_ref()
                .map(|f| json!({"trial": t.trial, "seed": t.seed, "failure": f}))
        })
        .collect();
    json!({
        "trials": report.trials.len(),
        "seeds": report.trials.iter().map(|t| t.seed).collect::<Vec<_>>(),
        "failed_trials": report.failed_trials,
        "failures": failures,
        "lane_changes": report.trials.iter().map(|t| t.lane_changes).sum::<usize>(),
    })
}

fn run(args: RunArgs) -> CliResult<()> {
    let config = load(&args.source)?;
    if args.trials == 0 {
        return Err(Failure::Validation("--trials must be at least 1".into()));
    }
    let seed = args.seed.unwrap_or(config.seed);
    let dir = out_dir(&args.output, &config.name);
    let report = run_trials(&config, args.trials, seed, args.jobs)?;
    create(&dir)?;
    write_report(&dir, &config, &report, seed, args.output.format)?;
    let extra =
        json!({"base_seed": seed, "format": args.output.format, "result": trial_summary(&report)});
    write(&dir, "manifest.json", &manifest("run", &config, extra))?;
    print_summary(&config, &report);
    if report.failed_trials > 0 {
        return Err(Failure::Simulation(format!(
            "{} of {} trials failed",
            report.failed_trials,
            report.trials.len()
        )));
    }
    Ok(())
}

fn print_summary(config: &ScenarioConfig, report: &TrialsReport) {
    println!(
        "{}: {} trials, {} failed",
        config.name,
        report.trials.len(),
        report.failed_trials
    );
    for a in &report.aggregates {
        println!(
            "  class {}: total variation mean {:.4} (IQR {:.4}), max variation mean {:.4} (std {:.4})",
            a.class_id,
            a.total_var.mean,
            a.total_var.iqr(),
            a.max_var.mean,
            a.max_var.std
        );
    }
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    let configs: Vec<ScenarioConfig> = args
        .presets
        .iter()
        .map(|name| {
            load(&Source {
                preset: Some(name.clone()),
                config: None,
            })
        })
        .collect::<CliResult<_>>()?;
    if args.trials == 0 {
        return Err(Failure::Validation("--trials must be at least 1".into()));
    }
    let root = out_dir(&args.output, "sweep");
    let mut summary = Vec::new();
    let mut failed = 0;
    for config in &configs {
        let seed = args.seed.unwrap_or(config.seed);
        let report = run_trials(config, args.trials, seed, args.jobs)?;
        let dir = root.join(&config.name);
        create(&dir)?;
        write_report(&dir, config, &report, seed, args.output.format)?;
        let extra = json!({"base_seed": seed, "format": args.output.format, "result": trial_summary(&report)});
        write(&dir, "manifest.json", &manifest("sweep", config, extra))?;
        print_summary(config, &report);
        failed += report.failed_trials;
        summary.push(json!({
            "scenario": config.name,
            "occupancy_ratio": scenarios::occupancy_ratio(config),
            "failed_trials": report.failed_trials,
            "classes": report.aggregates,
            "all": report.all,
        }));
    }
    write(&root, "sweep.json", &to_json(&summary))?;
    if failed > 0 {
        return Err(Failure::Simulation(format!("{failed} trials failed")));
    }
    Ok(())
}

fn optimize(args: OptimizeArgs) -> CliResult<()> {
    let config = load(&args.source)?;
    let seed = args.seed.unwrap_or(config.seed);
    let running_cost = match args.cost {
        CostKind::None => RunningCost::None,
        CostKind::Tracking => RunningCost::Tracking { v_ref: args.v_ref },
        CostKind::Spread => RunningCost::Spread,
        CostKind::Config => config.running_cost,
    };
    let engine = config.engine();
    let initial = config.initial_state(seed)?;
    let avs: Vec<usize> = initial.ids_of_class(AUTONOMOUS).collect();
    if avs.is_empty() {
        return Err(Failure::Validation(
            "scenario has no autonomous vehicle (counts[0] = 0)".into(),
        ));
    }
    let sim = |e: lanemix::control::ControlError| Failure::Simulation(e.to_string());
    let bound = config.control_bound;
    let mut opt = OptimizerConfig::new(args.knots, args.budget, bound, seed);
    opt.min_step = 1e-4 * bound;
    let result =
        optimize_controls(&engine, &initial, config.horizon, running_cost, &opt).map_err(sim)?;

    // constant-control baselines
    let zero =
        evaluate_cost(&engine, &initial, None, config.horizon, seed, running_cost).map_err(sim)?;
    let grid = args.grid.max(2);
    let mut best_constant = (0.0, zero.total);
    for i in 0..grid {
        let c = -bound + 2.0 * bound * i as f64 / (grid - 1) as f64;
        let signal = ControlSignal::constant(&avs, c, config.horizon, config.dt, bound);
        let cost = evaluate_cost(
            &engine,
            &initial,
            Some(&signal),
            config.horizon,
            seed,
            running_cost,
        )
        .map_err(sim)?;
        if cost.total < best_constant.1 {
            best_constant = (c, cost.total);
        }
    }

    let dir = out_dir(&args.output, &format!("{}-optimize", config.name));
    create(&dir)?;
    write(&dir, "control.json", &to_json(&result.signal))?;
    let mut history = header(&config, seed) + "evaluation,step,cost,best\n";
    for h in &result.history {
        history.push_str(&format!(
            "{},{},{},{}\n",
            h.evaluation, h.step, h.cost, h.best
        ));
    }
    write(&dir, "history.csv", &history)?;
    let extra = json!({
        "seed": seed,
        "running_cost": running_cost,
        "knots": args.knots,
        "budget": args.budget,
        "evaluations": result.history.len(),
        "best": result.best,
        "baselines": {
            "zero_control": zero.total,
            "grid_points": grid,
            "best_constant_control": best_constant.0,
            "best_constant_cost": best_constant.1,
            "margin_vs_zero": zero.total - best_constant.1,
            "improvement_vs_best_constant": best_constant.1 - result.best.total,
        },
    });
    write(&dir, "manifest.json", &manifest("optimize", &config, extra))?;
    println!(
        "{}: best cost {:.6} after {} evaluations (zero control {:.6}, best constant {:.6} at u = {})",
        config.name,
        result.best.total,
        result.history.len(),
        zero.total,
        best_constant.1,
        best_constant.0
    );
    Ok(())
}

fn validate(args: ValidateArgs) -> CliResult<()> {
    let config = load(&args.source)?;
    if args.print {
        print!("{}", config.to_toml());
    } else {
        println!(
            "{}: ok ({} vehicles, {} lanes)",
            config.name,
            config.vehicle_count(),
            config.lanes
        );
    }
    Ok(())
}

fn read_measure(path: &Path) -> CliResult<DiscreteMeasure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let atoms: Vec<Atom> = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    if let Some(a) = atoms.iter().find(|a| !(a.mass >= 0.0)) {
        return Err(Failure::Validation(format!(
            "{}: negative atom mass {}",
            path.display(),
            a.mass
        )));
    }
    Ok(DiscreteMeasure::from_atoms(atoms))
}

fn wasserstein(args: WassersteinArgs) -> CliResult<()> {
    let mu = read_measure(&args.mu)?;
    let nu = read_measure(&args.nu)?;
    if !(args.creation > 0.0) {
        return Err(Failure::Validation("--creation must be positive".into()));
    }
    let topology = match args.ring {
        Some(length) if length > 0.0 => Topology::Ring { length },
        Some(_) => return Err(Failure::Validation("--ring must be positive".into())),
        None => Topology::Open,
    };
    let costs = WassersteinCosts {
        creation: args.creation,
        transport: 1.0,
    };
    println!(
        "{}",
        generalized_wasserstein_with(&mu, &nu, costs, &topology)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Optimize(a) => optimize(a),
        Command::Validate(a) => validate(a),
        Command::Wasserstein(a) => wasserstein(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
