use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pathwarden_core::audit::{parse_lines, verify_lines, AuditTrail, ChainStatus, FileSink, StoredTrail};
use pathwarden_core::engine::{ConfigFile, Engine, EngineConfig, LoadedConfig, SystemClock};
use pathwarden_core::policy::{standard_policy_set, PolicySet};
use pathwarden_core::registry::Barriers;
use pathwarden_core::replay::{policy_sets, replay_decisions, ReplayOptions, ReplayVerdict};
use pathwarden_service::{AppState, ServiceConfig, Tokens};
use pathwarden_sim::replay_engine;
use pathwarden_sim::scenarios::{self, SCENARIOS};
use pathwarden_sim::sweep::{monotonicity_violations, render_table};
use pathwarden_sim::{
    default_grid, run_fleet, run_scenario, sweep_thresholds, ApprovalOracle, FleetMetrics, FleetOptions, ScenarioOptions,
    SweepCell,
};
use serde_json::json;

/// Policy set written next to trails produced by simulator runs.
const POLICY_SET_FILE: &str = "policy-set.json";

#[derive(Parser)]
#[command(name = "pathwarden", version, about = "Runtime governance for fleets of AI agents")]
struct Cli {
    #[command(flatten)]
    engine: EngineArgs,
    #[command(subcommand)]
    command: Command,
}

/// Engine settings shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct EngineArgs {
    /// Engine configuration file (JSON).
    #[arg(long, global = true, env = "PATHWARDEN_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "PATHWARDEN_THETA_STEER")]
    theta_steer: Option<f64>,
    #[arg(long, global = true, env = "PATHWARDEN_THETA_BLOCK")]
    theta_block: Option<f64>,
    /// Fleet risk budget B.
    #[arg(long, global = true, env = "PATHWARDEN_BUDGET_B")]
    budget: Option<f64>,
    /// Never write the shared ledger.
    #[arg(long, global = true, env = "PATHWARDEN_ABLATE_SIGMA")]
    ablate_sigma: bool,
}

impl EngineArgs {
    fn load(&self) -> Result<LoadedConfig> {
        let mut loaded = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => LoadedConfig { engine: EngineConfig::default(), policies: None, tools: None, barriers: Barriers::default() },
        };
        let e = &mut loaded.engine;
        if let Some(v) = self.theta_steer {
            e.theta_steer = v;
        }
        if let Some(v) = self.theta_block {
            e.theta_block = v;
        }
        if let Some(v) = self.budget {
            e.budget_b = v;
        }
        e.ablate_sigma |= self.ablate_sigma;
        e.validate()?;
        Ok(loaded)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Serve the /v1 HTTP API.
    Serve(ServeArgs),
    /// Run a built-in scenario (or `all`) and check its expected outcomes.
    Scenario(ScenarioArgs),
    /// Simulate a fleet of agents.
    Fleet(FleetArgs),
    /// Run a fleet across a grid of thresholds.
    Sweep(SweepArgs),
    /// Inspect a trail directory.
    #[command(subcommand)]
    Audit(AuditCommand),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "PATHWARDEN_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Directory for the audit trail; without it the trail is kept in memory.
    #[arg(long, env = "PATHWARDEN_TRAIL_DIR")]
    trail_dir: Option<PathBuf>,
    /// `token=scope+scope,...` with scopes agent-runtime and auditor-content.
    #[arg(long, env = "PATHWARDEN_TOKENS")]
    tokens: String,
    /// How long a request waits for the engine; defaults to the evaluation timeout plus 250 ms.
    #[arg(long, env = "PATHWARDEN_REQUEST_TIMEOUT_MS")]
    request_timeout_ms: Option<u64>,
    /// Use the simulator's tool registry and barriers when the config names none.
    #[arg(long, env = "PATHWARDEN_DEMO_TOOLS")]
    demo_tools: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Approve,
    Reject,
    Pause,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reviewer behaviour for Steer interventions.
    #[arg(long, value_enum, default_value = "approve")]
    oracle: Oracle,
    /// Simulated reviewer delay for `--oracle approve`.
    #[arg(long, default_value_t = 60)]
    approval_delay_secs: u64,
    /// Write the audit trail here.
    #[arg(long)]
    trail_dir: Option<PathBuf>,
    /// Print JSON instead of the summary table.
    #[arg(long)]
    json: bool,
    /// Also write the JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SimArgs {
    fn oracle(&self) -> ApprovalOracle {
        match self.oracle {
            Oracle::Approve => ApprovalOracle::AutoApprove { delay_secs: self.approval_delay_secs },
            Oracle::Reject => ApprovalOracle::AutoReject,
            Oracle::Pause => ApprovalOracle::Pause,
        }
    }
}

#[derive(Args)]
struct ScenarioArgs {
    /// prompt-injection, exfiltration-chain, information-barrier or all.
    name: String,
    #[command(flatten)]
    sim: SimArgs,
    /// Number of consecutive seeds to run, starting at --seed.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    /// Probability of the injected branch in prompt-injection.
    #[arg(long, default_value_t = 1.0)]
    injection_p: f64,
    /// Drop a policy from the scenario set (repeatable).
    #[arg(long = "remove-policy")]
    remove_policy: Vec<String>,
}

#[derive(Args)]
struct FleetArgs {
    #[arg(long, default_value_t = 20)]
    agents: usize,
    #[arg(long, default_value_t = 200)]
    tasks: usize,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 0.5)]
    injection_p: f64,
    /// Tasks in flight at once; defaults to the number of agents.
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON list of cells `{"theta_steer", "theta_block", "empty_policy_set"}`; built-in grid if absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    agents: usize,
    #[arg(long, default_value_t = 200)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Check the hash chain of a stored trail.
    Verify { dir: PathBuf },
    /// Re-evaluate every recorded decision and compare bit for bit.
    Replay {
        dir: PathBuf,
        /// Additional policy set files (repeatable).
        #[arg(long = "policy-set")]
        policy_sets: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Print the metadata tier of the trail as JSON lines.
    Export {
        dir: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("PATHWARDEN_LOG").unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means an expected-outcome check failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Serve(args) => serve(&cli.engine, args).map(|_| true),
        Command::Scenario(args) => scenario(&cli.engine, args),
        Command::Fleet(args) => fleet(&cli.engine, args),
        Command::Sweep(args) => sweep(&cli.engine, args),
        Command::Audit(cmd) => audit(cmd),
    }
}

fn emit(json: bool, out: Option<&Path>, value: &serde_json::Value, table: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    if json {
        println!("{text}");
    } else {
        print!("{table}");
    }
    Ok(())
}

fn write_policy_set(dir: &Path, engine: &Engine) -> Result<()> {
    let text = serde_json::to_string_pretty(engine.policies())?;
    fs::write(dir.join(POLICY_SET_FILE), text).with_context(|| format!("writing policy set into {}", dir.display()))
}

fn metrics_table(m: &FleetMetrics) -> String {
    let i = &m.interventions;
    let mut s = String::new();
    s.push_str(&format!("{:<24} {:>12}\n", "tasks", m.tasks().count()));
    s.push_str(&format!("{:<24} {:>12.6}\n", "sum v_T", m.sum_v_t + 0.0));
    s.push_str(&format!("{:<24} {:>12.6}\n", "sum v_T (successful)", m.successful_v_t + 0.0));
    s.push_str(&format!("{:<24} {:>12}\n", "sum u", m.sum_u));
    s.push_str(&format!("{:<24} {:>12}\n", "budget B", m.budget_b));
    for (name, n) in [
        ("pass", i.pass),
        ("steer", i.steer),
        ("block", i.block),
        ("fail-closed", i.fail_closed),
        ("approvals granted", i.approvals_granted),
        ("approvals rejected", i.approvals_rejected),
        ("deferred admissions", i.deferred_admissions),
        ("rejected registrations", i.rejected_registrations),
    ] {
        s.push_str(&format!("{name:<24} {n:>12}\n"));
    }
    s
}

fn scenario(engine: &EngineArgs, args: ScenarioArgs) -> Result<bool> {
    let config = engine.load()?.engine;
    let names: Vec<&str> = if args.name == "all" { SCENARIOS.to_vec() } else { vec![args.name.as_str()] };
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    if args.trail_dir_conflict(names.len()) {
        bail!("--trail-dir takes a single scenario and a single run");
    }
    let mut all_passed = true;
    let mut results = Vec::new();
    let mut table = String::new();
    for name in names {
        for seed in args.sim.seed..args.sim.seed + args.runs {
            let opts = ScenarioOptions {
                seed,
                config: config.clone(),
                oracle: args.sim.oracle(),
                injection_probability: args.injection_p,
                removed_policies: args.remove_policy.clone(),
                trail_dir: args.sim.trail_dir.clone(),
                ..Default::default()
            };
            let run = run_scenario(name, &opts)?;
            if let Some(dir) = &args.sim.trail_dir {
                write_policy_set(dir, &run.engine)?;
            }
            let passed = run.passed();
            all_passed &= passed;
            table.push_str(&format!("{} {name} seed {seed}\n", if passed { "PASS" } else { "FAIL" }));
            for e in &run.expectations {
                table.push_str(&format!("  {} {:<22} {}\n", if e.passed { "ok  " } else { "FAIL" }, e.name, e.detail));
            }
            if args.runs == 1 {
                table.push_str(&metrics_table(&run.metrics));
            }
            results.push(json!({
                "scenario": name,
                "seed": seed,
                "passed": passed,
                "expectations": run.expectations,
                "metrics": run.metrics,
            }));
        }
    }
    let value = if results.len() == 1 { results.remove(0) } else { json!(results) };
    emit(args.sim.json, args.sim.out.as_deref(), &value, &table)?;
    Ok(all_passed)
}

impl ScenarioArgs {
    fn trail_dir_conflict(&self, scenarios: usize) -> bool {
        self.sim.trail_dir.is_some() && (scenarios > 1 || self.runs > 1)
    }
}

fn fleet(engine: &EngineArgs, args: FleetArgs) -> Result<bool> {
    let loaded = engine.load()?;
    let opts = FleetOptions {
        agents: args.agents,
        tasks: args.tasks,
        seed: args.sim.seed,
        config: loaded.engine,
        oracle: args.sim.oracle(),
        injection_probability: args.injection_p,
        concurrency: args.concurrency,
        policies: loaded.policies,
        trail_dir: args.sim.trail_dir.clone(),
    };
    let run = run_fleet(&opts)?;
    if let Some(dir) = &args.sim.trail_dir {
        write_policy_set(dir, &run.engine)?;
    }
    let entries = replay_engine(&run.engine);
    let mismatches = entries.iter().filter(|e| matches!(e.verdict, ReplayVerdict::Mismatch { .. })).count();
    let consistent = run.metrics.sums_consistent();
    let mut table = metrics_table(&run.metrics);
    table.push_str(&format!("{:<24} {:>12}\n", "replayed decisions", entries.len()));
    table.push_str(&format!("{:<24} {:>12}\n", "replay mismatches", mismatches));
    let value = json!({ "metrics": run.metrics, "replay_mismatches": mismatches, "sums_consistent": consistent });
    emit(args.sim.json, args.sim.out.as_deref(), &value, &table)?;
    Ok(consistent && mismatches == 0)
}

fn sweep(engine: &EngineArgs, args: SweepArgs) -> Result<bool> {
    let loaded = engine.load()?;
    let cells: Vec<SweepCell> = match &args.grid {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing grid {}", p.display()))?,
        None => default_grid(),
    };
    let fleet = FleetOptions {
        agents: args.agents,
        tasks: args.tasks,
        seed: args.seed,
        config: loaded.engine,
        policies: loaded.policies,
        ..Default::default()
    };
    let rows = sweep_thresholds(&cells, &fleet)?;
    let violations = monotonicity_violations(&rows);
    let mut table = render_table(&rows);
    for (a, b) in &violations {
        table.push_str(&format!(
            "FAIL sum v_T at theta_block {} exceeds theta_block {} (theta_steer {})\n",
            a.theta_block, b.theta_block, a.theta_steer
        ));
    }
    let value = json!({ "rows": rows, "monotonicity_violations": violations });
    emit(args.json, args.out.as_deref(), &value, &table)?;
    Ok(violations.is_empty())
}

fn audit(cmd: AuditCommand) -> Result<bool> {
    match cmd {
        AuditCommand::Verify { dir } => {
            let stored = StoredTrail::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
            let count = stored.raw.lines().filter(|l| !l.trim().is_empty()).count();
            match verify_lines(&stored.raw) {
                ChainStatus::Ok => {
                    println!("chain ok: {count} records");
                    Ok(true)
                }
                ChainStatus::Corrupt(seq) => {
                    println!("chain corrupt at record {seq} of {count}");
                    Ok(false)
                }
            }
        }
        AuditCommand::Replay { dir, policy_sets: extra, json } => {
            let stored = StoredTrail::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
            let records = stored.records()?;
            let mut sets = vec![scenarios::fleet_policy_set(), scenarios::scenario_policy_set()];
            let bundled = dir.join(POLICY_SET_FILE);
            for path in bundled.is_file().then_some(bundled).into_iter().chain(extra) {
                sets.push(PolicySet::load(&path).with_context(|| format!("loading {}", path.display()))?);
            }
            let entries = replay_decisions(&records, &policy_sets(sets), &stored.snapshots, ReplayOptions::default());
            let count = |f: fn(&ReplayVerdict) -> bool| entries.iter().filter(|e| f(&e.verdict)).count();
            let matched = count(|v| matches!(v, ReplayVerdict::Match));
            let mismatched = count(|v| matches!(v, ReplayVerdict::Mismatch { .. }));
            let unverifiable = count(|v| matches!(v, ReplayVerdict::Unverifiable { .. }));
            let content = count(|v| matches!(v, ReplayVerdict::UnverifiableContent { .. }));
            if json {
                println!("{}", serde_json::to_string_pretty(&entries)?);
            } else {
                println!("{:<24} {:>8}", "decisions", entries.len());
                println!("{:<24} {:>8}", "match", matched);
                println!("{:<24} {:>8}", "mismatch", mismatched);
                println!("{:<24} {:>8}", "unverifiable", unverifiable);
                println!("{:<24} {:>8}", "unverifiable content", content);
                for e in entries.iter().filter(|e| !matches!(e.verdict, ReplayVerdict::Match)).take(20) {
                    println!("  #{} {:?}", e.sequence_no, e.verdict);
                }
            }
            Ok(mismatched == 0)
        }
        AuditCommand::Export { dir, task } => {
            let stored = StoredTrail::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
            for r in parse_lines(&stored.raw)? {
                if task.as_deref().is_none_or(|t| r.task_id.as_ref().is_some_and(|id| id.as_str() == t)) {
                    println!("{}", r.metadata_only().to_line()?);
                }
            }
            Ok(true)
        }
    }
}

fn serve(engine_args: &EngineArgs, args: ServeArgs) -> Result<()> {
    let loaded = engine_args.load()?;
    let tokens = Tokens::parse(&args.tokens).map_err(anyhow::Error::msg)?;
    if tokens.is_empty() {
        bail!("at least one token is required");
    }
    let (tools, barriers) = match (loaded.tools, args.demo_tools) {
        (Some(t), _) => (t, loaded.barriers),
        (None, true) => (scenarios::tools(), scenarios::barriers()),
        (None, false) => bail!("the config names no tool registry (tool_registry_path); pass --demo-tools to use the built-in one"),
    };
    let policies = loaded
        .policies
        .unwrap_or_else(|| standard_policy_set("standard-1", loaded.engine.sigma_ceiling, scenarios::MAX_STEPS));
    let trail = match &args.trail_dir {
        Some(dir) => AuditTrail::new(Box::new(FileSink::create(dir).with_context(|| format!("opening {}", dir.display()))?)),
        None => {
            tracing::warn!("no --trail-dir given; the audit trail is kept in memory only");
            AuditTrail::in_memory()
        }
    };
    if let Some(dir) = &args.trail_dir {
        fs::write(dir.join(POLICY_SET_FILE), serde_json::to_string_pretty(&policies)?)?;
    }
    let engine = Engine::new(loaded.engine, policies, tools, barriers, trail, Arc::new(SystemClock))?;
    let mut config = ServiceConfig::for_engine(engine.config(), tokens);
    if let Some(ms) = args.request_timeout_ms {
        config.request_timeout = Duration::from_millis(ms);
    }
    let state = AppState::new(Arc::new(engine), config);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.listen).await.with_context(|| format!("binding {}", args.listen))?;
        tracing::info!(addr = %listener.local_addr()?, "serving /v1");
        pathwarden_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
