//! Operator entry point for the lane engine. Commands run one lane
//! cycle, execute scripted fault scenarios, drain queued intents,
//! validate the evidence chain, and render status reports.
//!
//! State persists across invocations inside `--state-dir`: the backlog,
//! fix queue, locks, degraded queues, evidence chain, and receipts live
//! there as plain files, and the simulated tracker plus virtual clock
//! are check-pointed to `tracker_state.json` / `clock.json` after every
//! mutating command. Identical command sequences over identical inputs
//! reproduce byte-identical stores and chains.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 scenario assertion
//! failure, 3 configuration error, 4 evidence-chain validation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};

use laneloop_core::clock::{Clock, VirtualClock};
use laneloop_core::engine::{Engine, EngineConfig, EngineError};
use laneloop_core::evidence::{ChainVerdict, EvidenceChain};
use laneloop_core::fsm::LaneId;
use laneloop_core::scenario::{load_scenario, run_scenario};
use laneloop_core::scheduler::LaneConfigSet;
use laneloop_core::tracker::{FaultProfile, SimulatedTracker};
use laneloop_core::watchdog::{window_counters, EvaluationWindowConfig};

const TRACKER_STATE_FILE: &str = "tracker_state.json";
const CLOCK_FILE: &str = "clock.json";
const DEFAULT_VIRTUAL_START: &str = "2026-01-01T00:00:00Z";

#[derive(Parser)]
#[command(
    name = "laneloop",
    version,
    about = "Closed-loop backlog automation: seven lanes over a shared tracker"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one cycle of the given lane (1-7) against the stored state.
    RunLane {
        /// Lane number, 1 through 7.
        lane: u8,
        #[command(flatten)]
        state: StateArgs,
    },
    /// Execute a scenario file and evaluate its assertions.
    Simulate {
        /// Path to the scenario JSON file.
        scenario: PathBuf,
        /// Directory for the scenario's state; must be empty or absent.
        /// Defaults to a fresh directory under the system temp dir.
        #[arg(long)]
        state_dir: Option<PathBuf>,
        /// Override the scenario's own seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay queued write intents against the tracker.
    Drain {
        /// Maximum tracker calls to spend on this drain.
        #[arg(long, default_value_t = 20)]
        max_calls: usize,
        #[command(flatten)]
        state: StateArgs,
    },
    /// Validate the evidence chain hash links end to end.
    ValidateChain {
        /// Directory holding the engine state.
        #[arg(long, default_value = "state")]
        state_dir: PathBuf,
    },
    /// Render run counters, the success-rate interval, and chain health.
    Report {
        #[command(flatten)]
        state: StateArgs,
    },
    /// Write a starter tracker fixture for local experiments.
    InitFixture {
        /// Where to write the fixture JSON.
        #[arg(long, default_value = "tracker_fixture.json")]
        out: PathBuf,
        /// Number of seed tickets.
        #[arg(long, default_value_t = 10)]
        tickets: usize,
    },
}

#[derive(Args)]
struct StateArgs {
    /// Directory holding all persistent engine state.
    #[arg(long, default_value = "state")]
    state_dir: PathBuf,
    /// Lane configuration JSON (cadences, TTLs, worker caps, budgets).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tracker fixture JSON used to seed a fresh state directory.
    /// Ignored once tracker state has been saved.
    #[arg(long)]
    tracker_fixture: Option<PathBuf>,
    /// Fault profile JSON applied to the tracker for this invocation.
    #[arg(long)]
    fault_profile: Option<PathBuf>,
    /// Seed for all engine randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Virtual-clock position (RFC 3339). Starts fresh state here and
    /// advances existing state forward; the clock never moves backwards.
    #[arg(long)]
    virtual_start: Option<DateTime<Utc>>,
}

/// A command that could not finish, carrying its exit code.
enum Failure {
    Config(String),
    Assertion,
    ChainBroken { first_bad_index: usize },
    Runtime(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Assertion => 2,
            Failure::Config(_) => 3,
            Failure::ChainBroken { .. } => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) => format!("configuration error: {m}"),
            Failure::Assertion => "scenario assertions failed".to_string(),
            Failure::ChainBroken { first_bad_index } => {
                format!("evidence chain broken at record {first_bad_index}")
            }
            Failure::Runtime(m) => format!("error: {m}"),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Failure {
        match e {
            EngineError::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::RunLane { lane, state } => run_lane(lane, &state),
        Command::Simulate {
            scenario,
            state_dir,
            seed,
        } => simulate(&scenario, state_dir, seed),
        Command::Drain { max_calls, state } => drain(max_calls, &state),
        Command::ValidateChain { state_dir } => validate_chain(&state_dir),
        Command::Report { state } => report(&state),
        Command::InitFixture { out, tickets } => init_fixture(&out, tickets),
    }
}

fn run_lane(lane: u8, state: &StateArgs) -> Result<(), Failure> {
    let lane = LaneId::from_number(lane)
        .ok_or_else(|| Failure::Config(format!("no lane {lane}; lanes are 1-7")))?;
    let mut engine = open_engine(state)?;
    let cycle = engine.run_lane(lane).map_err(Failure::from)?;
    save_state(&engine)?;
    println!(
        "run {} ({}): {:?}, {} informational alert(s)",
        cycle.run_id, cycle.lane, cycle.terminal_status, cycle.exception_count
    );
    match cycle.evidence_seq {
        Some(seq) => println!("evidence record: {seq}"),
        None => println!("cycle skipped; no evidence recorded"),
    }
    for line in &cycle.summary {
        println!("  - {line}");
    }
    use laneloop_core::evidence::TerminalStatus;
    match cycle.terminal_status {
        TerminalStatus::Clean | TerminalStatus::Degraded => Ok(()),
        TerminalStatus::Failed => Err(Failure::Runtime("lane cycle failed".to_string())),
    }
}

fn simulate(
    scenario_path: &Path,
    state_dir: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut scenario = load_scenario(scenario_path).map_err(Failure::from)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let state_dir = match state_dir {
        Some(dir) => {
            if dir.exists() && fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
                return Err(Failure::Config(format!(
                    "state dir {} is not empty; scenarios need a fresh directory",
                    dir.display()
                )));
            }
            dir
        }
        None => std::env::temp_dir().join(format!(
            "laneloop-sim-{}-{}",
            std::process::id(),
            Utc::now().timestamp_nanos_opt().unwrap_or(0)
        )),
    };
    let report = run_scenario(&scenario, &state_dir).map_err(Failure::from)?;
    print!("{}", report.render());
    println!("state dir: {}", state_dir.display());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Assertion)
    }
}

fn drain(max_calls: usize, state: &StateArgs) -> Result<(), Failure> {
    let mut engine = open_engine(state)?;
    let report = engine.drain(max_calls).map_err(Failure::from)?;
    save_state(&engine)?;
    println!("{}", report.summary);
    for dropped in &report.dropped_collisions {
        println!(
            "  dropped intent {} on {}: {}",
            dropped.seq, dropped.key, dropped.reason
        );
    }
    Ok(())
}

fn validate_chain(state_dir: &Path) -> Result<(), Failure> {
    let path = state_dir.join("evidence/chain.jsonl");
    let report = EvidenceChain::open(&path)
        .validate()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    match report.verdict {
        ChainVerdict::Valid => {
            println!("chain valid: {} record(s)", report.records);
            Ok(())
        }
        ChainVerdict::Broken { first_bad_index } => Err(Failure::ChainBroken { first_bad_index }),
    }
}

fn report(state: &StateArgs) -> Result<(), Failure> {
    let engine = open_engine(state)?;
    let chain = EvidenceChain::open(&engine.evidence_path());
    let records = chain.load().map_err(|e| Failure::Runtime(e.to_string()))?;
    let counters = window_counters(&records, &engine.config().window);
    let connectivity = engine.connectivity().map_err(Failure::from)?;
    let verdict = chain
        .validate()
        .map_err(|e| Failure::Runtime(e.to_string()))?
        .verdict;
    println!("virtual time: {}", engine.clock().now().to_rfc3339());
    println!(
        "runs in window: {} (clean {}, degraded {}, failed {})",
        counters.runs, counters.clean, counters.degraded, counters.failed
    );
    println!(
        "success-rate interval ({}% confidence): [{:.4}, {:.4}]",
        (1.0 - engine.config().window.alpha) * 100.0,
        counters.success_lower,
        counters.success_upper
    );
    println!("connectivity: {:?}", connectivity.status);
    match verdict {
        ChainVerdict::Valid => println!("evidence chain: valid ({} records)", records.len()),
        ChainVerdict::Broken { first_bad_index } => {
            println!("evidence chain: BROKEN at record {first_bad_index}")
        }
    }
    Ok(())
}

fn init_fixture(out: &Path, tickets: usize) -> Result<(), Failure> {
    let topics = [
        ("Harden token storage", "token-storage"),
        ("Rotate signing keys", "key-rotation"),
        ("Pin container digests", "supply-chain"),
        ("Tighten CSP header", "csp"),
        ("Audit dependency pins", "dep-audit"),
        ("Scrub debug endpoints", "attack-surface"),
        ("Enforce MFA on deploys", "access-control"),
        ("Encrypt backup archives", "data-at-rest"),
        ("Expire stale sessions", "session-mgmt"),
        ("Rate-limit login attempts", "brute-force"),
    ];
    let records: Vec<serde_json::Value> = (0..tickets)
        .map(|i| {
            let (summary, tag) = topics[i % topics.len()];
            let n = i / topics.len();
            let summary = if n == 0 {
                summary.to_string()
            } else {
                format!("{summary} (wave {})", n + 1)
            };
            serde_json::json!({
                "key": format!("KAN-{}", i + 1),
                "summary": summary,
                "description": format!("Fixture ticket {} for local drills", i + 1),
                "status": "ToDo",
                "labels": ["AUTO-SEC", tag],
                "comments": [],
                "transition_log": []
            })
        })
        .collect();
    let json = serde_json::to_string_pretty(&records).expect("fixture serializes");
    fs::write(out, json).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("wrote fixture with {tickets} ticket(s) to {}", out.display());
    Ok(())
}

/// Build the engine from the state directory, honoring saved tracker and
/// clock checkpoints. Configuration problems surface before any tracker
/// construction.
fn open_engine(state: &StateArgs) -> Result<Engine, Failure> {
    let mut config = EngineConfig::new(&state.state_dir);
    if let Some(path) = &state.config {
        config.lanes = LaneConfigSet::load(path)
            .map_err(|e| Failure::Config(format!("bad lane config {}: {e}", path.display())))?;
    }
    let window_path = state.state_dir.join("window.json");
    if window_path.exists() {
        config.window = EvaluationWindowConfig::load(&window_path)
            .map_err(|e| Failure::Config(format!("bad window config: {e}")))?;
    } else {
        // Without an explicit window, track from the first recorded run.
        let chain = EvidenceChain::open(&state.state_dir.join("evidence/chain.jsonl"));
        if let Ok(records) = chain.load() {
            if let Some(first) = records.first() {
                config.window.start = first.timestamp;
            }
        }
    }
    config.seed = state.seed;
    let profile = match &state.fault_profile {
        Some(path) => FaultProfile::load(path)
            .map_err(|e| Failure::Config(format!("bad fault profile: {e}")))?,
        None => FaultProfile::default(),
    };
    let saved_tracker = state.state_dir.join(TRACKER_STATE_FILE);
    let tracker = if saved_tracker.exists() {
        SimulatedTracker::from_fixture_file("KAN", &saved_tracker, profile)
            .map_err(|e| Failure::Runtime(format!("corrupt tracker state: {e}")))?
    } else if let Some(path) = &state.tracker_fixture {
        SimulatedTracker::from_fixture_file("KAN", path, profile)
            .map_err(|e| Failure::Config(format!("bad tracker fixture: {e}")))?
    } else {
        SimulatedTracker::new("KAN", profile)
    };
    let clock_path = state.state_dir.join(CLOCK_FILE);
    let start = if clock_path.exists() {
        let text = fs::read_to_string(&clock_path).map_err(|e| Failure::Runtime(e.to_string()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Runtime(format!("corrupt clock state: {e}")))?;
        value["now"]
            .as_str()
            .and_then(|s| s.parse::<DateTime<Utc>>().ok())
            .ok_or_else(|| Failure::Runtime("corrupt clock state".to_string()))?
    } else {
        state.virtual_start.unwrap_or_else(|| {
            DEFAULT_VIRTUAL_START
                .parse()
                .expect("default start parses")
        })
    };
    let clock = VirtualClock::starting_at(start);
    if let Some(at) = state.virtual_start {
        clock.advance_to(at);
    }
    Engine::open(config, Arc::new(tracker), clock).map_err(Failure::from)
}

/// Checkpoint the tracker and clock so the next invocation resumes.
fn save_state(engine: &Engine) -> Result<(), Failure> {
    let state_dir = &engine.config().state_dir;
    let dump = engine.tracker().dump();
    let json = serde_json::to_string_pretty(&dump).expect("tracker state serializes");
    fs::write(state_dir.join(TRACKER_STATE_FILE), json)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let clock = serde_json::json!({ "now": engine.clock().now().to_rfc3339() });
    fs::write(state_dir.join(CLOCK_FILE), clock.to_string())
        .map_err(|e| Failure::Runtime(e.to_string()))
}
