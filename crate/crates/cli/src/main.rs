//! `mrt`: simulate a trial, export its dataset, estimate effects, audit.
//!
//! Every stage reads the previous stage's files, so runs can be resumed or
//! inspected at any boundary. Exit status: 0 success, 1 invalid input or
//! configuration, 2 audit failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mrt_core::audit::audit_text;
use mrt_core::estimator::{estimate, sensitivity_compare, EffectSpec};
use mrt_core::model::{count_decision_points, per_participant_count, ComponentId};
use mrt_core::pipeline::export::{export, import, Format};
use mrt_core::pipeline::{assemble, Variant};
use mrt_core::sim::{run_with, sha256_hex, EventLog, RunOptions, ScenarioConfig};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
pub const LEDGER_HASH_FILE: &str = "ledger.sha256";
pub const WIRE_FILE: &str = "wire.bin";

#[derive(Parser, Debug)]
#[command(name = "mrt", version, about = "Micro-randomized trial simulator, dataset pipeline and audit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the simulator; writes the event log and the sealed ground-truth ledger.
    Simulate(SimulateArgs),
    /// Build the analysis dataset from an event log.
    Export(ExportArgs),
    /// Estimate the centered-treatment effect from an exported dataset.
    Analyze(AnalyzeArgs),
    /// Run the data-quality checklist over an export and its event log.
    Audit(AuditArgs),
    /// Count scheduled decision points for a configuration.
    Count(CountArgs),
    /// Re-derive every export variant from an event log alone.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario JSON file, or `default` for the 37-participant, 42-day design.
    #[arg(long, alias = "config", value_name = "PATH")]
    scenario: Option<String>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also write the framed wire capture of every transmission.
    #[arg(long)]
    wire: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Event log written by `simulate`.
    #[arg(long, value_name = "PATH")]
    events: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value = "zero", value_parser = ["raw", "zero", "redundant"])]
    variant: String,
    #[arg(long, default_value = "csv", value_parser = ["csv", "jsonl"])]
    format: String,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Exported dataset.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Format of `--data`; inferred from the extension when omitted.
    #[arg(long, value_parser = ["csv", "jsonl"])]
    format: Option<String>,
    #[arg(long, default_value = "suggestions")]
    component: String,
    /// Interaction with (A - p); repeatable.
    #[arg(long = "moderator")]
    moderators: Vec<String>,
    /// Main-effect control; repeatable.
    #[arg(long = "control")]
    controls: Vec<String>,
    /// Restrict to study days `START..END` (end exclusive).
    #[arg(long, value_name = "START..END")]
    days: Option<String>,
    /// Redundant-imputed export of the same run, for a sensitivity comparison.
    #[arg(long, value_name = "PATH")]
    compare: Option<PathBuf>,
    /// Label recorded in the report.
    #[arg(long, default_value = "zero", value_parser = ["raw", "zero", "redundant"])]
    variant: String,
    /// Writes `analysis.json` here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    #[arg(long, value_name = "PATH")]
    events: PathBuf,
    #[arg(long, value_parser = ["csv", "jsonl"])]
    format: Option<String>,
    /// Writes `audit.json` and `audit.txt` here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Print only this component's total.
    #[arg(long)]
    component: Option<String>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long, value_name = "PATH")]
    events: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value = "csv", value_parser = ["csv", "jsonl"])]
    format: String,
}

/// Failure classes mapped to exit status.
enum Outcome {
    Ok,
    AuditFailed,
}

fn load_scenario(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut s = match args.scenario.as_deref() {
        None | Some("default") => ScenarioConfig::standard(0),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading scenario {path}"))?;
            ScenarioConfig::from_json(&text).with_context(|| format!("scenario {path}"))?
        }
    };
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn format_of(explicit: Option<&str>, path: &Path) -> Result<Format> {
    let name = match explicit {
        Some(f) => f.to_string(),
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => "csv".into(),
            Some("jsonl") => "jsonl".into(),
            _ => bail!("cannot infer the format of {}; pass --format", path.display()),
        },
    };
    Ok(name.parse()?)
}

fn extension(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Jsonl => "jsonl",
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

fn read_log(path: &Path) -> Result<EventLog> {
    EventLog::from_jsonl(&read(path)?).with_context(|| format!("event log {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<Outcome> {
    let scenario = load_scenario(&a.scenario)?;
    log::info!(
        "simulating {} participants for {} days, seed {}",
        scenario.trial.participant_count, scenario.trial.study_days, scenario.seed
    );
    let out = run_with(&scenario, RunOptions { capture_wire: a.wire })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let events = out.log.to_jsonl()?;
    let (ledger, hash) = out.ledger.seal()?;
    write(&a.out.join(EVENTS_FILE), &events)?;
    write(&a.out.join(LEDGER_FILE), &ledger)?;
    write(&a.out.join(LEDGER_HASH_FILE), format!("{hash}\n"))?;
    if a.wire {
        write(&a.out.join(WIRE_FILE), &out.wire)?;
    }
    let summary = out.log.summary().cloned().unwrap_or_default();
    for c in &scenario.trial.components {
        println!("decision points {:<14} {}", c.id.as_str(), count_decision_points(&scenario.trial, &c.id)?);
    }
    println!("decision points total          {}", summary.decision_points);
    println!("randomization records          {}", summary.randomization_records);
    println!("treatments delivered           {}", summary.treatments_delivered);
    println!("faults fired                   {}", summary.faults_fired);
    println!("payloads generated / stored    {} / {}", summary.payloads_generated, summary.payloads_stored);
    println!("quarantined / duplicates       {} / {}", summary.quarantined, summary.duplicates);
    println!("left in outbox                 {}", summary.residual_outbox);
    println!("events sha256                  {}", sha256_hex(events.as_bytes()));
    println!("ledger sha256                  {hash}");
    Ok(Outcome::Ok)
}

fn export_cmd(a: ExportArgs) -> Result<Outcome> {
    let log = read_log(&a.events)?;
    let variant: Variant = a.variant.parse()?;
    let format: Format = a.format.parse()?;
    let data = assemble(&log)?;
    log::info!("{} rows, daily measures {:?}", data.rows.len(), data.daily_measures);
    let text = export(&data.variant(variant), &data.daily_measures, format)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("dataset.{}.{}", a.variant, extension(format)));
    write(&path, &text)?;
    println!("{} rows -> {}", data.rows.len(), path.display());
    Ok(Outcome::Ok)
}

fn parse_days(s: &str) -> Result<(u32, u32)> {
    let (a, b) = s.split_once("..").ok_or_else(|| anyhow!("--days expects START..END, got `{s}`"))?;
    let (a, b) = (a.trim().parse()?, b.trim().parse()?);
    if a >= b {
        bail!("--days range `{s}` is empty");
    }
    Ok((a, b))
}

fn analyze(a: AnalyzeArgs) -> Result<Outcome> {
    let (rows, _) = import(&read(&a.data)?, format_of(a.format.as_deref(), &a.data)?)?;
    let mut spec = EffectSpec {
        component_id: ComponentId::new(a.component),
        variant: a.variant,
        controls: a.controls,
        moderators: a.moderators,
        day_range: None,
    };
    if let Some(d) = &a.days {
        spec.day_range = Some(parse_days(d)?);
    }
    let report = match &a.compare {
        None => {
            let est = estimate(&rows, &spec)?;
            print!("{}", est.to_table());
            serde_json::to_string_pretty(&est)?
        }
        Some(path) => {
            let (other, _) = import(&read(path)?, format_of(a.format.as_deref(), path)?)?;
            let s = sensitivity_compare(&rows, &other, &spec)?;
            print!("{}", s.zero.to_table());
            print!("{}", s.redundant.to_table());
            for (name, d) in &s.deltas {
                println!("delta {name:<28} {d:>12.4}");
            }
            println!("rows differing between variants: {}", s.differing_rows);
            serde_json::to_string_pretty(&s)?
        }
    };
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        write(&dir.join("analysis.json"), report + "\n")?;
    }
    Ok(Outcome::Ok)
}

fn audit(a: AuditArgs) -> Result<Outcome> {
    let format = format_of(a.format.as_deref(), &a.data)?;
    let report = audit_text(&read(&a.data)?, format, &read(&a.events)?);
    let text = report.to_text(20);
    print!("{text}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        write(&dir.join("audit.json"), report.to_json() + "\n")?;
        write(&dir.join("audit.txt"), &text)?;
    }
    Ok(if report.passed() { Outcome::Ok } else { Outcome::AuditFailed })
}

fn count(a: CountArgs) -> Result<Outcome> {
    let s = load_scenario(&a.scenario)?;
    let trial = &s.trial;
    match a.component {
        Some(c) => println!("{}", count_decision_points(trial, &ComponentId::new(c))?),
        None => {
            let mut total = 0;
            for c in &trial.components {
                let n = count_decision_points(trial, &c.id)?;
                total += n;
                println!("{:<14} {n} ({} per participant)", c.id.as_str(), per_participant_count(trial, &c.id)?);
            }
            println!("{:<14} {total}", "total");
        }
    }
    Ok(Outcome::Ok)
}

fn replay(a: ReplayArgs) -> Result<Outcome> {
    let log = read_log(&a.events)?;
    let format: Format = a.format.parse()?;
    let data = assemble(&log)?;
    fs::create_dir_all(&a.out)?;
    for (name, v) in [("raw", Variant::Raw), ("zero", Variant::Zero), ("redundant", Variant::Redundant)] {
        let text = export(&data.variant(v), &data.daily_measures, format)?;
        let path = a.out.join(format!("dataset.{name}.{}", extension(format)));
        write(&path, &text)?;
        println!("{:<10} {} {}", name, sha256_hex(text.as_bytes()), path.display());
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Export(a) => export_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Audit(a) => audit(a),
        Command::Count(a) => count(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::AuditFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
