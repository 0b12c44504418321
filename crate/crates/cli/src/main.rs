//! `simtool`: run, sweep and export angular-droop simulations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use angdroop::checks::{self, Criterion};
use angdroop::config::load_config_str;
use angdroop::export::{self, TraceFormat, TraceMetadata};
use angdroop::presets::{preset, PresetOptions, PRESETS};
use angdroop::sim::{self, resolve_alias, with_parameter, ControlMode, RunOutput, ScenarioSpec};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

const EXIT_RUNTIME: u8 = 1;
const EXIT_ACCEPTANCE: u8 = 2;

#[derive(Parser)]
#[command(name = "simtool", version, about = "Grid-forming converter simulator with angular droop control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario. `run sweep ...` is the same as `sweep ...`.
    Run(RunArgs),
    /// Simulate a scenario once per parameter value.
    Sweep(SweepArgs),
    /// Convert a trace between CSV and JSON.
    Export(ExportArgs),
    /// List built-in scenarios.
    List,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file merged over the scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate the checks that apply to the scenario; exit 2 on failure.
    #[arg(long)]
    check: bool,
    /// Omit wall-clock fields so artifacts are byte-reproducible.
    #[arg(long)]
    seedless: bool,
    /// Resistance of every line, in ohms.
    #[arg(long)]
    line_resistance: Option<f64>,
    /// Control mode of every converter.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ControlMode>,
    /// Trace format.
    #[arg(long, default_value = "csv")]
    format: TraceFormat,
    /// Simulated time in seconds, replacing the scenario's.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in scenario, `custom` (config only) or `sweep`.
    scenario: String,
    #[command(flatten)]
    common: Common,
    /// With `run sweep`: parameter to vary.
    #[arg(long)]
    param: Option<String>,
    /// With `run sweep`: comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// With `run sweep`: base scenario.
    #[arg(long, default_value = "loadstep")]
    base: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Base scenario, or `custom` with --config.
    #[arg(default_value = "loadstep")]
    scenario: String,
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ExportArgs {
    /// Trace written by `run` (CSV or JSON).
    input: PathBuf,
    #[arg(long)]
    format: TraceFormat,
    #[arg(long)]
    out: PathBuf,
    /// Keep only these channels.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<String>,
}

fn parse_mode(s: &str) -> Result<ControlMode, String> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown mode {s:?}; expected direct or indirect"))
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    scenario: String,
    config_hash: String,
    tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    started: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    finished: Option<String>,
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checks_passed: Option<bool>,
}

/// Serializes with object keys sorted at every level.
fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> =
                keys.iter().map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&m[*k]))).collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Hash of the resolved scenario without its display name.
fn config_hash(spec: &ScenarioSpec) -> Result<String> {
    let mut v = serde_json::to_value(spec)?;
    if let Value::Object(m) = &mut v {
        m.remove("name");
    }
    Ok(format!("sha256:{}", hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))))
}

fn now(seedless: bool) -> Option<String> {
    (!seedless).then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dir_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "._-=".contains(c) { c } else { '_' }).collect()
}

fn resolve_spec(scenario: &str, common: &Common) -> Result<ScenarioSpec> {
    let opts = PresetOptions { line_resistance: common.line_resistance, mode: common.mode };
    let mut spec = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut doc: Value = if text.trim().is_empty() {
                Value::Object(Default::default())
            } else {
                serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))?
            };
            if let Value::Object(m) = &mut doc {
                match m.get("preset").and_then(Value::as_str) {
                    Some(p) if scenario != "custom" && p != scenario => {
                        bail!("{}: preset {p:?} does not match scenario {scenario:?}", path.display())
                    }
                    None if scenario != "custom" => {
                        m.insert("preset".into(), Value::String(scenario.into()));
                    }
                    _ => {}
                }
            }
            load_config_str(&doc.to_string(), &opts).with_context(|| format!("config {}", path.display()))?
        }
        None if scenario == "custom" => bail!("scenario `custom` needs --config"),
        None => preset(scenario, &opts)?,
    };
    if let Some(d) = common.duration {
        spec.duration = d;
        spec.validate()?;
    }
    Ok(spec)
}

/// Writes trace, summary and resolved config for one run into `dir`.
fn write_run(dir: &Path, spec: &ScenarioSpec, out: &RunOutput, common: &Common) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let trace_name = format!("trace.{}", common.format.extension());
    let meta = TraceMetadata::new(&spec.name, &out.trace, now(common.seedless));
    export::write_trace(&out.trace, &dir.join(&trace_name), common.format, &meta)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    write_json(&dir.join("config.json"), spec)?;
    let mut files = BTreeMap::new();
    if common.format == TraceFormat::Csv {
        files.insert("trace_meta".into(), format!("{trace_name}.meta.json"));
    }
    files.insert("trace".into(), trace_name);
    files.insert("summary".into(), "summary.json".into());
    files.insert("config".into(), "config.json".into());
    Ok(files)
}

fn print_checks(list: &[Criterion]) -> bool {
    if list.is_empty() {
        println!("no checks apply to this scenario");
    }
    for c in list {
        println!("{}", c.line());
    }
    list.iter().all(|c| c.passed)
}

fn print_summary(out: &RunOutput) {
    let s = &out.summary;
    for (k, c) in s.converters.iter().enumerate() {
        println!(
            "converter {}: P^s = {:.1} W, Q^s = {:.1} var, omega^s = {:.4} rad/s, dtheta^s = {:.5} rad",
            k + 1,
            c.p_s,
            c.q_s,
            c.omega_s,
            c.delta_theta_s
        );
    }
    if let Some(d) = s.theta_diff_s {
        println!("theta1 - theta2 = {d:.5} rad");
    }
    for w in &s.warnings {
        println!("warning: {w}");
    }
}

fn run(args: RunArgs) -> Result<u8> {
    if args.scenario == "sweep" {
        let Some(param) = args.param else { bail!("`run sweep` needs --param") };
        if args.values.is_empty() {
            bail!("`run sweep` needs --values");
        }
        return sweep(SweepArgs { scenario: args.base, param, values: args.values, common: args.common });
    }
    let common = &args.common;
    let started = now(common.seedless);
    let spec = resolve_spec(&args.scenario, common)?;
    let out = sim::run_scenario(&spec)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(dir_name(&spec.name)));
    let mut outputs = write_run(&dir, &spec, &out, common)?;
    print_summary(&out);
    let mut checks_passed = None;
    if common.check {
        let list = checks::scenario_checks(&spec, &out);
        checks_passed = Some(print_checks(&list));
        write_json(&dir.join("checks.json"), &list)?;
        outputs.insert("checks".into(), "checks.json".into());
    }
    let manifest = Manifest {
        command: "run".into(),
        scenario: spec.name.clone(),
        config_hash: config_hash(&spec)?,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: now(common.seedless),
        outputs,
        checks_passed,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {}", dir.display());
    if let Some(a) = &out.summary.aborted {
        eprintln!("error: run aborted at t = {:.6} s: {}", a.time, a.message);
        return Ok(EXIT_RUNTIME);
    }
    Ok(if checks_passed == Some(false) { EXIT_ACCEPTANCE } else { 0 })
}

#[derive(Serialize)]
struct SweepEntry {
    value: f64,
    scenario: String,
    dir: String,
    p_s: Option<f64>,
    omega_s: Option<f64>,
    delta_theta_s: Option<f64>,
    nadir_depth: Option<f64>,
}

fn sweep(args: SweepArgs) -> Result<u8> {
    let common = &args.common;
    let started = now(common.seedless);
    let base = resolve_spec(&args.scenario, common)?;
    let specs: Vec<ScenarioSpec> =
        args.values.iter().map(|v| with_parameter(&base, &args.param, *v)).collect::<Result<_, _>>()?;
    let results = sim::sweep(&base, &args.param, &args.values);
    let root = common.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(dir_name(&format!("{}-sweep-{}", base.name, args.param)))
    });
    let mut entries = Vec::new();
    let mut runs = Vec::new();
    let mut outputs = BTreeMap::new();
    let mut list = Vec::new();
    let mut status = 0;
    for ((value, spec), res) in args.values.iter().zip(&specs).zip(results) {
        let out = res?;
        let sub = dir_name(&format!("{}={value}", args.param));
        let files = write_run(&root.join(&sub), spec, &out, common)?;
        for (k, f) in files {
            outputs.insert(format!("{sub}/{k}"), format!("{sub}/{f}"));
        }
        let first = out.summary.converters.first();
        entries.push(SweepEntry {
            value: *value,
            scenario: spec.name.clone(),
            dir: sub,
            p_s: first.map(|c| c.p_s),
            omega_s: first.map(|c| c.omega_s),
            delta_theta_s: first.map(|c| c.delta_theta_s),
            nadir_depth: first.and_then(|c| c.nadir).map(|n| n.depth),
        });
        println!(
            "{} = {value}: P^s = {:.1} W, nadir depth = {}",
            args.param,
            first.map_or(f64::NAN, |c| c.p_s),
            first.and_then(|c| c.nadir).map_or("-".into(), |n| format!("{:.4} rad/s", n.depth))
        );
        if let Some(a) = &out.summary.aborted {
            eprintln!("error: {} aborted at t = {:.6} s: {}", spec.name, a.time, a.message);
            status = EXIT_RUNTIME;
        }
        if common.check {
            list.extend(checks::scenario_checks(spec, &out));
        }
        runs.push(out);
    }
    write_json(&root.join("sweep.json"), &entries)?;
    outputs.insert("sweep".into(), "sweep.json".into());
    let mut checks_passed = None;
    if common.check {
        match resolve_alias(&args.param).rsplit('.').next() {
            Some("alpha") => list.push(checks::check_alpha_trend(&args.values, &runs)),
            Some("gamma") => list.push(checks::check_gamma_scaling(&args.values, &runs)),
            _ => {}
        }
        checks_passed = Some(print_checks(&list));
        write_json(&root.join("checks.json"), &list)?;
        outputs.insert("checks".into(), "checks.json".into());
    }
    let manifest = Manifest {
        command: format!("sweep {}={:?}", args.param, args.values),
        scenario: base.name.clone(),
        config_hash: config_hash(&base)?,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: now(common.seedless),
        outputs,
        checks_passed,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    println!("wrote {}", root.display());
    if status != 0 {
        return Ok(status);
    }
    Ok(if checks_passed == Some(false) { EXIT_ACCEPTANCE } else { 0 })
}

fn export_trace(args: ExportArgs) -> Result<u8> {
    let mut trace = export::read_trace(&args.input)?;
    if !args.channels.is_empty() {
        if let Some(missing) = args.channels.iter().find(|c| trace.channel(c).is_none()) {
            bail!("{}: no channel {missing:?}", args.input.display());
        }
        trace = trace.select(&args.channels);
    }
    let meta = match export::read_metadata(&args.input)? {
        Some(m) => TraceMetadata { samples: trace.len(), channels: trace.names.clone(), ..m },
        None => TraceMetadata::new(
            args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("trace"),
            &trace,
            None,
        ),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    export::write_trace(&trace, &args.out, args.format, &meta)?;
    println!("wrote {} ({} samples, {} channels)", args.out.display(), trace.len(), trace.names.len());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_RUNTIME } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Export(a) => export_trace(a),
        Command::List => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
