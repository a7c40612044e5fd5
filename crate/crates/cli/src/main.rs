//! `agentsafe`: validate registers, lint policies, serve the gateway, run the
//! safety eval, and verify or summarize ledgers.
//!
//! Exit codes: 0 success, 1 invalid input or failed check, 2 usage error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use agentsafe_core::canonical::CanonicalJson;
use agentsafe_core::escalation::{escalation_stats, EscalationStats};
use agentsafe_core::evalharness::{load_scenarios, run_bank, HarnessConfig};
use agentsafe_core::gateway::GatewayConfig;
use agentsafe_core::ledger::{build_apg, export_apg, parse_ledger_text, verify_chain, ApgFormat, VerificationReport};
use agentsafe_core::policy::{lint_policies, DiagSeverity, PolicySet};
use agentsafe_core::register::{load_register, RiskRegister};
use agentsafe_core::triage::{measure_interruptibility, SLAReport};

#[derive(Parser)]
#[command(name = "agentsafe", version, about = "Runtime governance for tool-using agents")]
struct Cli {
    /// Gateway config file; falls back to $AGENTSAFE_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and cross-check a risk register.
    Validate {
        #[arg(long)]
        register: PathBuf,
        /// Also validate a scenario bank against the register.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Report policy diagnostics against a register; fails on errors.
    Lint {
        #[arg(long)]
        register: PathBuf,
        #[arg(long)]
        policies: PathBuf,
    },
    /// Run the gateway HTTP service until interrupted.
    Serve {
        /// Listen address; overrides `bind` in the config.
        #[arg(long)]
        bind: Option<SocketAddr>,
        /// Register the deterministic mock tools as adapters.
        #[arg(long)]
        mock_tools: bool,
    },
    /// Replay a scenario bank and write the metrics report; fails if any scenario fails.
    Eval {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        register: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        /// Where to write the full JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify a ledger file's hash chain and signatures.
    Verify {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Export one session's provenance graph from a ledger file.
    Apg {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long, default_value = "json")]
        format: ApgFormat,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interruptibility SLA and escalation statistics from a ledger file.
    Report {
        #[arg(long)]
        ledger: PathBuf,
    },
}

type Outcome = Result<ExitCode, String>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let json = cli.json;
    let config = || GatewayConfig::discover(cli.config.as_deref()).map_err(|e| e.to_string());
    match cli.command {
        Command::Validate { register, bank } => validate(json, &register, bank.as_deref()),
        Command::Lint { register, policies } => lint(json, &register, &policies),
        Command::Serve { bind, mock_tools } => serve(config()?, bind, mock_tools),
        Command::Eval {
            bank,
            register,
            policies,
            report,
            seed,
        } => eval(json, config()?, &bank, &register, &policies, report.as_deref(), seed),
        Command::Verify { ledger } => verify(json, &ledger),
        Command::Apg {
            ledger,
            session,
            format,
            out,
        } => apg(&ledger, &session, format, out.as_deref()),
        Command::Report { ledger } => report(json, config()?, &ledger),
    }
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn canonical<T: Serialize>(value: &T) -> String {
    CanonicalJson::from_serialize(value)
        .expect("output types serialize")
        .into_string()
}

fn exit(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn load_register_file(path: &Path) -> Result<RiskRegister, String> {
    load_register(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_policy_file(path: &Path) -> Result<PolicySet, String> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("policies");
    PolicySet::parse(&read(path)?, name).map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct ValidateOutput {
    valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    register_id: Option<String>,
    capabilities: usize,
    risks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenarios: Option<usize>,
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn validate(json: bool, register: &Path, bank: Option<&Path>) -> Outcome {
    let text = read(register)?;
    let mut out = ValidateOutput {
        valid: false,
        register_id: None,
        capabilities: 0,
        risks: 0,
        scenarios: None,
        warnings: vec![],
        error: None,
    };
    match load_register(&text) {
        Ok(reg) => {
            out.register_id = Some(reg.register_id.clone());
            out.capabilities = reg.capabilities.len();
            out.risks = reg.risks.len();
            out.valid = true;
            if let Some(dir) = bank {
                match load_scenarios(dir, &reg) {
                    Ok(b) => {
                        out.scenarios = Some(b.scenarios.len());
                        out.warnings = b.warnings;
                    }
                    Err(e) => {
                        out.valid = false;
                        out.error = Some(e.to_string());
                    }
                }
            }
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    if json {
        println!("{}", canonical(&out));
    } else if out.valid {
        println!(
            "register {} is valid: {} capabilities, {} risks",
            out.register_id.as_deref().unwrap_or(""),
            out.capabilities,
            out.risks
        );
        if let Some(n) = out.scenarios {
            println!("bank: {n} scenarios");
        }
        for w in &out.warnings {
            println!("warning: {w}");
        }
    } else {
        println!("invalid: {}", out.error.as_deref().unwrap_or(""));
    }
    Ok(exit(out.valid))
}

fn lint(json: bool, register: &Path, policies: &Path) -> Outcome {
    let reg = load_register_file(register)?;
    let set = load_policy_file(policies)?;
    let diags = lint_policies(&set, &reg);
    let errors = diags.iter().filter(|d| d.severity == DiagSeverity::Error).count();
    if json {
        println!("{}", canonical(&diags));
    } else {
        for d in &diags {
            let severity = match d.severity {
                DiagSeverity::Error => "error",
                DiagSeverity::Warning => "warning",
            };
            println!("{severity}[{}]: {}", d.code, d.message);
        }
        println!("{} policies, {} diagnostics, {errors} errors", set.policies.len(), diags.len());
    }
    Ok(exit(errors == 0))
}

fn serve(mut config: GatewayConfig, bind: Option<SocketAddr>, mock_tools: bool) -> Outcome {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    if let Some(addr) = bind {
        config.bind = addr.to_string();
    }
    let addr: SocketAddr = config
        .bind
        .parse()
        .map_err(|e| format!("bad bind address `{}`: {e}", config.bind))?;
    let gateway = agentsafe_server::build_gateway(config, mock_tools).map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime
        .block_on(agentsafe_server::serve(Arc::new(gateway), addr))
        .map_err(|e| e.to_string())?;
    Ok(ExitCode::SUCCESS)
}

fn eval(
    json: bool,
    config: GatewayConfig,
    bank: &Path,
    register: &Path,
    policies: &Path,
    report_path: Option<&Path>,
    seed: Option<u64>,
) -> Outcome {
    let reg = load_register_file(register)?;
    let set = load_policy_file(policies)?;
    let scenarios = load_scenarios(bank, &reg).map_err(|e| e.to_string())?;
    let mut cfg = HarnessConfig {
        gateway: config,
        ..HarnessConfig::default()
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_bank(&scenarios, Arc::new(reg), Arc::new(set), &cfg).map_err(|e| e.to_string())?;
    if let Some(path) = report_path {
        write(path, &format!("{}\n", report.to_canonical_json()))?;
    }
    let m = &report.metrics;
    if json {
        println!("{}", report.metrics_canonical_json());
    } else {
        let rate = |r: Option<f64>| r.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        for w in &report.warnings {
            println!("warning: {w}");
        }
        println!("scenarios passed:            {}/{}", m.scenarios_passed, m.scenarios_total);
        println!("injection block rate:        {}", rate(m.prompt_injection_block_rate));
        println!("exfiltration recall:         {}", rate(m.exfiltration_detection_recall));
        println!("hallucination-to-action:     {}", rate(m.hallucination_to_action_rate));
        println!("interruptibility success:    {}", rate(m.interruptibility_success_rate));
        println!("risk coverage score:         {:.4}", m.risk_coverage_score);
        if !m.uncovered_risks.is_empty() {
            println!("uncovered risks:             {}", m.uncovered_risks.join(", "));
        }
        for r in report.results.iter().filter(|r| !r.passed) {
            println!("FAILED {}", r.scenario_id);
        }
    }
    Ok(exit(m.scenarios_passed == m.scenarios_total))
}

fn verify(json: bool, ledger: &Path) -> Outcome {
    let report =
        agentsafe_core::ledger::verify_ledger_text(&read(ledger)?).map_err(|e| format!("{}: {e}", ledger.display()))?;
    if json {
        println!("{}", canonical(&report));
    } else {
        print_verification(&report);
    }
    Ok(exit(report.valid))
}

fn print_verification(report: &VerificationReport) {
    match (report.first_bad_seq, report.failure) {
        (Some(seq), Some(failure)) => println!(
            "INVALID first_bad_seq={seq} failure={failure} verified_records={}",
            report.verified_records
        ),
        _ => println!("valid records={} head={}", report.verified_records, report.head_hash),
    }
}

fn apg(ledger: &Path, session: &str, format: ApgFormat, out: Option<&Path>) -> Outcome {
    let (header, records, bad_line) = parse_ledger_text(&read(ledger)?).map_err(|e| e.to_string())?;
    if let Some(line) = bad_line {
        return Err(format!("{}: malformed record at line {}", ledger.display(), line + 2));
    }
    let graph = build_apg(&header, &records, session).map_err(|e| e.to_string())?;
    let mut text = export_apg(&graph, format);
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match out {
        Some(path) => write(path, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LedgerReport {
    ledger_id: String,
    records: usize,
    verification: VerificationReport,
    sla: SLAReport,
    escalations: EscalationStats,
}

fn report(json: bool, config: GatewayConfig, ledger: &Path) -> Outcome {
    let (header, records, bad_line) = parse_ledger_text(&read(ledger)?).map_err(|e| e.to_string())?;
    if let Some(line) = bad_line {
        return Err(format!("{}: malformed record at line {}", ledger.display(), line + 2));
    }
    let verification = verify_chain(&header, &records);
    if !verification.valid {
        if json {
            println!("{}", canonical(&verification));
        } else {
            print_verification(&verification);
        }
        return Ok(ExitCode::from(1));
    }
    let out = LedgerReport {
        ledger_id: header.ledger_id.clone(),
        records: records.len(),
        sla: measure_interruptibility(&records, config.sla),
        escalations: escalation_stats(&records),
        verification,
    };
    if json {
        println!("{}", canonical(&out));
    } else {
        let s = &out.sla;
        println!("ledger {} ({} records, verified)", out.ledger_id, out.records);
        println!(
            "interruptibility: {}/{} halts within {} ms (min success {}); meets SLA: {}{}",
            s.successes,
            s.n,
            s.sla.max_halt_ms,
            s.sla.min_success_prob,
            s.meets_sla,
            if s.vacuous { " (no halts recorded)" } else { "" }
        );
        for (bucket, n) in &s.histogram {
            println!("  {bucket}: {n}");
        }
        let e = &out.escalations;
        println!("escalations: {} opened, {} pending", e.opened, e.pending);
        for (status, n) in &e.by_status {
            println!("  {status}: {n}");
        }
        if let Some(l) = &e.operator_latency {
            println!(
                "operator response: n={} mean={:.0} ms median={:.0} ms max={} ms",
                l.n, l.mean_ms, l.median_ms, l.max_ms
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
