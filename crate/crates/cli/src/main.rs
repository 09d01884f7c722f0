//! `rvm`: run, check, audit, and fuzz programs for the resource VM.
//!
//! Exit codes: 0 success, 1 aborted (or step budget exhausted), 2 rejected,
//! invariant fault, or failed audit, 3 parse or validation error, 4 usage
//! error.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use rvm_core::generator::{run_property_suite, GenConfig};
use rvm_core::interpreter::{execute_transaction, ExecOptions, Mutation, TxOutcome};
use rvm_core::safety::{audit_trace, execute_checked};
use rvm_core::textfmt::{parse_program_bytes, parse_state_bytes, serialize_state, ParseDiagnostic};
use rvm_core::tracelog::{audit_log, read_trace, render_trace};

const EXIT_ABORTED: u8 = 1;
const EXIT_REJECTED: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_USAGE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "rvm",
    version,
    about = "Bytecode VM for linear resources with dynamic safety checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a program as one transaction against a global state.
    Run {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        state: PathBuf,
        /// Where to write the final state on success.
        #[arg(long)]
        out: PathBuf,
        /// Write the step log here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Check well-formedness and conservation after every step.
        #[arg(long)]
        checked: bool,
        #[arg(long, default_value_t = rvm_core::interpreter::DEFAULT_STEP_BUDGET)]
        budget: u64,
        /// Skip the conservation audit of the final state.
        #[arg(long)]
        no_audit: bool,
    },
    /// Parse and statically validate a program.
    Check {
        #[arg(long)]
        program: PathBuf,
    },
    /// Re-verify resource conservation from a trace and two state files.
    Audit {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        initial: PathBuf,
        #[arg(long = "final")]
        final_state: PathBuf,
    },
    /// Run the property suite over generated programs.
    Fuzz {
        #[arg(long)]
        seeds: usize,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_instr: Option<usize>,
        #[arg(long)]
        resource_prob: Option<f64>,
        /// Chance per template of a deliberate precondition violation.
        #[arg(long)]
        misuse_prob: Option<f64>,
        /// Run against a deliberately broken interpreter.
        #[arg(long, num_args = 0..=1, default_missing_value = "copy-resources", hide = true)]
        inject_bug: Option<Mutation>,
        /// Write one line per seed here.
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

/// A failure carrying its exit code.
struct Exit {
    code: u8,
    message: String,
}

impl Exit {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        Exit::new(EXIT_INPUT, format!("{e:#}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run {
            program,
            state,
            out,
            trace,
            checked,
            budget,
            no_audit,
        } => cmd_run(&program, &state, &out, trace.as_deref(), checked, budget, !no_audit),
        Command::Check { program } => cmd_check(&program),
        Command::Audit {
            trace,
            initial,
            final_state,
        } => cmd_audit(&trace, &initial, &final_state),
        Command::Fuzz {
            seeds,
            seed,
            max_instr,
            resource_prob,
            misuse_prob,
            inject_bug,
            records,
        } => {
            let mut cfg = GenConfig::default().with_seed(seed);
            if let Some(k) = max_instr {
                cfg.max_instructions = k;
            }
            if let Some(p) = resource_prob {
                cfg.resource_probability = p;
            }
            if let Some(p) = misuse_prob {
                cfg.misuse_probability = p;
            }
            cmd_fuzz(seeds, &cfg, inject_bug, records.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn say(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn diagnostics(path: &Path, diags: &[ParseDiagnostic]) -> Exit {
    let lines: Vec<String> = diags.iter().map(|d| format!("{}:{d}", path.display())).collect();
    Exit::new(EXIT_INPUT, lines.join("\n"))
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write {}", path.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn cmd_run(
    program_path: &Path,
    state_path: &Path,
    out: &Path,
    trace_path: Option<&Path>,
    checked: bool,
    budget: u64,
    audit: bool,
) -> Result<(), Exit> {
    if budget == 0 {
        return Err(Exit::new(EXIT_USAGE, "--budget must be positive"));
    }
    let program = parse_program_bytes(&read(program_path)?).map_err(|d| diagnostics(program_path, &d))?;
    let initial = parse_state_bytes(&read(state_path)?, &program.structs).map_err(|d| diagnostics(state_path, &d))?;
    let options = ExecOptions {
        budget,
        ..ExecOptions::default()
    };
    let result = if checked {
        execute_checked(&program, &initial, options)
    } else {
        execute_transaction(&program, &initial, options)
    };
    if let Some(path) = trace_path {
        let log = render_trace(&program, &initial, &result).map_err(|e| Exit::new(EXIT_REJECTED, e.to_string()))?;
        write_atomic(path, log.as_bytes())?;
    }
    let steps = result.trace.steps_taken();
    match &result.outcome {
        TxOutcome::Success => {}
        TxOutcome::Aborted(k) => {
            return Err(Exit::new(EXIT_ABORTED, format!("aborted after {steps} steps: {k}")));
        }
        TxOutcome::BudgetExhausted => {
            return Err(Exit::new(EXIT_ABORTED, format!("step budget of {budget} exhausted")));
        }
        TxOutcome::Rejected(s) => {
            return Err(Exit::new(EXIT_REJECTED, format!("rejected after {steps} steps: {s}")));
        }
        TxOutcome::InvariantFault(f) => {
            return Err(Exit::new(EXIT_REJECTED, format!("invariant fault: {f}")));
        }
    }
    say(&format!("success: {steps} steps\n"));
    if audit {
        let report = audit_trace(&initial, &result.trace, &result.state);
        say(&report.to_string());
        if !report.holds() {
            return Err(Exit::new(EXIT_REJECTED, "resource audit failed; output not written"));
        }
    }
    let text = serialize_state(&result.state).map_err(|e| Exit::new(EXIT_REJECTED, e.to_string()))?;
    write_atomic(out, text.as_bytes())?;
    Ok(())
}

fn cmd_check(program_path: &Path) -> Result<(), Exit> {
    let program = parse_program_bytes(&read(program_path)?).map_err(|d| diagnostics(program_path, &d))?;
    say(&format!(
        "ok: {} struct(s), {} local(s), {} instruction(s)\n",
        program.structs.len(),
        program.locals.len(),
        program.code.len()
    ));
    Ok(())
}

fn cmd_audit(trace_path: &Path, initial_path: &Path, final_path: &Path) -> Result<(), Exit> {
    let file = fs::File::open(trace_path).with_context(|| format!("cannot read {}", trace_path.display()))?;
    let log = read_trace(BufReader::new(file)).map_err(|e| Exit::new(EXIT_INPUT, e.to_string()))?;
    let text = |p: &Path| -> Result<String, Exit> {
        String::from_utf8(read(p)?).map_err(|_| Exit::new(EXIT_INPUT, format!("{} is not UTF-8", p.display())))
    };
    let verdict = audit_log(&log, &text(initial_path)?, &text(final_path)?)
        .map_err(|e| Exit::new(EXIT_REJECTED, format!("audit failed: {e}")))?;
    say(&verdict.to_string());
    if verdict.audit.holds() {
        Ok(())
    } else {
        Err(Exit::new(
            EXIT_REJECTED,
            "audit failed: resource conservation does not hold",
        ))
    }
}

fn cmd_fuzz(seeds: usize, cfg: &GenConfig, mutation: Option<Mutation>, records: Option<&Path>) -> Result<(), Exit> {
    cfg.validate().map_err(|e| Exit::new(EXIT_USAGE, e))?;
    let report = run_property_suite(seeds, cfg, mutation);
    say(&report.to_string());
    if let Some(path) = records {
        let lines: String = report.records.iter().map(|r| format!("{r}\n")).collect();
        write_atomic(path, lines.as_bytes())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Exit::new(
            EXIT_REJECTED,
            format!("{} of {} seeds failed", report.failures, report.seeds),
        ))
    }
}
