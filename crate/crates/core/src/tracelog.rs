//! Line-delimited JSON trace logs and their offline audit.
//!
//! A log is a header line, one record per executed step, and a terminal
//! line:
//!
//! ```text
//! {"structs":"resource Coin { value: u64 }\n","initial_digest":"…","initial_resources":["t0"]}
//! {"step":0,"pc":0,"instr":"LoadConst 5","event":"none","outcome":"continue"}
//! {"result":"success","final_digest":"…","final_resources":["t0","t1"]}
//! ```
//!
//! Tags never appear in state files, so the log records the resource tags of
//! both states in canonical order: entries as serialized, each value in
//! pre-order. Digests are SHA-256 over the canonical serialization and
//! bind the log to the state files it was produced with.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::interpreter::{Event, TransactionResult, TxOutcome};
use crate::program::{Program, StructTable};
use crate::safety::TraceAudit;
use crate::state::GlobalState;
use crate::textfmt::{parse_state, parse_structs, render_structs, serialize_state, SerializeError};
use crate::values::ResourceTag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub structs: String,
    pub initial_digest: String,
    pub initial_resources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    pub pc: usize,
    pub instr: String,
    pub event: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terminal {
    pub result: String,
    pub final_digest: String,
    pub final_resources: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceLog {
    pub header: Option<Header>,
    pub steps: Vec<StepRecord>,
    pub terminal: Option<Terminal>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceLogError {
    #[error("trace line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("trace has steps but no header")]
    MissingHeader,
    #[error("trace has no terminal record")]
    MissingTerminal,
    #[error("{0} state does not match the digest recorded in the trace")]
    DigestMismatch(&'static str),
    #[error("{which} state holds {found} resource values but the trace records {recorded}")]
    ResourceCountMismatch {
        which: &'static str,
        found: usize,
        recorded: usize,
    },
    #[error("{which} state: {message}")]
    State { which: &'static str, message: String },
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Resource tags of a finalized state in canonical order.
pub fn canonical_resources(st: &GlobalState) -> Vec<ResourceTag> {
    st.globals
        .values()
        .filter_map(|c| st.memory.get(c))
        .flat_map(|tv| tv.resource_tags_preorder())
        .collect()
}

fn tag_strings(tags: &[ResourceTag]) -> Vec<String> {
    tags.iter().map(|t| t.to_string()).collect()
}

fn parse_tag(s: &str) -> Option<ResourceTag> {
    s.strip_prefix('t')?.parse().ok().map(ResourceTag)
}

pub fn parse_event(s: &str) -> Option<Event> {
    if s == "none" {
        return Some(Event::None);
    }
    if let Some(t) = s.strip_prefix("pack:") {
        return parse_tag(t).map(Event::PackResource);
    }
    s.strip_prefix("unpack:").and_then(parse_tag).map(Event::UnpackResource)
}

pub fn result_label(outcome: &TxOutcome) -> String {
    match outcome {
        TxOutcome::Success => "success".into(),
        TxOutcome::Aborted(k) => format!("aborted:{k}"),
        TxOutcome::Rejected(s) => format!("rejected:{}", s.rule),
        TxOutcome::BudgetExhausted => "budget_exhausted".into(),
        TxOutcome::InvariantFault(f) => format!("invariant_fault:{}", f.short_name()),
    }
}

/// Writes the complete log of `result`, a run of `program` from `initial`.
pub fn write_trace(
    out: &mut impl Write,
    program: &Program,
    initial: &GlobalState,
    result: &TransactionResult,
) -> Result<(), TraceLogError> {
    let initial_text = serialize_state(initial)?;
    let final_text = serialize_state(&result.state)?;
    let header = Header {
        structs: render_structs(&program.structs),
        initial_digest: digest(&initial_text),
        initial_resources: tag_strings(&canonical_resources(initial)),
    };
    write_line(out, &header)?;
    for e in &result.trace.entries {
        let rec = StepRecord {
            step: e.step,
            pc: e.pc,
            instr: e.instr.to_string(),
            event: e.event.to_string(),
            outcome: e.outcome.to_string(),
        };
        write_line(out, &rec)?;
    }
    let terminal = Terminal {
        result: result_label(&result.outcome),
        final_digest: digest(&final_text),
        final_resources: tag_strings(&canonical_resources(&result.state)),
    };
    write_line(out, &terminal)?;
    Ok(())
}

pub fn render_trace(
    program: &Program,
    initial: &GlobalState,
    result: &TransactionResult,
) -> Result<String, TraceLogError> {
    let mut buf = Vec::new();
    write_trace(&mut buf, program, initial, result)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

fn write_line(out: &mut impl Write, record: &impl Serialize) -> io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

/// Reads a log line by line. An empty input is an empty log.
pub fn read_trace(input: impl BufRead) -> Result<TraceLog, TraceLogError> {
    let mut log = TraceLog::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| TraceLogError::Malformed {
            line: n,
            message: e.to_string(),
        };
        if log.terminal.is_some() {
            return Err(TraceLogError::Malformed {
                line: n,
                message: "record after the terminal record".into(),
            });
        }
        if log.header.is_none() {
            log.header = Some(serde_json::from_str(&line).map_err(bad)?);
        } else if let Ok(step) = serde_json::from_str::<StepRecord>(&line) {
            if parse_event(&step.event).is_none() {
                return Err(TraceLogError::Malformed {
                    line: n,
                    message: format!("unknown event `{}`", step.event),
                });
            }
            log.steps.push(step);
        } else {
            log.terminal = Some(serde_json::from_str(&line).map_err(bad)?);
        }
    }
    Ok(log)
}

/// Resources introduced and eliminated according to the step records.
pub fn introduced_eliminated(steps: &[StepRecord]) -> (BTreeSet<ResourceTag>, BTreeSet<ResourceTag>) {
    let (mut intro, mut elim) = (BTreeSet::new(), BTreeSet::new());
    for s in steps {
        match parse_event(&s.event) {
            Some(Event::PackResource(t)) => {
                intro.insert(t);
            }
            Some(Event::UnpackResource(t)) => {
                elim.insert(t);
            }
            _ => {}
        }
    }
    (intro, elim)
}

/// Verdict of an offline audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OfflineAudit {
    pub result: String,
    pub audit: TraceAudit,
}

impl fmt::Display for OfflineAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "result:     {}", self.result)?;
        write!(f, "{}", self.audit)
    }
}

fn recorded_tags(
    which: &'static str,
    text: &str,
    decls: &StructTable,
    recorded: &[String],
) -> Result<BTreeSet<ResourceTag>, TraceLogError> {
    let st = parse_state(text, decls).map_err(|d| TraceLogError::State {
        which,
        message: d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
    })?;
    let found = canonical_resources(&st).len();
    if found != recorded.len() {
        return Err(TraceLogError::ResourceCountMismatch {
            which,
            found,
            recorded: recorded.len(),
        });
    }
    recorded
        .iter()
        .map(|s| {
            parse_tag(s).ok_or_else(|| TraceLogError::State {
                which,
                message: format!("bad tag `{s}` in trace"),
            })
        })
        .collect()
}

/// Re-verifies resource conservation from a log and the two state files.
///
/// The state files are re-parsed with the log's struct declarations and
/// checked against the recorded digests. Runs that did not succeed are
/// audited as the pre-state against itself. An empty log audits two
/// identical states.
pub fn audit_log(log: &TraceLog, initial_text: &str, final_text: &str) -> Result<OfflineAudit, TraceLogError> {
    let Some(header) = &log.header else {
        if !log.steps.is_empty() {
            return Err(TraceLogError::MissingHeader);
        }
        let same = canonicalize(initial_text)? == canonicalize(final_text)?;
        let empty = BTreeSet::new();
        let fin = if same {
            empty.clone()
        } else {
            BTreeSet::from([ResourceTag(u64::MAX)])
        };
        return Ok(OfflineAudit {
            result: "empty".into(),
            audit: TraceAudit::new(empty.clone(), empty.clone(), empty, fin),
        });
    };
    let terminal = log.terminal.as_ref().ok_or(TraceLogError::MissingTerminal)?;
    let decls = parse_structs(&header.structs).map_err(|d| TraceLogError::State {
        which: "trace header",
        message: d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
    })?;
    let canon = |which, text: &str| -> Result<String, TraceLogError> {
        let st = parse_state(text, &decls).map_err(|d| TraceLogError::State {
            which,
            message: d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
        })?;
        Ok(serialize_state(&st)?)
    };
    let initial_canon = canon("initial", initial_text)?;
    let final_canon = canon("final", final_text)?;
    if digest(&initial_canon) != header.initial_digest {
        return Err(TraceLogError::DigestMismatch("initial"));
    }
    if digest(&final_canon) != terminal.final_digest {
        return Err(TraceLogError::DigestMismatch("final"));
    }
    let initial = recorded_tags("initial", &initial_canon, &decls, &header.initial_resources)?;
    let final_resources = recorded_tags("final", &final_canon, &decls, &terminal.final_resources)?;
    let (introduced, eliminated) = if terminal.result == "success" {
        introduced_eliminated(&log.steps)
    } else {
        (BTreeSet::new(), BTreeSet::new())
    };
    Ok(OfflineAudit {
        result: terminal.result.clone(),
        audit: TraceAudit::new(initial, introduced, eliminated, final_resources),
    })
}

/// Canonical form of a state file whose struct declarations are unknown:
/// entries sorted, whitespace normalized. Used only for header-less logs.
fn canonicalize(text: &str) -> Result<Vec<String>, TraceLogError> {
    let mut lines: Vec<String> = text
        .lines()
        .map(|l| {
            l.split('#')
                .next()
                .unwrap_or("")
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
        })
        .filter(|l| !l.is_empty())
        .collect();
    lines.sort();
    Ok(lines)
}
