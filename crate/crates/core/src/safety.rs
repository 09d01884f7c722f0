//! Dynamic verification: state well-formedness and resource conservation.
//!
//! A state is well-formed when it is globally consistent, tag-consistent,
//! and non-aliasing. Execution from a well-formed state must stay
//! well-formed, and along any execution the resource tags present satisfy
//! `R(final) = (R(initial) ∪ introduced) ∖ eliminated`. Checked mode
//! verifies both after every step; a violation is an interpreter bug, never
//! a user-program error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::interpreter::{
    execute_monitored, Event, ExecOptions, ExecutionTrace, Interpreter, StepMonitor, StepOutcome, TraceEntry,
    TransactionResult, TxOutcome,
};
use crate::program::{Program, StructTable};
use crate::state::{GlobalResourceId, GlobalState, LocalValue, Location, ProgramState};
use crate::values::{Path, ResourceTag, StructName, Tag, TaggedValue, Type, VarName};

/// Where a tagged value lives. Stack positions count from the top (0 = top).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Site {
    Memory(Location),
    Stack(usize),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Memory(c) => write!(f, "memory {c}"),
            Site::Stack(i) => write!(f, "stack slot {i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Holder {
    Global(GlobalResourceId),
    Local(VarName),
}

impl fmt::Display for Holder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Holder::Global(g) => write!(f, "global {g}"),
            Holder::Local(x) => write!(f, "local `{x}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConsistencyViolation {
    #[error("ill-formed tagged value at {site}")]
    MalformedValue { site: Site },
    #[error("value at {site} uses unknown struct `{name}`")]
    UnknownStruct { site: Site, name: StructName },
    #[error("{holder} points to {location}, which is not in memory")]
    DanglingLocation { holder: Holder, location: Location },
    #[error("{location} is not reachable from any global or local")]
    Garbage { location: Location },
    #[error("{id} stores a value of type {found} tagged {tag}")]
    GlobalTypeMismatch {
        id: GlobalResourceId,
        found: Type,
        tag: Tag,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occurrence {
    pub site: Site,
    pub path: Path,
}

impl fmt::Display for Occurrence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at path {}", self.site, self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("resource tag {tag} occurs twice: {first} and {second}")]
pub struct DuplicateTag {
    pub tag: ResourceTag,
    pub first: Occurrence,
    pub second: Occurrence,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AliasViolation {
    #[error("locals `{0}` and `{1}` both hold {2}")]
    Locals(VarName, VarName, Location),
    #[error("globals {0} and {1} both point to {2}")]
    Globals(GlobalResourceId, GlobalResourceId, Location),
    #[error("global {0} and local `{1}` both point to {2}")]
    GlobalAndLocal(GlobalResourceId, VarName, Location),
}

/// Outcome of the three well-formedness checks, each with a witness on failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WellFormednessReport {
    pub globally_consistent: Result<(), ConsistencyViolation>,
    pub tag_consistent: Result<(), DuplicateTag>,
    pub non_aliasing: Result<(), AliasViolation>,
}

impl WellFormednessReport {
    pub fn is_well_formed(&self) -> bool {
        self.globally_consistent.is_ok() && self.tag_consistent.is_ok() && self.non_aliasing.is_ok()
    }
}

impl fmt::Display for WellFormednessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn line<E: fmt::Display>(f: &mut fmt::Formatter<'_>, name: &str, r: &Result<(), E>) -> fmt::Result {
            match r {
                Ok(()) => writeln!(f, "{name}: pass"),
                Err(e) => writeln!(f, "{name}: FAIL ({e})"),
            }
        }
        line(f, "globally consistent", &self.globally_consistent)?;
        line(f, "tag consistent", &self.tag_consistent)?;
        line(f, "non-aliasing", &self.non_aliasing)
    }
}

/// Tagged values of the state in traversal order: memory by location, then
/// the stack from the top down.
fn tagged_values(st: &GlobalState) -> impl Iterator<Item = (Site, &TaggedValue)> {
    let mem = st.memory.iter().map(|(c, tv)| (Site::Memory(*c), tv));
    let stack = st
        .stack_top_down()
        .enumerate()
        .filter_map(|(i, sv)| sv.as_value().map(|tv| (Site::Stack(i), tv)));
    mem.chain(stack)
}

pub fn check_globally_consistent(st: &GlobalState, decls: &StructTable) -> Result<(), ConsistencyViolation> {
    for (site, tv) in tagged_values(st) {
        match tv.is_well_formed(decls) {
            Ok(true) => {}
            Ok(false) => return Err(ConsistencyViolation::MalformedValue { site }),
            Err(e) => return Err(ConsistencyViolation::UnknownStruct { site, name: e.0 }),
        }
    }

    let mut reachable = BTreeSet::new();
    for (id, c) in &st.globals {
        if !st.memory.contains_key(c) {
            return Err(ConsistencyViolation::DanglingLocation {
                holder: Holder::Global(id.clone()),
                location: *c,
            });
        }
        reachable.insert(*c);
    }
    for (x, lv) in &st.locals {
        if let LocalValue::Location(c) = lv {
            if !st.memory.contains_key(c) {
                return Err(ConsistencyViolation::DanglingLocation {
                    holder: Holder::Local(x.clone()),
                    location: *c,
                });
            }
            reachable.insert(*c);
        }
    }
    if let Some(c) = st.memory.keys().find(|c| !reachable.contains(c)) {
        return Err(ConsistencyViolation::Garbage { location: *c });
    }

    for (id, c) in &st.globals {
        let tv = &st.memory[c];
        if tv.ty() != Type::Struct(id.type_name.clone()) || !tv.is_resource() {
            return Err(ConsistencyViolation::GlobalTypeMismatch {
                id: id.clone(),
                found: tv.ty(),
                tag: tv.tag,
            });
        }
    }
    Ok(())
}

/// Each resource tag may occur at most once across every subterm of memory
/// and stack values.
pub fn check_tag_consistent(st: &GlobalState) -> Result<(), DuplicateTag> {
    let mut seen: BTreeMap<ResourceTag, Occurrence> = BTreeMap::new();
    let mut dup = None;
    for (site, tv) in tagged_values(st) {
        tv.visit(&mut |path, node| {
            if dup.is_some() {
                return;
            }
            if let Tag::Resource(t) = node.tag {
                let here = Occurrence {
                    site: site.clone(),
                    path: path.clone(),
                };
                if let Some(first) = seen.get(&t) {
                    dup = Some(DuplicateTag {
                        tag: t,
                        first: first.clone(),
                        second: here,
                    });
                } else {
                    seen.insert(t, here);
                }
            }
        });
        if let Some(d) = dup {
            return Err(d);
        }
    }
    Ok(())
}

/// Distinct locals and globals never share a location. References are exempt.
pub fn check_non_aliasing(st: &GlobalState) -> Result<(), AliasViolation> {
    let mut by_local: BTreeMap<Location, &VarName> = BTreeMap::new();
    for (x, lv) in &st.locals {
        if let LocalValue::Location(c) = lv {
            if let Some(first) = by_local.insert(*c, x) {
                return Err(AliasViolation::Locals(first.clone(), x.clone(), *c));
            }
        }
    }
    let mut by_global: BTreeMap<Location, &GlobalResourceId> = BTreeMap::new();
    for (g, c) in &st.globals {
        if let Some(first) = by_global.insert(*c, g) {
            return Err(AliasViolation::Globals(first.clone(), g.clone(), *c));
        }
        if let Some(x) = by_local.get(c) {
            return Err(AliasViolation::GlobalAndLocal(g.clone(), (*x).clone(), *c));
        }
    }
    Ok(())
}

pub fn check_well_formed(st: &GlobalState, decls: &StructTable) -> WellFormednessReport {
    WellFormednessReport {
        globally_consistent: check_globally_consistent(st, decls),
        tag_consistent: check_tag_consistent(st),
        non_aliasing: check_non_aliasing(st),
    }
}

/// Every resource tag at any subterm of a memory value or a stack value.
pub fn resources_of(st: &GlobalState) -> BTreeSet<ResourceTag> {
    let mut out = BTreeSet::new();
    for (_, tv) in tagged_values(st) {
        out.extend(tv.resource_tags_preorder());
    }
    out
}

/// The four sets of the conservation equation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceAudit {
    pub initial: BTreeSet<ResourceTag>,
    pub introduced: BTreeSet<ResourceTag>,
    pub eliminated: BTreeSet<ResourceTag>,
    pub final_resources: BTreeSet<ResourceTag>,
}

impl TraceAudit {
    pub fn new(
        initial: BTreeSet<ResourceTag>,
        introduced: BTreeSet<ResourceTag>,
        eliminated: BTreeSet<ResourceTag>,
        final_resources: BTreeSet<ResourceTag>,
    ) -> Self {
        Self {
            initial,
            introduced,
            eliminated,
            final_resources,
        }
    }

    /// `(initial ∪ introduced) ∖ eliminated`
    pub fn expected(&self) -> BTreeSet<ResourceTag> {
        self.initial
            .union(&self.introduced)
            .filter(|t| !self.eliminated.contains(t))
            .copied()
            .collect()
    }

    pub fn holds(&self) -> bool {
        self.final_resources == self.expected()
    }
}

fn fmt_set(set: &BTreeSet<ResourceTag>) -> String {
    let items: Vec<String> = set.iter().map(|t| t.to_string()).collect();
    format!("{{{}}}", items.join(", "))
}

impl fmt::Display for TraceAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "initial:    {}", fmt_set(&self.initial))?;
        writeln!(f, "introduced: {}", fmt_set(&self.introduced))?;
        writeln!(f, "eliminated: {}", fmt_set(&self.eliminated))?;
        writeln!(f, "final:      {}", fmt_set(&self.final_resources))?;
        if self.holds() {
            writeln!(f, "verdict:    PASS (final = (initial ∪ introduced) ∖ eliminated)")
        } else {
            writeln!(
                f,
                "verdict:    FAIL (expected {}, found {})",
                fmt_set(&self.expected()),
                fmt_set(&self.final_resources)
            )
        }
    }
}

pub fn audit_trace(initial: &GlobalState, trace: &ExecutionTrace, final_state: &GlobalState) -> TraceAudit {
    TraceAudit::new(
        resources_of(initial),
        trace.introduced(),
        trace.eliminated(),
        resources_of(final_state),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultKind {
    NotWellFormed(Box<WellFormednessReport>),
    ResourceSafety(Box<TraceAudit>),
    IncrementalMismatch {
        incremental: BTreeSet<ResourceTag>,
        rescan: BTreeSet<ResourceTag>,
    },
}

/// A broken safety invariant. `step` is `None` for checks on the pre-state
/// or the finalized state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantFault {
    pub step: Option<u64>,
    pub pc: Option<usize>,
    pub kind: FaultKind,
}

impl InvariantFault {
    pub fn short_name(&self) -> &'static str {
        match &self.kind {
            FaultKind::NotWellFormed(r) if r.tag_consistent.is_err() => "tag_consistent",
            FaultKind::NotWellFormed(r) if r.globally_consistent.is_err() => "globally_consistent",
            FaultKind::NotWellFormed(_) => "non_aliasing",
            FaultKind::ResourceSafety(_) => "resource_safety",
            FaultKind::IncrementalMismatch { .. } => "incremental_mismatch",
        }
    }
}

impl fmt::Display for InvariantFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.step, self.pc) {
            (Some(s), Some(pc)) => write!(f, "{} after step {s} (pc {pc})", self.short_name())?,
            _ => write!(f, "{}", self.short_name())?,
        }
        match &self.kind {
            FaultKind::NotWellFormed(r) => {
                let witness = r
                    .globally_consistent
                    .as_ref()
                    .err()
                    .map(|e| e.to_string())
                    .or_else(|| r.tag_consistent.as_ref().err().map(|e| e.to_string()))
                    .or_else(|| r.non_aliasing.as_ref().err().map(|e| e.to_string()))
                    .unwrap_or_default();
                write!(f, ": {witness}")
            }
            FaultKind::ResourceSafety(a) => write!(
                f,
                ": expected {}, found {}",
                fmt_set(&a.expected()),
                fmt_set(&a.final_resources)
            ),
            FaultKind::IncrementalMismatch { incremental, rescan } => write!(
                f,
                ": incremental {} vs rescan {}",
                fmt_set(incremental),
                fmt_set(rescan)
            ),
        }
    }
}

/// Step monitor for checked mode. Tracks `introduced`/`eliminated` from
/// step events, maintains the resource set incrementally, and cross-checks
/// it against a full rescan after every step.
#[derive(Debug, Clone)]
pub struct SafetyMonitor<'a> {
    decls: &'a StructTable,
    initial: BTreeSet<ResourceTag>,
    introduced: BTreeSet<ResourceTag>,
    eliminated: BTreeSet<ResourceTag>,
    incremental: BTreeSet<ResourceTag>,
    steps_checked: u64,
}

impl<'a> SafetyMonitor<'a> {
    pub fn new(decls: &'a StructTable, initial: &GlobalState) -> Self {
        let initial = resources_of(initial);
        Self {
            decls,
            incremental: initial.clone(),
            initial,
            introduced: BTreeSet::new(),
            eliminated: BTreeSet::new(),
            steps_checked: 0,
        }
    }

    pub fn steps_checked(&self) -> u64 {
        self.steps_checked
    }

    /// The audit of the prefix observed so far against `current`.
    pub fn audit(&self, current: &GlobalState) -> TraceAudit {
        TraceAudit::new(
            self.initial.clone(),
            self.introduced.clone(),
            self.eliminated.clone(),
            resources_of(current),
        )
    }

    /// Records `event` and checks the state that the step produced.
    pub fn observe(
        &mut self,
        state: &GlobalState,
        event: Event,
        step: Option<u64>,
        pc: Option<usize>,
    ) -> Result<(), InvariantFault> {
        match event {
            Event::PackResource(t) => {
                self.introduced.insert(t);
                self.incremental.insert(t);
            }
            Event::UnpackResource(t) => {
                self.eliminated.insert(t);
                self.incremental.remove(&t);
            }
            Event::None => {}
        }
        self.steps_checked += 1;
        self.check(state, step, pc)
    }

    fn check(&self, state: &GlobalState, step: Option<u64>, pc: Option<usize>) -> Result<(), InvariantFault> {
        let fault = |kind| InvariantFault { step, pc, kind };
        let report = check_well_formed(state, self.decls);
        if !report.is_well_formed() {
            return Err(fault(FaultKind::NotWellFormed(Box::new(report))));
        }
        let audit = self.audit(state);
        if !audit.holds() {
            return Err(fault(FaultKind::ResourceSafety(Box::new(audit))));
        }
        if self.incremental != audit.final_resources {
            return Err(fault(FaultKind::IncrementalMismatch {
                incremental: self.incremental.clone(),
                rescan: audit.final_resources,
            }));
        }
        Ok(())
    }
}

impl StepMonitor for SafetyMonitor<'_> {
    fn after_step(&mut self, ps: &ProgramState, entry: &TraceEntry) -> Result<(), InvariantFault> {
        self.observe(&ps.state, entry.event, Some(entry.step), Some(entry.pc))
    }

    fn after_finalize(&mut self, final_state: &GlobalState, _trace: &ExecutionTrace) -> Result<(), InvariantFault> {
        self.check(final_state, None, None)
    }
}

/// One step followed by the well-formedness checks and the prefix audit.
pub fn checked_step(
    interpreter: &Interpreter,
    program: &Program,
    ps: &mut ProgramState,
    monitor: &mut SafetyMonitor<'_>,
) -> Result<StepOutcome, InvariantFault> {
    let pc = ps.pc;
    let outcome = interpreter.step(program, ps);
    if let StepOutcome::Continue(fired) = &outcome {
        monitor.observe(&ps.state, fired.event, Some(monitor.steps_checked), Some(pc))?;
    }
    Ok(outcome)
}

/// Runs a transaction in checked mode. The pre-state itself must be
/// well-formed; otherwise the run reports a fault without executing.
pub fn execute_checked(program: &Program, initial: &GlobalState, options: ExecOptions) -> TransactionResult {
    let report = check_well_formed(initial, &program.structs);
    if !report.is_well_formed() {
        return TransactionResult {
            outcome: TxOutcome::InvariantFault(Box::new(InvariantFault {
                step: None,
                pc: None,
                kind: FaultKind::NotWellFormed(Box::new(report)),
            })),
            state: initial.clone(),
            trace: ExecutionTrace::default(),
        };
    }
    let mut monitor = SafetyMonitor::new(&program.structs, initial);
    execute_monitored(program, initial, options, &mut monitor)
}
