//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rvm_core::generator::{abort_injection_run, generate, generate_state, GenConfig};
use rvm_core::interpreter::{
    execute_transaction, step, AbortKind, Event, ExecOptions, Fired, Rule, StepOutcome, TxOutcome,
};
use rvm_core::safety::{audit_trace, check_well_formed, execute_checked, resources_of, FaultKind};
use rvm_core::state::{GlobalResourceId, GlobalState, LocalValue, Mutability, ProgramState, StackValue};
use rvm_core::textfmt::{
    parse_program, parse_program_bytes, parse_state, parse_state_bytes, serialize_state, states_equivalent,
};
use rvm_core::tracelog::{render_trace, result_label};
use rvm_core::values::{Address, PrimitiveValue, ResourceTag, StructName, TaggedValue, Value, VarName};

const RUNS: u64 = 10_000;

fn fixture(name: &str) -> String {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name].iter().collect();
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// Rule table.

const DECLS: &str = "resource R { v: u64 }\nrecord P { a: u64, b: bool }\nresource W { inner: R, n: u64 }\n";
const STATE: &str = "publish 0x1 R R{v: 1}\npublish 0x2 W W{inner: R{v: 2}, n: 3}\n";

#[derive(Clone, Copy)]
enum Expect {
    Fires(Rule),
    FiresAt(Rule, usize),
    Stuck(Rule),
    Abort(AbortKind),
    ParseError(&'static str),
}

type Post = fn(&Fired, &GlobalState) -> bool;

struct Case {
    rule: &'static str,
    positive: bool,
    body: &'static str,
    /// Index of the instruction under test; defaults to the last one.
    subject: Option<usize>,
    /// Start directly at this pc instead of running a prefix.
    start_pc: Option<usize>,
    expect: Expect,
    post: Option<Post>,
}

fn case(rule: &'static str, positive: bool, body: &'static str, expect: Expect) -> Case {
    Case {
        rule,
        positive,
        body,
        subject: None,
        start_pc: None,
        expect,
        post: None,
    }
}

impl Case {
    fn post(mut self, f: Post) -> Self {
        self.post = Some(f);
        self
    }

    fn subject(mut self, pc: usize) -> Self {
        self.subject = Some(pc);
        self
    }

    fn start(mut self, pc: usize) -> Self {
        self.start_pc = Some(pc);
        self
    }
}

fn top(st: &GlobalState) -> Option<&StackValue> {
    st.stack.last()
}

fn top_prim(st: &GlobalState) -> Option<&PrimitiveValue> {
    match top(st)?.as_value()?.value {
        Value::Primitive(ref p) => Some(p),
        _ => None,
    }
}

fn var(name: &str) -> VarName {
    VarName::new(name).unwrap()
}

fn global<'a>(st: &'a GlobalState, addr: u64, name: &str) -> Option<&'a TaggedValue> {
    st.global_value(&GlobalResourceId::new(
        Address::from_u64(addr),
        StructName::new(name).unwrap(),
    ))
}

fn rule_cases() -> Vec<Case> {
    use Expect::*;
    vec![
        case("MvLoc", true, "LoadConst 1 StLoc x MvLoc x", Fires(Rule::MvLoc))
            .post(|_, st| !st.locals.contains_key(&var("x")) && top_prim(st) == Some(&PrimitiveValue::U64(1))),
        case("MvLoc", false, "MvLoc x", Stuck(Rule::MvLoc)),
        case(
            "MvLoc-Ref",
            true,
            "LoadConst 1 StLoc x BorrowLoc x StLoc y MvLoc y",
            Fires(Rule::MvLocRef),
        )
        .post(|_, st| !st.locals.contains_key(&var("y")) && top(st).is_some_and(|t| t.as_ref().is_some())),
        case(
            "MvLoc-Ref",
            false,
            "LoadConst 1 StLoc x BorrowLoc x StLoc y MvLoc y MvLoc y",
            Stuck(Rule::MvLoc),
        ),
        case("CpLoc", true, "LoadConst 4 StLoc x CpLoc x", Fires(Rule::CpLoc))
            .post(|_, st| st.locals.contains_key(&var("x")) && top_prim(st) == Some(&PrimitiveValue::U64(4))),
        case(
            "CpLoc",
            false,
            "LoadConst 0x1 MoveFrom R StLoc r CpLoc r",
            Stuck(Rule::CpLoc),
        ),
        case(
            "CpLoc-Ref",
            true,
            "LoadConst 1 StLoc x BorrowLoc x StLoc y CpLoc y",
            Fires(Rule::CpLocRef),
        )
        .post(|_, st| matches!(st.locals.get(&var("y")), Some(LocalValue::Ref(_)))),
        case("CpLoc-Ref", false, "CpLoc y", Stuck(Rule::CpLoc)),
        case("StLoc-TV", true, "LoadConst 1 StLoc x", Fires(Rule::StLocTv))
            .post(|_, st| st.stack.is_empty() && st.memory.len() == 3),
        case(
            "StLoc-TV",
            false,
            "LoadConst 0x1 MoveFrom R StLoc r LoadConst 0x2 MoveFrom W Unpack W StLoc x StLoc r",
            Stuck(Rule::StLocTv),
        ),
        case(
            "StLoc-Ref",
            true,
            "LoadConst 1 StLoc x BorrowLoc x StLoc y",
            Fires(Rule::StLocRef),
        )
        .post(|_, st| matches!(st.locals.get(&var("y")), Some(LocalValue::Ref(_)))),
        case(
            "StLoc-Ref",
            false,
            "LoadConst 0x1 MoveFrom R StLoc r LoadConst 1 StLoc x BorrowLoc x StLoc r",
            Stuck(Rule::StLocRef),
        ),
        case(
            "BorrowLoc",
            true,
            "LoadConst 1 StLoc x BorrowLoc x",
            Fires(Rule::BorrowLoc),
        )
        .post(|_, st| {
            top(st)
                .and_then(|t| t.as_ref())
                .is_some_and(|r| r.mutability == Mutability::Mut)
        }),
        case(
            "BorrowLoc",
            false,
            "LoadConst 1 StLoc x BorrowLoc x StLoc y BorrowLoc y",
            Stuck(Rule::BorrowLoc),
        ),
        case(
            "BorrowField",
            true,
            "LoadConst 0x1 BorrowGlobal R BorrowField v",
            Fires(Rule::BorrowField),
        )
        .post(|_, st| top(st).and_then(|t| t.as_ref()).is_some_and(|r| r.path.len() == 1)),
        case(
            "BorrowField",
            false,
            "LoadConst 0x1 BorrowGlobal R BorrowField a",
            Stuck(Rule::BorrowField),
        ),
        case(
            "FreezeRef",
            true,
            "LoadConst 0x1 BorrowGlobal R FreezeRef",
            Fires(Rule::FreezeRef),
        )
        .post(|_, st| {
            top(st)
                .and_then(|t| t.as_ref())
                .is_some_and(|r| r.mutability == Mutability::Immut)
        }),
        case("FreezeRef", false, "LoadConst 1 FreezeRef", Stuck(Rule::FreezeRef)),
        case(
            "ReadRef",
            true,
            "LoadConst 0x1 BorrowGlobal R BorrowField v ReadRef",
            Fires(Rule::ReadRef),
        )
        .post(|_, st| top_prim(st) == Some(&PrimitiveValue::U64(1))),
        case(
            "ReadRef",
            false,
            "LoadConst 0x1 BorrowGlobal R ReadRef",
            Stuck(Rule::ReadRef),
        ),
        case(
            "WriteRef",
            true,
            "LoadConst 0x1 BorrowGlobal R BorrowField v LoadConst 9 WriteRef",
            Fires(Rule::WriteRef),
        )
        .post(|_, st| {
            global(st, 1, "R").and_then(|g| g.value.as_record()?.fields().first().map(|(_, f)| f.clone()))
                == Some(TaggedValue::u64(9))
        }),
        case(
            "WriteRef",
            false,
            "LoadConst 0x1 BorrowGlobal R BorrowField v FreezeRef LoadConst 9 WriteRef",
            Stuck(Rule::WriteRef),
        ),
        case("Pop", true, "LoadConst 1 Pop", Fires(Rule::Pop)).post(|_, st| st.stack.is_empty()),
        case("Pop", false, "LoadConst 0x1 MoveFrom R Pop", Stuck(Rule::Pop)),
        case("Pop-Ref", true, "LoadConst 0x1 BorrowGlobal R Pop", Fires(Rule::PopRef))
            .post(|_, st| st.stack.is_empty()),
        case("Pop-Ref", false, "Pop", Stuck(Rule::Pop)),
        case("Pack-R", true, "LoadConst 7 Pack R", Fires(Rule::PackR))
            .post(|f, st| matches!(f.event, Event::PackResource(t) if resources_of(st).contains(&t))),
        case("Pack-R", false, "LoadConst true Pack R", Stuck(Rule::PackR)),
        case("Pack-U", true, "LoadConst 1 LoadConst true Pack P", Fires(Rule::PackU)).post(|f, st| {
            f.event == Event::None && top(st).and_then(|t| t.as_value()).is_some_and(|v| !v.is_resource())
        }),
        case("Pack-U", false, "LoadConst 1 Pack P", Stuck(Rule::PackU)),
        case("Unpack", true, "LoadConst 0x1 MoveFrom R Unpack R", Fires(Rule::Unpack)).post(|f, st| {
            matches!(f.event, Event::UnpackResource(t) if !resources_of(st).contains(&t))
                && top_prim(st) == Some(&PrimitiveValue::U64(1))
        }),
        case(
            "Unpack",
            false,
            "LoadConst 1 LoadConst true Pack P Unpack R",
            Stuck(Rule::Unpack),
        ),
        case("LoadConst", true, "LoadConst 0x2a", Fires(Rule::LoadConst))
            .post(|_, st| matches!(top_prim(st), Some(PrimitiveValue::Address(_)))),
        case("LoadConst", false, "LoadConst R{v: 1}", ParseError("primitive literal")),
        case("StackOp", true, "LoadConst 6 LoadConst 7 Mul", Fires(Rule::StackOp))
            .post(|_, st| top_prim(st) == Some(&PrimitiveValue::U64(42))),
        case("StackOp", false, "LoadConst 1 LoadConst true Add", Stuck(Rule::StackOp)),
        case(
            "StackOp",
            false,
            "LoadConst 7 LoadConst 0 Div",
            Abort(AbortKind::DivisionByZero),
        ),
        case(
            "StackOp",
            false,
            "LoadConst 18446744073709551615 LoadConst 1 Add",
            Abort(AbortKind::ArithmeticOverflow),
        ),
        case(
            "MoveTo",
            true,
            "LoadConst 3 Pack R LoadConst 0x3 MoveTo R",
            Fires(Rule::MoveTo),
        )
        .post(|_, st| global(st, 3, "R").is_some() && st.stack.is_empty()),
        case(
            "MoveTo",
            false,
            "LoadConst 3 Pack R LoadConst 0x1 MoveTo R",
            Abort(AbortKind::GlobalAlreadyExists),
        ),
        case("MoveFrom", true, "LoadConst 0x1 MoveFrom R", Fires(Rule::MoveFrom)).post(|_, st| {
            global(st, 1, "R").is_none() && top(st).and_then(|t| t.as_value()).is_some_and(|v| v.is_resource())
        }),
        case(
            "MoveFrom",
            false,
            "LoadConst 0x9 MoveFrom R",
            Abort(AbortKind::GlobalMissing),
        ),
        case(
            "BorrowGlobal",
            true,
            "LoadConst 0x2 BorrowGlobal W",
            Fires(Rule::BorrowGlobal),
        )
        .post(|_, st| top(st).and_then(|t| t.as_ref()).is_some_and(|r| r.path.is_empty())),
        case(
            "BorrowGlobal",
            false,
            "LoadConst 0x2 BorrowGlobal R",
            Abort(AbortKind::GlobalMissing),
        ),
        case("Exists", true, "LoadConst 0x1 Exists R", Fires(Rule::Exists))
            .post(|_, st| top_prim(st) == Some(&PrimitiveValue::Bool(true))),
        case("Exists", true, "LoadConst 0x9 Exists R", Fires(Rule::Exists))
            .post(|_, st| top_prim(st) == Some(&PrimitiveValue::Bool(false))),
        case("Exists", false, "LoadConst 1 Exists R", Stuck(Rule::Exists)),
        case("Step", true, "LoadConst 1 LoadConst 2", FiresAt(Rule::LoadConst, 2)),
        case("Step", false, "LoadConst 1", Stuck(Rule::Step)).start(2),
        case(
            "Branch-T",
            true,
            "LoadConst true Branch end LoadConst 1 end:",
            FiresAt(Rule::BranchT, 3),
        )
        .subject(1),
        case("Branch-T", false, "LoadConst 1 Branch end end:", Stuck(Rule::Branch)).subject(1),
        case(
            "Branch-F",
            true,
            "LoadConst false Branch end LoadConst 1 end:",
            FiresAt(Rule::BranchF, 2),
        )
        .subject(1),
        case("Branch-F", false, "Branch end end:", Stuck(Rule::Branch)).subject(0),
    ]
}

fn run_case(c: &Case) -> Result<(), String> {
    let text = format!(
        "{DECLS}locals x, y, r\ncode {{\n{}\n}}\n",
        c.body.replace(' ', "\n").replace("\nR{v:\n1}", " R{v: 1}")
    );
    let program = match (parse_program(&text), c.expect) {
        (Err(d), Expect::ParseError(needle)) => {
            return if d.iter().any(|d| d.message.contains(needle)) {
                Ok(())
            } else {
                Err(format!("diagnostics {d:?} lack `{needle}`"))
            }
        }
        (Err(d), _) => return Err(format!("parse failed: {d:?}")),
        (Ok(_), Expect::ParseError(_)) => return Err("parse unexpectedly succeeded".into()),
        (Ok(p), _) => p,
    };
    let initial = parse_state(STATE, &program.structs).map_err(|d| format!("state: {d:?}"))?;
    let mut ps = ProgramState::new(initial);
    if let Some(pc) = c.start_pc {
        ps.pc = pc;
    } else {
        let subject = c.subject.unwrap_or(program.code.len() - 1);
        while ps.pc != subject {
            match step(&program, &mut ps) {
                StepOutcome::Continue(_) => {}
                other => return Err(format!("setup step at pc {} gave {other:?}", ps.pc)),
            }
        }
    }
    let outcome = step(&program, &mut ps);
    match (c.expect, &outcome) {
        (Expect::Fires(rule), StepOutcome::Continue(f)) | (Expect::FiresAt(rule, _), StepOutcome::Continue(f))
            if f.rule == rule =>
        {
            if let Expect::FiresAt(_, pc) = c.expect {
                if ps.pc != pc {
                    return Err(format!("pc {} after step, expected {pc}", ps.pc));
                }
            }
            if let Some(post) = c.post {
                if !post(f, &ps.state) {
                    return Err("postcondition failed".into());
                }
            }
            let report = check_well_formed(&ps.state, &program.structs);
            if !report.is_well_formed() {
                return Err(format!("post-state not well-formed: {report}"));
            }
            Ok(())
        }
        (Expect::Stuck(rule), StepOutcome::Stuck(s)) if s.rule == rule => Ok(()),
        (Expect::Abort(kind), StepOutcome::Abort(k)) if *k == kind => Ok(()),
        _ => Err(format!("got {outcome:?}")),
    }
}

fn criterion_rule_table() -> Verdict {
    let start = Instant::now();
    let cases = rule_cases();
    let mut failures = Vec::new();
    let mut covered = BTreeSet::new();
    for c in &cases {
        match run_case(c) {
            Ok(()) => {
                covered.insert((c.rule, c.positive));
            }
            Err(e) => failures.push(format!("{} {}: {e}", c.rule, if c.positive { "+" } else { "-" })),
        }
    }
    let elapsed = start.elapsed();
    let rules: BTreeSet<_> = cases.iter().map(|c| c.rule).collect();
    let both = rules
        .iter()
        .all(|r| covered.contains(&(*r, true)) && covered.contains(&(*r, false)));
    for f in &failures {
        eprintln!("  rule table: {f}");
    }
    verdict(
        failures.is_empty() && both && cases.len() >= 46 && elapsed < Duration::from_secs(1),
        format!(
            "{} cases over {} rules, {} failing, {}",
            cases.len(),
            rules.len(),
            failures.len(),
            secs(elapsed)
        ),
    )
}

// Generated runs (criteria 2 and 3 share them).

struct GeneratedRuns {
    elapsed: Duration,
    steps: usize,
    outcomes: [usize; 4],
    not_well_formed: Vec<String>,
    safety: Vec<String>,
    not_restored: Vec<u64>,
}

fn generated_runs() -> GeneratedRuns {
    let start = Instant::now();
    let mut runs = GeneratedRuns {
        elapsed: Duration::ZERO,
        steps: 0,
        outcomes: [0; 4],
        not_well_formed: Vec::new(),
        safety: Vec::new(),
        not_restored: Vec::new(),
    };
    for seed in 0..RUNS {
        let (program, initial) = generate(&GenConfig::default().with_seed(seed));
        let result = execute_checked(&program, &initial, ExecOptions::default());
        runs.steps += result.trace.steps_taken();
        match &result.outcome {
            TxOutcome::Success => {
                runs.outcomes[0] += 1;
                let audit = audit_trace(&initial, &result.trace, &result.state);
                if !audit.holds() {
                    runs.safety.push(format!("seed {seed}: final audit failed"));
                }
            }
            TxOutcome::InvariantFault(f) => match f.kind {
                FaultKind::NotWellFormed(_) => runs.not_well_formed.push(format!("seed {seed}: {f}")),
                _ => runs.safety.push(format!("seed {seed}: {f}")),
            },
            other => {
                let slot = match other {
                    TxOutcome::Aborted(_) => 1,
                    TxOutcome::Rejected(_) => 2,
                    _ => 3,
                };
                runs.outcomes[slot] += 1;
                if result.state != initial {
                    runs.not_restored.push(seed);
                }
            }
        }
    }
    runs.elapsed = start.elapsed();
    runs
}

fn criterion_well_formed(runs: &GeneratedRuns) -> Verdict {
    for f in runs.not_well_formed.iter().take(5) {
        eprintln!("  well-formedness: {f}");
    }
    let [ok, aborted, rejected, budget] = runs.outcomes;
    verdict(
        runs.not_well_formed.is_empty() && runs.not_restored.is_empty() && runs.elapsed < Duration::from_secs(60),
        format!(
            "{RUNS} checked runs, {} steps, {ok} success / {aborted} aborted / {rejected} rejected / {budget} budget, {} faults, {} unrestored, {}",
            runs.steps,
            runs.not_well_formed.len(),
            runs.not_restored.len(),
            secs(runs.elapsed)
        ),
    )
}

fn criterion_resource_safety(runs: &GeneratedRuns) -> Verdict {
    for f in runs.safety.iter().take(5) {
        eprintln!("  resource safety: {f}");
    }
    verdict(
        runs.safety.is_empty(),
        format!(
            "{RUNS} runs audited at every step and at finalization, {} violations",
            runs.safety.len()
        ),
    )
}

fn criterion_negative_corpus() -> Verdict {
    let names = [
        "copy_resource_bad",
        "deref_resource_bad",
        "double_move_bad",
        "destroy_via_assign_bad",
        "destroy_via_write_bad",
        "unused_resource_local_bad",
        "double_move_to_bad",
    ];
    let state_text = fixture("negative/r.gst");
    let mut failures = Vec::new();
    for name in names {
        let text = fixture(&format!("negative/{name}.mvp"));
        let expected = text
            .lines()
            .find_map(|l| l.strip_prefix("# expect: "))
            .map(str::trim)
            .unwrap_or("")
            .to_string();
        let class_ok = if name == "double_move_to_bad" {
            expected == "aborted:GlobalAlreadyExists"
        } else {
            expected.starts_with("rejected:")
        };
        let program = match parse_program(&text) {
            Ok(p) => p,
            Err(d) => {
                failures.push(format!("{name}: {d:?}"));
                continue;
            }
        };
        let initial = parse_state(&state_text, &program.structs).expect("negative state parses");
        let result = execute_transaction(&program, &initial, ExecOptions::default());
        let label = result_label(&result.outcome);
        let identical = result.state == initial && serialize_state(&result.state).ok() == Some(state_text.clone());
        if !class_ok || label != expected || !identical {
            failures.push(format!(
                "{name}: got {label}, expected {expected}, state identical: {identical}"
            ));
        }
    }
    for f in &failures {
        eprintln!("  negative corpus: {f}");
    }
    verdict(
        failures.is_empty(),
        format!("{} programs, {} mismatches", names.len(), failures.len()),
    )
}

fn criterion_all_or_nothing() -> Verdict {
    let mut failures = Vec::new();
    for seed in 0..1000 {
        let (initial, _, result) = abort_injection_run(&GenConfig::default().with_seed(seed));
        if result.outcome != TxOutcome::Aborted(AbortKind::DivisionByZero) {
            failures.push(format!("seed {seed}: {}", result_label(&result.outcome)));
        } else if result.state != initial {
            failures.push(format!("seed {seed}: state not restored"));
        }
    }
    for f in failures.iter().take(5) {
        eprintln!("  all-or-nothing: {f}");
    }
    verdict(
        failures.is_empty(),
        format!(
            "1000 injected aborts, {} not restored to the initial state",
            failures.len()
        ),
    )
}

fn mutate(base: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut bytes = base.to_vec();
    for _ in 0..rng.gen_range(1..8) {
        let op = rng.gen_range(0..4);
        let at = if bytes.is_empty() {
            0
        } else {
            rng.gen_range(0..bytes.len())
        };
        match op {
            0 if !bytes.is_empty() => bytes[at] = rng.gen(),
            1 => bytes.insert(at, rng.gen()),
            2 if !bytes.is_empty() => {
                bytes.remove(at);
            }
            _ => bytes.truncate(at),
        }
    }
    bytes
}

fn criterion_round_trips() -> Verdict {
    let mut state_failures = 0;
    for seed in 0..1000 {
        let (decls, st) = generate_state(&GenConfig::default().with_seed(seed));
        let ok = serialize_state(&st).ok().and_then(|s1| {
            let parsed = parse_state(&s1, &decls).ok()?;
            let s2 = serialize_state(&parsed).ok()?;
            Some(states_equivalent(&st, &parsed) && s1 == s2)
        });
        if ok != Some(true) {
            state_failures += 1;
            eprintln!("  round trip: seed {seed} failed");
        }
    }

    let program_text = fixture("withdraw.mvp");
    let state_text = fixture("bank_state.gst");
    let decls = parse_program(&program_text).expect("withdraw parses").structs;
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut crashes = 0;
    for i in 0..10_000 {
        let input: Vec<u8> = match i % 3 {
            0 => (0..rng.gen_range(0..256)).map(|_| rng.gen()).collect(),
            1 => mutate(program_text.as_bytes(), &mut rng),
            _ => mutate(state_text.as_bytes(), &mut rng),
        };
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
            let _ = parse_program_bytes(&input);
            let _ = parse_state_bytes(&input, &decls);
        }));
        if outcome.is_err() {
            crashes += 1;
        }
    }
    panic::set_hook(hook);
    verdict(
        state_failures == 0 && crashes == 0,
        format!("1000 state round trips, {state_failures} failing; 10000 fuzz inputs, {crashes} crashes"),
    )
}

fn criterion_determinism() -> Verdict {
    let mut runs = Vec::new();
    for seed in 0..200 {
        runs.push(generate(&GenConfig::default().with_seed(seed)));
    }
    let withdraw = parse_program(&fixture("withdraw.mvp")).unwrap();
    let bank = parse_state(&fixture("bank_state.gst"), &withdraw.structs).unwrap();
    runs.push((withdraw, bank));
    let mut differing = 0;
    for (program, initial) in &runs {
        for checked in [false, true] {
            let once = || {
                let r = if checked {
                    execute_checked(program, initial, ExecOptions::default())
                } else {
                    execute_transaction(program, initial, ExecOptions::default())
                };
                (render_trace(program, initial, &r).ok(), serialize_state(&r.state).ok())
            };
            if once() != once() {
                differing += 1;
            }
        }
    }
    verdict(
        differing == 0,
        format!("{} configurations run twice, {differing} differing", runs.len() * 2),
    )
}

fn criterion_withdraw() -> Verdict {
    let program = parse_program(&fixture("withdraw.mvp")).expect("withdraw parses");
    let initial = parse_state(&fixture("bank_state.gst"), &program.structs).expect("bank state parses");
    let result = execute_checked(&program, &initial, ExecOptions::default());
    if !result.is_success() {
        return verdict(false, format!("run ended {}", result_label(&result.outcome)));
    }
    let audit = audit_trace(&initial, &result.trace, &result.state);
    let credit_tag = global(&initial, 1, "Credit").and_then(|v| v.tag.resource());
    let coin_tags = |st: &GlobalState| -> BTreeSet<ResourceTag> {
        let mut tags = BTreeSet::new();
        for v in st.memory.values() {
            collect_coins(v, &mut tags);
        }
        tags
    };
    let coin_sum = |st: &GlobalState| -> u64 { st.memory.values().map(coin_value).sum() };
    let pass = audit.holds()
        && audit.introduced.is_empty()
        && credit_tag.is_some()
        && audit.eliminated == credit_tag.into_iter().collect()
        && coin_tags(&initial) == coin_tags(&result.state)
        && coin_sum(&initial) == coin_sum(&result.state)
        && global(&result.state, 1, "Coin").map(|v| v.value.clone()) == parse_coin(15);
    verdict(
        pass,
        format!(
            "{} steps, E = {{{}}}, I = {{{}}}, Coin tags {{{}}} conserved, value sum {} -> {}",
            result.trace.steps_taken(),
            tag_list(&audit.eliminated),
            tag_list(&audit.introduced),
            tag_list(&coin_tags(&result.state)),
            coin_sum(&initial),
            coin_sum(&result.state)
        ),
    )
}

fn tag_list(tags: &BTreeSet<ResourceTag>) -> String {
    tags.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

fn is_coin(v: &TaggedValue) -> bool {
    v.value.as_record().is_some_and(|r| r.type_name().as_str() == "Coin")
}

fn collect_coins(v: &TaggedValue, tags: &mut BTreeSet<ResourceTag>) {
    if let Some(r) = v.value.as_record() {
        if is_coin(v) {
            tags.extend(v.tag.resource());
        }
        for (_, f) in r.fields() {
            collect_coins(f, tags);
        }
    }
}

fn coin_value(v: &TaggedValue) -> u64 {
    let Some(r) = v.value.as_record() else {
        return 0;
    };
    if is_coin(v) {
        if let Some((_, f)) = r.fields().first() {
            if let Value::Primitive(PrimitiveValue::U64(n)) = f.value {
                return n;
            }
        }
    }
    r.fields().iter().map(|(_, f)| coin_value(f)).sum()
}

fn parse_coin(n: u64) -> Option<Value> {
    let decls = parse_program("resource Coin { value: u64 }\nlocals\ncode {\n}\n")
        .ok()?
        .structs;
    let st = parse_state(&format!("publish 0x1 Coin Coin{{value: {n}}}\n"), &decls).ok()?;
    global(&st, 1, "Coin").map(|v| v.value.clone())
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    results.push(("rule fidelity", criterion_rule_table()));
    let runs = generated_runs();
    results.push(("well-formedness preservation", criterion_well_formed(&runs)));
    results.push(("resource safety", criterion_resource_safety(&runs)));
    results.push(("negative corpus", criterion_negative_corpus()));
    results.push(("all-or-nothing", criterion_all_or_nothing()));
    results.push(("round trips", criterion_round_trips()));
    results.push(("determinism", criterion_determinism()));
    results.push(("withdraw end to end", criterion_withdraw()));

    let mut all = true;
    for (i, (name, v)) in results.iter().enumerate() {
        all &= v.pass;
        println!(
            "criterion {} {}: {} ({})",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
