//! Small-step execution of the call-free instruction set.
//!
//! Every rule checks its whole precondition before touching the state, so a
//! step that ends in [`StepOutcome::Abort`] or [`StepOutcome::Stuck`] leaves
//! the program state exactly as it was.

use std::collections::BTreeSet;
use std::fmt;

use crate::program::{Instruction, OpKind, Program, StructTable};
use crate::safety::InvariantFault;
use crate::state::{GlobalResourceId, GlobalState, LocalValue, Mutability, ProgramState, Reference, StackValue};
use crate::values::{Address, PrimitiveValue, Record, ResourceTag, StructName, Tag, TaggedValue, Type, Value, VarName};

/// Default number of steps a transaction may take before it is cut off.
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

/// Runtime errors that abort a transaction. Everything else that cannot
/// make progress is [`Stuck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortKind {
    DivisionByZero,
    ArithmeticOverflow,
    GlobalAlreadyExists,
    GlobalMissing,
}

impl fmt::Display for AbortKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbortKind::DivisionByZero => "DivisionByZero",
            AbortKind::ArithmeticOverflow => "ArithmeticOverflow",
            AbortKind::GlobalAlreadyExists => "GlobalAlreadyExists",
            AbortKind::GlobalMissing => "GlobalMissing",
        })
    }
}

/// Names of the transition rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    MvLoc,
    MvLocRef,
    CpLoc,
    CpLocRef,
    StLocTv,
    StLocRef,
    BorrowLoc,
    BorrowField,
    FreezeRef,
    ReadRef,
    WriteRef,
    Pop,
    PopRef,
    PackR,
    PackU,
    Unpack,
    LoadConst,
    StackOp,
    MoveTo,
    MoveFrom,
    BorrowGlobal,
    Exists,
    Step,
    BranchT,
    BranchF,
    /// A `Branch` whose operand fits neither `Branch-T` nor `Branch-F`.
    Branch,
    /// Transaction pre-state check.
    Start,
    /// Successful-termination check.
    Terminal,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::MvLoc => "MvLoc",
            Rule::MvLocRef => "MvLoc-Ref",
            Rule::CpLoc => "CpLoc",
            Rule::CpLocRef => "CpLoc-Ref",
            Rule::StLocTv => "StLoc-TV",
            Rule::StLocRef => "StLoc-Ref",
            Rule::BorrowLoc => "BorrowLoc",
            Rule::BorrowField => "BorrowField",
            Rule::FreezeRef => "FreezeRef",
            Rule::ReadRef => "ReadRef",
            Rule::WriteRef => "WriteRef",
            Rule::Pop => "Pop",
            Rule::PopRef => "Pop-Ref",
            Rule::PackR => "Pack-R",
            Rule::PackU => "Pack-U",
            Rule::Unpack => "Unpack",
            Rule::LoadConst => "LoadConst",
            Rule::StackOp => "StackOp",
            Rule::MoveTo => "MoveTo",
            Rule::MoveFrom => "MoveFrom",
            Rule::BorrowGlobal => "BorrowGlobal",
            Rule::Exists => "Exists",
            Rule::Step => "Step",
            Rule::BranchT => "Branch-T",
            Rule::BranchF => "Branch-F",
            Rule::Branch => "Branch",
            Rule::Start => "Start",
            Rule::Terminal => "Terminal",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A rule whose precondition does not hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stuck {
    pub rule: Rule,
    pub reason: String,
}

impl fmt::Display for Stuck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    Abort(AbortKind),
    Stuck(Stuck),
}

fn stuck(rule: Rule, reason: impl Into<String>) -> Fault {
    Fault::Stuck(Stuck {
        rule,
        reason: reason.into(),
    })
}

/// Resource bookkeeping emitted by a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Event {
    #[default]
    None,
    PackResource(ResourceTag),
    UnpackResource(ResourceTag),
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::None => f.write_str("none"),
            Event::PackResource(t) => write!(f, "pack:{t}"),
            Event::UnpackResource(t) => write!(f, "unpack:{t}"),
        }
    }
}

/// The rule that fired and what it did to the resource set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fired {
    pub rule: Rule,
    pub event: Event,
}

impl Fired {
    fn plain(rule: Rule) -> Self {
        Self {
            rule,
            event: Event::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Continue(Fired),
    Halted,
    Abort(AbortKind),
    Stuck(Stuck),
}

/// Deliberate interpreter defects for mutation testing of the safety layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutation {
    /// `CpLoc` no longer requires a `U`-tagged value.
    CopyResources,
    /// `Pop` no longer requires a `U`-tagged value.
    PopResources,
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mutation::CopyResources => "copy-resources",
            Mutation::PopResources => "pop-resources",
        })
    }
}

impl std::str::FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy-resources" => Ok(Mutation::CopyResources),
            "pop-resources" => Ok(Mutation::PopResources),
            other => Err(format!("unknown mutation `{other}`")),
        }
    }
}

/// The rule engine. The default value is the faithful interpreter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Interpreter {
    pub mutation: Option<Mutation>,
}

fn top_value(st: &GlobalState, depth: usize, rule: Rule) -> Result<&TaggedValue, Fault> {
    match st.peek(depth) {
        Some(StackValue::Value(tv)) => Ok(tv),
        Some(StackValue::Ref(_)) => Err(stuck(rule, format!("stack slot {depth} holds a reference"))),
        None => Err(stuck(rule, "stack underflow")),
    }
}

fn top_ref(st: &GlobalState, rule: Rule) -> Result<&Reference, Fault> {
    match st.peek(0) {
        Some(StackValue::Ref(r)) => Ok(r),
        Some(StackValue::Value(_)) => Err(stuck(rule, "stack top is not a reference")),
        None => Err(stuck(rule, "stack underflow")),
    }
}

fn top_address(st: &GlobalState, rule: Rule) -> Result<Address, Fault> {
    let tv = top_value(st, 0, rule)?;
    match (&tv.value, tv.tag) {
        (Value::Primitive(PrimitiveValue::Address(a)), Tag::U) => Ok(a.clone()),
        _ => Err(stuck(rule, format!("stack top {tv} is not an address"))),
    }
}

fn pop_value(st: &mut GlobalState) -> TaggedValue {
    match st.stack.pop() {
        Some(StackValue::Value(tv)) => tv,
        _ => unreachable!("operand checked before popping"),
    }
}

fn require_resource_struct(decls: &StructTable, s: &StructName, rule: Rule) -> Result<(), Fault> {
    match decls.get(s) {
        Some(d) if d.is_resource => Ok(()),
        Some(_) => Err(stuck(rule, format!("`{s}` is not a resource type"))),
        None => Err(stuck(rule, format!("unknown struct `{s}`"))),
    }
}

/// Checked `u64` and boolean operations. Operands are ordered deepest
/// first, so `[a, b]` with `b` on top evaluates `a - b`, `a / b`, `a < b`.
pub fn eval_op(kind: OpKind, args: &[&PrimitiveValue]) -> Result<PrimitiveValue, Fault> {
    use PrimitiveValue::{Bool, U64};
    let ill_typed = || {
        let shown: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        stuck(
            Rule::StackOp,
            format!("{} is not defined on ({})", kind.mnemonic(), shown.join(", ")),
        )
    };
    let overflow = Fault::Abort(AbortKind::ArithmeticOverflow);
    let div_zero = Fault::Abort(AbortKind::DivisionByZero);
    match (kind, args) {
        (OpKind::Not, [Bool(b)]) => Ok(Bool(!b)),
        (OpKind::And, [Bool(a), Bool(b)]) => Ok(Bool(*a && *b)),
        (OpKind::Or, [Bool(a), Bool(b)]) => Ok(Bool(*a || *b)),
        (OpKind::Eq | OpKind::Neq, [a, b]) => {
            if a.ty() != b.ty() {
                return Err(ill_typed());
            }
            Ok(Bool((a == b) == (kind == OpKind::Eq)))
        }
        (_, [U64(a), U64(b)]) => match kind {
            OpKind::Add => a.checked_add(*b).map(U64).ok_or(overflow),
            OpKind::Sub => a.checked_sub(*b).map(U64).ok_or(overflow),
            OpKind::Mul => a.checked_mul(*b).map(U64).ok_or(overflow),
            OpKind::Div => a.checked_div(*b).map(U64).ok_or(div_zero),
            OpKind::Mod => a.checked_rem(*b).map(U64).ok_or(div_zero),
            OpKind::Lt => Ok(Bool(a < b)),
            OpKind::Le => Ok(Bool(a <= b)),
            OpKind::Gt => Ok(Bool(a > b)),
            OpKind::Ge => Ok(Bool(a >= b)),
            _ => Err(ill_typed()),
        },
        _ => Err(ill_typed()),
    }
}

impl Interpreter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mutation(mutation: Mutation) -> Self {
        Self {
            mutation: Some(mutation),
        }
    }

    /// Applies one local-state rule.
    pub fn step_local(&self, instr: &Instruction, st: &mut GlobalState, decls: &StructTable) -> Result<Fired, Fault> {
        match instr {
            Instruction::MvLoc(x) => self.mv_loc(x, st),
            Instruction::CpLoc(x) => self.cp_loc(x, st),
            Instruction::StLoc(x) => self.st_loc(x, st),
            Instruction::BorrowLoc(x) => match st.locals.get(x) {
                Some(LocalValue::Location(c)) => {
                    let r = Reference::root(*c);
                    st.push(r);
                    Ok(Fired::plain(Rule::BorrowLoc))
                }
                Some(LocalValue::Ref(_)) => Err(stuck(Rule::BorrowLoc, format!("local `{x}` holds a reference"))),
                None => Err(stuck(Rule::BorrowLoc, format!("local `{x}` is unbound"))),
            },
            Instruction::BorrowField(f) => {
                let r = top_ref(st, Rule::BorrowField)?;
                let base = st
                    .memory
                    .get(&r.location)
                    .ok_or_else(|| stuck(Rule::BorrowField, format!("dangling reference {r}")))?;
                let target = base
                    .subterm(&r.path)
                    .ok_or_else(|| stuck(Rule::BorrowField, format!("path {} does not exist", r.path)))?;
                match &target.value {
                    Value::Record(rec) if rec.field(f).is_some() => {}
                    _ => {
                        return Err(stuck(
                            Rule::BorrowField,
                            format!("referenced value {target} has no field `{f}`"),
                        ))
                    }
                }
                let child = Reference {
                    location: r.location,
                    path: r.path.child(f.clone()),
                    mutability: r.mutability,
                };
                st.stack.pop();
                st.push(child);
                Ok(Fired::plain(Rule::BorrowField))
            }
            Instruction::FreezeRef => {
                top_ref(st, Rule::FreezeRef)?;
                if let Some(StackValue::Ref(r)) = st.stack.last_mut() {
                    r.mutability = Mutability::Immut;
                }
                Ok(Fired::plain(Rule::FreezeRef))
            }
            Instruction::ReadRef => {
                let r = top_ref(st, Rule::ReadRef)?;
                let target = st
                    .memory
                    .get(&r.location)
                    .ok_or_else(|| stuck(Rule::ReadRef, format!("dangling reference {r}")))?
                    .subterm(&r.path)
                    .ok_or_else(|| stuck(Rule::ReadRef, format!("path {} does not exist", r.path)))?;
                if target.is_resource() {
                    return Err(stuck(Rule::ReadRef, format!("would copy resource {target}")));
                }
                let copy = target.clone();
                st.stack.pop();
                st.push(copy);
                Ok(Fired::plain(Rule::ReadRef))
            }
            Instruction::WriteRef => {
                let new = top_value(st, 0, Rule::WriteRef)?;
                if new.is_resource() {
                    return Err(stuck(Rule::WriteRef, format!("cannot write resource {new}")));
                }
                let r = match st.peek(1) {
                    Some(StackValue::Ref(r)) => r,
                    Some(StackValue::Value(_)) => {
                        return Err(stuck(Rule::WriteRef, "second stack slot is not a reference"))
                    }
                    None => return Err(stuck(Rule::WriteRef, "stack underflow")),
                };
                if r.mutability != Mutability::Mut {
                    return Err(stuck(Rule::WriteRef, "reference is immutable"));
                }
                let old = st
                    .memory
                    .get(&r.location)
                    .ok_or_else(|| stuck(Rule::WriteRef, format!("dangling reference {r}")))?
                    .subterm(&r.path)
                    .ok_or_else(|| stuck(Rule::WriteRef, format!("path {} does not exist", r.path)))?;
                if old.is_resource() {
                    return Err(stuck(Rule::WriteRef, format!("would destroy resource {old}")));
                }
                if old.ty() != new.ty() {
                    return Err(stuck(
                        Rule::WriteRef,
                        format!("type mismatch: writing {} over {}", new.ty(), old.ty()),
                    ));
                }
                let new = pop_value(st);
                let Some(StackValue::Ref(r)) = st.stack.pop() else {
                    unreachable!("checked above")
                };
                let slot = st
                    .memory
                    .get_mut(&r.location)
                    .and_then(|tv| tv.subterm_mut(&r.path))
                    .expect("checked above");
                *slot = new;
                Ok(Fired::plain(Rule::WriteRef))
            }
            Instruction::Pop => match st.peek(0) {
                Some(StackValue::Ref(_)) => {
                    st.stack.pop();
                    Ok(Fired::plain(Rule::PopRef))
                }
                Some(StackValue::Value(tv)) => {
                    if tv.is_resource() && self.mutation != Some(Mutation::PopResources) {
                        return Err(stuck(Rule::Pop, format!("would destroy resource {tv}")));
                    }
                    st.stack.pop();
                    Ok(Fired::plain(Rule::Pop))
                }
                None => Err(stuck(Rule::Pop, "stack underflow")),
            },
            Instruction::Pack(s) => self.pack(s, st, decls),
            Instruction::Unpack(s) => {
                let tv = top_value(st, 0, Rule::Unpack)?;
                match &tv.value {
                    Value::Record(r) if r.type_name() == s => {}
                    _ => return Err(stuck(Rule::Unpack, format!("stack top {tv} is not a `{s}`"))),
                }
                let tv = pop_value(st);
                let event = match tv.tag {
                    Tag::Resource(t) => Event::UnpackResource(t),
                    Tag::U => Event::None,
                };
                let Value::Record(r) = tv.value else {
                    unreachable!("checked above")
                };
                for (_, field) in r.into_fields() {
                    st.push(field);
                }
                Ok(Fired {
                    rule: Rule::Unpack,
                    event,
                })
            }
            Instruction::LoadConst(a) => {
                st.push(TaggedValue::unrestricted(a.clone()));
                Ok(Fired::plain(Rule::LoadConst))
            }
            Instruction::Op(kind) => {
                let n = kind.arity();
                let mut args = Vec::with_capacity(n);
                for depth in (0..n).rev() {
                    let tv = top_value(st, depth, Rule::StackOp)?;
                    match (&tv.value, tv.tag) {
                        (Value::Primitive(p), Tag::U) => args.push(p),
                        _ => {
                            return Err(stuck(
                                Rule::StackOp,
                                format!("operand {tv} is not an unrestricted primitive"),
                            ))
                        }
                    }
                }
                let result = eval_op(*kind, &args)?;
                st.stack.truncate(st.stack.len() - n);
                st.push(TaggedValue::unrestricted(result));
                Ok(Fired::plain(Rule::StackOp))
            }
            Instruction::MoveTo(_)
            | Instruction::MoveFrom(_)
            | Instruction::BorrowGlobal(_)
            | Instruction::Exists(_)
            | Instruction::Branch(_) => Err(stuck(
                Rule::Step,
                format!("{} is not a local-state instruction", instr.mnemonic()),
            )),
        }
    }

    fn mv_loc(&self, x: &VarName, st: &mut GlobalState) -> Result<Fired, Fault> {
        match st.locals.get(x) {
            Some(LocalValue::Location(c)) => {
                let c = *c;
                if !st.memory.contains_key(&c) {
                    return Err(stuck(Rule::MvLoc, format!("local `{x}` points to dangling {c}")));
                }
                let tv = st.memory.remove(&c).expect("checked above");
                st.locals.remove(x);
                st.push(tv);
                Ok(Fired::plain(Rule::MvLoc))
            }
            Some(LocalValue::Ref(_)) => {
                let Some(LocalValue::Ref(r)) = st.locals.remove(x) else {
                    unreachable!("matched above")
                };
                st.push(r);
                Ok(Fired::plain(Rule::MvLocRef))
            }
            None => Err(stuck(Rule::MvLoc, format!("local `{x}` is unbound"))),
        }
    }

    fn cp_loc(&self, x: &VarName, st: &mut GlobalState) -> Result<Fired, Fault> {
        match st.locals.get(x) {
            Some(LocalValue::Location(c)) => {
                let tv = st
                    .memory
                    .get(c)
                    .ok_or_else(|| stuck(Rule::CpLoc, format!("local `{x}` points to dangling {c}")))?;
                if tv.is_resource() && self.mutation != Some(Mutation::CopyResources) {
                    return Err(stuck(Rule::CpLoc, format!("would copy resource {tv}")));
                }
                let copy = tv.clone();
                st.push(copy);
                Ok(Fired::plain(Rule::CpLoc))
            }
            Some(LocalValue::Ref(r)) => {
                let r = r.clone();
                st.push(r);
                Ok(Fired::plain(Rule::CpLocRef))
            }
            None => Err(stuck(Rule::CpLoc, format!("local `{x}` is unbound"))),
        }
    }

    fn st_loc(&self, x: &VarName, st: &mut GlobalState) -> Result<Fired, Fault> {
        let rule = match st.peek(0) {
            Some(StackValue::Value(_)) => Rule::StLocTv,
            Some(StackValue::Ref(_)) => Rule::StLocRef,
            None => return Err(stuck(Rule::StLocTv, "stack underflow")),
        };
        // The old cell of `x`, which is destroyed when overwritten.
        let old_cell = match st.locals.get(x) {
            None | Some(LocalValue::Ref(_)) => None,
            Some(LocalValue::Location(c)) => match st.memory.get(c) {
                Some(tv) if !tv.is_resource() => Some(*c),
                Some(tv) => {
                    return Err(stuck(
                        rule,
                        format!("local `{x}` holds resource {tv}; overwriting would destroy it"),
                    ))
                }
                None => return Err(stuck(rule, format!("local `{x}` points to dangling {c}"))),
            },
        };
        if let Some(c) = old_cell {
            st.memory.remove(&c);
        }
        match st.stack.pop().expect("checked above") {
            StackValue::Value(tv) => {
                let c = st.fresh_location();
                st.memory.insert(c, tv);
                st.locals.insert(x.clone(), LocalValue::Location(c));
            }
            StackValue::Ref(r) => {
                st.locals.insert(x.clone(), LocalValue::Ref(r));
            }
        }
        Ok(Fired::plain(rule))
    }

    fn pack(&self, s: &StructName, st: &mut GlobalState, decls: &StructTable) -> Result<Fired, Fault> {
        let decl = decls
            .get(s)
            .ok_or_else(|| stuck(Rule::PackU, format!("unknown struct `{s}`")))?;
        let rule = if decl.is_resource { Rule::PackR } else { Rule::PackU };
        let n = decl.fields.len();
        // Field i is at depth n - 1 - i: the first field is deepest.
        for (i, (name, ty)) in decl.fields.iter().enumerate() {
            let tv = top_value(st, n - 1 - i, rule)?;
            if tv.ty() != *ty {
                return Err(stuck(rule, format!("field `{name}` expects {ty}, found {}", tv.ty())));
            }
            if !decl.is_resource && tv.is_resource() {
                return Err(stuck(rule, format!("field `{name}` would hold resource {tv}")));
            }
        }
        let values = st.stack.split_off(st.stack.len() - n);
        let fields = decl
            .fields
            .iter()
            .zip(values)
            .map(|((name, _), sv)| match sv {
                StackValue::Value(tv) => (name.clone(), tv),
                StackValue::Ref(_) => unreachable!("checked above"),
            })
            .collect();
        let record = Record::new(s.clone(), fields).expect("declaration has distinct fields");
        let (tag, event) = if decl.is_resource {
            let t = st.fresh_tag();
            (Tag::Resource(t), Event::PackResource(t))
        } else {
            (Tag::U, Event::None)
        };
        st.push(TaggedValue::new(Value::Record(record), tag));
        Ok(Fired { rule, event })
    }

    /// Applies one global-state rule.
    pub fn step_global(&self, instr: &Instruction, st: &mut GlobalState, decls: &StructTable) -> Result<Fired, Fault> {
        match instr {
            Instruction::MoveTo(s) => {
                require_resource_struct(decls, s, Rule::MoveTo)?;
                let a = top_address(st, Rule::MoveTo)?;
                let tv = top_value(st, 1, Rule::MoveTo)?;
                if tv.ty() != Type::Struct(s.clone()) {
                    return Err(stuck(Rule::MoveTo, format!("{tv} is not a `{s}`")));
                }
                let id = GlobalResourceId::new(a, s.clone());
                if st.globals.contains_key(&id) {
                    return Err(Fault::Abort(AbortKind::GlobalAlreadyExists));
                }
                st.stack.pop();
                let tv = pop_value(st);
                let c = st.fresh_location();
                st.memory.insert(c, tv);
                st.globals.insert(id, c);
                Ok(Fired::plain(Rule::MoveTo))
            }
            Instruction::MoveFrom(s) => {
                let (id, c) = self.global_operand(s, st, decls, Rule::MoveFrom)?;
                if !st.memory.contains_key(&c) {
                    return Err(stuck(Rule::MoveFrom, format!("{id} points to dangling {c}")));
                }
                st.stack.pop();
                let tv = st.memory.remove(&c).expect("checked above");
                st.globals.remove(&id);
                st.push(tv);
                Ok(Fired::plain(Rule::MoveFrom))
            }
            Instruction::BorrowGlobal(s) => {
                let (_, c) = self.global_operand(s, st, decls, Rule::BorrowGlobal)?;
                st.stack.pop();
                st.push(Reference::root(c));
                Ok(Fired::plain(Rule::BorrowGlobal))
            }
            Instruction::Exists(s) => {
                require_resource_struct(decls, s, Rule::Exists)?;
                let a = top_address(st, Rule::Exists)?;
                let present = st.globals.contains_key(&GlobalResourceId::new(a, s.clone()));
                st.stack.pop();
                st.push(TaggedValue::bool(present));
                Ok(Fired::plain(Rule::Exists))
            }
            _ => Err(stuck(
                Rule::Step,
                format!("{} is not a global-state instruction", instr.mnemonic()),
            )),
        }
    }

    fn global_operand(
        &self,
        s: &StructName,
        st: &GlobalState,
        decls: &StructTable,
        rule: Rule,
    ) -> Result<(GlobalResourceId, crate::state::Location), Fault> {
        require_resource_struct(decls, s, rule)?;
        let a = top_address(st, rule)?;
        let id = GlobalResourceId::new(a, s.clone());
        match st.globals.get(&id) {
            Some(c) => Ok((id, *c)),
            None => Err(Fault::Abort(AbortKind::GlobalMissing)),
        }
    }

    /// One program-counter transition.
    pub fn step(&self, program: &Program, ps: &mut ProgramState) -> StepOutcome {
        let len = program.code.len();
        if ps.pc == len {
            return StepOutcome::Halted;
        }
        let Some(instr) = program.code.get(ps.pc) else {
            return StepOutcome::Stuck(Stuck {
                rule: Rule::Step,
                reason: format!("pc {} is beyond the end of the code ({len})", ps.pc),
            });
        };
        let result = match instr {
            Instruction::Branch(target) => {
                let st = &mut ps.state;
                match st.peek(0) {
                    Some(StackValue::Value(tv)) => match (&tv.value, tv.tag) {
                        (Value::Primitive(PrimitiveValue::Bool(b)), Tag::U) => {
                            let b = *b;
                            st.stack.pop();
                            if b {
                                ps.pc = *target;
                                return StepOutcome::Continue(Fired::plain(Rule::BranchT));
                            }
                            ps.pc += 1;
                            return StepOutcome::Continue(Fired::plain(Rule::BranchF));
                        }
                        _ => Err(stuck(Rule::Branch, format!("condition {tv} is not a boolean"))),
                    },
                    Some(StackValue::Ref(_)) => Err(stuck(Rule::Branch, "condition is a reference")),
                    None => Err(stuck(Rule::Branch, "stack underflow")),
                }
            }
            Instruction::MoveTo(_)
            | Instruction::MoveFrom(_)
            | Instruction::BorrowGlobal(_)
            | Instruction::Exists(_) => self.step_global(instr, &mut ps.state, &program.structs),
            _ => self.step_local(instr, &mut ps.state, &program.structs),
        };
        match result {
            Ok(fired) => {
                ps.pc += 1;
                StepOutcome::Continue(fired)
            }
            Err(Fault::Abort(kind)) => StepOutcome::Abort(kind),
            Err(Fault::Stuck(s)) => StepOutcome::Stuck(s),
        }
    }
}

/// [`Interpreter::step_local`] on the faithful interpreter.
pub fn step_local(instr: &Instruction, st: &mut GlobalState, decls: &StructTable) -> Result<Fired, Fault> {
    Interpreter::new().step_local(instr, st, decls)
}

/// [`Interpreter::step_global`] on the faithful interpreter.
pub fn step_global(instr: &Instruction, st: &mut GlobalState, decls: &StructTable) -> Result<Fired, Fault> {
    Interpreter::new().step_global(instr, st, decls)
}

/// [`Interpreter::step`] on the faithful interpreter.
pub fn step(program: &Program, ps: &mut ProgramState) -> StepOutcome {
    Interpreter::new().step(program, ps)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryOutcome {
    Continue,
    Abort(AbortKind),
    Stuck(Stuck),
}

impl fmt::Display for EntryOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryOutcome::Continue => f.write_str("continue"),
            EntryOutcome::Abort(k) => write!(f, "abort:{k}"),
            EntryOutcome::Stuck(s) => write!(f, "stuck:{}", s.rule),
        }
    }
}

/// One executed instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: u64,
    pub pc: usize,
    pub instr: Instruction,
    pub event: Event,
    pub outcome: EntryOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
}

impl ExecutionTrace {
    /// Tags created by `Pack` on a resource type.
    pub fn introduced(&self) -> BTreeSet<ResourceTag> {
        self.entries
            .iter()
            .filter_map(|e| match e.event {
                Event::PackResource(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    /// Tags consumed by `Unpack` of a resource.
    pub fn eliminated(&self) -> BTreeSet<ResourceTag> {
        self.entries
            .iter()
            .filter_map(|e| match e.event {
                Event::UnpackResource(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    /// Number of steps that completed.
    pub fn steps_taken(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.outcome == EntryOutcome::Continue)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxOutcome {
    Success,
    Aborted(AbortKind),
    Rejected(Stuck),
    BudgetExhausted,
    InvariantFault(Box<InvariantFault>),
}

impl fmt::Display for TxOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TxOutcome::Success => f.write_str("success"),
            TxOutcome::Aborted(k) => write!(f, "aborted ({k})"),
            TxOutcome::Rejected(s) => write!(f, "rejected ({s})"),
            TxOutcome::BudgetExhausted => f.write_str("step budget exhausted"),
            TxOutcome::InvariantFault(fault) => write!(f, "invariant fault ({fault})"),
        }
    }
}

/// Result of running a whole transaction. On anything but success, `state`
/// is the restored pre-state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionResult {
    pub outcome: TxOutcome,
    pub state: GlobalState,
    pub trace: ExecutionTrace,
}

impl TransactionResult {
    pub fn is_success(&self) -> bool {
        self.outcome == TxOutcome::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub budget: u64,
    pub mutation: Option<Mutation>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_STEP_BUDGET,
            mutation: None,
        }
    }
}

/// Observes a transaction as it runs. The safety layer uses this to check
/// every intermediate state.
pub trait StepMonitor {
    fn after_step(&mut self, ps: &ProgramState, entry: &TraceEntry) -> Result<(), InvariantFault>;

    fn after_finalize(&mut self, _final_state: &GlobalState, _trace: &ExecutionTrace) -> Result<(), InvariantFault> {
        Ok(())
    }
}

/// A monitor that accepts everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMonitor;

impl StepMonitor for NoMonitor {
    fn after_step(&mut self, _: &ProgramState, _: &TraceEntry) -> Result<(), InvariantFault> {
        Ok(())
    }
}

/// Runs `program` to completion from `initial` with all-or-nothing semantics.
pub fn execute_transaction(program: &Program, initial: &GlobalState, options: ExecOptions) -> TransactionResult {
    execute_monitored(program, initial, options, &mut NoMonitor)
}

/// [`execute_transaction`] with a monitor called after every step.
pub fn execute_monitored(
    program: &Program,
    initial: &GlobalState,
    options: ExecOptions,
    monitor: &mut impl StepMonitor,
) -> TransactionResult {
    let snapshot = initial.snapshot();
    let mut trace = ExecutionTrace::default();
    let rollback = |outcome: TxOutcome, trace: ExecutionTrace| TransactionResult {
        outcome,
        state: snapshot.restore(),
        trace,
    };
    if !initial.locals.is_empty() || !initial.stack.is_empty() {
        return rollback(
            TxOutcome::Rejected(Stuck {
                rule: Rule::Start,
                reason: "pre-state must have no locals and an empty stack".into(),
            }),
            trace,
        );
    }

    let interpreter = Interpreter {
        mutation: options.mutation,
    };
    let mut ps = ProgramState::new(initial.clone());
    let mut steps: u64 = 0;
    loop {
        let pc = ps.pc;
        let outcome = interpreter.step(program, &mut ps);
        let entry_outcome = match &outcome {
            StepOutcome::Halted => break,
            StepOutcome::Continue(_) => EntryOutcome::Continue,
            StepOutcome::Abort(k) => EntryOutcome::Abort(*k),
            StepOutcome::Stuck(s) => EntryOutcome::Stuck(s.clone()),
        };
        if steps >= options.budget {
            return rollback(TxOutcome::BudgetExhausted, trace);
        }
        let event = match &outcome {
            StepOutcome::Continue(fired) => fired.event,
            _ => Event::None,
        };
        trace.entries.push(TraceEntry {
            step: steps,
            pc,
            instr: program.code[pc].clone(),
            event,
            outcome: entry_outcome,
        });
        steps += 1;
        match outcome {
            StepOutcome::Continue(_) => {
                let entry = trace.entries.last().expect("just pushed");
                if let Err(fault) = monitor.after_step(&ps, entry) {
                    return rollback(TxOutcome::InvariantFault(Box::new(fault)), trace);
                }
            }
            StepOutcome::Abort(k) => return rollback(TxOutcome::Aborted(k), trace),
            StepOutcome::Stuck(s) => return rollback(TxOutcome::Rejected(s), trace),
            StepOutcome::Halted => unreachable!("handled above"),
        }
    }

    let final_state = match finalize(ps.state) {
        Ok(s) => s,
        Err(s) => return rollback(TxOutcome::Rejected(s), trace),
    };
    if let Err(fault) = monitor.after_finalize(&final_state, &trace) {
        return rollback(TxOutcome::InvariantFault(Box::new(fault)), trace);
    }
    TransactionResult {
        outcome: TxOutcome::Success,
        state: final_state,
        trace,
    }
}

/// The successful-termination check: the operand stack must be empty and no
/// local may still own a resource. Locals and their cells are then dropped.
fn finalize(mut st: GlobalState) -> Result<GlobalState, Stuck> {
    let terminal = |reason: String| Stuck {
        rule: Rule::Terminal,
        reason,
    };
    if let Some(top) = st.peek(0) {
        return Err(terminal(format!(
            "operand stack holds {} value(s), top {top}",
            st.stack.len()
        )));
    }
    for (x, lv) in &st.locals {
        if let LocalValue::Location(c) = lv {
            if let Some(tv) = st.memory.get(c) {
                if tv.contains_resource() {
                    return Err(terminal(format!("local `{x}` still holds resource {tv}")));
                }
            }
        }
    }
    let published: BTreeSet<_> = st.globals.values().copied().collect();
    if let Some((c, tv)) = st
        .memory
        .iter()
        .find(|(c, tv)| !published.contains(c) && tv.contains_resource())
    {
        return Err(terminal(format!("unpublished cell {c} holds resource {tv}")));
    }
    st.locals.clear();
    st.memory.retain(|c, _| published.contains(c));
    Ok(st)
}
