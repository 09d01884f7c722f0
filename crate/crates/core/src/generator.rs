//! Seeded generation of programs and initial states, and the property suite
//! that runs them in checked mode.
//!
//! Generation is type-directed: the generator tracks the types on the
//! operand stack, the contents of locals, and which global resources exist,
//! and emits short instruction templates whose preconditions hold. A cleanup
//! phase then disposes of every remaining resource so most runs succeed.
//! Randomness comes from ChaCha8 seeded with the configured seed, so a seed
//! always reproduces the same program and state.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::interpreter::{execute_transaction, ExecOptions, Mutation, TransactionResult, TxOutcome};
use crate::program::{Instruction, OpKind, Program, StructDecl, StructTable};
use crate::safety::{audit_trace, check_well_formed, execute_checked};
use crate::state::GlobalState;
use crate::textfmt::render_program;
use crate::values::{
    Address, FieldName, PrimitiveValue, Record, ResourceTag, StructName, Tag, TaggedValue, Type, Value, VarName,
};

/// Addresses that generated programs and states use.
const ADDRESSES: [u64; 4] = [1, 2, 3, 4];

/// Runs that execute at least this many steps count as long.
pub const LONG_RUN_STEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    /// Soft cap on the main body; the cleanup phase may add more.
    pub max_instructions: usize,
    pub max_structs: usize,
    pub max_fields: usize,
    pub resource_probability: f64,
    pub branch_probability: f64,
    /// Chance per template of emitting a deliberate precondition violation.
    pub misuse_probability: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_instructions: 40,
            max_structs: 4,
            max_fields: 3,
            resource_probability: 0.6,
            branch_probability: 0.15,
            misuse_probability: 0.03,
        }
    }
}

impl GenConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("resource_probability", self.resource_probability),
            ("branch_probability", self.branch_probability),
            ("misuse_probability", self.misuse_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, n) in [
            ("max_instructions", self.max_instructions),
            ("max_structs", self.max_structs),
            ("max_fields", self.max_fields),
        ] {
            if n == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

fn sn(s: &str) -> StructName {
    StructName::new(s).expect("generated names are identifiers")
}

fn random_structs(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> StructTable {
    let n = rng.gen_range(1..=cfg.max_structs);
    let mut decls: Vec<StructDecl> = Vec::with_capacity(n);
    for i in 0..n {
        let is_resource = rng.gen_bool(cfg.resource_probability);
        let nfields = rng.gen_range(1..=cfg.max_fields);
        let mut fields = Vec::with_capacity(nfields);
        for j in 0..nfields {
            // Nest an earlier struct a third of the time, respecting that
            // only resources may contain resources.
            let nestable: Vec<&StructDecl> = decls.iter().filter(|d| is_resource || !d.is_resource).collect();
            let ty = if !nestable.is_empty() && rng.gen_bool(0.3) {
                Type::Struct(nestable.choose(rng).expect("non-empty").name.clone())
            } else {
                [Type::U64, Type::U64, Type::Bool, Type::Address]
                    .choose(rng)
                    .expect("non-empty")
                    .clone()
            };
            fields.push((FieldName::new(&format!("f{j}")).expect("identifier"), ty));
        }
        decls.push(StructDecl {
            name: sn(&format!("S{i}")),
            is_resource,
            fields,
        });
    }
    StructTable::new(decls)
}

fn random_primitive(rng: &mut ChaCha8Rng, ty: &Type) -> PrimitiveValue {
    match ty {
        Type::Bool => PrimitiveValue::Bool(rng.gen()),
        Type::U64 => PrimitiveValue::U64(rng.gen_range(0..100)),
        Type::Address => PrimitiveValue::Address(Address::from_u64(*ADDRESSES.choose(rng).expect("non-empty"))),
        Type::Struct(_) => unreachable!("not a primitive type"),
    }
}

fn random_value(rng: &mut ChaCha8Rng, decls: &StructTable, ty: &Type) -> TaggedValue {
    match ty {
        Type::Struct(s) => {
            let decl = decls.get(s).expect("declared");
            let fields = decl
                .fields
                .iter()
                .map(|(f, t)| (f.clone(), random_value(rng, decls, t)))
                .collect();
            let tag = if decl.is_resource {
                Tag::Resource(ResourceTag(0))
            } else {
                Tag::U
            };
            TaggedValue::new(Value::Record(Record::new(s.clone(), fields).expect("non-empty")), tag)
        }
        prim => TaggedValue::unrestricted(random_primitive(rng, prim)),
    }
}

fn random_state(rng: &mut ChaCha8Rng, decls: &StructTable) -> GlobalState {
    let mut st = GlobalState::new();
    for d in decls.iter().filter(|d| d.is_resource) {
        for a in ADDRESSES {
            if rng.gen_bool(0.4) {
                let v = random_value(rng, decls, &Type::Struct(d.name.clone()));
                st.publish(Address::from_u64(a), v);
            }
        }
    }
    st
}

/// A random struct table and a well-formed state over it.
pub fn generate_state(cfg: &GenConfig) -> (StructTable, GlobalState) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let decls = random_structs(&mut rng, cfg);
    let st = random_state(&mut rng, &decls);
    (decls, st)
}

/// What a local holds, as far as the generator knows.
#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Empty,
    Val(Type),
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    cfg: &'a GenConfig,
    decls: &'a StructTable,
    locals: Vec<VarName>,
    slots: Vec<Slot>,
    stack: Vec<Type>,
    present: BTreeSet<(u64, StructName)>,
    code: Vec<Instruction>,
}

impl<'a> Builder<'a> {
    fn is_resource(&self, ty: &Type) -> bool {
        matches!(ty, Type::Struct(s) if self.decls.is_resource(s))
    }

    fn emit(&mut self, i: Instruction) {
        self.code.push(i);
    }

    fn load(&mut self, p: PrimitiveValue) {
        self.stack.push(p.ty());
        self.emit(Instruction::LoadConst(p));
    }

    fn load_addr(&mut self, a: u64) {
        self.emit(Instruction::LoadConst(PrimitiveValue::Address(Address::from_u64(a))));
    }

    /// Pushes a value of `ty`, packing records field by field. Resource
    /// fields are taken from a local holding one when available.
    fn build_value(&mut self, ty: &Type) {
        match ty {
            Type::Struct(s) => {
                let decl = self.decls.get(s).expect("declared").clone();
                for (_, fty) in &decl.fields {
                    let from_local = self
                        .slots
                        .iter()
                        .position(|sl| *sl == Slot::Val(fty.clone()))
                        .filter(|_| self.is_resource(fty) && self.rng.gen_bool(0.5));
                    match from_local {
                        Some(i) => self.move_local(i),
                        None => self.build_value(fty),
                    }
                }
                for _ in &decl.fields {
                    self.stack.pop();
                }
                self.stack.push(ty.clone());
                self.emit(Instruction::Pack(s.clone()));
            }
            prim => {
                let p = random_primitive(&mut self.rng, prim);
                self.load(p);
            }
        }
    }

    fn move_local(&mut self, i: usize) {
        let Slot::Val(ty) = std::mem::replace(&mut self.slots[i], Slot::Empty) else {
            unreachable!("moving an empty local")
        };
        self.stack.push(ty);
        self.emit(Instruction::MvLoc(self.locals[i].clone()));
    }

    fn any_struct(&mut self) -> Option<StructDecl> {
        let all: Vec<&StructDecl> = self.decls.iter().collect();
        all.choose(&mut self.rng).map(|d| (*d).clone())
    }

    fn free_addresses(&self, s: &StructName) -> Vec<u64> {
        ADDRESSES
            .iter()
            .copied()
            .filter(|a| !self.present.contains(&(*a, s.clone())))
            .collect()
    }

    fn present_globals(&self) -> Vec<(u64, StructName)> {
        self.present.iter().cloned().collect()
    }

    /// A random field path from `ty` down to a non-resource subterm. With
    /// `leaf`, the path ends at a primitive.
    fn random_path(&mut self, ty: &Type, leaf: bool) -> Option<(Vec<FieldName>, Type)> {
        let mut path = Vec::new();
        let mut cur = ty.clone();
        loop {
            let stop_ok = !self.is_resource(&cur) && (!leaf || !matches!(cur, Type::Struct(_)));
            let Type::Struct(s) = &cur else {
                return Some((path, cur));
            };
            if stop_ok && self.rng.gen_bool(0.3) {
                return Some((path, cur));
            }
            let decl = self.decls.get(s).expect("declared");
            let (f, fty) = decl.fields.choose(&mut self.rng).expect("non-empty").clone();
            path.push(f);
            cur = fty;
            if path.len() > 8 {
                return None;
            }
        }
    }

    fn borrow_path(&mut self, path: &[FieldName], freeze: bool) {
        for f in path {
            self.emit(Instruction::BorrowField(f.clone()));
        }
        if freeze {
            self.emit(Instruction::FreezeRef);
        }
    }

    fn value_locals(&self) -> Vec<(usize, Type)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Slot::Val(t) => Some((i, t.clone())),
                Slot::Empty => None,
            })
            .collect()
    }

    fn neutral_block(&mut self) {
        for _ in 0..self.rng.gen_range(1..=3) {
            match self.rng.gen_range(0..3) {
                0 => {
                    let v = self.rng.gen_range(0..10);
                    self.emit(Instruction::LoadConst(PrimitiveValue::U64(v)));
                }
                1 => {
                    let (a, b) = (self.rng.gen_range(0..10), self.rng.gen_range(0..10));
                    self.emit(Instruction::LoadConst(PrimitiveValue::U64(a)));
                    self.emit(Instruction::LoadConst(PrimitiveValue::U64(b)));
                    self.emit(Instruction::Op(OpKind::Add));
                }
                _ => match self.decls.iter().find(|d| d.is_resource).map(|d| d.name.clone()) {
                    Some(s) => {
                        let a = *ADDRESSES.choose(&mut self.rng).expect("non-empty");
                        self.load_addr(a);
                        self.emit(Instruction::Exists(s));
                    }
                    None => self.emit(Instruction::LoadConst(PrimitiveValue::Bool(true))),
                },
            }
            self.emit(Instruction::Pop);
        }
    }

    fn condition(&mut self) {
        match self.rng.gen_range(0..3) {
            0 => {
                let b = self.rng.gen();
                self.emit(Instruction::LoadConst(PrimitiveValue::Bool(b)));
            }
            1 => {
                let (a, b) = (self.rng.gen_range(0..10), self.rng.gen_range(0..10));
                self.emit(Instruction::LoadConst(PrimitiveValue::U64(a)));
                self.emit(Instruction::LoadConst(PrimitiveValue::U64(b)));
                let op = *[OpKind::Lt, OpKind::Le, OpKind::Gt, OpKind::Ge, OpKind::Eq, OpKind::Neq]
                    .choose(&mut self.rng)
                    .expect("non-empty");
                self.emit(Instruction::Op(op));
            }
            _ => {
                let a = self.rng.gen_range(0..10);
                self.emit(Instruction::LoadConst(PrimitiveValue::U64(a)));
                self.emit(Instruction::LoadConst(PrimitiveValue::U64(a)));
                self.emit(Instruction::Op(OpKind::Eq));
                self.emit(Instruction::Op(OpKind::Not));
            }
        }
    }

    /// A forward branch over a block with no net effect.
    fn forward_branch(&mut self) {
        self.condition();
        let at = self.code.len();
        self.emit(Instruction::Branch(0));
        self.neutral_block();
        self.code[at] = Instruction::Branch(self.code.len());
    }

    /// A bounded counting loop using local `i`.
    fn counted_loop(&mut self, i: usize) {
        let x = self.locals[i].clone();
        let n = self.rng.gen_range(1..=4);
        self.emit(Instruction::LoadConst(PrimitiveValue::U64(0)));
        self.emit(Instruction::StLoc(x.clone()));
        let top = self.code.len();
        self.neutral_block();
        self.emit(Instruction::CpLoc(x.clone()));
        self.emit(Instruction::LoadConst(PrimitiveValue::U64(1)));
        self.emit(Instruction::Op(OpKind::Add));
        self.emit(Instruction::StLoc(x.clone()));
        self.emit(Instruction::CpLoc(x));
        self.emit(Instruction::LoadConst(PrimitiveValue::U64(n)));
        self.emit(Instruction::Op(OpKind::Lt));
        self.emit(Instruction::Branch(top));
        self.slots[i] = Slot::Val(Type::U64);
    }

    /// Emits one instruction that a correct interpreter must refuse.
    /// Returns false if no misuse applies in the current state.
    fn misuse(&mut self) -> bool {
        let resource_locals: Vec<usize> = self
            .value_locals()
            .into_iter()
            .filter(|(_, t)| self.is_resource(t))
            .map(|(i, _)| i)
            .collect();
        let top_resource = self.stack.last().is_some_and(|t| self.is_resource(t));
        let mut options = Vec::new();
        if !resource_locals.is_empty() {
            options.extend([0, 2]);
        }
        if top_resource {
            options.push(1);
        }
        if !resource_locals.is_empty() && !self.stack.is_empty() {
            options.push(3);
        }
        if self.slots.contains(&Slot::Empty) {
            options.push(4);
        }
        let Some(&choice) = options.choose(&mut self.rng) else {
            return false;
        };
        match choice {
            0 => {
                let i = *resource_locals.choose(&mut self.rng).expect("non-empty");
                self.emit(Instruction::CpLoc(self.locals[i].clone()));
            }
            1 => self.emit(Instruction::Pop),
            2 => {
                let i = *resource_locals.choose(&mut self.rng).expect("non-empty");
                self.emit(Instruction::BorrowLoc(self.locals[i].clone()));
                self.emit(Instruction::ReadRef);
            }
            3 => {
                let i = *resource_locals.choose(&mut self.rng).expect("non-empty");
                self.emit(Instruction::StLoc(self.locals[i].clone()));
            }
            _ => {
                let i = self.slots.iter().position(|s| *s == Slot::Empty).expect("checked");
                self.emit(Instruction::MvLoc(self.locals[i].clone()));
            }
        }
        true
    }

    /// Emits one template. Returns false to end the main phase.
    fn template(&mut self) -> bool {
        if self.rng.gen_bool(self.cfg.misuse_probability) && self.misuse() {
            return false;
        }
        if self.rng.gen_bool(self.cfg.branch_probability) {
            let counters: Vec<usize> = self
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| match s {
                    Slot::Empty => true,
                    Slot::Val(t) => !self.is_resource(t),
                })
                .map(|(i, _)| i)
                .collect();
            match counters.choose(&mut self.rng) {
                Some(&i) if self.rng.gen_bool(0.4) => self.counted_loop(i),
                _ => self.forward_branch(),
            }
            return true;
        }
        let top = self.stack.last().cloned();
        match self.rng.gen_range(0..14) {
            0 if self.stack.len() < 4 => {
                let ty = [Type::U64, Type::Bool, Type::Address]
                    .choose(&mut self.rng)
                    .expect("non-empty")
                    .clone();
                self.build_value(&ty);
            }
            1 | 2 if self.stack.len() < 4 => {
                if let Some(d) = self.any_struct() {
                    self.build_value(&Type::Struct(d.name));
                }
            }
            3 => {
                // Store the top into a local whose current value may be dropped.
                let Some(ty) = top else { return true };
                let targets: Vec<usize> = self
                    .slots
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| match s {
                        Slot::Empty => true,
                        Slot::Val(t) => !self.is_resource(t),
                    })
                    .map(|(i, _)| i)
                    .collect();
                if let Some(&i) = targets.choose(&mut self.rng) {
                    self.stack.pop();
                    self.slots[i] = Slot::Val(ty);
                    self.emit(Instruction::StLoc(self.locals[i].clone()));
                }
            }
            4 => {
                let held = self.value_locals();
                if let Some((i, ty)) = held.choose(&mut self.rng).cloned() {
                    if !self.is_resource(&ty) && self.rng.gen_bool(0.5) {
                        self.stack.push(ty);
                        self.emit(Instruction::CpLoc(self.locals[i].clone()));
                    } else {
                        self.move_local(i);
                    }
                }
            }
            5 => match top {
                Some(Type::Struct(s)) => {
                    self.stack.pop();
                    let decl = self.decls.get(&s).expect("declared");
                    self.stack.extend(decl.fields.iter().map(|(_, t)| t.clone()));
                    self.emit(Instruction::Unpack(s));
                }
                Some(t) => {
                    self.stack.pop();
                    if t == Type::U64 && self.rng.gen_bool(0.7) {
                        let v = self.rng.gen_range(0..100);
                        self.load(PrimitiveValue::U64(v));
                        let op = *[
                            OpKind::Add,
                            OpKind::Lt,
                            OpKind::Le,
                            OpKind::Gt,
                            OpKind::Ge,
                            OpKind::Eq,
                            OpKind::Neq,
                            OpKind::Mul,
                            OpKind::Mod,
                            OpKind::Div,
                            OpKind::Sub,
                        ]
                        .choose(&mut self.rng)
                        .expect("non-empty");
                        self.stack.pop();
                        let arithmetic =
                            matches!(op, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Mod);
                        self.stack.push(if arithmetic { Type::U64 } else { Type::Bool });
                        self.emit(Instruction::Op(op));
                    } else if t == Type::Bool {
                        self.stack.push(Type::Bool);
                        self.emit(Instruction::Op(OpKind::Not));
                    } else {
                        self.emit(Instruction::Pop);
                    }
                }
                None => {}
            },
            6 => {
                // Publish a resource from the stack top.
                if let Some(Type::Struct(s)) = top.filter(|t| self.is_resource(t)) {
                    let free = self.free_addresses(&s);
                    if let Some(&a) = free.choose(&mut self.rng) {
                        self.stack.pop();
                        self.present.insert((a, s.clone()));
                        self.load_addr(a);
                        self.emit(Instruction::MoveTo(s));
                    }
                }
            }
            7 if self.stack.len() < 4 => {
                let present = self.present_globals();
                if let Some((a, s)) = present.choose(&mut self.rng).cloned() {
                    self.present.remove(&(a, s.clone()));
                    self.load_addr(a);
                    self.stack.push(Type::Struct(s.clone()));
                    self.emit(Instruction::MoveFrom(s));
                }
            }
            8 => {
                let resources: Vec<StructName> = self
                    .decls
                    .iter()
                    .filter(|d| d.is_resource)
                    .map(|d| d.name.clone())
                    .collect();
                if let Some(s) = resources.choose(&mut self.rng).cloned() {
                    let a = *ADDRESSES.choose(&mut self.rng).expect("non-empty");
                    self.load_addr(a);
                    self.emit(Instruction::Exists(s));
                    self.stack.push(Type::Bool);
                }
            }
            9 | 10 => {
                // Read or write through a reference into a local or a global.
                let from_global = self.rng.gen_bool(0.5);
                let root = if from_global {
                    let present = self.present_globals();
                    present
                        .choose(&mut self.rng)
                        .cloned()
                        .map(|(a, s)| (None, Some(a), Type::Struct(s)))
                } else {
                    let held = self.value_locals();
                    held.choose(&mut self.rng).cloned().map(|(i, t)| (Some(i), None, t))
                };
                let Some((local, addr, ty)) = root else { return true };
                let write = self.rng.gen_bool(0.4);
                let Some((path, target)) = self.random_path(&ty, write) else {
                    return true;
                };
                if let Some(i) = local {
                    self.emit(Instruction::BorrowLoc(self.locals[i].clone()));
                } else if let (Some(a), Type::Struct(s)) = (addr, &ty) {
                    self.load_addr(a);
                    self.emit(Instruction::BorrowGlobal(s.clone()));
                }
                if write {
                    self.borrow_path(&path, false);
                    let p = random_primitive(&mut self.rng, &target);
                    self.emit(Instruction::LoadConst(p));
                    self.emit(Instruction::WriteRef);
                } else {
                    let freeze = self.rng.gen_bool(0.3);
                    self.borrow_path(&path, freeze);
                    self.emit(Instruction::ReadRef);
                    self.stack.push(target);
                }
            }
            11 => {
                // Keep a reference in a local for a moment.
                let held = self.value_locals();
                let free = self.slots.iter().position(|s| *s == Slot::Empty);
                if let (Some((i, ty)), Some(r)) = (held.choose(&mut self.rng).cloned(), free) {
                    let rname = self.locals[r].clone();
                    self.emit(Instruction::BorrowLoc(self.locals[i].clone()));
                    self.emit(Instruction::StLoc(rname.clone()));
                    self.emit(Instruction::CpLoc(rname.clone()));
                    match self.random_path(&ty, false) {
                        Some((path, target)) if !self.is_resource(&target) => {
                            self.borrow_path(&path, false);
                            self.emit(Instruction::ReadRef);
                        }
                        _ => {}
                    }
                    self.emit(Instruction::Pop);
                    self.emit(Instruction::MvLoc(rname));
                    self.emit(Instruction::Pop);
                }
            }
            12 => {
                if let Some(t) = top.filter(|t| !self.is_resource(t)) {
                    let _ = t;
                    self.stack.pop();
                    self.emit(Instruction::Pop);
                }
            }
            _ => {
                let v = self.rng.gen_range(0..5);
                self.load(PrimitiveValue::U64(v));
                self.stack.pop();
                self.emit(Instruction::Pop);
            }
        }
        true
    }

    /// Disposes of the value on top of the stack.
    fn dispose_top(&mut self) {
        let ty = self.stack.pop().expect("caller checked");
        match ty {
            Type::Struct(s) if self.decls.is_resource(&s) => {
                let free = self.free_addresses(&s);
                match free.choose(&mut self.rng) {
                    Some(&a) if self.rng.gen_bool(0.7) => {
                        self.present.insert((a, s.clone()));
                        self.load_addr(a);
                        self.emit(Instruction::MoveTo(s));
                    }
                    _ => {
                        let decl = self.decls.get(&s).expect("declared");
                        self.stack.extend(decl.fields.iter().map(|(_, t)| t.clone()));
                        self.emit(Instruction::Unpack(s));
                    }
                }
            }
            _ => self.emit(Instruction::Pop),
        }
    }

    fn cleanup(&mut self) {
        while !self.stack.is_empty() {
            self.dispose_top();
        }
        for i in 0..self.slots.len() {
            if matches!(&self.slots[i], Slot::Val(t) if self.is_resource(t)) {
                self.move_local(i);
                while !self.stack.is_empty() {
                    self.dispose_top();
                }
            }
        }
    }
}

/// A random program together with a well-formed initial state.
pub fn generate(cfg: &GenConfig) -> (Program, GlobalState) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let decls = random_structs(&mut rng, cfg);
    let state = random_state(&mut rng, &decls);
    let nlocals = rng.gen_range(2..=5);
    let locals: Vec<VarName> = (0..nlocals)
        .map(|i| VarName::new(&format!("l{i}")).expect("identifier"))
        .collect();
    let present = state
        .globals
        .keys()
        .map(|id| {
            let a = u64::from_str_radix(id.address.digits(), 16).expect("generated address");
            (a, id.type_name.clone())
        })
        .collect();
    let mut b = Builder {
        rng,
        cfg,
        decls: &decls,
        slots: vec![Slot::Empty; locals.len()],
        locals: locals.clone(),
        stack: Vec::new(),
        present,
        code: Vec::new(),
    };
    let mut finished = true;
    while b.code.len() < cfg.max_instructions {
        if !b.template() {
            finished = false;
            break;
        }
    }
    if finished {
        b.cleanup();
    }
    let code = b.code;
    (Program::new(decls, locals, code), state)
}

/// Inserts `LoadConst 1; LoadConst 0; Div` before `at_pc`, shifting later
/// branch targets. A run that reaches `at_pc` then aborts.
pub fn inject_division_by_zero(program: &Program, at_pc: usize) -> Program {
    let at_pc = at_pc.min(program.code.len());
    let mut code: Vec<Instruction> = program
        .code
        .iter()
        .map(|i| match i {
            Instruction::Branch(t) if *t > at_pc => Instruction::Branch(t + 3),
            other => other.clone(),
        })
        .collect();
    code.splice(
        at_pc..at_pc,
        [
            Instruction::LoadConst(PrimitiveValue::U64(1)),
            Instruction::LoadConst(PrimitiveValue::U64(0)),
            Instruction::Op(OpKind::Div),
        ],
    );
    Program::new(program.structs.clone(), program.locals.clone(), code)
}

/// The first `len` instructions of `program`; branches past the end are
/// redirected to the new end.
pub fn truncate(program: &Program, len: usize) -> Program {
    let code = program.code[..len.min(program.code.len())]
        .iter()
        .map(|i| match i {
            Instruction::Branch(t) if *t > len => Instruction::Branch(len),
            other => other.clone(),
        })
        .collect();
    Program::new(program.structs.clone(), program.locals.clone(), code)
}

/// Outcome of one seed in the property suite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedRecord {
    pub seed: u64,
    pub instructions: usize,
    pub steps: usize,
    pub outcome: String,
    pub failure: Option<String>,
}

impl fmt::Display for SeedRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed={} instructions={} steps={} outcome={} failure={}",
            self.seed,
            self.instructions,
            self.steps,
            self.outcome,
            self.failure.as_deref().unwrap_or("none")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureReport {
    pub seed: u64,
    pub message: String,
    /// Length of the shortest failing prefix.
    pub shrunk_len: usize,
    pub shrunk_program: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuiteReport {
    pub seeds: usize,
    pub success: usize,
    pub aborted: usize,
    pub rejected: usize,
    pub budget_exhausted: usize,
    pub failures: usize,
    pub long_runs: usize,
    pub records: Vec<SeedRecord>,
    pub first_failure: Option<FailureReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// Fraction of runs that executed at least [`LONG_RUN_STEPS`] steps.
    pub fn long_run_ratio(&self) -> f64 {
        if self.seeds == 0 {
            return 0.0;
        }
        self.long_runs as f64 / self.seeds as f64
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seeds:            {}", self.seeds)?;
        writeln!(f, "success:          {}", self.success)?;
        writeln!(f, "aborted:          {}", self.aborted)?;
        writeln!(f, "rejected:         {}", self.rejected)?;
        writeln!(f, "budget exhausted: {}", self.budget_exhausted)?;
        writeln!(
            f,
            "runs >= {LONG_RUN_STEPS} steps:   {} ({:.1}%)",
            self.long_runs,
            100.0 * self.long_run_ratio()
        )?;
        writeln!(f, "failures:         {}", self.failures)?;
        if let Some(ff) = &self.first_failure {
            writeln!(f, "first failing seed: {}", ff.seed)?;
            writeln!(f, "  {}", ff.message)?;
            writeln!(f, "  shortest failing prefix: {} instruction(s)", ff.shrunk_len)?;
            for line in ff.shrunk_program.lines() {
                writeln!(f, "    {line}")?;
            }
        }
        Ok(())
    }
}

/// Checks every property on one run. `None` means all hold.
pub fn check_run(
    program: &Program,
    initial: &GlobalState,
    options: ExecOptions,
) -> (TransactionResult, Option<String>) {
    let result = execute_checked(program, initial, options);
    let failure = match &result.outcome {
        TxOutcome::InvariantFault(fault) => Some(format!("invariant fault: {fault}")),
        TxOutcome::Success => {
            let audit = audit_trace(initial, &result.trace, &result.state);
            (!audit.holds()).then(|| format!("final audit failed:\n{audit}"))
        }
        _ => (result.state != *initial).then(|| "state not restored after failed run".to_string()),
    };
    (result, failure)
}

fn static_failure(program: &Program, initial: &GlobalState) -> Option<String> {
    if let Err(errors) = program.validate() {
        return Some(format!("generated program fails validation: {}", errors[0]));
    }
    let report = check_well_formed(initial, &program.structs);
    (!report.is_well_formed()).then(|| format!("generated state is not well-formed:\n{report}"))
}

fn shrink(program: &Program, initial: &GlobalState, options: ExecOptions) -> (usize, Program) {
    for len in 0..=program.code.len() {
        let candidate = truncate(program, len);
        if check_run(&candidate, initial, options).1.is_some() {
            return (len, candidate);
        }
    }
    (program.code.len(), program.clone())
}

/// Runs seeds `cfg.seed .. cfg.seed + n_seeds` in checked mode and checks
/// well-formedness, conservation, and rollback on each.
pub fn run_property_suite(n_seeds: usize, cfg: &GenConfig, mutation: Option<Mutation>) -> SuiteReport {
    let options = ExecOptions {
        mutation,
        ..ExecOptions::default()
    };
    let mut report = SuiteReport::default();
    for k in 0..n_seeds as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let (program, initial) = generate(&cfg.with_seed(seed));
        let (record, shrinkable) = match static_failure(&program, &initial) {
            Some(msg) => (
                SeedRecord {
                    seed,
                    instructions: program.code.len(),
                    steps: 0,
                    outcome: "invalid".into(),
                    failure: Some(msg),
                },
                false,
            ),
            None => {
                let (result, failure) = check_run(&program, &initial, options);
                let steps = result.trace.steps_taken();
                match &result.outcome {
                    TxOutcome::Success => report.success += 1,
                    TxOutcome::Aborted(_) => report.aborted += 1,
                    TxOutcome::Rejected(_) => report.rejected += 1,
                    TxOutcome::BudgetExhausted => report.budget_exhausted += 1,
                    TxOutcome::InvariantFault(_) => {}
                }
                if steps >= LONG_RUN_STEPS {
                    report.long_runs += 1;
                }
                (
                    SeedRecord {
                        seed,
                        instructions: program.code.len(),
                        steps,
                        outcome: crate::tracelog::result_label(&result.outcome),
                        failure,
                    },
                    true,
                )
            }
        };
        if let Some(msg) = &record.failure {
            report.failures += 1;
            if report.first_failure.is_none() {
                let (shrunk_len, shrunk) = if shrinkable {
                    shrink(&program, &initial, options)
                } else {
                    (program.code.len(), program.clone())
                };
                report.first_failure = Some(FailureReport {
                    seed,
                    message: msg.clone(),
                    shrunk_len,
                    shrunk_program: render_program(&shrunk),
                });
            }
        }
        report.records.push(record);
        report.seeds += 1;
    }
    report
}

/// Runs a generated program with a division by zero injected at a step the
/// unmodified run reached. Returns the initial state and the result.
pub fn abort_injection_run(cfg: &GenConfig) -> (GlobalState, Program, TransactionResult) {
    let (program, initial) = generate(cfg);
    let plain = execute_transaction(&program, &initial, ExecOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let at_pc = plain.trace.entries.choose(&mut rng).map(|e| e.pc).unwrap_or(0);
    let injected = inject_division_by_zero(&program, at_pc);
    let result = execute_transaction(&injected, &initial, ExecOptions::default());
    (initial, injected, result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::AbortKind;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default().with_seed(1);
        assert_eq!(generate(&cfg), generate(&cfg));
        assert_ne!(generate(&cfg).0, generate(&cfg.with_seed(2)).0);
    }

    #[test]
    fn generated_artifacts_are_valid() {
        for seed in 0..300 {
            let (p, st) = generate(&GenConfig::default().with_seed(seed));
            assert_eq!(static_failure(&p, &st), None, "seed {seed}");
        }
    }

    #[test]
    fn no_resources_when_probability_is_zero() {
        let cfg = GenConfig {
            resource_probability: 0.0,
            ..GenConfig::default()
        };
        for seed in 0..50 {
            let (p, st) = generate(&cfg.with_seed(seed));
            assert!(p.structs.iter().all(|d| !d.is_resource));
            assert!(st.globals.is_empty());
        }
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        let bad = GenConfig {
            branch_probability: 1.5,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = GenConfig {
            max_fields: 0,
            ..GenConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn empty_program_passes() {
        let (result, failure) = check_run(&Program::default(), &GlobalState::new(), ExecOptions::default());
        assert!(result.is_success());
        assert_eq!(failure, None);
    }

    #[test]
    fn small_suite_passes() {
        let report = run_property_suite(200, &GenConfig::default(), None);
        assert!(report.passed(), "{report}");
        assert!(report.success > 0);
    }

    #[test]
    fn injection_aborts_and_restores() {
        for seed in 0..50 {
            let (initial, _, result) = abort_injection_run(&GenConfig::default().with_seed(seed));
            assert_eq!(
                result.outcome,
                TxOutcome::Aborted(AbortKind::DivisionByZero),
                "seed {seed}"
            );
            assert_eq!(result.state, initial);
        }
    }

    #[test]
    fn truncation_keeps_programs_valid() {
        let (p, _) = generate(&GenConfig::default().with_seed(7));
        for len in 0..=p.code.len() {
            assert!(truncate(&p, len).validate().is_ok());
        }
    }
}
