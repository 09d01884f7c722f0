//! Struct declarations, the instruction set, and static operand resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::values::{FieldName, PrimitiveValue, StructName, Type, VarName};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructDecl {
    pub name: StructName,
    pub is_resource: bool,
    pub fields: Vec<(FieldName, Type)>,
}

impl StructDecl {
    pub fn field_type(&self, field: &FieldName) -> Option<&Type> {
        self.fields.iter().find(|(f, _)| f == field).map(|(_, t)| t)
    }
}

/// Ordered table of struct declarations with lookup by name.
///
/// Construction does not validate; see [`StructTable::validate`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StructTable {
    decls: Vec<StructDecl>,
    index: BTreeMap<StructName, usize>,
}

impl StructTable {
    pub fn new(decls: Vec<StructDecl>) -> Self {
        let mut index = BTreeMap::new();
        for (i, d) in decls.iter().enumerate() {
            index.entry(d.name.clone()).or_insert(i);
        }
        Self { decls, index }
    }

    pub fn get(&self, name: &StructName) -> Option<&StructDecl> {
        self.index.get(name).map(|&i| &self.decls[i])
    }

    pub fn is_resource(&self, name: &StructName) -> bool {
        self.get(name).is_some_and(|d| d.is_resource)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StructDecl> {
        self.decls.iter()
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    /// True when `field` is declared by at least one struct.
    pub fn declares_field(&self, field: &FieldName) -> bool {
        self.decls.iter().any(|d| d.fields.iter().any(|(f, _)| f == field))
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for d in &self.decls {
            if !seen.insert(&d.name) {
                out.push(Diagnostic::DuplicateStruct(d.name.clone()));
            }
            if d.fields.is_empty() {
                out.push(Diagnostic::EmptyStruct(d.name.clone()));
            }
            let mut names = BTreeSet::new();
            for (f, ty) in &d.fields {
                if !names.insert(f) {
                    out.push(Diagnostic::DuplicateField {
                        strukt: d.name.clone(),
                        field: f.clone(),
                    });
                }
                if let Type::Struct(inner) = ty {
                    match self.get(inner) {
                        None => out.push(Diagnostic::UnknownStruct {
                            pc: None,
                            name: inner.clone(),
                        }),
                        Some(inner_decl) if inner_decl.is_resource && !d.is_resource => {
                            out.push(Diagnostic::ResourceInsideNonResource {
                                strukt: d.name.clone(),
                                field: f.clone(),
                            })
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        if let Some(name) = self.find_cycle() {
            out.push(Diagnostic::RecursiveStruct(name));
        }
        out
    }

    fn find_cycle(&self) -> Option<StructName> {
        // 0 = unvisited, 1 = on stack, 2 = done
        fn dfs(table: &StructTable, i: usize, color: &mut [u8]) -> Option<usize> {
            color[i] = 1;
            for (_, ty) in &table.decls[i].fields {
                if let Type::Struct(n) = ty {
                    if let Some(&j) = table.index.get(n) {
                        match color[j] {
                            1 => return Some(j),
                            0 => {
                                if let Some(c) = dfs(table, j, color) {
                                    return Some(c);
                                }
                            }
                            _ => {}
                        }
                    }
                }
            }
            color[i] = 2;
            None
        }
        let mut color = vec![0u8; self.decls.len()];
        (0..self.decls.len()).find_map(|i| {
            if color[i] == 0 {
                dfs(self, i, &mut color).map(|j| self.decls[j].name.clone())
            } else {
                None
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Neq,
    And,
    Or,
    Not,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Mod,
        OpKind::Lt,
        OpKind::Le,
        OpKind::Gt,
        OpKind::Ge,
        OpKind::Eq,
        OpKind::Neq,
        OpKind::And,
        OpKind::Or,
        OpKind::Not,
    ];

    pub fn arity(self) -> usize {
        match self {
            OpKind::Not => 1,
            _ => 2,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            OpKind::Add => "Add",
            OpKind::Sub => "Sub",
            OpKind::Mul => "Mul",
            OpKind::Div => "Div",
            OpKind::Mod => "Mod",
            OpKind::Lt => "Lt",
            OpKind::Le => "Le",
            OpKind::Gt => "Gt",
            OpKind::Ge => "Ge",
            OpKind::Eq => "Eq",
            OpKind::Neq => "Neq",
            OpKind::And => "And",
            OpKind::Or => "Or",
            OpKind::Not => "Not",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.mnemonic() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instruction {
    MvLoc(VarName),
    CpLoc(VarName),
    StLoc(VarName),
    BorrowLoc(VarName),
    ReadRef,
    WriteRef,
    FreezeRef,
    Pack(StructName),
    Unpack(StructName),
    BorrowField(FieldName),
    MoveTo(StructName),
    MoveFrom(StructName),
    BorrowGlobal(StructName),
    Exists(StructName),
    Pop,
    LoadConst(PrimitiveValue),
    Op(OpKind),
    /// Conditional jump: pops a boolean, jumps on `true`, falls through on `false`.
    Branch(usize),
}

impl Instruction {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instruction::MvLoc(_) => "MvLoc",
            Instruction::CpLoc(_) => "CpLoc",
            Instruction::StLoc(_) => "StLoc",
            Instruction::BorrowLoc(_) => "BorrowLoc",
            Instruction::ReadRef => "ReadRef",
            Instruction::WriteRef => "WriteRef",
            Instruction::FreezeRef => "FreezeRef",
            Instruction::Pack(_) => "Pack",
            Instruction::Unpack(_) => "Unpack",
            Instruction::BorrowField(_) => "BorrowField",
            Instruction::MoveTo(_) => "MoveTo",
            Instruction::MoveFrom(_) => "MoveFrom",
            Instruction::BorrowGlobal(_) => "BorrowGlobal",
            Instruction::Exists(_) => "Exists",
            Instruction::Pop => "Pop",
            Instruction::LoadConst(_) => "LoadConst",
            Instruction::Op(k) => k.mnemonic(),
            Instruction::Branch(_) => "Branch",
        }
    }

    /// Struct operand of global-state instructions, which must name a resource.
    fn global_struct(&self) -> Option<&StructName> {
        match self {
            Instruction::MoveTo(s)
            | Instruction::MoveFrom(s)
            | Instruction::BorrowGlobal(s)
            | Instruction::Exists(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match self {
            Instruction::MvLoc(x) | Instruction::CpLoc(x) | Instruction::StLoc(x) | Instruction::BorrowLoc(x) => {
                write!(f, "{m} {x}")
            }
            Instruction::Pack(s)
            | Instruction::Unpack(s)
            | Instruction::MoveTo(s)
            | Instruction::MoveFrom(s)
            | Instruction::BorrowGlobal(s)
            | Instruction::Exists(s) => write!(f, "{m} {s}"),
            Instruction::BorrowField(field) => write!(f, "{m} {field}"),
            Instruction::LoadConst(a) => write!(f, "{m} {a}"),
            Instruction::Branch(target) => write!(f, "{m} {target}"),
            Instruction::ReadRef
            | Instruction::WriteRef
            | Instruction::FreezeRef
            | Instruction::Pop
            | Instruction::Op(_) => f.write_str(m),
        }
    }
}

/// A single code body executed against one struct table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub structs: StructTable,
    pub locals: Vec<VarName>,
    pub code: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Diagnostic {
    #[error("duplicate struct `{0}`")]
    DuplicateStruct(StructName),
    #[error("struct `{0}` declares no fields")]
    EmptyStruct(StructName),
    #[error("struct `{strukt}` repeats field `{field}`")]
    DuplicateField { strukt: StructName, field: FieldName },
    #[error("non-resource struct `{strukt}` stores a resource in field `{field}`")]
    ResourceInsideNonResource { strukt: StructName, field: FieldName },
    #[error("struct `{0}` is recursive")]
    RecursiveStruct(StructName),
    #[error("duplicate local `{0}`")]
    DuplicateLocal(VarName),
    #[error("unknown struct `{name}`")]
    UnknownStruct { pc: Option<usize>, name: StructName },
    #[error("`{name}` is not a resource struct")]
    NotAResource { pc: usize, name: StructName },
    #[error("undeclared local `{name}`")]
    UnknownLocal { pc: usize, name: VarName },
    #[error("no struct declares field `{name}`")]
    UnknownField { pc: usize, name: FieldName },
    #[error("branch target out of range: {target} (code length {len})")]
    BranchOutOfRange { pc: usize, target: usize, len: usize },
}

impl Diagnostic {
    /// Instruction index the diagnostic refers to, if any.
    pub fn pc(&self) -> Option<usize> {
        match self {
            Diagnostic::UnknownStruct { pc, .. } => *pc,
            Diagnostic::NotAResource { pc, .. }
            | Diagnostic::UnknownLocal { pc, .. }
            | Diagnostic::UnknownField { pc, .. }
            | Diagnostic::BranchOutOfRange { pc, .. } => Some(*pc),
            _ => None,
        }
    }
}

impl Program {
    pub fn new(structs: StructTable, locals: Vec<VarName>, code: Vec<Instruction>) -> Self {
        Self { structs, locals, code }
    }

    /// Resolves every operand statically. A valid program can be executed;
    /// it may still get stuck or abort at run time.
    pub fn validate(&self) -> Result<(), Vec<Diagnostic>> {
        let mut out = self.structs.validate();
        let mut seen = BTreeSet::new();
        for x in &self.locals {
            if !seen.insert(x) {
                out.push(Diagnostic::DuplicateLocal(x.clone()));
            }
        }
        let len = self.code.len();
        for (pc, instr) in self.code.iter().enumerate() {
            match instr {
                Instruction::MvLoc(x) | Instruction::CpLoc(x) | Instruction::StLoc(x) | Instruction::BorrowLoc(x) => {
                    if !seen.contains(x) {
                        out.push(Diagnostic::UnknownLocal { pc, name: x.clone() });
                    }
                }
                Instruction::Pack(s) | Instruction::Unpack(s) => {
                    if self.structs.get(s).is_none() {
                        out.push(Diagnostic::UnknownStruct {
                            pc: Some(pc),
                            name: s.clone(),
                        });
                    }
                }
                Instruction::BorrowField(f) => {
                    if !self.structs.declares_field(f) {
                        out.push(Diagnostic::UnknownField { pc, name: f.clone() });
                    }
                }
                // `len` itself is the halting location.
                Instruction::Branch(target) if *target > len => {
                    out.push(Diagnostic::BranchOutOfRange {
                        pc,
                        target: *target,
                        len,
                    });
                }
                _ => {}
            }
            if let Some(s) = instr.global_struct() {
                match self.structs.get(s) {
                    None => out.push(Diagnostic::UnknownStruct {
                        pc: Some(pc),
                        name: s.clone(),
                    }),
                    Some(d) if !d.is_resource => out.push(Diagnostic::NotAResource { pc, name: s.clone() }),
                    Some(_) => {}
                }
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sn(s: &str) -> StructName {
        StructName::new(s).unwrap()
    }

    fn fname(s: &str) -> FieldName {
        FieldName::new(s).unwrap()
    }

    fn decl(name: &str, resource: bool, fields: &[(&str, Type)]) -> StructDecl {
        StructDecl {
            name: sn(name),
            is_resource: resource,
            fields: fields.iter().map(|(f, t)| (fname(f), t.clone())).collect(),
        }
    }

    #[test]
    fn empty_program_is_valid() {
        assert_eq!(Program::default().validate(), Ok(()));
    }

    #[test]
    fn unknown_struct_is_reported() {
        let p = Program::new(StructTable::default(), vec![], vec![Instruction::Pack(sn("Ghost"))]);
        let errs = p.validate().unwrap_err();
        assert_eq!(
            errs,
            vec![Diagnostic::UnknownStruct {
                pc: Some(0),
                name: sn("Ghost")
            }]
        );
        assert_eq!(errs[0].to_string(), "unknown struct `Ghost`");
    }

    #[test]
    fn branch_out_of_range_is_reported() {
        let code = vec![
            Instruction::LoadConst(PrimitiveValue::Bool(true)),
            Instruction::Branch(99),
            Instruction::Pop,
        ];
        let errs = Program::new(StructTable::default(), vec![], code)
            .validate()
            .unwrap_err();
        assert!(matches!(
            errs[..],
            [Diagnostic::BranchOutOfRange {
                pc: 1,
                target: 99,
                len: 3
            }]
        ));
        assert!(errs[0].to_string().contains("branch target out of range"));
    }

    #[test]
    fn branch_to_end_is_halting_location() {
        let code = vec![
            Instruction::LoadConst(PrimitiveValue::Bool(true)),
            Instruction::Branch(2),
        ];
        assert!(Program::new(StructTable::default(), vec![], code).validate().is_ok());
    }

    #[test]
    fn global_ops_require_resource_structs() {
        let structs = StructTable::new(vec![decl("Pair", false, &[("a", Type::U64)])]);
        let p = Program::new(structs, vec![], vec![Instruction::MoveTo(sn("Pair"))]);
        assert!(matches!(
            p.validate().unwrap_err()[..],
            [Diagnostic::NotAResource { pc: 0, .. }]
        ));
    }

    #[test]
    fn struct_table_checks() {
        let table = StructTable::new(vec![
            decl("Coin", true, &[("value", Type::U64)]),
            decl("Wrap", false, &[("c", Type::Struct(sn("Coin")))]),
            decl("A", false, &[("b", Type::Struct(sn("B")))]),
            decl("B", false, &[("a", Type::Struct(sn("A")))]),
            decl("E", false, &[]),
            decl("Coin", true, &[("value", Type::U64)]),
        ]);
        let errs = table.validate();
        assert!(errs.contains(&Diagnostic::ResourceInsideNonResource {
            strukt: sn("Wrap"),
            field: fname("c")
        }));
        assert!(errs.iter().any(|d| matches!(d, Diagnostic::RecursiveStruct(_))));
        assert!(errs.contains(&Diagnostic::EmptyStruct(sn("E"))));
        assert!(errs.contains(&Diagnostic::DuplicateStruct(sn("Coin"))));
    }

    #[test]
    fn undeclared_local_and_field() {
        let structs = StructTable::new(vec![decl("Coin", true, &[("value", Type::U64)])]);
        let code = vec![
            Instruction::MvLoc(VarName::new("y").unwrap()),
            Instruction::BorrowField(fname("nope")),
        ];
        let errs = Program::new(structs, vec![VarName::new("x").unwrap()], code)
            .validate()
            .unwrap_err();
        assert_eq!(errs.len(), 2);
        assert_eq!(errs[0].pc(), Some(0));
        assert_eq!(errs[1].pc(), Some(1));
    }

    #[test]
    fn op_arity_and_mnemonics() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_mnemonic(k.mnemonic()), Some(k));
            assert_eq!(k.arity(), if k == OpKind::Not { 1 } else { 2 });
        }
    }
}
