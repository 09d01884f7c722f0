//! Textual program (`.mvp`) and global-state (`.gst`) formats.
//!
//! Program files:
//!
//! ```text
//! resource Coin { value: u64 }
//! locals c
//! code {
//!     LoadConst 5
//!     Pack Coin
//!     StLoc c
//! top:
//!     Jump top
//! }
//! ```
//!
//! State files hold one `publish <address> <Type> <literal>` entry per
//! published resource. Tags are never written; loading assigns fresh
//! locations in file order and fresh tags in pre-order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;

use crate::program::{Diagnostic, Instruction, OpKind, Program, StructDecl, StructTable};
use crate::state::{GlobalResourceId, GlobalState};
use crate::values::{
    Address, FieldName, PrimitiveValue, Record, ResourceTag, StructName, Tag, TaggedValue, Type, Value, VarName,
};

const MAX_LITERAL_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// A parse or validation error with its source position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{pos}: {message}")]
pub struct ParseDiagnostic {
    pub pos: Pos,
    pub message: String,
}

impl ParseDiagnostic {
    fn new(pos: Pos, message: impl Into<String>) -> Self {
        Self {
            pos,
            message: message.into(),
        }
    }
}

pub type ParseResult<T> = Result<T, Vec<ParseDiagnostic>>;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Number(String),
    Hex(String),
    LBrace,
    RBrace,
    Colon,
    Comma,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Number(s) | Tok::Hex(s) => write!(f, "`{s}`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: Pos,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseDiagnostic> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1, 1);
    let advance = |c: char, line: &mut usize, col: &mut usize| {
        if c == '\n' {
            *line += 1;
            *col = 1;
        } else {
            *col += 1;
        }
    };
    while let Some(&c) = chars.peek() {
        let pos = Pos { line, col };
        if c.is_whitespace() {
            chars.next();
            advance(c, &mut line, &mut col);
            continue;
        }
        if c == '#' {
            while let Some(&c) = chars.peek() {
                if c == '\n' {
                    break;
                }
                chars.next();
                advance(c, &mut line, &mut col);
            }
            continue;
        }
        let punct = match c {
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            ':' => Some(Tok::Colon),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = punct {
            chars.next();
            advance(c, &mut line, &mut col);
            out.push(Token { tok, pos });
            continue;
        }
        if c.is_ascii_alphanumeric() || c == '_' {
            let mut word = String::new();
            while let Some(&c) = chars.peek() {
                if !(c.is_ascii_alphanumeric() || c == '_') {
                    break;
                }
                word.push(c);
                chars.next();
                advance(c, &mut line, &mut col);
            }
            let tok = if word.starts_with("0x") || word.starts_with("0X") {
                Tok::Hex(word)
            } else if word.starts_with(|c: char| c.is_ascii_digit()) {
                Tok::Number(word)
            } else {
                Tok::Ident(word)
            };
            out.push(Token { tok, pos });
            continue;
        }
        return Err(ParseDiagnostic::new(pos, format!("unexpected character {c:?}")));
    }
    out.push(Token {
        tok: Tok::Eof,
        pos: Pos { line, col },
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    i: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, ParseDiagnostic> {
        Ok(Self { toks: lex(text)?, i: 0 })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.i]
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.i + 1).min(self.toks.len() - 1)].tok
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.i].clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn unexpected(&self, expected: &str) -> ParseDiagnostic {
        let t = self.peek();
        ParseDiagnostic::new(t.pos, format!("expected {expected}, found {}", t.tok))
    }

    fn expect(&mut self, tok: Tok) -> Result<Pos, ParseDiagnostic> {
        if self.peek().tok == tok {
            Ok(self.next().pos)
        } else {
            Err(self.unexpected(&tok.to_string()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), ParseDiagnostic> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                Ok((s, self.next().pos))
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<Pos, ParseDiagnostic> {
        match &self.peek().tok {
            Tok::Ident(s) if s == kw => Ok(self.next().pos),
            _ => Err(self.unexpected(&format!("`{kw}`"))),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn struct_name(&mut self) -> Result<(StructName, Pos), ParseDiagnostic> {
        let (s, pos) = self.ident("a struct name")?;
        Ok((
            StructName::new(&s).map_err(|e| ParseDiagnostic::new(pos, e.to_string()))?,
            pos,
        ))
    }

    fn field_name(&mut self) -> Result<(FieldName, Pos), ParseDiagnostic> {
        let (s, pos) = self.ident("a field name")?;
        Ok((
            FieldName::new(&s).map_err(|e| ParseDiagnostic::new(pos, e.to_string()))?,
            pos,
        ))
    }

    fn var_name(&mut self) -> Result<(VarName, Pos), ParseDiagnostic> {
        let (s, pos) = self.ident("a local name")?;
        Ok((
            VarName::new(&s).map_err(|e| ParseDiagnostic::new(pos, e.to_string()))?,
            pos,
        ))
    }

    fn ty(&mut self) -> Result<Type, ParseDiagnostic> {
        let (s, pos) = self.ident("a type")?;
        Ok(match s.as_str() {
            "bool" => Type::Bool,
            "u64" => Type::U64,
            "address" => Type::Address,
            _ => Type::Struct(StructName::new(&s).map_err(|e| ParseDiagnostic::new(pos, e.to_string()))?),
        })
    }

    fn primitive(&mut self) -> Result<PrimitiveValue, ParseDiagnostic> {
        let t = self.peek().clone();
        let v = match &t.tok {
            Tok::Ident(s) if s == "true" => PrimitiveValue::Bool(true),
            Tok::Ident(s) if s == "false" => PrimitiveValue::Bool(false),
            Tok::Number(s) => PrimitiveValue::U64(parse_u64(s, t.pos)?),
            Tok::Hex(s) => PrimitiveValue::Address(parse_address(s, t.pos)?),
            Tok::Ident(s) if *self.peek2() == Tok::LBrace => {
                return Err(ParseDiagnostic::new(
                    t.pos,
                    format!("LoadConst takes a primitive literal, found record `{s}{{..}}`"),
                ))
            }
            _ => return Err(self.unexpected("a primitive literal")),
        };
        self.next();
        Ok(v)
    }
}

fn parse_u64(s: &str, pos: Pos) -> Result<u64, ParseDiagnostic> {
    if !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ParseDiagnostic::new(pos, format!("invalid integer literal `{s}`")));
    }
    s.parse()
        .map_err(|_| ParseDiagnostic::new(pos, format!("integer literal `{s}` does not fit in u64")))
}

fn parse_address(s: &str, pos: Pos) -> Result<Address, ParseDiagnostic> {
    Address::parse(s).map_err(|e| ParseDiagnostic::new(pos, e.to_string()))
}

fn struct_decl(p: &mut Parser) -> Result<(StructDecl, Pos), ParseDiagnostic> {
    let is_resource = p.ident("`resource` or `record`")?.0 == "resource";
    let (name, pos) = p.struct_name()?;
    p.expect(Tok::LBrace)?;
    let mut fields = Vec::new();
    loop {
        let (f, _) = p.field_name()?;
        p.expect(Tok::Colon)?;
        fields.push((f, p.ty()?));
        if p.peek().tok == Tok::Comma {
            p.next();
            // Tolerate a trailing comma.
            if p.peek().tok == Tok::RBrace {
                break;
            }
        } else {
            break;
        }
    }
    p.expect(Tok::RBrace)?;
    Ok((
        StructDecl {
            name,
            is_resource,
            fields,
        },
        pos,
    ))
}

enum Pending {
    Ready(Instruction),
    Branch(String, Pos),
}

/// Parses and validates a program file.
pub fn parse_program(text: &str) -> ParseResult<Program> {
    let mut p = Parser::new(text).map_err(|d| vec![d])?;
    parse_program_tokens(&mut p)
}

/// [`parse_program`] on raw bytes; invalid UTF-8 is a diagnostic.
pub fn parse_program_bytes(bytes: &[u8]) -> ParseResult<Program> {
    parse_program(decode(bytes)?)
}

fn decode(bytes: &[u8]) -> ParseResult<&str> {
    std::str::from_utf8(bytes).map_err(|e| {
        let valid = &bytes[..e.valid_up_to()];
        let line = 1 + valid.iter().filter(|&&b| b == b'\n').count();
        let col = 1 + valid.iter().rev().take_while(|&&b| b != b'\n').count();
        vec![ParseDiagnostic::new(Pos { line, col }, "input is not valid UTF-8")]
    })
}

fn parse_program_tokens(p: &mut Parser) -> ParseResult<Program> {
    let one = |d| vec![d];
    let mut decls = Vec::new();
    let mut struct_pos: BTreeMap<StructName, Vec<Pos>> = BTreeMap::new();
    while p.at_keyword("resource") || p.at_keyword("record") {
        let (d, pos) = struct_decl(p).map_err(one)?;
        struct_pos.entry(d.name.clone()).or_default().push(pos);
        decls.push(d);
    }

    let locals_pos = p.keyword("locals").map_err(one)?;
    let mut locals = Vec::new();
    let mut local_pos = BTreeMap::new();
    let empty_locals = p.at_keyword("code") && *p.peek2() == Tok::LBrace;
    if !empty_locals {
        loop {
            let (x, pos) = p.var_name().map_err(one)?;
            local_pos.entry(x.clone()).or_insert(pos);
            locals.push(x);
            if p.peek().tok != Tok::Comma {
                break;
            }
            p.next();
        }
    }

    p.keyword("code").map_err(one)?;
    p.expect(Tok::LBrace).map_err(one)?;
    let mut pending: Vec<(Pending, Pos)> = Vec::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut diags = Vec::new();
    loop {
        let t = p.peek().clone();
        let (word, pos) = match &t.tok {
            Tok::RBrace => break,
            Tok::Ident(s) => (s.clone(), t.pos),
            _ => return Err(one(p.unexpected("an instruction or `}`"))),
        };
        if *p.peek2() == Tok::Colon {
            p.next();
            p.next();
            if labels.insert(word.clone(), pending.len()).is_some() {
                diags.push(ParseDiagnostic::new(pos, format!("duplicate label `{word}`")));
            }
            continue;
        }
        p.next();
        let instr = match word.as_str() {
            "MvLoc" => Instruction::MvLoc(p.var_name().map_err(one)?.0),
            "CpLoc" => Instruction::CpLoc(p.var_name().map_err(one)?.0),
            "StLoc" => Instruction::StLoc(p.var_name().map_err(one)?.0),
            "BorrowLoc" => Instruction::BorrowLoc(p.var_name().map_err(one)?.0),
            "ReadRef" => Instruction::ReadRef,
            "WriteRef" => Instruction::WriteRef,
            "FreezeRef" => Instruction::FreezeRef,
            "Pop" => Instruction::Pop,
            "Pack" => Instruction::Pack(p.struct_name().map_err(one)?.0),
            "Unpack" => Instruction::Unpack(p.struct_name().map_err(one)?.0),
            "MoveTo" => Instruction::MoveTo(p.struct_name().map_err(one)?.0),
            "MoveFrom" => Instruction::MoveFrom(p.struct_name().map_err(one)?.0),
            "BorrowGlobal" => Instruction::BorrowGlobal(p.struct_name().map_err(one)?.0),
            "Exists" => Instruction::Exists(p.struct_name().map_err(one)?.0),
            "BorrowField" => Instruction::BorrowField(p.field_name().map_err(one)?.0),
            "LoadConst" => Instruction::LoadConst(p.primitive().map_err(one)?),
            "Branch" | "Jump" => {
                let (label, lpos) = p.ident("a label").map_err(one)?;
                if word == "Jump" {
                    pending.push((Pending::Ready(Instruction::LoadConst(PrimitiveValue::Bool(true))), pos));
                }
                pending.push((Pending::Branch(label, lpos), pos));
                continue;
            }
            other => match OpKind::from_mnemonic(other) {
                Some(k) => Instruction::Op(k),
                None => {
                    return Err(one(ParseDiagnostic::new(pos, format!("unknown mnemonic `{other}`"))));
                }
            },
        };
        pending.push((Pending::Ready(instr), pos));
    }
    p.expect(Tok::RBrace).map_err(one)?;
    if p.peek().tok != Tok::Eof {
        return Err(one(p.unexpected("end of input")));
    }

    let mut code = Vec::with_capacity(pending.len());
    let mut instr_pos = Vec::with_capacity(pending.len());
    for (item, pos) in pending {
        let instr = match item {
            Pending::Ready(i) => i,
            Pending::Branch(label, lpos) => match labels.get(&label) {
                Some(&target) => Instruction::Branch(target),
                None => {
                    diags.push(ParseDiagnostic::new(lpos, format!("unresolved label `{label}`")));
                    Instruction::Branch(0)
                }
            },
        };
        code.push(instr);
        instr_pos.push(pos);
    }

    let program = Program::new(StructTable::new(decls), locals, code);
    if let Err(errors) = program.validate() {
        for d in errors {
            let pos = diagnostic_pos(&d, &struct_pos, &local_pos, &instr_pos).unwrap_or(locals_pos);
            diags.push(ParseDiagnostic::new(pos, d.to_string()));
        }
    }
    if diags.is_empty() {
        Ok(program)
    } else {
        diags.sort_by_key(|d| d.pos);
        diags.dedup();
        Err(diags)
    }
}

fn diagnostic_pos(
    d: &Diagnostic,
    struct_pos: &BTreeMap<StructName, Vec<Pos>>,
    local_pos: &BTreeMap<VarName, Pos>,
    instr_pos: &[Pos],
) -> Option<Pos> {
    if let Some(pc) = d.pc() {
        return instr_pos.get(pc).copied();
    }
    let first = |s: &StructName| struct_pos.get(s).and_then(|v| v.first().copied());
    match d {
        Diagnostic::DuplicateStruct(s) => struct_pos.get(s).and_then(|v| v.get(1).copied()),
        Diagnostic::EmptyStruct(s) | Diagnostic::RecursiveStruct(s) => first(s),
        Diagnostic::DuplicateField { strukt, .. } | Diagnostic::ResourceInsideNonResource { strukt, .. } => {
            first(strukt)
        }
        Diagnostic::DuplicateLocal(x) => local_pos.get(x).copied(),
        _ => None,
    }
}

/// Renders a program in the textual format. Branch targets become labels
/// `L<index>`; the output parses back to an equal program.
pub fn render_program(program: &Program) -> String {
    let mut out = String::new();
    for d in program.structs.iter() {
        out.push_str(&render_decl(d));
        out.push('\n');
    }
    if !program.structs.is_empty() {
        out.push('\n');
    }
    let locals: Vec<&str> = program.locals.iter().map(|x| x.as_str()).collect();
    if locals.is_empty() {
        out.push_str("locals\n");
    } else {
        let _ = writeln!(out, "locals {}", locals.join(", "));
    }
    let targets: BTreeSet<usize> = program
        .code
        .iter()
        .filter_map(|i| match i {
            Instruction::Branch(t) => Some(*t),
            _ => None,
        })
        .collect();
    out.push_str("code {\n");
    for (pc, instr) in program.code.iter().enumerate() {
        if targets.contains(&pc) {
            let _ = writeln!(out, "L{pc}:");
        }
        match instr {
            Instruction::Branch(t) => {
                let _ = writeln!(out, "    Branch L{t}");
            }
            other => {
                let _ = writeln!(out, "    {other}");
            }
        }
    }
    if targets.contains(&program.code.len()) {
        let _ = writeln!(out, "L{}:", program.code.len());
    }
    out.push_str("}\n");
    out
}

/// Renders the declarations of a struct table, one per line.
pub fn render_structs(structs: &StructTable) -> String {
    structs.iter().map(|d| render_decl(d) + "\n").collect()
}

/// Parses a sequence of struct declarations without locals or code.
pub fn parse_structs(text: &str) -> ParseResult<StructTable> {
    let mut p = Parser::new(text).map_err(|d| vec![d])?;
    let mut decls = Vec::new();
    let mut positions = BTreeMap::<StructName, Vec<Pos>>::new();
    while p.peek().tok != Tok::Eof {
        if !(p.at_keyword("resource") || p.at_keyword("record")) {
            return Err(vec![p.unexpected("`resource` or `record`")]);
        }
        let (d, pos) = struct_decl(&mut p).map_err(|d| vec![d])?;
        positions.entry(d.name.clone()).or_default().push(pos);
        decls.push(d);
    }
    let table = StructTable::new(decls);
    let errors = table.validate();
    if errors.is_empty() {
        return Ok(table);
    }
    let fallback = Pos { line: 1, col: 1 };
    Err(errors
        .iter()
        .map(|d| {
            let pos = diagnostic_pos(d, &positions, &BTreeMap::new(), &[]).unwrap_or(fallback);
            ParseDiagnostic::new(pos, d.to_string())
        })
        .collect())
}

fn render_decl(d: &StructDecl) -> String {
    let kind = if d.is_resource { "resource" } else { "record" };
    let fields: Vec<String> = d.fields.iter().map(|(f, t)| format!("{f}: {t}")).collect();
    format!("{kind} {} {{ {} }}", d.name, fields.join(", "))
}

struct LiteralParser<'a> {
    decls: &'a StructTable,
}

impl LiteralParser<'_> {
    fn literal(&self, p: &mut Parser, expected: &Type, depth: usize) -> Result<TaggedValue, ParseDiagnostic> {
        let t = p.peek().clone();
        let mismatch =
            |found: &str| ParseDiagnostic::new(t.pos, format!("expected a {expected} literal, found {found}"));
        match (expected, &t.tok) {
            (Type::Bool, Tok::Ident(s)) if s == "true" || s == "false" => {
                p.next();
                Ok(TaggedValue::bool(s == "true"))
            }
            (Type::U64, Tok::Number(s)) => {
                p.next();
                Ok(TaggedValue::u64(parse_u64(s, t.pos)?))
            }
            (Type::Address, Tok::Hex(s)) => {
                p.next();
                Ok(TaggedValue::address(parse_address(s, t.pos)?))
            }
            (Type::Struct(name), Tok::Ident(s)) if s == name.as_str() => {
                if depth >= MAX_LITERAL_DEPTH {
                    return Err(ParseDiagnostic::new(t.pos, "literal nested too deeply"));
                }
                p.next();
                let decl = self
                    .decls
                    .get(name)
                    .ok_or_else(|| ParseDiagnostic::new(t.pos, format!("unknown struct `{name}`")))?;
                self.record(p, decl, t.pos, depth)
            }
            (_, tok) => Err(mismatch(&tok.to_string())),
        }
    }

    fn record(
        &self,
        p: &mut Parser,
        decl: &StructDecl,
        pos: Pos,
        depth: usize,
    ) -> Result<TaggedValue, ParseDiagnostic> {
        p.expect(Tok::LBrace)?;
        let mut given: BTreeMap<FieldName, TaggedValue> = BTreeMap::new();
        loop {
            let (f, fpos) = p.field_name()?;
            let Some(fty) = decl.field_type(&f) else {
                return Err(ParseDiagnostic::new(
                    fpos,
                    format!("struct `{}` has no field `{f}`", decl.name),
                ));
            };
            p.expect(Tok::Colon)?;
            let v = self.literal(p, fty, depth + 1)?;
            if given.insert(f.clone(), v).is_some() {
                return Err(ParseDiagnostic::new(fpos, format!("field `{f}` given twice")));
            }
            if p.peek().tok != Tok::Comma {
                break;
            }
            p.next();
        }
        p.expect(Tok::RBrace)?;
        let mut fields = Vec::with_capacity(decl.fields.len());
        for (f, _) in &decl.fields {
            match given.remove(f) {
                Some(v) => fields.push((f.clone(), v)),
                None => {
                    return Err(ParseDiagnostic::new(
                        pos,
                        format!("literal of `{}` is missing field `{f}`", decl.name),
                    ))
                }
            }
        }
        let record = Record::new(decl.name.clone(), fields).map_err(|e| ParseDiagnostic::new(pos, e.to_string()))?;
        // Placeholder tag; publishing assigns the real ones.
        let tag = if decl.is_resource {
            Tag::Resource(ResourceTag(0))
        } else {
            Tag::U
        };
        Ok(TaggedValue::new(Value::Record(record), tag))
    }
}

/// Parses a state file against `decls`. Each entry is published in file
/// order, so locations and tags are assigned deterministically.
pub fn parse_state(text: &str, decls: &StructTable) -> ParseResult<GlobalState> {
    let mut p = Parser::new(text).map_err(|d| vec![d])?;
    let lit = LiteralParser { decls };
    let mut st = GlobalState::new();
    let mut seen: BTreeMap<GlobalResourceId, Pos> = BTreeMap::new();
    let mut diags = Vec::new();
    while p.peek().tok != Tok::Eof {
        let pos = p.keyword("publish").map_err(|d| vec![d])?;
        let (addr, apos) = match &p.peek().tok {
            Tok::Hex(s) => {
                let s = s.clone();
                let apos = p.next().pos;
                (parse_address(&s, apos).map_err(|d| vec![d])?, apos)
            }
            _ => return Err(vec![p.unexpected("an address")]),
        };
        let (ty, tpos) = p.struct_name().map_err(|d| vec![d])?;
        let Some(decl) = decls.get(&ty) else {
            return Err(vec![ParseDiagnostic::new(tpos, format!("unknown struct `{ty}`"))]);
        };
        if !decl.is_resource {
            return Err(vec![ParseDiagnostic::new(
                tpos,
                format!("`{ty}` is not a resource; only resources can be stored in the global state"),
            )]);
        }
        let value = lit.literal(&mut p, &Type::Struct(ty.clone()), 0).map_err(|d| vec![d])?;
        let id = GlobalResourceId::new(addr.clone(), ty.clone());
        if let Some(first) = seen.get(&id) {
            diags.push(ParseDiagnostic::new(
                pos,
                format!("duplicate publication of {id} (first at {first})"),
            ));
            continue;
        }
        seen.insert(id, apos);
        st.publish(addr, value);
    }
    if diags.is_empty() {
        Ok(st)
    } else {
        Err(diags)
    }
}

/// [`parse_state`] on raw bytes; invalid UTF-8 is a diagnostic.
pub fn parse_state_bytes(bytes: &[u8], decls: &StructTable) -> ParseResult<GlobalState> {
    parse_state(decode(bytes)?, decls)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SerializeError {
    #[error("only finalized states serialize: locals and operand stack must be empty")]
    NotFinalized,
    #[error("global {0} points to a missing memory cell")]
    Dangling(GlobalResourceId),
}

/// Canonical text of a finalized state: entries sorted by address then type
/// name, fields in declaration order, tags omitted.
pub fn serialize_state(st: &GlobalState) -> Result<String, SerializeError> {
    if !st.locals.is_empty() || !st.stack.is_empty() {
        return Err(SerializeError::NotFinalized);
    }
    let mut out = String::new();
    for (id, c) in &st.globals {
        let tv = st.memory.get(c).ok_or_else(|| SerializeError::Dangling(id.clone()))?;
        let _ = write!(out, "publish {} {} ", id.address, id.type_name);
        write_literal(&mut out, tv);
        out.push('\n');
    }
    Ok(out)
}

/// A value in literal syntax without tags.
pub fn render_literal(tv: &TaggedValue) -> String {
    let mut out = String::new();
    write_literal(&mut out, tv);
    out
}

fn write_literal(out: &mut String, tv: &TaggedValue) {
    match &tv.value {
        Value::Primitive(p) => {
            let _ = write!(out, "{p}");
        }
        Value::Record(r) => {
            let _ = write!(out, "{}{{", r.type_name());
            for (i, (f, v)) in r.fields().iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{f}: ");
                write_literal(out, v);
            }
            out.push('}');
        }
    }
}

/// Tag-blind equality of the published contents of two states.
pub fn states_equivalent(a: &GlobalState, b: &GlobalState) -> bool {
    a.globals.len() == b.globals.len()
        && a.globals
            .keys()
            .all(|id| match (a.global_value(id), b.global_value(id)) {
                (Some(x), Some(y)) => x.eq_ignoring_tags(y),
                _ => false,
            })
}
