//! Primitive values, tags, and tagged values viewed as labeled trees.
//!
//! A [`TaggedValue`] is either a primitive leaf or a record node whose edges
//! are labeled by field names. Every node carries a [`Tag`]: `U` for
//! non-resource data, or a unique [`ResourceTag`] for a packed resource.
//! Tags are bookkeeping for the safety layer only; they never appear in the
//! external text formats.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::program::StructTable;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValueError {
    #[error("invalid identifier `{0}`")]
    InvalidIdentifier(String),
    #[error("invalid address literal `{0}`")]
    InvalidAddress(String),
    #[error("record `{0}` has no fields")]
    EmptyRecord(StructName),
    #[error("record `{record}` repeats field `{field}`")]
    DuplicateField { record: StructName, field: FieldName },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown struct `{0}`")]
pub struct UnknownStruct(pub StructName);

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

macro_rules! identifier {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(s: &str) -> Result<Self, ValueError> {
                if is_identifier(s) {
                    Ok(Self(Arc::from(s)))
                } else {
                    Err(ValueError::InvalidIdentifier(s.to_string()))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl FromStr for $name {
            type Err = ValueError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

identifier!(
    /// Name of a declared struct type.
    StructName
);
identifier!(
    /// Name of a record field.
    FieldName
);
identifier!(
    /// Name of a local variable.
    VarName
);

/// Maximum number of hex digits in an address (32 bytes).
pub const MAX_ADDRESS_DIGITS: usize = 64;

/// An account address, stored in canonical form: lowercase hex with leading
/// zeros stripped (`0x0` for zero).
///
/// Addresses order numerically.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Address(Arc<str>);

impl Address {
    pub fn parse(literal: &str) -> Result<Self, ValueError> {
        let bad = || ValueError::InvalidAddress(literal.to_string());
        let digits = literal
            .strip_prefix("0x")
            .or_else(|| literal.strip_prefix("0X"))
            .ok_or_else(bad)?;
        if digits.is_empty() || digits.len() > MAX_ADDRESS_DIGITS || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad());
        }
        let trimmed = digits.trim_start_matches('0');
        let canonical = if trimmed.is_empty() { "0" } else { trimmed };
        Ok(Self(Arc::from(canonical.to_ascii_lowercase())))
    }

    pub fn from_u64(n: u64) -> Self {
        Self(Arc::from(format!("{n:x}")))
    }

    /// Canonical hex digits without the `0x` prefix.
    pub fn digits(&self) -> &str {
        &self.0
    }
}

impl Ord for Address {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Address {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PrimitiveValue {
    Bool(bool),
    U64(u64),
    Address(Address),
}

impl PrimitiveValue {
    pub fn ty(&self) -> Type {
        match self {
            PrimitiveValue::Bool(_) => Type::Bool,
            PrimitiveValue::U64(_) => Type::U64,
            PrimitiveValue::Address(_) => Type::Address,
        }
    }
}

impl fmt::Display for PrimitiveValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrimitiveValue::Bool(b) => write!(f, "{b}"),
            PrimitiveValue::U64(n) => write!(f, "{n}"),
            PrimitiveValue::Address(a) => write!(f, "{a}"),
        }
    }
}

/// Types of values and of struct fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Type {
    Bool,
    U64,
    Address,
    Struct(StructName),
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Bool => f.write_str("bool"),
            Type::U64 => f.write_str("u64"),
            Type::Address => f.write_str("address"),
            Type::Struct(name) => write!(f, "{name}"),
        }
    }
}

/// Identifier of one packed resource. Allocated monotonically per execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResourceTag(pub u64);

impl fmt::Display for ResourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    /// Non-resource data.
    U,
    Resource(ResourceTag),
}

impl Tag {
    pub fn resource(self) -> Option<ResourceTag> {
        match self {
            Tag::U => None,
            Tag::Resource(t) => Some(t),
        }
    }

    pub fn is_resource(self) -> bool {
        matches!(self, Tag::Resource(_))
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::U => f.write_str("U"),
            Tag::Resource(t) => write!(f, "{t}"),
        }
    }
}

/// A non-empty record carrying its declared struct name. Fields are kept in
/// the declaration order of the struct table.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    type_name: StructName,
    fields: Vec<(FieldName, TaggedValue)>,
}

impl Record {
    pub fn new(type_name: StructName, fields: Vec<(FieldName, TaggedValue)>) -> Result<Self, ValueError> {
        if fields.is_empty() {
            return Err(ValueError::EmptyRecord(type_name));
        }
        for (i, (name, _)) in fields.iter().enumerate() {
            if fields[..i].iter().any(|(other, _)| other == name) {
                return Err(ValueError::DuplicateField {
                    record: type_name,
                    field: name.clone(),
                });
            }
        }
        Ok(Self { type_name, fields })
    }

    pub fn type_name(&self) -> &StructName {
        &self.type_name
    }

    pub fn fields(&self) -> &[(FieldName, TaggedValue)] {
        &self.fields
    }

    pub fn into_fields(self) -> Vec<(FieldName, TaggedValue)> {
        self.fields
    }

    pub fn field(&self, name: &FieldName) -> Option<&TaggedValue> {
        self.fields.iter().find(|(f, _)| f == name).map(|(_, tv)| tv)
    }

    pub fn field_mut(&mut self, name: &FieldName) -> Option<&mut TaggedValue> {
        self.fields.iter_mut().find(|(f, _)| f == name).map(|(_, tv)| tv)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Primitive(PrimitiveValue),
    Record(Record),
}

impl Value {
    pub fn ty(&self) -> Type {
        match self {
            Value::Primitive(p) => p.ty(),
            Value::Record(r) => Type::Struct(r.type_name.clone()),
        }
    }

    pub fn as_record(&self) -> Option<&Record> {
        match self {
            Value::Record(r) => Some(r),
            Value::Primitive(_) => None,
        }
    }
}

impl From<PrimitiveValue> for Value {
    fn from(p: PrimitiveValue) -> Self {
        Value::Primitive(p)
    }
}

/// A possibly empty sequence of field selections.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path(Vec<FieldName>);

impl Path {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn fields(&self) -> &[FieldName] {
        &self.0
    }

    /// `self :: f`
    pub fn child(&self, field: FieldName) -> Path {
        let mut fields = self.0.clone();
        fields.push(field);
        Path(fields)
    }
}

impl From<Vec<FieldName>> for Path {
    fn from(fields: Vec<FieldName>) -> Self {
        Path(fields)
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, field) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{field}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaggedValue {
    pub value: Value,
    pub tag: Tag,
}

impl TaggedValue {
    pub fn new(value: Value, tag: Tag) -> Self {
        Self { value, tag }
    }

    /// A `U`-tagged value.
    pub fn unrestricted(value: impl Into<Value>) -> Self {
        Self {
            value: value.into(),
            tag: Tag::U,
        }
    }

    pub fn bool(b: bool) -> Self {
        Self::unrestricted(PrimitiveValue::Bool(b))
    }

    pub fn u64(n: u64) -> Self {
        Self::unrestricted(PrimitiveValue::U64(n))
    }

    pub fn address(a: Address) -> Self {
        Self::unrestricted(PrimitiveValue::Address(a))
    }

    pub fn is_resource(&self) -> bool {
        self.tag.is_resource()
    }

    pub fn ty(&self) -> Type {
        self.value.ty()
    }

    pub fn as_primitive(&self) -> Option<&PrimitiveValue> {
        match &self.value {
            Value::Primitive(p) => Some(p),
            Value::Record(_) => None,
        }
    }

    /// `tv[p]`: the subterm at `path`, or `None` where the path leaves the tree.
    pub fn subterm(&self, path: &Path) -> Option<&TaggedValue> {
        path.0.iter().try_fold(self, |tv, field| match &tv.value {
            Value::Record(r) => r.field(field),
            Value::Primitive(_) => None,
        })
    }

    pub fn subterm_mut(&mut self, path: &Path) -> Option<&mut TaggedValue> {
        path.0.iter().try_fold(self, |tv, field| match &mut tv.value {
            Value::Record(r) => r.field_mut(field),
            Value::Primitive(_) => None,
        })
    }

    /// `tv[p := replacement]`. Ancestors along the path keep their tags.
    pub fn replace(&self, path: &Path, replacement: TaggedValue) -> Option<TaggedValue> {
        let mut out = self.clone();
        *out.subterm_mut(path)? = replacement;
        Some(out)
    }

    /// Visits every node of the tree in pre-order (fields in declaration
    /// order) together with its path from the root.
    pub fn visit<'a>(&'a self, visitor: &mut impl FnMut(&Path, &'a TaggedValue)) {
        fn go<'a>(tv: &'a TaggedValue, path: &mut Vec<FieldName>, visitor: &mut impl FnMut(&Path, &'a TaggedValue)) {
            // The path is rebuilt per node; values are shallow.
            visitor(&Path(path.clone()), tv);
            if let Value::Record(r) = &tv.value {
                for (name, child) in &r.fields {
                    path.push(name.clone());
                    go(child, path, visitor);
                    path.pop();
                }
            }
        }
        go(self, &mut Vec::new(), visitor);
    }

    /// Resource tags in pre-order, including the root's.
    pub fn resource_tags_preorder(&self) -> Vec<ResourceTag> {
        let mut tags = Vec::new();
        self.collect_tags(&mut tags);
        tags
    }

    fn collect_tags(&self, out: &mut Vec<ResourceTag>) {
        if let Some(t) = self.tag.resource() {
            out.push(t);
        }
        if let Value::Record(r) = &self.value {
            for (_, child) in &r.fields {
                child.collect_tags(out);
            }
        }
    }

    /// Every resource tag occurring at any node of the tree.
    pub fn contained_resource_tags(&self) -> BTreeSet<ResourceTag> {
        self.resource_tags_preorder().into_iter().collect()
    }

    pub fn contains_resource(&self) -> bool {
        self.is_resource()
            || match &self.value {
                Value::Record(r) => r.fields.iter().any(|(_, tv)| tv.contains_resource()),
                Value::Primitive(_) => false,
            }
    }

    /// Structural equality that ignores every tag in both trees.
    pub fn eq_ignoring_tags(&self, other: &TaggedValue) -> bool {
        match (&self.value, &other.value) {
            (Value::Primitive(a), Value::Primitive(b)) => a == b,
            (Value::Record(a), Value::Record(b)) => {
                a.type_name == b.type_name
                    && a.fields.len() == b.fields.len()
                    && a.fields
                        .iter()
                        .zip(&b.fields)
                        .all(|((fa, ta), (fb, tb))| fa == fb && ta.eq_ignoring_tags(tb))
            }
            _ => false,
        }
    }

    /// Tag/type agreement: a node carries a resource tag exactly when its
    /// declared type is a resource type, and no non-resource record has a
    /// resource field.
    pub fn is_well_formed(&self, decls: &StructTable) -> Result<bool, UnknownStruct> {
        match &self.value {
            Value::Primitive(_) => Ok(self.tag == Tag::U),
            Value::Record(r) => {
                let decl = decls
                    .get(&r.type_name)
                    .ok_or_else(|| UnknownStruct(r.type_name.clone()))?;
                if decl.is_resource != self.tag.is_resource() {
                    return Ok(false);
                }
                for (_, child) in &r.fields {
                    if !child.is_well_formed(decls)? {
                        return Ok(false);
                    }
                    if !decl.is_resource && child.is_resource() {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
        }
    }
}

impl fmt::Display for TaggedValue {
    /// Renders the value in literal syntax, with resource tags as a suffix.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Value::Primitive(p) => write!(f, "{p}")?,
            Value::Record(r) => {
                write!(f, "{}{{", r.type_name)?;
                for (i, (name, tv)) in r.fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{name}: {tv}")?;
                }
                f.write_str("}")?;
            }
        }
        if let Tag::Resource(t) = self.tag {
            write!(f, "@{t}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(s: &str) -> FieldName {
        FieldName::new(s).unwrap()
    }

    fn path(fields: &[&str]) -> Path {
        Path(fields.iter().map(|s| field(s)).collect())
    }

    fn record(ty: &str, tag: Tag, fields: Vec<(&str, TaggedValue)>) -> TaggedValue {
        let fields = fields.into_iter().map(|(n, tv)| (field(n), tv)).collect();
        TaggedValue::new(
            Value::Record(Record::new(StructName::new(ty).unwrap(), fields).unwrap()),
            tag,
        )
    }

    fn coin(value: u64, tag: u64) -> TaggedValue {
        record(
            "Coin",
            Tag::Resource(ResourceTag(tag)),
            vec![("value", TaggedValue::u64(value))],
        )
    }

    #[test]
    fn subterm_of_empty_path_is_identity() {
        let five = TaggedValue::u64(5);
        assert_eq!(five.subterm(&Path::empty()), Some(&five));
    }

    #[test]
    fn subterm_follows_record_field() {
        assert_eq!(coin(5, 1).subterm(&path(&["value"])), Some(&TaggedValue::u64(5)));
    }

    #[test]
    fn subterm_through_primitive_is_undefined() {
        assert_eq!(TaggedValue::u64(5).subterm(&path(&["f"])), None);
        assert_eq!(coin(5, 1).subterm(&path(&["nope"])), None);
    }

    #[test]
    fn replace_cases() {
        assert_eq!(
            TaggedValue::u64(7).replace(&Path::empty(), TaggedValue::u64(9)),
            Some(TaggedValue::u64(9))
        );
        assert_eq!(
            coin(5, 1).replace(&path(&["value"]), TaggedValue::u64(8)),
            Some(coin(8, 1))
        );
        assert_eq!(
            TaggedValue::bool(true).replace(&path(&["x"]), TaggedValue::u64(1)),
            None
        );
    }

    #[test]
    fn contained_tags() {
        assert!(TaggedValue::u64(5).contained_resource_tags().is_empty());
        assert_eq!(coin(5, 1).contained_resource_tags(), BTreeSet::from([ResourceTag(1)]));
        let bank = record("Bank", Tag::Resource(ResourceTag(1)), vec![("c", coin(0, 2))]);
        assert_eq!(
            bank.contained_resource_tags(),
            BTreeSet::from([ResourceTag(1), ResourceTag(2)])
        );
    }

    #[test]
    fn address_canonical_form() {
        let a = Address::parse("0x00Ab").unwrap();
        assert_eq!(a.to_string(), "0xab");
        assert_eq!(Address::parse("0x0").unwrap().to_string(), "0x0");
        assert_eq!(Address::parse("0x000").unwrap(), Address::from_u64(0));
        assert!(Address::parse("0x").is_err());
        assert!(Address::parse("12").is_err());
        assert!(Address::parse("0xg1").is_err());
        assert!(Address::from_u64(2) < Address::from_u64(16));
    }

    #[test]
    fn record_construction_rejects_empty_and_duplicates() {
        let name = StructName::new("S").unwrap();
        assert!(Record::new(name.clone(), vec![]).is_err());
        let dup = vec![(field("a"), TaggedValue::u64(1)), (field("a"), TaggedValue::u64(2))];
        assert!(matches!(Record::new(name, dup), Err(ValueError::DuplicateField { .. })));
    }

    #[test]
    fn identifiers_are_validated() {
        assert!(FieldName::new("value").is_ok());
        assert!(FieldName::new("_x1").is_ok());
        assert!(FieldName::new("").is_err());
        assert!(FieldName::new("1x").is_err());
        assert!(FieldName::new("a-b").is_err());
    }

    #[test]
    fn tag_blind_equality() {
        assert!(coin(5, 1).eq_ignoring_tags(&coin(5, 9)));
        assert_ne!(coin(5, 1), coin(5, 9));
        assert!(!coin(5, 1).eq_ignoring_tags(&coin(6, 1)));
    }
}
