//! Machine state: memory, global store, locals, and the operand stack.

use std::collections::BTreeMap;
use std::fmt;

use crate::values::{Address, Path, ResourceTag, StructName, Tag, TaggedValue, Value, VarName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location(pub u64);

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mutability {
    Mut,
    Immut,
}

/// `⟨location, path, qualifier⟩`. May dangle.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Reference {
    pub location: Location,
    pub path: Path,
    pub mutability: Mutability,
}

impl Reference {
    pub fn root(location: Location) -> Self {
        Self {
            location,
            path: Path::empty(),
            mutability: Mutability::Mut,
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = match self.mutability {
            Mutability::Mut => "mut",
            Mutability::Immut => "immut",
        };
        write!(f, "&{q}({}, {})", self.location, self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StackValue {
    Value(TaggedValue),
    Ref(Reference),
}

impl StackValue {
    pub fn as_value(&self) -> Option<&TaggedValue> {
        match self {
            StackValue::Value(tv) => Some(tv),
            StackValue::Ref(_) => None,
        }
    }

    pub fn as_ref(&self) -> Option<&Reference> {
        match self {
            StackValue::Ref(r) => Some(r),
            StackValue::Value(_) => None,
        }
    }
}

impl From<TaggedValue> for StackValue {
    fn from(tv: TaggedValue) -> Self {
        StackValue::Value(tv)
    }
}

impl From<Reference> for StackValue {
    fn from(r: Reference) -> Self {
        StackValue::Ref(r)
    }
}

impl fmt::Display for StackValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StackValue::Value(tv) => write!(f, "{tv}"),
            StackValue::Ref(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LocalValue {
    Location(Location),
    Ref(Reference),
}

pub type Memory = BTreeMap<Location, TaggedValue>;

/// Key of the persistent global store: an address and a resource type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlobalResourceId {
    pub address: Address,
    pub type_name: StructName,
}

impl GlobalResourceId {
    pub fn new(address: Address, type_name: StructName) -> Self {
        Self { address, type_name }
    }
}

impl fmt::Display for GlobalResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "⟨{}, {}⟩", self.address, self.type_name)
    }
}

/// The global state `⟨M, G, L, S⟩` plus the fresh-identifier counters.
///
/// The operand stack is stored bottom-first: the top of the stack is the
/// last element of `stack`. Code that mutates the components directly should
/// call [`GlobalState::sync_counters`] afterwards so that fresh locations and
/// tags stay fresh.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalState {
    pub memory: Memory,
    pub globals: BTreeMap<GlobalResourceId, Location>,
    pub locals: BTreeMap<VarName, LocalValue>,
    pub stack: Vec<StackValue>,
    next_location: u64,
    next_tag: u64,
}

impl GlobalState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_location(&self) -> u64 {
        self.next_location
    }

    pub fn next_tag(&self) -> u64 {
        self.next_tag
    }

    pub fn fresh_location(&mut self) -> Location {
        let c = Location(self.next_location);
        self.next_location += 1;
        c
    }

    pub fn fresh_tag(&mut self) -> ResourceTag {
        let t = ResourceTag(self.next_tag);
        self.next_tag += 1;
        t
    }

    /// Raises both counters past every location and tag currently present.
    /// Never lowers them.
    pub fn sync_counters(&mut self) {
        let mut max_loc = None;
        let mut max_tag = None;
        let mut note_loc = |c: Location| max_loc = max_loc.max(Some(c.0));
        for c in self.memory.keys() {
            note_loc(*c);
        }
        for c in self.globals.values() {
            note_loc(*c);
        }
        for lv in self.locals.values() {
            match lv {
                LocalValue::Location(c) => note_loc(*c),
                LocalValue::Ref(r) => note_loc(r.location),
            }
        }
        for sv in &self.stack {
            match sv {
                StackValue::Value(tv) => {
                    max_tag = max_tag.max(tv.resource_tags_preorder().into_iter().max());
                }
                StackValue::Ref(r) => note_loc(r.location),
            }
        }
        for tv in self.memory.values() {
            max_tag = max_tag.max(tv.resource_tags_preorder().into_iter().max());
        }
        if let Some(c) = max_loc {
            self.next_location = self.next_location.max(c + 1);
        }
        if let Some(t) = max_tag {
            self.next_tag = self.next_tag.max(t.0 + 1);
        }
    }

    /// Stores `value` under a fresh location and publishes it at `⟨address,
    /// type⟩`, replacing every resource tag in the tree by a fresh one in
    /// pre-order. Returns `None` without changes if the id is already taken.
    pub fn publish(&mut self, address: Address, value: TaggedValue) -> Option<Location> {
        let Value::Record(r) = &value.value else {
            return None;
        };
        let id = GlobalResourceId::new(address, r.type_name().clone());
        if self.globals.contains_key(&id) {
            return None;
        }
        let mut value = value;
        self.retag(&mut value);
        let c = self.fresh_location();
        self.memory.insert(c, value);
        self.globals.insert(id, c);
        Some(c)
    }

    fn retag(&mut self, tv: &mut TaggedValue) {
        if tv.tag.is_resource() {
            tv.tag = Tag::Resource(self.fresh_tag());
        }
        if let Value::Record(r) = &mut tv.value {
            let names: Vec<_> = r.fields().iter().map(|(f, _)| f.clone()).collect();
            for f in names {
                if let Some(child) = r.field_mut(&f) {
                    self.retag(child);
                }
            }
        }
    }

    pub fn push(&mut self, sv: impl Into<StackValue>) {
        self.stack.push(sv.into());
    }

    /// The `depth`-th stack element counted from the top (0 = top).
    pub fn peek(&self, depth: usize) -> Option<&StackValue> {
        self.stack.len().checked_sub(depth + 1).map(|i| &self.stack[i])
    }

    /// Stack elements from the top down.
    pub fn stack_top_down(&self) -> impl Iterator<Item = &StackValue> {
        self.stack.iter().rev()
    }

    /// The value a global id points to, if both the id and its cell exist.
    pub fn global_value(&self, id: &GlobalResourceId) -> Option<&TaggedValue> {
        self.globals.get(id).and_then(|c| self.memory.get(c))
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot(self.clone())
    }
}

/// An immutable copy of a [`GlobalState`], used to roll back transactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSnapshot(GlobalState);

impl StateSnapshot {
    pub fn restore(&self) -> GlobalState {
        self.0.clone()
    }

    pub fn state(&self) -> &GlobalState {
        &self.0
    }
}

/// A program counter paired with a global state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProgramState {
    pub pc: usize,
    pub state: GlobalState,
}

impl ProgramState {
    pub fn new(state: GlobalState) -> Self {
        Self { pc: 0, state }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::values::{FieldName, Record};

    fn coin(v: u64) -> TaggedValue {
        let r = Record::new(
            StructName::new("Coin").unwrap(),
            vec![(FieldName::new("value").unwrap(), TaggedValue::u64(v))],
        )
        .unwrap();
        TaggedValue::new(Value::Record(r), Tag::Resource(ResourceTag(999)))
    }

    #[test]
    fn fresh_locations_are_monotone() {
        let mut s = GlobalState::new();
        assert_eq!(s.fresh_location(), Location(0));
        assert_eq!(s.next_location(), 1);
        let mut s7 = GlobalState {
            next_location: 7,
            ..GlobalState::default()
        };
        assert_eq!(s7.fresh_location(), Location(7));
        assert_eq!(s7.next_location(), 8);
        assert_ne!(s.fresh_location(), s.fresh_location());
    }

    #[test]
    fn fresh_tags_are_distinct() {
        let mut s = GlobalState::new();
        assert_eq!(s.fresh_tag(), ResourceTag(0));
        assert_eq!(s.fresh_tag(), ResourceTag(1));
        assert_eq!(s.fresh_tag(), ResourceTag(2));
        let tags: std::collections::BTreeSet<_> = (0..1000).map(|_| s.fresh_tag()).collect();
        assert_eq!(tags.len(), 1000);
    }

    #[test]
    fn publish_retags_and_rejects_duplicates() {
        let mut s = GlobalState::new();
        let a = Address::from_u64(1);
        let c = s.publish(a.clone(), coin(5)).unwrap();
        assert_eq!(c, Location(0));
        assert_eq!(s.memory[&c].tag, Tag::Resource(ResourceTag(0)));
        assert_eq!(s.publish(a, coin(6)), None);
        assert_eq!(s.memory.len(), 1);
    }

    #[test]
    fn snapshot_round_trip() {
        let empty = GlobalState::new();
        assert_eq!(empty.snapshot().restore(), empty);

        let mut s = GlobalState::new();
        s.publish(Address::from_u64(1), coin(5));
        let snap = s.snapshot();
        s.memory.clear();
        s.push(TaggedValue::u64(3));
        s.fresh_tag();
        assert_ne!(s, *snap.state());
        assert_eq!(snap.restore(), *snap.state());
    }

    #[test]
    fn sync_counters_moves_past_present_ids() {
        let mut s = GlobalState::new();
        s.memory.insert(Location(4), coin(1));
        s.push(Reference::root(Location(9)));
        s.sync_counters();
        assert_eq!(s.next_location(), 10);
        assert_eq!(s.next_tag(), 1000);
    }

    #[test]
    fn peek_counts_from_top() {
        let mut s = GlobalState::new();
        s.push(TaggedValue::u64(1));
        s.push(TaggedValue::u64(2));
        assert_eq!(s.peek(0), Some(&StackValue::Value(TaggedValue::u64(2))));
        assert_eq!(s.peek(1), Some(&StackValue::Value(TaggedValue::u64(1))));
        assert_eq!(s.peek(2), None);
    }
}
