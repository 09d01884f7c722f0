//! A small-step bytecode interpreter for a call-free fragment of Move, with
//! a dynamic safety layer that checks state well-formedness and resource
//! conservation along every execution.

pub mod generator;
pub mod interpreter;
pub mod program;
pub mod safety;
pub mod state;
pub mod textfmt;
pub mod tracelog;
pub mod values;

pub use interpreter::{
    execute_transaction, AbortKind, Event, ExecOptions, ExecutionTrace, Interpreter, Mutation, Rule, StepOutcome,
    Stuck, TransactionResult, TxOutcome,
};
pub use program::{Instruction, OpKind, Program, StructDecl, StructTable};
pub use safety::{audit_trace, check_well_formed, execute_checked, resources_of, TraceAudit};
pub use state::{GlobalResourceId, GlobalState, Location, ProgramState};
pub use values::{Address, FieldName, Path, PrimitiveValue, ResourceTag, StructName, Tag, TaggedValue, Type, VarName};
