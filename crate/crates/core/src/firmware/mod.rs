//! Firmware DSL, `CFW1` bytecode and the target-node VM.
//!
//! Firmware is what a developer commits: a line-oriented program that sets
//! radio parameters, transmits, listens, senses and reports. The build
//! step compiles it to bytecode, the infrastructure node flashes the image
//! and the target VM runs it against the radio medium.
//!
//! ```text
//! program   = { line }
//! line      = [ statement ] [ "#" comment ] NEWLINE
//! statement = "SET_CHANNEL" uint
//!           | "SET_POWER" number
//!           | "TX" hex [ "REPEAT" uint ] [ "INTERVAL" uint ]
//!           | "RX" "TIMEOUT" uint
//!           | "SENSE" "WINDOW" uint
//!           | "REPORT" expr
//!           | "LOOP" ( uint | "FOREVER" )
//!           | "END"
//!           | "HALT"
//! expr      = sum [ "==" sum ]
//! sum       = term { ( "+" | "-" ) term }
//! term      = atom { ( "*" | "/" ) atom }
//! atom      = int | float | "0x" hex | "RX_DATA" | "RX_COUNT"
//!           | "OCCUPANCY" | "(" expr ")"
//! ```
//!
//! Times are milliseconds. `TX` payloads are 1 to 255 bytes of hex.

mod bytecode;
mod compiler;
mod vm;

pub use bytecode::{Bytecode, BytecodeError, Op, MAGIC, MAX_IMAGE_BYTES, VERSION};
pub use compiler::{compile, compile_bytes, CompileError, MAX_PAYLOAD};
pub use vm::{
    run, EventLog, RadioPort, Resume, RunOutput, Trap, Value, Vm, VmConfig, VmCrash, VmEvent,
    Yield, DEFAULT_BUDGET, MAX_STACK, MEMORY_LIMIT,
};
