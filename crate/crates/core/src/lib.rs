//! Deterministic core of the `coins` continuous-integration orchestrator for
//! wireless testbeds.
//!
//! Everything in this crate is a pure function of its inputs and a seed: no
//! file system, no sockets, no wall clock. The `coins` crate wraps these
//! pieces with storage, HTTP and a CLI.
//!
//! - [`lcsp`]: the line-oriented request/response codec spoken over the
//!   emulated serial application interface.
//! - [`firmware`]: the firmware DSL compiler, `CFW1` bytecode and the
//!   resumable target VM.
//! - [`radio`]: channel plans, log-distance propagation, SINR reception,
//!   interferers, energy-detection sensing and PSD histograms.
//! - [`sim`]: discrete-event co-simulation of several target VMs sharing a
//!   radio medium.
//! - [`target`]: the target node (VM host, LCSP server, flash receiver).
//! - [`build`]: build specs, the step executor and cache keys.
//! - [`config`]: the strict `key = value` format, deployment config and test
//!   controller spec.
//! - [`registry`]: device records, per-node-type radio profiles, warning rules
//!   and the registry state machine.
//! - [`run`]: the pipeline run state machine.
//! - [`testkit`]: test reports, failure classification, retry and
//!   redundancy policies.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod build;
pub mod config;
pub mod digest;
pub mod firmware;
pub mod lcsp;
pub mod radio;
pub mod registry;
pub mod run;
pub mod sim;
pub mod target;
pub mod testkit;

/// Virtual time in microseconds. All simulated clocks use this unit.
pub type Micros = u64;

/// Microseconds per millisecond.
pub const MS: Micros = 1_000;
/// Microseconds per second.
pub const SECOND: Micros = 1_000_000;
