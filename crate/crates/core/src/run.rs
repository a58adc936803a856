//! Pipeline run state machine.
//!
//! A run moves through [`Stage`] in order, one step at a time, and ends in
//! `Reported` or `Failed`. The journal of visited states is what
//! [`validate_trace`] replays.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::testkit::{TestReport, Verdict};
use crate::Micros;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(pub String);

impl RunId {
    /// `r000001`, `r000002`, ...
    pub fn from_seq(n: u64) -> Self {
        Self(alloc::format!("r{n:06}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookEvent {
    pub commit: String,
    #[serde(rename = "ref")]
    pub git_ref: String,
    pub author: String,
    #[serde(default)]
    pub received_at: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Triggered,
    Fetched,
    DevicesSelected,
    Deployed,
    Built,
    Flashed,
    Tested,
    Reported,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Triggered,
        Stage::Fetched,
        Stage::DevicesSelected,
        Stage::Deployed,
        Stage::Built,
        Stage::Flashed,
        Stage::Tested,
        Stage::Reported,
    ];

    pub fn next(self) -> Option<Stage> {
        let i = Self::ALL.iter().position(|s| *s == self)?;
        Self::ALL.get(i + 1).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Triggered => "Triggered",
            Stage::Fetched => "Fetched",
            Stage::DevicesSelected => "DevicesSelected",
            Stage::Deployed => "Deployed",
            Stage::Built => "Built",
            Stage::Flashed => "Flashed",
            Stage::Tested => "Tested",
            Stage::Reported => "Reported",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    UnknownCommit,
    MissingConfig,
    ConfigSyntax,
    ConfigInvalid,
    SelectorUnsatisfiable,
    NotReserved,
    StorageFull,
    BuildFailed,
    Timeout,
    FlashVerifyFailed,
    TargetBusy,
    TestError,
    ReportFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureReason {
    pub kind: FailureKind,
    pub message: String,
}

impl FailureReason {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

/// `Failed.stage` is the stage the run was trying to enter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state")]
pub enum RunState {
    Triggered,
    Fetched,
    DevicesSelected,
    Deployed,
    Built,
    Flashed,
    Tested,
    Reported,
    Failed { stage: Stage, reason: FailureReason },
}

impl RunState {
    pub fn stage(&self) -> Option<Stage> {
        Some(match self {
            RunState::Triggered => Stage::Triggered,
            RunState::Fetched => Stage::Fetched,
            RunState::DevicesSelected => Stage::DevicesSelected,
            RunState::Deployed => Stage::Deployed,
            RunState::Built => Stage::Built,
            RunState::Flashed => Stage::Flashed,
            RunState::Tested => Stage::Tested,
            RunState::Reported => Stage::Reported,
            RunState::Failed { .. } => return None,
        })
    }

    pub fn from_stage(s: Stage) -> Self {
        match s {
            Stage::Triggered => RunState::Triggered,
            Stage::Fetched => RunState::Fetched,
            Stage::DevicesSelected => RunState::DevicesSelected,
            Stage::Deployed => RunState::Deployed,
            Stage::Built => RunState::Built,
            Stage::Flashed => RunState::Flashed,
            Stage::Tested => RunState::Tested,
            Stage::Reported => RunState::Reported,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, RunState::Reported | RunState::Failed { .. })
    }

    /// Next stage on the success path, if any.
    pub fn next_stage(&self) -> Option<Stage> {
        self.stage()?.next()
    }

    pub fn label(&self) -> String {
        match self {
            RunState::Failed { stage, reason } => {
                alloc::format!("Failed({stage}, {:?})", reason.kind)
            }
            s => String::from(s.stage().expect("not failed").as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition {from} -> {to}")]
pub struct TransitionError {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: RunId,
    pub event: HookEvent,
    pub state: RunState,
    /// Role → device id. With redundancy, roles are `"{role}.{subset}"`.
    pub reserved_devices: BTreeMap<String, String>,
    pub attempts: u32,
    pub report: Option<TestReport>,
    pub debug_log: String,
    pub journal: Vec<RunState>,
}

impl PipelineRun {
    pub fn new(run_id: RunId, event: HookEvent) -> Self {
        Self {
            run_id,
            event,
            state: RunState::Triggered,
            reserved_devices: BTreeMap::new(),
            attempts: 0,
            report: None,
            debug_log: String::new(),
            journal: alloc::vec![RunState::Triggered],
        }
    }

    /// Moves exactly one stage forward.
    pub fn advance_to(&mut self, stage: Stage) -> Result<(), TransitionError> {
        if self.state.next_stage() != Some(stage) {
            return Err(TransitionError {
                from: self.state.label(),
                to: String::from(stage.as_str()),
            });
        }
        self.state = RunState::from_stage(stage);
        self.journal.push(self.state.clone());
        Ok(())
    }

    /// Fails while trying to enter the next stage.
    pub fn fail(&mut self, reason: FailureReason) -> Result<(), TransitionError> {
        let stage = self.state.next_stage().ok_or_else(|| TransitionError {
            from: self.state.label(),
            to: String::from("Failed"),
        })?;
        self.state = RunState::Failed { stage, reason };
        self.journal.push(self.state.clone());
        Ok(())
    }

    pub fn log(&mut self, line: &str) {
        self.debug_log.push_str(line);
        if !line.ends_with('\n') {
            self.debug_log.push('\n');
        }
    }

    pub fn verdict(&self) -> Option<Verdict> {
        match &self.state {
            RunState::Reported => Some(self.report.as_ref().map_or(Verdict::Error, |r| r.verdict)),
            RunState::Failed { .. } => Some(Verdict::Error),
            _ => None,
        }
    }
}

/// A trace is valid iff it starts at `Triggered`, each step moves one stage
/// forward or fails on the way to the next stage, and nothing follows a
/// terminal state.
pub fn validate_trace(trace: &[RunState]) -> bool {
    let Some(first) = trace.first() else {
        return false;
    };
    if *first != RunState::Triggered {
        return false;
    }
    for w in trace.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.is_terminal() {
            return false;
        }
        let ok = match b {
            RunState::Failed { stage, .. } => a.next_stage() == Some(*stage),
            s => a.next_stage() == s.stage(),
        };
        if !ok {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run() -> PipelineRun {
        PipelineRun::new(
            RunId::from_seq(1),
            HookEvent {
                commit: "c1".into(),
                git_ref: "main".into(),
                author: "dev@example".into(),
                received_at: 0,
            },
        )
    }

    #[test]
    fn happy_path() {
        let mut r = run();
        for s in &Stage::ALL[1..] {
            r.advance_to(*s).unwrap();
        }
        assert!(r.state.is_terminal());
        assert!(validate_trace(&r.journal));
        assert_eq!(r.journal.len(), 8);
        assert!(r
            .fail(FailureReason::new(FailureKind::Timeout, "late"))
            .is_err());
    }

    #[test]
    fn no_skips_or_backsteps() {
        let mut r = run();
        assert!(r.advance_to(Stage::DevicesSelected).is_err());
        r.advance_to(Stage::Fetched).unwrap();
        assert!(r.advance_to(Stage::Fetched).is_err());
        r.fail(FailureReason::new(
            FailureKind::SelectorUnsatisfiable,
            "srd-a-01 unavailable",
        ))
        .unwrap();
        assert_eq!(
            r.state,
            RunState::Failed {
                stage: Stage::DevicesSelected,
                reason: FailureReason::new(
                    FailureKind::SelectorUnsatisfiable,
                    "srd-a-01 unavailable"
                )
            }
        );
        assert!(validate_trace(&r.journal));
        assert!(!validate_trace(&[RunState::Triggered, RunState::Built]));
        assert!(!validate_trace(&[RunState::Fetched]));
    }

    #[test]
    fn json_shape() {
        let s = serde_json::to_string(&RunState::Failed {
            stage: Stage::Built,
            reason: FailureReason::new(FailureKind::BuildFailed, "x"),
        })
        .unwrap();
        assert_eq!(
            s,
            r#"{"state":"Failed","stage":"Built","reason":{"kind":"BuildFailed","message":"x"}}"#
        );
        let e: HookEvent =
            serde_json::from_str(r#"{"commit":"c","ref":"main","author":"a"}"#).unwrap();
        assert_eq!(e.git_ref, "main");
    }
}
