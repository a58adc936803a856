//! Test reports and the wireless-aware policies around a test attempt:
//! failure classification, jammed-channel retry and disjoint-subset
//! redundancy.
//!
//! The attempt itself (talking to devices) is a closure supplied by the
//! host, so everything here is deterministic given the closure's results.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::config::{ChannelPolicy, RetryConfig};
use crate::radio::select_channel;

/// Channel → measured occupancy.
pub type Snapshot = BTreeMap<u32, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Error => "ERROR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    None,
    Software,
    Environment,
    Hardware,
    Unknown,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::None => "none",
            Cause::Software => "software",
            Cause::Environment => "environment",
            Cause::Hardware => "hardware",
            Cause::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TestkitError {
    #[error("retry policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("need {needed} devices for the requested subsets, pool has {available}")]
    InsufficientDevices { needed: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub reselect_channel: bool,
    pub jam_occupancy_threshold: f64,
}

impl RetryPolicy {
    pub fn new(
        max_attempts: u32,
        reselect_channel: bool,
        jam_occupancy_threshold: f64,
    ) -> Result<Self, TestkitError> {
        if max_attempts < 1 {
            return Err(TestkitError::InvalidPolicy("max_attempts must be >= 1"));
        }
        if !(jam_occupancy_threshold > 0.0 && jam_occupancy_threshold <= 1.0) {
            return Err(TestkitError::InvalidPolicy("threshold must lie in (0, 1]"));
        }
        Ok(Self {
            max_attempts,
            reselect_channel,
            jam_occupancy_threshold,
        })
    }
}

impl TryFrom<&RetryConfig> for RetryPolicy {
    type Error = TestkitError;

    fn try_from(c: &RetryConfig) -> Result<Self, TestkitError> {
        Self::new(c.max_attempts, c.reselect_channel, c.jam_threshold)
    }
}

/// What one attempt produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptOutcome {
    pub verdict: Verdict,
    pub outputs: BTreeMap<String, Vec<u8>>,
    pub error: Option<String>,
}

/// The min test's assertion: bit-exact equality of transmitted and received
/// bytes. `None` means the receiver could not be read.
pub fn min_test_verdict(transmitted: &[u8], received: Option<&[u8]>) -> Verdict {
    match received {
        None => Verdict::Error,
        Some(rx) if rx == transmitted => Verdict::Pass,
        Some(_) => Verdict::Fail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub channel: u32,
    pub verdict: Verdict,
    pub cause: Cause,
    pub sensing: Snapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub index: u32,
    /// Role → device name.
    pub devices: BTreeMap<String, String>,
    pub channel: u32,
    pub verdict: Verdict,
    pub cause: Cause,
    pub attempts: u32,
    #[serde(with = "crate::digest::hex_serde::map")]
    pub outputs: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub verdict: Verdict,
    /// Role → bytes reported by that role's target.
    #[serde(with = "crate::digest::hex_serde::map")]
    pub outputs: BTreeMap<String, Vec<u8>>,
    pub cause: Cause,
    pub attempts: u32,
    pub channel: u32,
    pub sensing: Snapshot,
    #[serde(default)]
    pub history: Vec<AttemptRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subsets: Vec<SubsetReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged_devices: Vec<String>,
}

impl TestReport {
    pub fn occupancy_on_channel(&self) -> f64 {
        self.sensing.get(&self.channel).copied().unwrap_or(0.0)
    }
}

/// One subset's (or one single run's) evidence for classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evidence {
    pub verdict: Verdict,
    /// Occupancy of the channel the attempt used.
    pub occupancy: f64,
}

/// Environment before hardware before software; `None` when nothing failed.
pub fn classify_failure(evidence: &[Evidence], threshold: f64) -> Cause {
    let failing: Vec<&Evidence> = evidence
        .iter()
        .filter(|e| e.verdict != Verdict::Pass)
        .collect();
    if failing.is_empty() {
        return Cause::None;
    }
    let jammed = |e: &Evidence| e.occupancy.is_nan() || e.occupancy >= threshold;
    if failing.iter().any(|e| jammed(e)) {
        return Cause::Environment;
    }
    let passes = evidence.len() - failing.len();
    if passes > 0 && failing.iter().any(|e| e.verdict == Verdict::Fail) {
        return Cause::Hardware;
    }
    if passes == 0 && failing.iter().all(|e| e.verdict == Verdict::Fail) {
        return Cause::Software;
    }
    Cause::Unknown
}

/// Where an attempt may transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelChoice {
    pub policy: ChannelPolicy,
    pub candidates: Vec<u32>,
}

impl ChannelChoice {
    /// Channels sensed before each attempt.
    pub fn sensed(&self) -> Vec<u32> {
        let mut s: BTreeSet<u32> = self.candidates.iter().copied().collect();
        if let ChannelPolicy::Fixed(c) = self.policy {
            s.insert(c);
        }
        s.into_iter().collect()
    }

    fn select(&self, snapshot: &Snapshot) -> u32 {
        let cand: Snapshot = self
            .candidates
            .iter()
            .map(|c| (*c, snapshot.get(c).copied().unwrap_or(f64::NAN)))
            .collect();
        select_channel(&cand).unwrap_or(self.candidates[0])
    }

    /// Channel set of subset `i` of `k`: fixed channels are offset by the
    /// subset index, candidates are dealt round-robin.
    pub fn for_subset(&self, i: u32, k: u32) -> Self {
        if k <= 1 {
            return self.clone();
        }
        match self.policy {
            ChannelPolicy::Fixed(c) => Self {
                policy: ChannelPolicy::Fixed(c + i),
                candidates: self.candidates.iter().map(|x| x + i).collect(),
            },
            ChannelPolicy::SenseAndSelect => {
                let mine: Vec<u32> = self
                    .candidates
                    .iter()
                    .enumerate()
                    .filter(|(n, _)| *n as u32 % k == i)
                    .map(|(_, c)| *c)
                    .collect();
                let max = self.candidates.iter().copied().max().unwrap_or(0);
                Self {
                    policy: ChannelPolicy::SenseAndSelect,
                    candidates: if mine.is_empty() {
                        alloc::vec![max + 1 + i]
                    } else {
                        mine
                    },
                }
            }
        }
    }
}

/// Attempt loop. With `reselect_channel` every attempt senses and takes the
/// least-occupied candidate; otherwise the first attempt's channel (fixed,
/// or selected once) is kept. Only environment failures are retried.
pub fn run_with_retry<S, T>(
    policy: &RetryPolicy,
    choice: &ChannelChoice,
    mut sense: S,
    mut test: T,
) -> TestReport
where
    S: FnMut(u32, &[u32]) -> Snapshot,
    T: FnMut(u32, u32) -> AttemptOutcome,
{
    let mut history = Vec::new();
    let mut channel = None;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let snapshot = sense(attempt, &choice.sensed());
        let ch = match (channel, policy.reselect_channel, choice.policy) {
            (_, true, _) => choice.select(&snapshot),
            (Some(c), false, _) => c,
            (None, false, ChannelPolicy::Fixed(c)) => c,
            (None, false, ChannelPolicy::SenseAndSelect) => choice.select(&snapshot),
        };
        channel = Some(ch);
        let out = test(ch, attempt);
        let occupancy = snapshot.get(&ch).copied().unwrap_or(0.0);
        let cause = classify_failure(
            &[Evidence {
                verdict: out.verdict,
                occupancy,
            }],
            policy.jam_occupancy_threshold,
        );
        history.push(AttemptRecord {
            attempt,
            channel: ch,
            verdict: out.verdict,
            cause,
            sensing: snapshot.clone(),
            error: out.error,
        });
        if cause == Cause::Environment && attempt < policy.max_attempts {
            continue;
        }
        return TestReport {
            verdict: out.verdict,
            outputs: out.outputs,
            cause,
            attempts: attempt,
            channel: ch,
            sensing: snapshot,
            history,
            subsets: Vec::new(),
            flagged_devices: Vec::new(),
        };
    }
}

/// Splits a pool into `k` disjoint role-complete subsets: names sorted,
/// chunked by role count, roles assigned in sorted order within a chunk.
pub fn partition(
    pool: &[String],
    roles: &[String],
    k: u32,
) -> Result<Vec<BTreeMap<String, String>>, TestkitError> {
    let names: BTreeSet<&String> = pool.iter().collect();
    let mut roles: Vec<&String> = roles.iter().collect();
    roles.sort();
    roles.dedup();
    let needed = roles.len() * k as usize;
    if k == 0 || roles.is_empty() || names.len() < needed {
        return Err(TestkitError::InsufficientDevices {
            needed,
            available: names.len(),
        });
    }
    let names: Vec<&String> = names.into_iter().take(needed).collect();
    Ok(names
        .chunks(roles.len())
        .map(|chunk| {
            roles
                .iter()
                .zip(chunk)
                .map(|(r, n)| ((*r).clone(), (*n).clone()))
                .collect()
        })
        .collect())
}

/// Runs `test` on every subset and aggregates by majority. When at least
/// one subset passes, failing subsets on clear channels are blamed on their
/// devices.
pub fn run_redundant<T>(
    subsets: &[BTreeMap<String, String>],
    threshold: f64,
    mut test: T,
) -> TestReport
where
    T: FnMut(u32, &BTreeMap<String, String>) -> TestReport,
{
    let reports: Vec<TestReport> = subsets
        .iter()
        .enumerate()
        .map(|(i, s)| test(i as u32, s))
        .collect();
    let evidence: Vec<Evidence> = reports
        .iter()
        .map(|r| Evidence {
            verdict: r.verdict,
            occupancy: r.occupancy_on_channel(),
        })
        .collect();
    let passes = reports
        .iter()
        .filter(|r| r.verdict == Verdict::Pass)
        .count();
    let majority = passes * 2 > reports.len();
    let mut flagged = Vec::new();
    let mut subset_reports = Vec::new();
    for (i, (r, devices)) in reports.iter().zip(subsets).enumerate() {
        let mut cause = r.cause;
        if passes > 0 && r.verdict == Verdict::Fail && r.occupancy_on_channel() < threshold {
            cause = Cause::Hardware;
            flagged.extend(devices.values().cloned());
        }
        subset_reports.push(SubsetReport {
            index: i as u32,
            devices: devices.clone(),
            channel: r.channel,
            verdict: r.verdict,
            cause,
            attempts: r.attempts,
            outputs: r.outputs.clone(),
        });
    }
    flagged.sort();
    let (verdict, cause) = if majority {
        (Verdict::Pass, Cause::None)
    } else {
        let v = if reports.iter().any(|r| r.verdict == Verdict::Fail) {
            Verdict::Fail
        } else {
            Verdict::Error
        };
        (v, classify_failure(&evidence, threshold))
    };
    let head = reports
        .iter()
        .find(|r| r.verdict == Verdict::Pass)
        .or(reports.first())
        .cloned()
        .expect("at least one subset");
    TestReport {
        verdict,
        outputs: head.outputs,
        cause,
        attempts: reports.iter().map(|r| r.attempts).max().unwrap_or(0),
        channel: head.channel,
        sensing: head.sensing,
        history: head.history,
        subsets: subset_reports,
        flagged_devices: flagged,
    }
}
