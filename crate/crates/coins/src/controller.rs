//! Test controller: drives the min test on reserved, flashed devices.
//!
//! For each attempt the receiver's radio first senses every candidate
//! channel for the sensing window. Then the rx target is armed to listen,
//! the tx target to transmit, and both run in one co-simulation session.
//! Finally `/result` is read back over LCSP.

use std::collections::BTreeMap;

use coins_core::config::{DeploymentConfig, TestSpec};
use coins_core::digest::fnv1a64;
use coins_core::lcsp::LcspRequest;
use coins_core::radio::InterfererProfile;
use coins_core::target::StartCommand;
use coins_core::testkit::{
    min_test_verdict, run_redundant, run_with_retry, AttemptOutcome, ChannelChoice, RetryPolicy,
    Snapshot, TestReport, TestkitError, Verdict,
};
use coins_core::{Micros, MS, SECOND};

use crate::testbed::Testbed;

/// Role → device name.
pub type Subset = BTreeMap<String, String>;

/// Virtual time reserved for one attempt: sensing, the session and a
/// second of settling.
pub fn slot_len(spec: &TestSpec) -> Micros {
    (spec.sense_window_ms + spec.deadline_ms) * MS + SECOND
}

pub struct Controller<'a> {
    pub testbed: &'a Testbed,
    pub spec: &'a TestSpec,
    pub interferers: &'a [InterfererProfile],
    /// Mixed into every session seed.
    pub salt: u64,
    /// Per-device text gathered along the way (role logs, errors).
    pub logs: BTreeMap<String, String>,
}

impl<'a> Controller<'a> {
    pub fn new(
        testbed: &'a Testbed,
        spec: &'a TestSpec,
        interferers: &'a [InterfererProfile],
        salt: u64,
    ) -> Self {
        Self {
            testbed,
            spec,
            interferers,
            salt,
            logs: BTreeMap::new(),
        }
    }

    fn slot_len(&self) -> Micros {
        slot_len(self.spec)
    }

    fn attempt_start(&self, attempt: u32) -> Micros {
        u64::from(attempt.saturating_sub(1)) * self.slot_len()
    }

    /// Occupancy per channel as seen by the subset's receiver, measured just
    /// before the attempt.
    pub fn sense(&mut self, subset: &Subset, attempt: u32, channels: &[u32]) -> Snapshot {
        let Some(rx) = subset.get("rx") else {
            return Snapshot::new();
        };
        let t0 = self.attempt_start(attempt);
        let window = self.spec.sense_window_ms * MS;
        channels
            .iter()
            .map(|&ch| {
                let occ = match self
                    .testbed
                    .sense(rx, None, ch, t0, window, self.interferers)
                {
                    Ok(r) => r.occupancy,
                    Err(e) => {
                        self.note(rx, &format!("sense ch={ch}: {e}"));
                        f64::NAN
                    }
                };
                (ch, occ)
            })
            .collect()
    }

    fn note(&mut self, device: &str, line: &str) {
        let l = self.logs.entry(device.into()).or_default();
        l.push_str(line);
        l.push('\n');
    }

    fn start_ms(&self, role: &str) -> u64 {
        match role {
            "rx" => self.spec.rx_start_ms,
            "tx" => self.spec.tx_start_ms,
            _ => 0,
        }
    }

    /// Arms, runs and collects one attempt on `channel`.
    pub fn attempt(&mut self, subset: &Subset, channel: u32, attempt: u32) -> AttemptOutcome {
        let error = |msg: String, outputs| AttemptOutcome {
            verdict: Verdict::Error,
            outputs,
            error: Some(msg),
        };
        let t0 = self.attempt_start(attempt) + self.spec.sense_window_ms * MS;
        let names: Vec<String> = subset.values().cloned().collect();
        let mut armed = Vec::new();
        for (role, name) in subset {
            let Some(d) = self.testbed.daemon(name) else {
                return error(format!("{name}: unknown device"), BTreeMap::new());
            };
            let cmd = StartCommand {
                channel: Some(channel),
                power_dbm: None,
                start_ms: self.start_ms(role),
            };
            let req = LcspRequest::post("/start", cmd.encode()).expect("start command is short");
            match d.lcsp(&req) {
                Ok(r) if r.is_ok() => armed.push(d),
                Ok(r) => {
                    let why = String::from_utf8_lossy(r.body()).into_owned();
                    for a in &armed {
                        a.with_target(|t| t.disarm());
                    }
                    return error(format!("{name}: start rejected: {why}"), BTreeMap::new());
                }
                Err(e) => {
                    for a in &armed {
                        a.with_target(|t| t.disarm());
                    }
                    return error(format!("{name}: {e}"), BTreeMap::new());
                }
            }
        }
        let salt = self.salt ^ fnv1a64(format!("attempt/{attempt}/{}", names.join(",")).as_bytes());
        if let Err(e) = self.testbed.run_session(
            &names,
            self.interferers,
            t0,
            self.spec.deadline_ms * MS,
            salt,
        ) {
            for a in &armed {
                a.with_target(|t| t.disarm());
            }
            return error(format!("session: {e}"), BTreeMap::new());
        }
        let mut outputs = BTreeMap::new();
        let mut unreachable = None;
        let mut trapped = Vec::new();
        for (role, name) in subset {
            let d = self.testbed.daemon(name).expect("looked up above");
            match d.lcsp_paged("/log") {
                Ok(Ok(log)) => {
                    let header = format!("== attempt {attempt} role {role} channel {channel}");
                    self.note(name, &header);
                    let text = String::from_utf8_lossy(&log).into_owned();
                    self.logs.entry(name.clone()).or_default().push_str(&text);
                }
                Ok(Err(e)) => self.note(name, &format!("log: {e}")),
                Err(e) => self.note(name, &format!("log: {e}")),
            }
            match d.lcsp_paged("/result") {
                Ok(Ok(bytes)) => {
                    outputs.insert(role.clone(), bytes);
                }
                Ok(Err(reason)) => {
                    self.note(name, &format!("result: {reason}"));
                    trapped.push(format!("{role}: {reason}"));
                    outputs.insert(role.clone(), Vec::new());
                }
                Err(e) => unreachable = Some(format!("{name}: {e}")),
            }
        }
        if let Some(e) = unreachable {
            return error(e, outputs);
        }
        let rx = outputs.get("rx").map(Vec::as_slice);
        let verdict = min_test_verdict(&self.spec.payload, rx);
        AttemptOutcome {
            verdict,
            outputs,
            error: if trapped.is_empty() {
                None
            } else {
                Some(trapped.join("; "))
            },
        }
    }

    /// Runs the configured test over `subsets`, with retry per subset and
    /// majority aggregation when there is more than one.
    pub fn run(
        &mut self,
        cfg: &DeploymentConfig,
        subsets: &[Subset],
    ) -> Result<TestReport, TestkitError> {
        let policy = RetryPolicy::try_from(&cfg.retry)?;
        let choice = ChannelChoice {
            policy: cfg.channel_policy,
            candidates: cfg.candidates.clone(),
        };
        let k = subsets.len() as u32;
        if k == 1 {
            let s = &subsets[0];
            return Ok(self.run_subset(&policy, &choice, s));
        }
        let threshold = policy.jam_occupancy_threshold;
        let mut reports = Vec::new();
        for (i, s) in subsets.iter().enumerate() {
            let c = choice.for_subset(i as u32, k);
            reports.push(self.run_subset(&policy, &c, s));
        }
        let mut it = reports.into_iter();
        Ok(run_redundant(subsets, threshold, |_, _| {
            it.next().expect("one report per subset")
        }))
    }

    fn run_subset(
        &mut self,
        policy: &RetryPolicy,
        choice: &ChannelChoice,
        s: &Subset,
    ) -> TestReport {
        // Both closures need the controller; attempts alternate strictly.
        let me = std::cell::RefCell::new(self);
        run_with_retry(
            policy,
            choice,
            |attempt, channels| me.borrow_mut().sense(s, attempt, channels),
            |channel, attempt| me.borrow_mut().attempt(s, channel, attempt),
        )
    }
}
