//! Device registry: records, radio profiles per node type, warning rules and
//! the reservation table. [`Registry`] is a pure state machine driven by
//! [`Command`]s so a journal of commands replays to the same state.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::radio::{Band, Environment, NodeSpec, Position, Transceiver};
use crate::{Micros, SECOND};

/// Highest mounting point on the outdoor site.
pub const MAX_OUTDOOR_HEIGHT_M: f64 = 9.3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl DeviceId {
    pub fn from_seq(n: u64) -> Self {
        Self(format!("dev-{n:06}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub String);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeType {
    SRD_A,
    SRD_B,
    LPWA,
    UWB,
    UHF_SENSE,
    INFRA,
}

impl NodeType {
    pub const ALL: [NodeType; 6] = [
        NodeType::SRD_A,
        NodeType::SRD_B,
        NodeType::LPWA,
        NodeType::UWB,
        NodeType::UHF_SENSE,
        NodeType::INFRA,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::SRD_A => "SRD_A",
            NodeType::SRD_B => "SRD_B",
            NodeType::LPWA => "LPWA",
            NodeType::UWB => "UWB",
            NodeType::UHF_SENSE => "UHF_SENSE",
            NodeType::INFRA => "INFRA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        NodeType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
    }

    /// The transceivers fitted to this kind of node, primary radio first.
    pub fn radios(self) -> Vec<Transceiver> {
        match self {
            NodeType::SRD_A => alloc::vec![
                Transceiver::new("AT86RF212", Band::Srd868, 10.0, -110.0, 320),
                Transceiver::new("CC2500", Band::Ism2400, 1.0, -104.0, 32),
            ],
            NodeType::SRD_B => alloc::vec![
                Transceiver::new("CC1101", Band::Srd868, 10.0, -112.0, 320),
                Transceiver::new("AT86RF231", Band::Ism2400, 3.0, -101.0, 32),
            ],
            NodeType::LPWA => {
                alloc::vec![Transceiver::new("SX1272", Band::Srd868, 14.0, -137.0, 2000)]
            }
            NodeType::UWB => alloc::vec![Transceiver::new("DW1000", Band::Uwb, -14.0, -93.0, 8)],
            NodeType::UHF_SENSE => {
                alloc::vec![Transceiver::new("TDA18219HN", Band::Uhf, 0.0, -100.0, 1).receive_only()]
            }
            NodeType::INFRA => alloc::vec![Transceiver::new("WL1837", Band::Wlan5, 17.0, -90.0, 8)],
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioProfile {
    pub node_type: NodeType,
    pub radios: Vec<Transceiver>,
}

impl RadioProfile {
    pub fn for_node_type(node_type: NodeType) -> Self {
        Self {
            node_type,
            radios: node_type.radios(),
        }
    }

    /// The radio firmware drives by default.
    pub fn primary(&self) -> Option<&Transceiver> {
        self.radios.first()
    }

    fn check(&self) -> Result<(), &'static str> {
        if self.radios.is_empty() {
            return Err("profile has no radios");
        }
        if !self.radios.iter().all(Transceiver::is_valid) {
            return Err("radio needs channel_count >= 1 and channel_width > 0");
        }
        let expected: Vec<String> = self
            .node_type
            .radios()
            .into_iter()
            .map(|r| r.name)
            .collect();
        let given: Vec<&String> = self.radios.iter().map(|r| &r.name).collect();
        if given.len() != expected.len() || given.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err("radio list does not match node type");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfraState {
    Available,
    Unavailable,
    Reserved,
}

impl InfraState {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "available" => Some(Self::Available),
            "unavailable" => Some(Self::Unavailable),
            "reserved" => Some(Self::Reserved),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Available => "available",
            Self::Unavailable => "unavailable",
            Self::Reserved => "reserved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: DeviceId,
    pub name: String,
    pub position: Position,
    pub environment: Environment,
    pub infra_state: InfraState,
    pub target_profile: RadioProfile,
    pub last_seen: Micros,
    pub metrics: BTreeMap<String, f64>,
    pub cluster: String,
}

impl DeviceRecord {
    pub fn node_type(&self) -> NodeType {
        self.target_profile.node_type
    }

    pub fn node_spec(&self) -> NodeSpec {
        NodeSpec {
            name: self.name.clone(),
            position: self.position,
            environment: self.environment,
            radios: self.target_profile.radios.clone(),
            faulty: false,
        }
    }
}

/// A device announcing itself: a record without id, state or timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub name: String,
    pub position: Position,
    pub environment: Environment,
    pub target_profile: RadioProfile,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub cluster: String,
}

impl DeviceDescriptor {
    /// Descriptor with the standard radios for `node_type`.
    pub fn standard(
        name: &str,
        node_type: NodeType,
        environment: Environment,
        position: Position,
        cluster: &str,
    ) -> Self {
        Self {
            name: name.into(),
            position,
            environment,
            target_profile: RadioProfile::for_node_type(node_type),
            metrics: BTreeMap::new(),
            cluster: cluster.into(),
        }
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let bad = |m: &str| Err(RegistryError::InvalidDescriptor(m.into()));
        if self.name.is_empty()
            || self
                .name
                .chars()
                .any(|c| c.is_whitespace() || c.is_control())
        {
            return bad("name must be non-empty without whitespace");
        }
        let p = self.position;
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return bad("coordinates must be finite");
        }
        if p.x < 0.0 || p.y < 0.0 || p.z < 0.0 {
            return bad("coordinates must be non-negative");
        }
        if self.environment == Environment::Outdoor && p.z > MAX_OUTDOOR_HEIGHT_M {
            return bad("outdoor height above 9.3 m");
        }
        if self.metrics.values().any(|v| !v.is_finite()) {
            return bad("metrics must be finite");
        }
        self.target_profile.check().or_else(bad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Gt,
    Lt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningRule {
    pub rule_id: RuleId,
    pub metric_name: String,
    pub comparator: Comparator,
    pub threshold: f64,
    pub message: String,
}

impl WarningRule {
    pub fn violated_by(&self, value: f64) -> bool {
        match self.comparator {
            Comparator::Gt => value > self.threshold,
            Comparator::Lt => value < self.threshold,
        }
    }
}

/// A rule as submitted, before the registry assigns its id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewRule {
    pub metric_name: String,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub rule_id: RuleId,
    pub device_id: DeviceId,
    pub observed_value: f64,
    pub raised_at: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Availability {
    Available,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityEntry {
    pub device_id: DeviceId,
    pub name: String,
    pub availability: Availability,
    pub infra_state: InfraState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AvailabilityReport {
    pub at: Micros,
    pub devices: Vec<AvailabilityEntry>,
}

impl AvailabilityReport {
    pub fn count(&self, a: Availability) -> usize {
        self.devices.iter().filter(|e| e.availability == a).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceFilter {
    pub node_type: Option<NodeType>,
    pub environment: Option<Environment>,
    pub state: Option<InfraState>,
    /// `(centre, radius m)`.
    pub within: Option<(Position, f64)>,
}

impl DeviceFilter {
    pub fn matches(&self, d: &DeviceRecord) -> bool {
        self.node_type.is_none_or(|t| d.node_type() == t)
            && self.environment.is_none_or(|e| d.environment == e)
            && self.state.is_none_or(|s| d.infra_state == s)
            && self
                .within
                .is_none_or(|(c, r)| d.position.distance(&c) <= r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub heartbeat_period: Micros,
    pub missed_heartbeats: u32,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            heartbeat_period: 10 * SECOND,
            missed_heartbeats: 3,
        }
    }
}

impl RegistryConfig {
    pub fn liveness_window(&self) -> Micros {
        self.heartbeat_period * self.missed_heartbeats as u64
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("device name {0} already registered with a different node type")]
    DuplicateName(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("cannot reserve: {}", .0.join(", "))]
    ReservationConflict(Vec<String>),
}

/// Journalled registry mutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    Register {
        descriptor: DeviceDescriptor,
        now: Micros,
    },
    Heartbeat {
        device_id: DeviceId,
        metrics: BTreeMap<String, f64>,
        now: Micros,
    },
    AddRule {
        rule: NewRule,
    },
    Sweep {
        now: Micros,
    },
    SetState {
        device_id: DeviceId,
        available: bool,
    },
    Reserve {
        holder: String,
        devices: Vec<DeviceId>,
    },
    Release {
        holder: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Registered(DeviceId),
    Heartbeat { alerts: Vec<Alert> },
    RuleAdded(WarningRule),
    Swept(AvailabilityReport),
    StateSet,
    Reserved,
    Released(Vec<DeviceId>),
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    cfg: RegistryConfig,
    devices: BTreeMap<DeviceId, DeviceRecord>,
    by_name: BTreeMap<String, DeviceId>,
    rules: Vec<WarningRule>,
    alerts: Vec<Alert>,
    holders: BTreeMap<DeviceId, String>,
    next_device: u64,
}

impl Registry {
    pub fn new(cfg: RegistryConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.cfg
    }

    pub fn apply(&mut self, cmd: Command) -> Result<Outcome, RegistryError> {
        match cmd {
            Command::Register { descriptor, now } => {
                self.register(descriptor, now).map(Outcome::Registered)
            }
            Command::Heartbeat {
                device_id,
                metrics,
                now,
            } => self
                .heartbeat(&device_id, metrics, now)
                .map(|alerts| Outcome::Heartbeat { alerts }),
            Command::AddRule { rule } => self.add_rule(rule).map(Outcome::RuleAdded),
            Command::Sweep { now } => Ok(Outcome::Swept(self.sweep(now))),
            Command::SetState {
                device_id,
                available,
            } => self
                .set_state(&device_id, available)
                .map(|_| Outcome::StateSet),
            Command::Reserve { holder, devices } => {
                self.reserve(&holder, &devices).map(|_| Outcome::Reserved)
            }
            Command::Release { holder } => Ok(Outcome::Released(self.release(&holder))),
        }
    }

    pub fn register(
        &mut self,
        d: DeviceDescriptor,
        now: Micros,
    ) -> Result<DeviceId, RegistryError> {
        d.validate()?;
        if let Some(id) = self.by_name.get(&d.name).cloned() {
            let rec = self.devices.get_mut(&id).expect("name index in sync");
            if rec.node_type() != d.target_profile.node_type {
                return Err(RegistryError::DuplicateName(d.name));
            }
            rec.position = d.position;
            rec.environment = d.environment;
            rec.target_profile = d.target_profile;
            rec.cluster = d.cluster;
            rec.metrics.extend(d.metrics);
            rec.last_seen = now;
            if rec.infra_state == InfraState::Unavailable {
                rec.infra_state = InfraState::Available;
            }
            return Ok(id);
        }
        self.next_device += 1;
        let id = DeviceId::from_seq(self.next_device);
        self.by_name.insert(d.name.clone(), id.clone());
        self.devices.insert(
            id.clone(),
            DeviceRecord {
                device_id: id.clone(),
                name: d.name,
                position: d.position,
                environment: d.environment,
                infra_state: InfraState::Available,
                target_profile: d.target_profile,
                last_seen: now,
                metrics: d.metrics,
                cluster: d.cluster,
            },
        );
        Ok(id)
    }

    pub fn heartbeat(
        &mut self,
        id: &DeviceId,
        metrics: BTreeMap<String, f64>,
        now: Micros,
    ) -> Result<Vec<Alert>, RegistryError> {
        if metrics.values().any(|v| !v.is_finite()) {
            return Err(RegistryError::InvalidDescriptor(
                "metrics must be finite".into(),
            ));
        }
        let rec = self
            .devices
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownDevice(id.0.clone()))?;
        rec.last_seen = rec.last_seen.max(now);
        rec.metrics.extend(metrics);
        if rec.infra_state == InfraState::Unavailable {
            rec.infra_state = InfraState::Available;
        }
        let mut raised = Vec::new();
        for rule in &self.rules {
            if let Some(&v) = rec.metrics.get(&rule.metric_name) {
                if rule.violated_by(v) {
                    raised.push(Alert {
                        rule_id: rule.rule_id.clone(),
                        device_id: id.clone(),
                        observed_value: v,
                        raised_at: now,
                    });
                }
            }
        }
        self.alerts.extend(raised.iter().cloned());
        Ok(raised)
    }

    pub fn add_rule(&mut self, r: NewRule) -> Result<WarningRule, RegistryError> {
        if r.metric_name.is_empty() {
            return Err(RegistryError::InvalidRule(
                "metric_name must be non-empty".into(),
            ));
        }
        if !r.threshold.is_finite() {
            return Err(RegistryError::InvalidRule(
                "threshold must be finite".into(),
            ));
        }
        let rule = WarningRule {
            rule_id: RuleId(format!("rule-{:04}", self.rules.len() + 1)),
            metric_name: r.metric_name,
            comparator: r.comparator,
            threshold: r.threshold,
            message: r.message,
        };
        self.rules.push(rule.clone());
        Ok(rule)
    }

    fn is_stale(&self, d: &DeviceRecord, now: Micros) -> bool {
        now.saturating_sub(d.last_seen) > self.cfg.liveness_window()
    }

    /// Marks stale devices unavailable and live ones available. Reserved
    /// devices keep their reservation; their liveness shows in the report.
    pub fn sweep(&mut self, now: Micros) -> AvailabilityReport {
        let mut report = self.availability(now);
        for e in &mut report.devices {
            let rec = self
                .devices
                .get_mut(&e.device_id)
                .expect("report built from registry");
            if rec.infra_state != InfraState::Reserved {
                rec.infra_state = match e.availability {
                    Availability::Available => InfraState::Available,
                    Availability::Unavailable => InfraState::Unavailable,
                };
            }
            e.infra_state = rec.infra_state;
        }
        report
    }

    /// What a sweep at `now` would report, without changing state.
    pub fn availability(&self, now: Micros) -> AvailabilityReport {
        let mut devices: Vec<AvailabilityEntry> = self
            .devices
            .values()
            .map(|d| AvailabilityEntry {
                device_id: d.device_id.clone(),
                name: d.name.clone(),
                availability: if self.is_stale(d, now) {
                    Availability::Unavailable
                } else {
                    Availability::Available
                },
                infra_state: d.infra_state,
            })
            .collect();
        devices.sort_by(|a, b| a.name.cmp(&b.name));
        AvailabilityReport { at: now, devices }
    }

    pub fn set_state(&mut self, id: &DeviceId, available: bool) -> Result<(), RegistryError> {
        let rec = self
            .devices
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownDevice(id.0.clone()))?;
        if rec.infra_state != InfraState::Reserved {
            rec.infra_state = if available {
                InfraState::Available
            } else {
                InfraState::Unavailable
            };
        }
        Ok(())
    }

    /// Reserves every listed device for `holder`, or none of them.
    pub fn reserve(&mut self, holder: &str, ids: &[DeviceId]) -> Result<(), RegistryError> {
        let mut unmet = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match self.devices.get(id) {
                None => unmet.push(format!("{id}: unknown")),
                Some(d) if d.infra_state != InfraState::Available => {
                    unmet.push(format!("{} ({id}): {}", d.name, d.infra_state.as_str()))
                }
                Some(d) if ids[..i].contains(id) => {
                    unmet.push(format!("{} ({id}): listed twice", d.name))
                }
                Some(_) => {}
            }
        }
        if !unmet.is_empty() {
            return Err(RegistryError::ReservationConflict(unmet));
        }
        for id in ids {
            self.devices.get_mut(id).expect("checked above").infra_state = InfraState::Reserved;
            self.holders.insert(id.clone(), holder.to_string());
        }
        Ok(())
    }

    /// Returns every device held by `holder` to available.
    pub fn release(&mut self, holder: &str) -> Vec<DeviceId> {
        let ids: Vec<DeviceId> = self
            .holders
            .iter()
            .filter(|(_, h)| *h == holder)
            .map(|(d, _)| d.clone())
            .collect();
        for id in &ids {
            self.holders.remove(id);
            if let Some(d) = self.devices.get_mut(id) {
                d.infra_state = InfraState::Available;
            }
        }
        ids
    }

    pub fn holder(&self, id: &DeviceId) -> Option<&str> {
        self.holders.get(id).map(String::as_str)
    }

    pub fn get(&self, id: &DeviceId) -> Option<&DeviceRecord> {
        self.devices.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&DeviceRecord> {
        self.by_name.get(name).and_then(|id| self.devices.get(id))
    }

    /// Matching records ordered by name.
    pub fn list(&self, filter: &DeviceFilter) -> Result<Vec<DeviceRecord>, RegistryError> {
        if let Some((_, r)) = filter.within {
            if r.is_nan() || r < 0.0 {
                return Err(RegistryError::InvalidFilter("radius must be >= 0".into()));
            }
        }
        Ok(self
            .by_name
            .values()
            .filter_map(|id| self.devices.get(id))
            .filter(|d| filter.matches(d))
            .cloned()
            .collect())
    }

    pub fn rules(&self) -> &[WarningRule] {
        &self.rules
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}
