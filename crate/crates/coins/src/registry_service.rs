//! Shared registry: the core state machine behind a mutex, with every
//! mutation appended to a JSON-lines journal that is replayed on open.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use coins_core::registry::{
    Alert, AvailabilityReport, Command, DeviceDescriptor, DeviceFilter, DeviceId, DeviceRecord,
    NewRule, Outcome, Registry, RegistryConfig, RegistryError, WarningRule,
};

use crate::clock::Clock;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("journal: {0}")]
    Journal(#[from] io::Error),
    #[error("journal line {line}: {message}")]
    BadJournal { line: usize, message: String },
}

struct Inner {
    reg: Registry,
    journal: Option<File>,
}

pub struct RegistryService {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    journal_path: Option<PathBuf>,
}

impl RegistryService {
    pub fn in_memory(cfg: RegistryConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                reg: Registry::new(cfg),
                journal: None,
            }),
            clock,
            journal_path: None,
        }
    }

    /// Replays `path` (if present) and appends to it from then on.
    pub fn open(
        path: &Path,
        cfg: RegistryConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let mut reg = Registry::new(cfg);
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let cmd: Command =
                    serde_json::from_str(&line).map_err(|e| ServiceError::BadJournal {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                // Journalled commands succeeded once; replay is deterministic.
                let _ = reg.apply(cmd);
            }
        } else if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let journal = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                reg,
                journal: Some(journal),
            }),
            clock,
            journal_path: Some(path.to_path_buf()),
        })
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal_path.as_deref()
    }

    pub fn now(&self) -> coins_core::Micros {
        self.clock.now()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn apply(&self, cmd: Command) -> Result<Outcome, ServiceError> {
        let mut g = self.lock();
        let out = g.reg.apply(cmd.clone())?;
        if let Some(j) = g.journal.as_mut() {
            let mut line = serde_json::to_vec(&cmd).expect("command serializes");
            line.push(b'\n');
            j.write_all(&line)?;
        }
        Ok(out)
    }

    pub fn register(&self, descriptor: DeviceDescriptor) -> Result<DeviceId, ServiceError> {
        let now = self.clock.now();
        match self.apply(Command::Register { descriptor, now })? {
            Outcome::Registered(id) => Ok(id),
            o => unreachable!("register returned {o:?}"),
        }
    }

    pub fn heartbeat(
        &self,
        id: &DeviceId,
        metrics: BTreeMap<String, f64>,
    ) -> Result<Vec<Alert>, ServiceError> {
        let now = self.clock.now();
        match self.apply(Command::Heartbeat {
            device_id: id.clone(),
            metrics,
            now,
        })? {
            Outcome::Heartbeat { alerts } => Ok(alerts),
            o => unreachable!("heartbeat returned {o:?}"),
        }
    }

    pub fn add_rule(&self, rule: NewRule) -> Result<WarningRule, ServiceError> {
        match self.apply(Command::AddRule { rule })? {
            Outcome::RuleAdded(r) => Ok(r),
            o => unreachable!("add_rule returned {o:?}"),
        }
    }

    pub fn sweep(&self) -> AvailabilityReport {
        let now = self.clock.now();
        match self.apply(Command::Sweep { now }) {
            Ok(Outcome::Swept(r)) => r,
            Ok(o) => unreachable!("sweep returned {o:?}"),
            // Only a journal write can fail; report the in-memory state.
            Err(_) => self.lock().reg.availability(now),
        }
    }

    pub fn availability(&self) -> AvailabilityReport {
        self.lock().reg.availability(self.clock.now())
    }

    pub fn set_state(&self, id: &DeviceId, available: bool) -> Result<(), ServiceError> {
        self.apply(Command::SetState {
            device_id: id.clone(),
            available,
        })
        .map(|_| ())
    }

    pub fn reserve(&self, holder: &str, devices: &[DeviceId]) -> Result<(), ServiceError> {
        self.apply(Command::Reserve {
            holder: holder.into(),
            devices: devices.to_vec(),
        })
        .map(|_| ())
    }

    pub fn release(&self, holder: &str) -> Vec<DeviceId> {
        match self.apply(Command::Release {
            holder: holder.into(),
        }) {
            Ok(Outcome::Released(ids)) => ids,
            _ => Vec::new(),
        }
    }

    pub fn holder(&self, id: &DeviceId) -> Option<String> {
        self.lock().reg.holder(id).map(String::from)
    }

    pub fn get(&self, id: &DeviceId) -> Option<DeviceRecord> {
        self.lock().reg.get(id).cloned()
    }

    pub fn by_name(&self, name: &str) -> Option<DeviceRecord> {
        self.lock().reg.by_name(name).cloned()
    }

    pub fn list(&self, filter: &DeviceFilter) -> Result<Vec<DeviceRecord>, ServiceError> {
        Ok(self.lock().reg.list(filter)?)
    }

    pub fn rules(&self) -> Vec<WarningRule> {
        self.lock().reg.rules().to_vec()
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.lock().reg.alerts().to_vec()
    }

    pub fn len(&self) -> usize {
        self.lock().reg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use coins_core::radio::{Environment, Position};
    use coins_core::registry::NodeType;

    #[test]
    fn journal_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.jsonl");
        let clock = ManualClock::new(0);
        let id = {
            let s =
                RegistryService::open(&path, RegistryConfig::default(), Arc::new(clock.clone()))
                    .unwrap();
            let d = DeviceDescriptor::standard(
                "srd-a-01",
                NodeType::SRD_A,
                Environment::Outdoor,
                Position::new(1.0, 2.0, 3.5),
                "park",
            );
            let id = s.register(d).unwrap();
            clock.advance(60_000_000);
            s.sweep();
            id
        };
        let s = RegistryService::open(&path, RegistryConfig::default(), Arc::new(clock)).unwrap();
        let rec = s.get(&id).unwrap();
        assert_eq!(
            rec.infra_state,
            coins_core::registry::InfraState::Unavailable
        );
    }
}
