//! The simulated testbed: device daemons plus the radio environment they
//! share.
//!
//! A test attempt arms targets over LCSP, then [`Testbed::run_session`]
//! boots every armed program in one co-simulation and hands each target
//! its run record. Sessions build a fresh medium from the registry
//! positions, the ambient interferers and any scenario interferers, seeded
//! from the testbed seed and a caller-supplied salt.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use coins_core::digest::fnv1a64;
use coins_core::lcsp::LcspRequest;
use coins_core::radio::{
    export_psd_histogram, Band, InterfererProfile, Medium, NodeId, PropagationConfig, PsdHistogram,
    SenseResult,
};
use coins_core::sim::{Cosim, SlotOutcome};
use coins_core::target::RunRecord;
use coins_core::Micros;

use crate::daemon::{DeviceDaemon, DeviceError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TestbedError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("{0}")]
    Radio(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// What one device did during a session.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEntry {
    /// The device was not armed.
    Idle,
    Ran(RunRecord),
}

pub struct Testbed {
    daemons: RwLock<BTreeMap<String, Arc<DeviceDaemon>>>,
    propagation: PropagationConfig,
    seed: u64,
    ambient: RwLock<Vec<InterfererProfile>>,
    faulty: RwLock<BTreeSet<String>>,
    /// Serializes sessions that share a device.
    sessions: Mutex<()>,
}

impl Testbed {
    pub fn new(propagation: PropagationConfig, seed: u64) -> Self {
        Self {
            daemons: RwLock::new(BTreeMap::new()),
            propagation,
            seed,
            ambient: RwLock::new(Vec::new()),
            faulty: RwLock::new(BTreeSet::new()),
            sessions: Mutex::new(()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add_daemon(&self, d: Arc<DeviceDaemon>) {
        self.daemons
            .write()
            .expect("daemons")
            .insert(d.name().to_string(), d);
    }

    pub fn daemon(&self, name: &str) -> Option<Arc<DeviceDaemon>> {
        self.daemons.read().expect("daemons").get(name).cloned()
    }

    pub fn daemon_by_id(&self, id: &str) -> Option<Arc<DeviceDaemon>> {
        self.daemons
            .read()
            .expect("daemons")
            .values()
            .find(|d| d.id().as_str() == id)
            .cloned()
    }

    pub fn daemons(&self) -> Vec<Arc<DeviceDaemon>> {
        self.daemons
            .read()
            .expect("daemons")
            .values()
            .cloned()
            .collect()
    }

    pub fn set_ambient(&self, interferers: Vec<InterfererProfile>) {
        *self.ambient.write().expect("ambient") = interferers;
    }

    pub fn ambient(&self) -> Vec<InterfererProfile> {
        self.ambient.read().expect("ambient").clone()
    }

    /// Marks a device's radio as corrupting every frame it sends or hears.
    pub fn set_faulty(&self, name: &str, faulty: bool) {
        let mut f = self.faulty.write().expect("faulty");
        if faulty {
            f.insert(name.into());
        } else {
            f.remove(name);
        }
    }

    pub fn stop(&self) {
        for d in self.daemons() {
            d.stop();
        }
    }

    fn medium(
        &self,
        devices: &[Arc<DeviceDaemon>],
        extra: &[InterfererProfile],
        salt: u64,
    ) -> Result<(Medium, Vec<NodeId>), TestbedError> {
        let mut m = Medium::new(self.propagation.clone(), self.seed ^ salt);
        let faulty = self.faulty.read().expect("faulty").clone();
        let mut ids = Vec::new();
        for d in devices {
            let mut spec = d.record().node_spec();
            spec.faulty = faulty.contains(d.name());
            ids.push(m.add_node(spec));
        }
        for i in self.ambient().into_iter().chain(extra.iter().cloned()) {
            m.add_interferer(i)
                .map_err(|e| TestbedError::Radio(e.to_string()))?;
        }
        Ok((m, ids))
    }

    fn lookup(&self, names: &[String]) -> Result<Vec<Arc<DeviceDaemon>>, TestbedError> {
        let mut sorted: Vec<&String> = names.iter().collect();
        sorted.sort();
        sorted.dedup();
        sorted
            .into_iter()
            .map(|n| {
                self.daemon(n)
                    .ok_or_else(|| TestbedError::UnknownDevice(n.clone()))
            })
            .collect()
    }

    /// Runs every armed target among `names` from `t0` until `t0 + deadline`.
    pub fn run_session(
        &self,
        names: &[String],
        extra: &[InterfererProfile],
        t0: Micros,
        deadline: Micros,
        salt: u64,
    ) -> Result<BTreeMap<String, SessionEntry>, TestbedError> {
        let devices = self.lookup(names)?;
        let _s = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        let (medium, ids) = self.medium(&devices, extra, salt)?;
        let mut sim = Cosim::new(medium);
        let mut slots = Vec::new();
        for (d, node) in devices.iter().zip(&ids) {
            let Some((armed, band)) =
                d.with_target(|t| t.take_armed().map(|a| (a, t.radio().band)))
            else {
                slots.push(None);
                continue;
            };
            match sim.add_vm(*node, band, armed.code, armed.config, t0 + armed.start) {
                Ok(slot) => slots.push(Some(slot)),
                Err(e) => {
                    d.with_target(|t| t.disarm());
                    return Err(TestbedError::Radio(e.to_string()));
                }
            }
        }
        sim.run_until(t0 + deadline);
        let mut out = BTreeMap::new();
        for (d, slot) in devices.iter().zip(slots) {
            let entry = match slot {
                None => SessionEntry::Idle,
                Some(s) => {
                    let rec = match sim.outcome(s) {
                        SlotOutcome::Halted(o) => RunRecord::Halted(o),
                        SlotOutcome::Trapped(c) => RunRecord::Trapped {
                            trap: c.trap,
                            output: c.output,
                        },
                        SlotOutcome::Deadline(o) => RunRecord::Deadline(o),
                    };
                    d.count_target_run(!matches!(rec, RunRecord::Halted(_)));
                    d.with_target(|t| t.finish(rec.clone()));
                    SessionEntry::Ran(rec)
                }
            };
            out.insert(d.name().to_string(), entry);
        }
        Ok(out)
    }

    /// Energy detection on `device`'s radio for `band` (its primary radio if
    /// `None`).
    pub fn sense(
        &self,
        device: &str,
        band: Option<Band>,
        channel: u32,
        t0: Micros,
        window: Micros,
        extra: &[InterfererProfile],
    ) -> Result<SenseResult, TestbedError> {
        let d = self.lookup(&[device.to_string()])?;
        let band = match band {
            Some(b) => b,
            None => d[0]
                .record()
                .target_profile
                .primary()
                .map(|r| r.band)
                .ok_or_else(|| TestbedError::Radio("no radio".into()))?,
        };
        let salt = fnv1a64(format!("sense/{device}").as_bytes());
        let (m, ids) = self.medium(&d, extra, salt)?;
        m.sense(ids[0], band, channel, t0, window)
            .map_err(|e| TestbedError::Radio(e.to_string()))
    }

    /// PSD histogram of one channel as seen by `device`.
    #[allow(clippy::too_many_arguments)]
    pub fn histogram(
        &self,
        device: &str,
        band: Option<Band>,
        channel: u32,
        t0: Micros,
        window: Micros,
        bin_width_db: f64,
        slice: Micros,
    ) -> Result<PsdHistogram, TestbedError> {
        let r = self.sense(device, band, channel, t0, window, &[])?;
        export_psd_histogram(&r.log, bin_width_db, slice)
            .map_err(|e| TestbedError::Radio(e.to_string()))
    }

    /// Delivers `start` to one target, runs it alone, and returns its report
    /// bytes and execution log.
    pub fn exec_and_collect(
        &self,
        device: &str,
        start: &LcspRequest,
        deadline: Micros,
    ) -> Result<(Vec<u8>, String), DeviceError> {
        let d = self
            .daemon(device)
            .ok_or_else(|| DeviceError::UnknownDevice(device.into()))?;
        let resp = d.lcsp(start)?;
        if !resp.is_ok() {
            return Err(DeviceError::Lcsp(
                String::from_utf8_lossy(resp.body()).into_owned(),
            ));
        }
        let salt = fnv1a64(format!("exec/{device}").as_bytes());
        let entries = self
            .run_session(&[device.to_string()], &[], 0, deadline, salt)
            .map_err(|e| match e {
                TestbedError::Device(d) => d,
                e => DeviceError::Lcsp(e.to_string()),
            })?;
        let log = match d.lcsp_paged("/log")? {
            Ok(b) => String::from_utf8_lossy(&b).into_owned(),
            Err(e) => e,
        };
        match entries.get(device) {
            Some(SessionEntry::Ran(RunRecord::Halted(_))) => {
                let out = d.lcsp_paged("/result")?.map_err(DeviceError::Lcsp)?;
                Ok((out, log))
            }
            Some(SessionEntry::Ran(RunRecord::Trapped { .. })) => {
                Err(DeviceError::TargetCrash { log })
            }
            Some(SessionEntry::Ran(RunRecord::Deadline(_))) => Err(DeviceError::Deadline { log }),
            _ => Err(DeviceError::Lcsp("target was not armed".into())),
        }
    }
}
