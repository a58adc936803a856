//! Infrastructure-node daemon for one testbed device.
//!
//! Management requests (deploy, build, flash, LCSP) are served one at a time
//! in arrival order. Builds run on a separate thread under a wall-clock
//! timeout and `catch_unwind`, and the heartbeat loop runs on its own
//! thread, so neither a failing build nor crashing firmware can stall the
//! daemon's registry presence.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use coins_core::build::{self, BuildCache, BuildFailureKind, BuildLimits, FirmwareImage};
use coins_core::config::BuildSpec;
use coins_core::lcsp::{CallError, LcspClient, LcspRequest, LcspResponse, ServerLink};
use coins_core::registry::{DeviceId, DeviceRecord};
use coins_core::target::{FlashError, TargetNode, FLASH_BLOCK};
use coins_core::{Micros, MS, SECOND};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::registry_service::RegistryService;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeviceError {
    #[error("{device} is not reserved by {run}")]
    NotReserved { device: String, run: String },
    #[error("workspace of {used} bytes exceeds quota of {quota}")]
    StorageFull { used: usize, quota: usize },
    #[error("nothing deployed for {0}")]
    NoWorkspace(String),
    #[error("build failed")]
    BuildFailed { log: String },
    #[error("build timed out")]
    Timeout { log: String },
    #[error("flash verify failed: {0}")]
    FlashVerifyFailed(String),
    #[error("target busy")]
    TargetBusy,
    #[error("target crashed")]
    TargetCrash { log: String },
    #[error("target missed its deadline")]
    Deadline { log: String },
    #[error("application interface: {0}")]
    Lcsp(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
}

impl DeviceError {
    /// Captured build or target log, if any.
    pub fn log(&self) -> Option<&str> {
        match self {
            DeviceError::BuildFailed { log }
            | DeviceError::Timeout { log }
            | DeviceError::TargetCrash { log }
            | DeviceError::Deadline { log } => Some(log),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DaemonLimits {
    pub workspace_quota: usize,
    pub build: BuildLimits,
    pub build_wall_timeout: Duration,
    pub heartbeat_period: Micros,
    pub vm_budget: u64,
}

impl Default for DaemonLimits {
    fn default() -> Self {
        Self {
            workspace_quota: 1 << 20,
            build: BuildLimits::default(),
            build_wall_timeout: Duration::from_secs(10),
            heartbeat_period: 10 * SECOND,
            vm_budget: coins_core::firmware::DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub device: String,
    pub role: String,
    pub checksum: String,
    pub steps_executed: u32,
    pub cache_hit: bool,
    pub cache_key: String,
    /// Deterministic build duration.
    pub virtual_us: Micros,
    pub wall_us: u64,
    pub log: String,
}

/// Development-interface fault injected into the next flash only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlashFault {
    CorruptBlock(u32),
}

/// Ticket lock: waiters are served strictly in arrival order.
#[derive(Debug, Default)]
pub struct FifoLock {
    state: Mutex<(u64, u64)>,
    cv: Condvar,
}

pub struct FifoGuard<'a>(&'a FifoLock);

impl FifoLock {
    pub fn lock(&self) -> FifoGuard<'_> {
        let mut s = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let ticket = s.0;
        s.0 += 1;
        while s.1 != ticket {
            s = self.cv.wait(s).unwrap_or_else(|p| p.into_inner());
        }
        FifoGuard(self)
    }
}

impl Drop for FifoGuard<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().unwrap_or_else(|p| p.into_inner());
        s.1 += 1;
        self.0.cv.notify_all();
    }
}

struct State {
    workspaces: BTreeMap<String, BTreeMap<String, Vec<u8>>>,
    cache: BuildCache,
    target: TargetNode,
    fault: Option<FlashFault>,
}

#[derive(Debug, Default)]
struct Counters {
    heartbeats: AtomicU64,
    builds: AtomicU64,
    builds_failed: AtomicU64,
    flashes: AtomicU64,
    target_runs: AtomicU64,
    target_crashes: AtomicU64,
}

pub struct DeviceDaemon {
    id: DeviceId,
    record: DeviceRecord,
    limits: DaemonLimits,
    fifo: FifoLock,
    state: Mutex<State>,
    counters: Counters,
    registry: Arc<RegistryService>,
    clock: Arc<dyn Clock>,
    stop: AtomicBool,
    heartbeat_thread: Mutex<Option<JoinHandle<()>>>,
}

impl DeviceDaemon {
    /// Daemon for a registered device. Receive-only targets still host a
    /// VM; they simply cannot transmit.
    pub fn new(
        record: DeviceRecord,
        limits: DaemonLimits,
        registry: Arc<RegistryService>,
        clock: Arc<dyn Clock>,
    ) -> Arc<Self> {
        let radio = record
            .target_profile
            .primary()
            .cloned()
            .expect("every node type carries a radio");
        let mut target = TargetNode::new(radio);
        target.set_budget(limits.vm_budget);
        Arc::new(Self {
            id: record.device_id.clone(),
            record,
            limits,
            fifo: FifoLock::default(),
            state: Mutex::new(State {
                workspaces: BTreeMap::new(),
                cache: BuildCache::new(),
                target,
                fault: None,
            }),
            counters: Counters::default(),
            registry,
            clock,
            stop: AtomicBool::new(false),
            heartbeat_thread: Mutex::new(None),
        })
    }

    pub fn id(&self) -> &DeviceId {
        &self.id
    }

    pub fn name(&self) -> &str {
        &self.record.name
    }

    pub fn record(&self) -> &DeviceRecord {
        &self.record
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn heartbeat_count(&self) -> u64 {
        self.counters.heartbeats.load(Ordering::SeqCst)
    }

    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let c = &self.counters;
        let ws: usize = self
            .state()
            .workspaces
            .values()
            .flat_map(|w| w.values())
            .map(Vec::len)
            .sum();
        BTreeMap::from([
            ("builds".into(), c.builds.load(Ordering::SeqCst) as f64),
            (
                "builds_failed".into(),
                c.builds_failed.load(Ordering::SeqCst) as f64,
            ),
            ("flashes".into(), c.flashes.load(Ordering::SeqCst) as f64),
            (
                "target_runs".into(),
                c.target_runs.load(Ordering::SeqCst) as f64,
            ),
            (
                "target_crashes".into(),
                c.target_crashes.load(Ordering::SeqCst) as f64,
            ),
            (
                "workspace_free_kb".into(),
                (self.limits.workspace_quota.saturating_sub(ws) / 1024) as f64,
            ),
        ])
    }

    /// Sends one heartbeat now.
    pub fn heartbeat(&self) {
        if self.registry.heartbeat(&self.id, self.metrics()).is_ok() {
            self.counters.heartbeats.fetch_add(1, Ordering::SeqCst);
        }
    }

    /// Heartbeats every period on a dedicated thread until [`stop`](Self::stop).
    pub fn start_heartbeats(self: &Arc<Self>) {
        let me = Arc::clone(self);
        let period = self.limits.heartbeat_period;
        let handle = std::thread::Builder::new()
            .name(format!("hb-{}", self.record.name))
            .spawn(move || {
                while !me.stop.load(Ordering::SeqCst) {
                    me.heartbeat();
                    let until = me.clock.now() + period;
                    while !me.stop.load(Ordering::SeqCst) && me.clock.now() < until {
                        me.clock
                            .sleep((until - me.clock.now()).min(period / 10).max(1));
                    }
                }
            })
            .expect("spawn heartbeat thread");
        *self
            .heartbeat_thread
            .lock()
            .unwrap_or_else(|p| p.into_inner()) = Some(handle);
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self
            .heartbeat_thread
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .take()
        {
            let _ = h.join();
        }
    }

    fn check_reserved(&self, run: &str) -> Result<(), DeviceError> {
        match self.registry.holder(&self.id) {
            Some(h) if h == run => Ok(()),
            _ => Err(DeviceError::NotReserved {
                device: self.record.name.clone(),
                run: run.into(),
            }),
        }
    }

    /// Replaces the run's workspace with exactly `files`.
    pub fn deploy(
        &self,
        run: &str,
        files: BTreeMap<String, Vec<u8>>,
    ) -> Result<Vec<String>, DeviceError> {
        let _q = self.fifo.lock();
        self.check_reserved(run)?;
        let used: usize = files.values().map(Vec::len).sum();
        if used > self.limits.workspace_quota {
            return Err(DeviceError::StorageFull {
                used,
                quota: self.limits.workspace_quota,
            });
        }
        let names = files.keys().cloned().collect();
        self.state().workspaces.insert(run.into(), files);
        Ok(names)
    }

    pub fn workspace(&self, run: &str) -> Option<BTreeMap<String, Vec<u8>>> {
        self.state().workspaces.get(run).cloned()
    }

    /// Drops a finished run's workspace.
    pub fn clean(&self, run: &str) {
        self.state().workspaces.remove(run);
    }

    /// Builds `image` for `role` from the run's workspace, or serves it
    /// from the cache.
    pub fn build(
        &self,
        run: &str,
        spec_path: &str,
        image: &str,
        role: &str,
        commit: &str,
    ) -> Result<BuildReport, DeviceError> {
        let _q = self.fifo.lock();
        let started = Instant::now();
        let ws = self
            .state()
            .workspaces
            .get(run)
            .cloned()
            .ok_or_else(|| DeviceError::NoWorkspace(run.into()))?;
        self.counters.builds.fetch_add(1, Ordering::SeqCst);
        let failed = |e: DeviceError| {
            self.counters.builds_failed.fetch_add(1, Ordering::SeqCst);
            Err(e)
        };
        let spec_text = match ws.get(spec_path).map(|b| String::from_utf8(b.clone())) {
            Some(Ok(t)) => t,
            Some(Err(_)) => {
                return failed(DeviceError::BuildFailed {
                    log: format!("{spec_path}: not UTF-8\n"),
                })
            }
            None => {
                return failed(DeviceError::BuildFailed {
                    log: format!("{spec_path}: not deployed\n"),
                })
            }
        };
        let spec = match BuildSpec::parse(&spec_text) {
            Ok(s) => s,
            Err(e) => {
                return failed(DeviceError::BuildFailed {
                    log: format!("{spec_path}: {e}\n"),
                })
            }
        };
        let key = build::cache_key(&spec, image, &ws);
        if let Some(img) = self.state().cache.get(&key, commit) {
            return Ok(BuildReport {
                device: self.record.name.clone(),
                role: role.into(),
                checksum: img.checksum,
                steps_executed: 0,
                cache_hit: true,
                cache_key: key.0.clone(),
                virtual_us: MS,
                wall_us: started.elapsed().as_micros() as u64,
                log: format!("cache hit {key}\n"),
            });
        }
        let (tx, rx) = mpsc::channel();
        let limits = self.limits.build.clone();
        let spawned = std::thread::Builder::new()
            .name(format!("build-{}", self.record.name))
            .spawn(move || {
                let r = catch_unwind(AssertUnwindSafe(|| build::execute(&spec, &ws, &limits)));
                let _ = tx.send(r);
            });
        if spawned.is_err() {
            return failed(DeviceError::BuildFailed {
                log: "could not start build sandbox\n".into(),
            });
        }
        let out = match rx.recv_timeout(self.limits.build_wall_timeout) {
            Ok(Ok(Ok(out))) => out,
            Ok(Ok(Err(f))) if f.kind == BuildFailureKind::Timeout => {
                return failed(DeviceError::Timeout { log: f.log })
            }
            Ok(Ok(Err(f))) => return failed(DeviceError::BuildFailed { log: f.log }),
            Ok(Err(_)) => {
                return failed(DeviceError::BuildFailed {
                    log: "build step panicked\n".into(),
                })
            }
            Err(_) => {
                return failed(DeviceError::Timeout {
                    log: format!(
                        "build exceeded {:?} wall time\n",
                        self.limits.build_wall_timeout
                    ),
                })
            }
        };
        let img = match build::extract_image(&out, image, commit, role) {
            Ok(i) => i,
            Err(f) => return failed(DeviceError::BuildFailed { log: f.log }),
        };
        let report = BuildReport {
            device: self.record.name.clone(),
            role: role.into(),
            checksum: img.checksum.clone(),
            steps_executed: out.steps_executed,
            cache_hit: false,
            cache_key: key.0.clone(),
            virtual_us: out.virtual_cost,
            wall_us: started.elapsed().as_micros() as u64,
            log: out.log,
        };
        self.state().cache.insert(key, img);
        Ok(report)
    }

    /// Image last built (or served) for `key`.
    pub fn cached_image(&self, key: &str, commit: &str) -> Option<FirmwareImage> {
        self.state().cache.get(&build::CacheKey(key.into()), commit)
    }

    pub fn inject_flash_fault(&self, fault: FlashFault) {
        self.state().fault = Some(fault);
    }

    /// Transfers `image` block by block and commits it. Returns the
    /// checksum the target computed.
    pub fn flash(&self, image: &FirmwareImage) -> Result<String, DeviceError> {
        let _q = self.fifo.lock();
        let mut st = self.state();
        let fault = st.fault.take();
        let map = |e: FlashError| match e {
            FlashError::TargetBusy => DeviceError::TargetBusy,
            e => DeviceError::FlashVerifyFailed(e.to_string()),
        };
        let mut next = st
            .target
            .flash_begin(image.bytecode.len(), &image.checksum)
            .map_err(map)?;
        let blocks: Vec<&[u8]> = image.bytecode.chunks(FLASH_BLOCK).collect();
        while (next as usize) < blocks.len() {
            let mut data = blocks[next as usize].to_vec();
            if fault == Some(FlashFault::CorruptBlock(next)) {
                data[0] ^= 0xff;
            }
            next = st.target.flash_block(next, &data).map_err(map)? + 1;
        }
        let sum = st.target.flash_commit().map_err(map)?;
        drop(st);
        self.counters.flashes.fetch_add(1, Ordering::SeqCst);
        Ok(sum)
    }

    /// One LCSP exchange over the emulated serial application interface.
    pub fn lcsp(&self, req: &LcspRequest) -> Result<LcspResponse, DeviceError> {
        let _q = self.fifo.lock();
        let mut st = self.state();
        let mut client = LcspClient::new(ServerLink::new(&mut st.target));
        client
            .call(req, SECOND)
            .map_err(|e: CallError| DeviceError::Lcsp(e.to_string()))
    }

    /// Fetches every page of `/result` or `/log`.
    pub fn lcsp_paged(&self, resource: &str) -> Result<Result<Vec<u8>, String>, DeviceError> {
        let mut out = Vec::new();
        let mut page = 0;
        loop {
            let r = if page == 0 {
                resource.to_string()
            } else {
                format!("{resource}/{page}")
            };
            let req = LcspRequest::get(&r).map_err(|e| DeviceError::Lcsp(e.to_string()))?;
            let resp = self.lcsp(&req)?;
            if !resp.is_ok() {
                if page == 0 {
                    return Ok(Err(String::from_utf8_lossy(resp.body()).into_owned()));
                }
                return Ok(Ok(out));
            }
            let n = resp.body().len();
            out.extend_from_slice(resp.body());
            if n < coins_core::lcsp::MAX_RESPONSE_BODY {
                return Ok(Ok(out));
            }
            page += 1;
        }
    }

    /// Runs `f` on the target with the management channel held.
    pub fn with_target<R>(&self, f: impl FnOnce(&mut TargetNode) -> R) -> R {
        let _q = self.fifo.lock();
        let mut st = self.state();
        f(&mut st.target)
    }

    pub(crate) fn count_target_run(&self, crashed: bool) {
        self.counters.target_runs.fetch_add(1, Ordering::SeqCst);
        if crashed {
            self.counters.target_crashes.fetch_add(1, Ordering::SeqCst);
        }
    }
}

impl Drop for DeviceDaemon {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}
