//! Service bootstrap: one data directory, one fleet, one simulated testbed.
//!
//! Data directory layout:
//!
//! ```text
//! <data_dir>/repo/        content-addressed repository store
//! <data_dir>/registry.jsonl
//! <data_dir>/runs/        per-run journals and snapshots
//! <data_dir>/outbox/      notifications
//! ```

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use coins_core::radio::{InterfererProfile, PropagationConfig};
use coins_core::registry::{DeviceDescriptor, DeviceId, RegistryConfig};
use coins_core::{Micros, SECOND};

use crate::clock::{Clock, ScaledClock};
use crate::daemon::{DaemonLimits, DeviceDaemon};
use crate::fleet::SeedFile;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::registry_service::{RegistryService, ServiceError};
use crate::repostore::{RepoError, RepoStore};
use crate::testbed::Testbed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeMode {
    /// Virtual time runs at [`crate::clock::FAST_FACTOR`] times wall time.
    Fast,
    Scaled(f64),
}

impl TimeMode {
    pub fn clock(self) -> ScaledClock {
        match self {
            TimeMode::Fast => ScaledClock::fast(),
            TimeMode::Scaled(f) => ScaledClock::new(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub data_dir: PathBuf,
    pub fleet: SeedFile,
    pub rng_seed: u64,
    pub time: TimeMode,
    pub registry: RegistryConfig,
    pub limits: DaemonLimits,
    pub propagation: PropagationConfig,
    /// Interferers present in every session.
    pub ambient: Vec<InterfererProfile>,
    /// Devices whose radio corrupts everything.
    pub faulty: Vec<String>,
    /// Seeded daemons heartbeat on their own threads.
    pub heartbeats: bool,
    /// Sweep availability every heartbeat period.
    pub sweeper: bool,
    /// Drive runs on worker threads as soon as they are triggered.
    pub workers: bool,
    pub stage_timeout: Micros,
}

impl AppConfig {
    pub fn new(data_dir: impl Into<PathBuf>, fleet: SeedFile) -> Self {
        Self {
            data_dir: data_dir.into(),
            fleet,
            rng_seed: 0,
            time: TimeMode::Fast,
            registry: RegistryConfig::default(),
            limits: DaemonLimits::default(),
            propagation: PropagationConfig::default(),
            ambient: Vec::new(),
            faulty: Vec::new(),
            heartbeats: true,
            sweeper: true,
            workers: true,
            stage_timeout: 60 * SECOND,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Registry(#[from] ServiceError),
    #[error("bad seed device {name}: {message}")]
    BadSeed { name: String, message: String },
}

pub struct App {
    pub store: Arc<RepoStore>,
    pub registry: Arc<RegistryService>,
    pub testbed: Arc<Testbed>,
    pub pipeline: Arc<Pipeline>,
    pub clock: Arc<dyn Clock>,
    cfg: AppConfig,
    stop: Arc<AtomicBool>,
    sweeper: Mutex<Option<JoinHandle<()>>>,
}

impl App {
    pub fn start(cfg: AppConfig) -> Result<Arc<Self>, AppError> {
        std::fs::create_dir_all(&cfg.data_dir)?;
        let clock: Arc<dyn Clock> = Arc::new(cfg.time.clock());
        let store = Arc::new(RepoStore::open(cfg.data_dir.join("repo"))?);
        let registry = Arc::new(RegistryService::open(
            &cfg.data_dir.join("registry.jsonl"),
            cfg.registry.clone(),
            Arc::clone(&clock),
        )?);
        let testbed = Arc::new(Testbed::new(cfg.propagation.clone(), cfg.rng_seed));
        testbed.set_ambient(cfg.ambient.clone());
        let mut pcfg = PipelineConfig::new(&cfg.data_dir);
        pcfg.stage_timeout = cfg.stage_timeout;
        pcfg.workers = cfg.workers;
        let pipeline = Pipeline::new(
            Arc::clone(&store),
            Arc::clone(&registry),
            Arc::clone(&testbed),
            Arc::clone(&clock),
            pcfg,
        );
        let app = Arc::new(Self {
            store,
            registry,
            testbed,
            pipeline,
            clock,
            cfg,
            stop: Arc::new(AtomicBool::new(false)),
            sweeper: Mutex::new(None),
        });
        // Runs do not survive a restart, so neither do their reservations.
        for rec in app.registry.list(&Default::default())? {
            if let Some(h) = app.registry.holder(&rec.device_id) {
                app.registry.release(&h);
            }
        }
        for d in app.cfg.fleet.devices.clone() {
            app.add_device(d.descriptor(), app.cfg.heartbeats)
                .map_err(|e| AppError::BadSeed {
                    name: d.name.clone(),
                    message: e.to_string(),
                })?;
        }
        for name in &app.cfg.faulty {
            app.testbed.set_faulty(name, true);
        }
        if app.cfg.sweeper {
            app.start_sweeper();
        }
        Ok(app)
    }

    /// Registers a device and brings up its daemon. Devices registered
    /// without `heartbeats` must heartbeat through the API themselves.
    pub fn add_device(
        &self,
        d: DeviceDescriptor,
        heartbeats: bool,
    ) -> Result<DeviceId, ServiceError> {
        let id = self.registry.register(d)?;
        if self.testbed.daemon_by_id(id.as_str()).is_none() {
            let record = self.registry.get(&id).expect("just registered");
            let daemon = DeviceDaemon::new(
                record,
                self.cfg.limits.clone(),
                Arc::clone(&self.registry),
                Arc::clone(&self.clock),
            );
            if heartbeats {
                daemon.start_heartbeats();
            }
            self.testbed.add_daemon(daemon);
        }
        Ok(id)
    }

    fn start_sweeper(&self) {
        let (stop, registry, clock) = (
            Arc::clone(&self.stop),
            Arc::clone(&self.registry),
            Arc::clone(&self.clock),
        );
        let period = self.cfg.registry.heartbeat_period;
        let h = std::thread::Builder::new()
            .name("sweeper".into())
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let until = clock.now() + period;
                    while !stop.load(Ordering::SeqCst) && clock.now() < until {
                        clock.sleep((until - clock.now()).min(period / 10).max(1));
                    }
                    if !stop.load(Ordering::SeqCst) {
                        registry.sweep();
                    }
                }
            })
            .expect("spawn sweeper");
        *self.sweeper.lock().unwrap_or_else(|p| p.into_inner()) = Some(h);
    }

    pub fn config(&self) -> &AppConfig {
        &self.cfg
    }

    /// Stops the sweeper and every daemon's heartbeats.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self
            .sweeper
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .take()
        {
            let _ = h.join();
        }
        self.testbed.stop();
    }
}

impl Drop for App {
    fn drop(&mut self) {
        self.shutdown();
    }
}
