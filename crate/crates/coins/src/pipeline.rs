//! The automation system: hook events in, notifications out.
//!
//! Each run is driven one stage at a time by [`Pipeline::advance`]. With
//! workers enabled, a hook event spawns a thread that advances the run until
//! it is terminal. Every state the run enters is appended to
//! `runs/<run_id>.jsonl`; the run as a whole is saved to
//! `runs/<run_id>.json` on every transition.
//!
//! Stage deadlines apply to modelled virtual time, so they do not depend on
//! host speed: fetching and selection are free, deploying costs 5 ms plus
//! 1 ms per KiB per device, builds cost what the build engine reports (the
//! slowest device counts), flashing costs 2 ms per block per device and
//! testing costs one attempt slot per attempt of the slowest subset.
//!
//! Outbox entries are `outbox/<run_id>.eml`: mail headers, a one-line
//! summary, and for failures the full debug log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use coins_core::build::FirmwareImage;
use coins_core::config::{
    BuildSpec, ConfigError, DeploymentConfig, Selector, TestSpec, DEPLOY_PATH,
};
use coins_core::digest::fnv1a64;
use coins_core::radio::InterfererProfile;
use coins_core::registry::{DeviceFilter, DeviceId, InfraState};
use coins_core::run::{FailureKind, FailureReason, HookEvent, PipelineRun, RunId, RunState, Stage};
use coins_core::target::FLASH_BLOCK;
use coins_core::testkit::{partition, Verdict};
use coins_core::{Micros, MS, SECOND};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::controller::{slot_len, Controller, Subset};
use crate::daemon::{BuildReport, DeviceError};
use crate::registry_service::{RegistryService, ServiceError};
use crate::repostore::{write_atomic, CommitId, RepoError, RepoStore, ResultArtifact, WorkTree};
use crate::testbed::Testbed;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("unknown commit {0}")]
    UnknownCommit(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is already terminal")]
    Terminal(String),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    /// Virtual deadline per stage.
    pub stage_timeout: Micros,
    /// Spawn a worker per run; otherwise callers drive runs with `advance`.
    pub workers: bool,
}

impl PipelineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            stage_timeout: 60 * SECOND,
            workers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub recipient: String,
    pub run_id: RunId,
    pub verdict: Verdict,
    pub summary: String,
    pub debug_log: Option<String>,
    pub path: PathBuf,
}

/// Stage timing, virtual and wall.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTime {
    pub virtual_us: Micros,
    pub wall_us: u64,
}

#[derive(Default)]
struct RunCtx {
    commit: Option<CommitId>,
    tree: WorkTree,
    config: Option<DeploymentConfig>,
    spec: Option<BuildSpec>,
    test: Option<TestSpec>,
    interferers: Vec<InterfererProfile>,
    subsets: Vec<Subset>,
    /// Device name → role.
    roles: BTreeMap<String, String>,
    images: BTreeMap<String, FirmwareImage>,
    builds: Vec<BuildReport>,
    device_logs: BTreeMap<String, String>,
    times: BTreeMap<Stage, StageTime>,
    /// Modelled virtual duration of the stage in progress.
    cost: Micros,
    notification: Option<Notification>,
}

struct Entry {
    run: PipelineRun,
    ctx: RunCtx,
    busy: bool,
}

pub struct Pipeline {
    store: Arc<RepoStore>,
    registry: Arc<RegistryService>,
    testbed: Arc<Testbed>,
    clock: Arc<dyn Clock>,
    cfg: PipelineConfig,
    runs: Mutex<BTreeMap<RunId, Entry>>,
    changed: Condvar,
    next: AtomicU64,
    outbox_lock: Mutex<()>,
}

fn config_failure(e: &ConfigError, file: &str) -> FailureReason {
    let kind = match e {
        ConfigError::Missing(_) => FailureKind::MissingConfig,
        ConfigError::Syntax { .. } => FailureKind::ConfigSyntax,
        ConfigError::Invalid(_) => FailureKind::ConfigInvalid,
    };
    FailureReason::new(kind, format!("{file}: {e}"))
}

impl Pipeline {
    pub fn new(
        store: Arc<RepoStore>,
        registry: Arc<RegistryService>,
        testbed: Arc<Testbed>,
        clock: Arc<dyn Clock>,
        cfg: PipelineConfig,
    ) -> Arc<Self> {
        let _ = std::fs::create_dir_all(cfg.data_dir.join("runs"));
        let _ = std::fs::create_dir_all(cfg.data_dir.join("outbox"));
        let next = highest_run(&cfg.data_dir.join("runs")) + 1;
        Arc::new(Self {
            store,
            registry,
            testbed,
            clock,
            cfg,
            runs: Mutex::new(BTreeMap::new()),
            changed: Condvar::new(),
            next: AtomicU64::new(next),
            outbox_lock: Mutex::new(()),
        })
    }

    pub fn outbox_dir(&self) -> PathBuf {
        self.cfg.data_dir.join("outbox")
    }

    pub fn journal_path(&self, id: &RunId) -> PathBuf {
        self.cfg.data_dir.join("runs").join(format!("{id}.jsonl"))
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<RunId, Entry>> {
        self.runs.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Creates (or coalesces into) a run for `event`.
    pub fn handle_hook_event(
        self: &Arc<Self>,
        mut event: HookEvent,
    ) -> Result<(RunId, bool), PipelineError> {
        let commit = self
            .store
            .resolve(&event.commit)
            .map_err(|_| PipelineError::UnknownCommit(event.commit.clone()))?;
        event.commit = commit.0.clone();
        event.received_at = self.clock.now();
        let id = {
            let mut runs = self.lock();
            if let Some((id, _)) = runs.iter().find(|(_, e)| {
                !e.run.state.is_terminal()
                    && e.run.event.commit == event.commit
                    && e.run.event.git_ref == event.git_ref
            }) {
                return Ok((id.clone(), true));
            }
            let id = RunId::from_seq(self.next.fetch_add(1, Ordering::SeqCst));
            let run = PipelineRun::new(id.clone(), event);
            self.persist(&run);
            runs.insert(
                id.clone(),
                Entry {
                    run,
                    ctx: RunCtx {
                        commit: Some(commit),
                        ..RunCtx::default()
                    },
                    busy: false,
                },
            );
            id
        };
        self.changed.notify_all();
        if self.cfg.workers {
            let me = Arc::clone(self);
            let rid = id.clone();
            std::thread::Builder::new()
                .name(format!("run-{id}"))
                .spawn(move || me.drive(&rid))
                .expect("spawn run worker");
        }
        Ok((id, false))
    }

    /// Advances `id` until it is terminal.
    pub fn drive(&self, id: &RunId) {
        while let Ok(s) = self.advance(id) {
            if s.is_terminal() {
                break;
            }
        }
    }

    pub fn get(&self, id: &RunId) -> Option<PipelineRun> {
        self.lock().get(id).map(|e| e.run.clone())
    }

    pub fn list(&self) -> Vec<PipelineRun> {
        self.lock().values().map(|e| e.run.clone()).collect()
    }

    pub fn notification(&self, id: &RunId) -> Option<Notification> {
        self.lock().get(id).and_then(|e| e.ctx.notification.clone())
    }

    pub fn build_reports(&self, id: &RunId) -> Vec<BuildReport> {
        self.lock()
            .get(id)
            .map(|e| e.ctx.builds.clone())
            .unwrap_or_default()
    }

    pub fn stage_times(&self, id: &RunId) -> BTreeMap<Stage, StageTime> {
        self.lock()
            .get(id)
            .map(|e| e.ctx.times.clone())
            .unwrap_or_default()
    }

    /// Blocks until `id` is terminal or `timeout` passes.
    pub fn wait(&self, id: &RunId, timeout: Duration) -> Option<PipelineRun> {
        let deadline = Instant::now() + timeout;
        let mut runs = self.lock();
        loop {
            match runs.get(id) {
                None => return None,
                Some(e) if e.run.state.is_terminal() && !e.busy => return Some(e.run.clone()),
                Some(_) => {}
            }
            let now = Instant::now();
            if now >= deadline {
                return runs.get(id).map(|e| e.run.clone());
            }
            runs = self
                .changed
                .wait_timeout(runs, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn persist(&self, run: &PipelineRun) {
        let dir = self.cfg.data_dir.join("runs");
        if let Some(last) = run.journal.last() {
            if let Ok(mut f) = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.journal_path(&run.run_id))
            {
                let mut line = serde_json::to_vec(last).expect("state serializes");
                line.push(b'\n');
                let _ = f.write_all(&line);
            }
        }
        let _ = write_atomic(
            &dir.join(format!("{}.json", run.run_id)),
            &serde_json::to_vec_pretty(run).expect("run serializes"),
        );
    }

    /// Performs exactly one stage of `id`.
    pub fn advance(&self, id: &RunId) -> Result<RunState, PipelineError> {
        let (mut run, mut ctx) = {
            let mut runs = self.lock();
            let e = runs
                .get_mut(id)
                .ok_or_else(|| PipelineError::UnknownRun(id.0.clone()))?;
            if e.run.state.is_terminal() || e.busy {
                return Err(PipelineError::Terminal(id.0.clone()));
            }
            e.busy = true;
            (e.run.clone(), std::mem::take(&mut e.ctx))
        };
        let stage = run.state.next_stage().expect("non-terminal");
        let w0 = Instant::now();
        ctx.cost = 0;
        let result = catch_stage(|| self.stage(stage, &mut run, &mut ctx));
        let elapsed = ctx.cost;
        ctx.times.insert(
            stage,
            StageTime {
                virtual_us: elapsed,
                wall_us: w0.elapsed().as_micros() as u64,
            },
        );
        let outcome = match result {
            Ok(()) if elapsed > self.cfg.stage_timeout => Err(FailureReason::new(
                FailureKind::Timeout,
                format!(
                    "{stage} took {} ms, limit {} ms",
                    elapsed / 1000,
                    self.cfg.stage_timeout / 1000
                ),
            )),
            r => r,
        };
        match outcome {
            Ok(()) => {
                run.advance_to(stage).expect("next stage");
                run.log(&format!("[{}] {stage}", self.clock.now()));
            }
            Err(reason) => {
                run.log(&format!(
                    "[{}] failed entering {stage}: {:?}: {}",
                    self.clock.now(),
                    reason.kind,
                    reason.message
                ));
                run.fail(reason).expect("non-terminal");
                self.finalize(&mut run, &mut ctx);
            }
        }
        self.persist(&run);
        let state = run.state.clone();
        {
            let mut runs = self.lock();
            let e = runs.get_mut(id).expect("run exists");
            e.run = run;
            e.ctx = ctx;
            e.busy = false;
        }
        self.changed.notify_all();
        Ok(state)
    }

    fn stage(
        &self,
        stage: Stage,
        run: &mut PipelineRun,
        ctx: &mut RunCtx,
    ) -> Result<(), FailureReason> {
        match stage {
            Stage::Triggered => unreachable!("runs start triggered"),
            Stage::Fetched => self.fetch(run, ctx),
            Stage::DevicesSelected => self.select(run, ctx),
            Stage::Deployed => self.deploy(run, ctx),
            Stage::Built => self.build(run, ctx),
            Stage::Flashed => self.flash(run, ctx),
            Stage::Tested => self.test(run, ctx),
            Stage::Reported => {
                self.finalize(run, ctx);
                match &ctx.notification {
                    Some(_) => Ok(()),
                    None => Err(FailureReason::new(
                        FailureKind::ReportFailed,
                        "could not write results",
                    )),
                }
            }
        }
    }

    fn fetch(&self, run: &mut PipelineRun, ctx: &mut RunCtx) -> Result<(), FailureReason> {
        let commit = ctx.commit.clone().expect("set at trigger");
        let tree = self
            .store
            .worktree(&commit)
            .map_err(|e| FailureReason::new(FailureKind::UnknownCommit, e.to_string()))?;
        run.log(&format!("fetched {} files from {commit}", tree.len()));
        let text = |path: &str| -> Result<String, FailureReason> {
            let b = tree.get(path).ok_or_else(|| {
                FailureReason::new(FailureKind::MissingConfig, format!("missing {path}"))
            })?;
            String::from_utf8(b.to_vec()).map_err(|_| {
                FailureReason::new(FailureKind::ConfigSyntax, format!("{path}: not UTF-8"))
            })
        };
        let cfg = DeploymentConfig::parse(&text(DEPLOY_PATH)?)
            .map_err(|e| config_failure(&e, DEPLOY_PATH))?;
        let spec =
            BuildSpec::parse(&text(&cfg.build)?).map_err(|e| config_failure(&e, &cfg.build))?;
        let test = TestSpec::parse(&text(&cfg.test_entry)?)
            .map_err(|e| config_failure(&e, &cfg.test_entry))?;
        let outputs: BTreeSet<&String> = spec.steps.iter().flat_map(|s| &s.outputs).collect();
        for s in &cfg.device_selectors {
            if !outputs.contains(&s.image) {
                return Err(FailureReason::new(
                    FailureKind::ConfigInvalid,
                    format!(
                        "{DEPLOY_PATH}: image {} of role {} is not a build output",
                        s.image, s.role
                    ),
                ));
            }
        }
        if let Some(p) = &cfg.interferers {
            let raw = text(p)?;
            ctx.interferers = serde_json::from_str(&raw).map_err(|e| {
                FailureReason::new(
                    FailureKind::ConfigSyntax,
                    format!("{p}: line {}: {e}", e.line()),
                )
            })?;
            for i in &ctx.interferers {
                i.validate().map_err(|e| {
                    FailureReason::new(FailureKind::ConfigInvalid, format!("{p}: {e}"))
                })?;
            }
        }
        ctx.tree = tree;
        ctx.config = Some(cfg);
        ctx.spec = Some(spec);
        ctx.test = Some(test);
        Ok(())
    }

    fn select(&self, run: &mut PipelineRun, ctx: &mut RunCtx) -> Result<(), FailureReason> {
        let cfg = ctx.config.as_ref().expect("fetched");
        let k = cfg.redundancy;
        let mut unmet = Vec::new();
        let mut by_role: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in &cfg.device_selectors {
            let picked: Vec<String> = match &s.selector {
                Selector::Names(names) => {
                    for n in names {
                        match self.registry.by_name(n) {
                            None => unmet.push(format!("{}: {n} unknown", s.role)),
                            Some(d) if d.infra_state != InfraState::Available => {
                                unmet.push(format!("{}: {n} {}", s.role, d.infra_state.as_str()))
                            }
                            Some(_) => {}
                        }
                    }
                    names.clone()
                }
                Selector::Query {
                    node_type,
                    environment,
                    count,
                } => {
                    let filter = DeviceFilter {
                        node_type: Some(*node_type),
                        environment: *environment,
                        state: Some(InfraState::Available),
                        within: None,
                    };
                    let found = self.registry.list(&filter).map_err(|e| {
                        FailureReason::new(FailureKind::SelectorUnsatisfiable, e.to_string())
                    })?;
                    if found.len() < *count as usize {
                        unmet.push(format!(
                            "{}: {} available, need {count} x {}",
                            s.role,
                            found.len(),
                            s.selector
                        ));
                    }
                    found
                        .into_iter()
                        .take(*count as usize)
                        .map(|d| d.name)
                        .collect()
                }
            };
            by_role.insert(s.role.clone(), picked);
        }
        if !unmet.is_empty() {
            return Err(FailureReason::new(
                FailureKind::SelectorUnsatisfiable,
                unmet.join("; "),
            ));
        }
        let roles: Vec<String> = by_role.keys().cloned().collect();
        let subsets: Vec<Subset> = if k == 1 {
            vec![by_role
                .iter()
                .map(|(r, names)| (r.clone(), names[0].clone()))
                .collect()]
        } else {
            let pool: Vec<String> = by_role.values().flatten().cloned().collect();
            partition(&pool, &roles, k).map_err(|e| {
                FailureReason::new(FailureKind::SelectorUnsatisfiable, e.to_string())
            })?
        };
        let mut seen = BTreeSet::new();
        let mut ids = Vec::new();
        let mut reserved = BTreeMap::new();
        for (i, s) in subsets.iter().enumerate() {
            for (role, name) in s {
                if !seen.insert(name.clone()) {
                    return Err(FailureReason::new(
                        FailureKind::SelectorUnsatisfiable,
                        format!("{name} selected for two roles"),
                    ));
                }
                let rec = self.registry.by_name(name).expect("checked above");
                let key = if k == 1 {
                    role.clone()
                } else {
                    format!("{role}.{i}")
                };
                reserved.insert(key, rec.device_id.0.clone());
                ctx.roles.insert(name.clone(), role.clone());
                ids.push(rec.device_id);
            }
        }
        if k == 1 {
            // the rest of a counted selection is held too
            for (role, names) in &by_role {
                for (j, name) in names.iter().enumerate().skip(1) {
                    if !seen.insert(name.clone()) {
                        return Err(FailureReason::new(
                            FailureKind::SelectorUnsatisfiable,
                            format!("{name} selected for two roles"),
                        ));
                    }
                    let rec = self.registry.by_name(name).expect("checked above");
                    reserved.insert(format!("{role}.{j}"), rec.device_id.0.clone());
                    ids.push(rec.device_id);
                }
            }
        }
        self.registry
            .reserve(run.run_id.as_str(), &ids)
            .map_err(|e| FailureReason::new(FailureKind::SelectorUnsatisfiable, e.to_string()))?;
        run.log(&format!(
            "reserved {}",
            reserved
                .iter()
                .map(|(r, d)| format!("{r}={d}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        run.reserved_devices = reserved;
        ctx.subsets = subsets;
        Ok(())
    }

    fn device_names(ctx: &RunCtx) -> Vec<String> {
        ctx.roles.keys().cloned().collect()
    }

    fn deploy(&self, run: &mut PipelineRun, ctx: &mut RunCtx) -> Result<(), FailureReason> {
        let cfg = ctx.config.as_ref().expect("fetched");
        let spec = ctx.spec.as_ref().expect("fetched");
        let produced: BTreeSet<&String> = spec.steps.iter().flat_map(|s| &s.outputs).collect();
        let mut wanted: BTreeSet<&String> = spec
            .steps
            .iter()
            .flat_map(|s| &s.inputs)
            .filter(|p| !produced.contains(p))
            .collect();
        wanted.extend(spec.cache_key_inputs.iter());
        wanted.insert(&cfg.build);
        let mut files = BTreeMap::new();
        for p in wanted {
            if let Some(b) = ctx.tree.get(p) {
                files.insert(p.clone(), b.to_vec());
            }
        }
        let kib = files.values().map(Vec::len).sum::<usize>().div_ceil(1024) as Micros;
        for name in Self::device_names(ctx) {
            ctx.cost += 5 * MS + kib * MS;
            let d = self.testbed.daemon(&name).ok_or_else(|| {
                FailureReason::new(FailureKind::NotReserved, format!("no daemon for {name}"))
            })?;
            let staged = d
                .deploy(run.run_id.as_str(), files.clone())
                .map_err(|e| match e {
                    DeviceError::StorageFull { .. } => {
                        FailureReason::new(FailureKind::StorageFull, format!("{name}: {e}"))
                    }
                    e => FailureReason::new(FailureKind::NotReserved, format!("{name}: {e}")),
                })?;
            run.log(&format!("deployed {} files to {name}", staged.len()));
        }
        Ok(())
    }

    fn build(&self, run: &mut PipelineRun, ctx: &mut RunCtx) -> Result<(), FailureReason> {
        let cfg = ctx.config.as_ref().expect("fetched");
        let commit = ctx.commit.clone().expect("set");
        let jobs: Vec<(String, String, String)> = ctx
            .roles
            .iter()
            .map(|(name, role)| {
                (
                    name.clone(),
                    role.clone(),
                    cfg.selector(role).expect("role has selector").image.clone(),
                )
            })
            .collect();
        let results: Vec<(String, String, Result<BuildReport, DeviceError>)> =
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .iter()
                    .map(|(name, role, image)| {
                        let d = self.testbed.daemon(name);
                        let run_id = run.run_id.as_str();
                        let spec_path = cfg.build.as_str();
                        let commit = commit.as_str();
                        s.spawn(move || {
                            let r = match d {
                                Some(d) => d.build(run_id, spec_path, image, role, commit),
                                None => Err(DeviceError::UnknownDevice(name.clone())),
                            };
                            (name.clone(), role.clone(), r)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("build thread"))
                    .collect()
            });
        ctx.cost = results
            .iter()
            .filter_map(|(_, _, r)| r.as_ref().ok())
            .map(|b| b.virtual_us)
            .max()
            .unwrap_or(0);
        let mut failures = Vec::new();
        let mut timed_out = false;
        for (name, role, r) in results {
            match r {
                Ok(rep) => {
                    run.log(&format!(
                        "built {role} on {name}: checksum {} steps_executed {} cache_hit {}",
                        rep.checksum, rep.steps_executed, rep.cache_hit
                    ));
                    let d = self.testbed.daemon(&name).expect("daemon exists");
                    let img = d
                        .cached_image(&rep.cache_key, commit.as_str())
                        .expect("build populates cache");
                    ctx.images.insert(name.clone(), img);
                    ctx.device_logs.entry(name).or_default().push_str(&rep.log);
                    ctx.builds.push(rep);
                }
                Err(e) => {
                    timed_out |= matches!(e, DeviceError::Timeout { .. });
                    let log = e.log().unwrap_or_default().to_string();
                    run.log(&format!("build of {role} on {name} failed: {e}\n{log}"));
                    ctx.device_logs
                        .entry(name.clone())
                        .or_default()
                        .push_str(&log);
                    failures.push(format!("{name}: {e}\n{log}"));
                }
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            let kind = if timed_out {
                FailureKind::Timeout
            } else {
                FailureKind::BuildFailed
            };
            Err(FailureReason::new(kind, failures.join("\n")))
        }
    }

    fn flash(&self, run: &mut PipelineRun, ctx: &mut RunCtx) -> Result<(), FailureReason> {
        for (name, img) in &ctx.images {
            ctx.cost += 2 * MS * img.bytecode.len().div_ceil(FLASH_BLOCK) as Micros;
            let d = self.testbed.daemon(name).expect("daemon exists");
            match d.flash(img) {
                Ok(sum) if sum == img.checksum => run.log(&format!("flashed {name}: {sum}")),
                Ok(sum) => {
                    return Err(FailureReason::new(
                        FailureKind::FlashVerifyFailed,
                        format!("{name}: target reports {sum}"),
                    ));
                }
                Err(DeviceError::TargetBusy) => {
                    return Err(FailureReason::new(
                        FailureKind::TargetBusy,
                        format!("{name}: target busy"),
                    ))
                }
                Err(e) => {
                    return Err(FailureReason::new(
                        FailureKind::FlashVerifyFailed,
                        format!("{name}: {e}"),
                    ))
                }
            }
        }
        Ok(())
    }

    fn test(&self, run: &mut PipelineRun, ctx: &mut RunCtx) -> Result<(), FailureReason> {
        let cfg = ctx.config.as_ref().expect("fetched");
        let spec = ctx.test.as_ref().expect("fetched");
        let salt = fnv1a64(run.event.commit.as_bytes());
        let mut c = Controller::new(&self.testbed, spec, &ctx.interferers, salt);
        let report = c
            .run(cfg, &ctx.subsets)
            .map_err(|e| FailureReason::new(FailureKind::TestError, e.to_string()))?;
        for (dev, log) in c.logs {
            ctx.device_logs.entry(dev).or_default().push_str(&log);
        }
        run.log(&format!(
            "test {}: cause {} attempts {} channel {}",
            report.verdict,
            report.cause.as_str(),
            report.attempts,
            report.channel
        ));
        for h in &report.history {
            run.log(&format!(
                "  attempt {} channel {} {} cause {} occupancy {:?}{}",
                h.attempt,
                h.channel,
                h.verdict,
                h.cause.as_str(),
                h.sensing,
                h.error
                    .as_ref()
                    .map(|e| format!(" error {e}"))
                    .unwrap_or_default()
            ));
        }
        let attempts = report
            .subsets
            .iter()
            .map(|s| s.attempts)
            .max()
            .unwrap_or(report.attempts);
        ctx.cost = Micros::from(attempts) * slot_len(spec);
        run.attempts = report.attempts;
        run.report = Some(report);
        Ok(())
    }

    /// Writes results and the notification once, and releases devices.
    /// Runs when the run is done, whether it passed or failed.
    fn finalize(&self, run: &mut PipelineRun, ctx: &mut RunCtx) {
        if ctx.notification.is_some() {
            return;
        }
        let released = self.registry.release(run.run_id.as_str());
        if !released.is_empty() {
            run.log(&format!(
                "released {}",
                released
                    .iter()
                    .map(DeviceId::as_str)
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        for name in Self::device_names(ctx) {
            if let Some(d) = self.testbed.daemon(&name) {
                d.clean(run.run_id.as_str());
            }
        }
        let verdict = match (&run.state, &run.report) {
            (RunState::Failed { .. }, _) | (_, None) => Verdict::Error,
            (_, Some(r)) => r.verdict,
        };
        if let Some(commit) = &ctx.commit {
            let mut files = BTreeMap::new();
            if let Some(r) = &run.report {
                files.insert(
                    "report.json".into(),
                    serde_json::to_vec_pretty(r).expect("report serializes"),
                );
            }
            if !ctx.builds.is_empty() {
                files.insert(
                    "builds.json".into(),
                    serde_json::to_vec_pretty(&ctx.builds).expect("builds serialize"),
                );
            }
            for (dev, log) in &ctx.device_logs {
                files.insert(format!("logs/{dev}.log"), log.clone().into_bytes());
            }
            let art = ResultArtifact {
                run_id: run.run_id.0.clone(),
                verdict,
                result_files: files,
                debug_log: run.debug_log.clone().into_bytes(),
            };
            match self.store.write_results(commit, &art) {
                Ok(()) | Err(RepoError::DuplicateRun { .. }) => {}
                Err(e) => run.log(&format!("writing results failed: {e}")),
            }
        }
        for attempt in 0..3 {
            match self.notify(run, verdict, ctx.report_summary(run)) {
                Ok(n) => {
                    ctx.notification = Some(n);
                    break;
                }
                Err(e) => run.log(&format!("outbox write {} failed: {e}", attempt + 1)),
            }
        }
    }

    fn notify(
        &self,
        run: &PipelineRun,
        verdict: Verdict,
        detail: String,
    ) -> std::io::Result<Notification> {
        let _o = self.outbox_lock.lock().unwrap_or_else(|p| p.into_inner());
        let commit = &run.event.commit;
        let summary = format!("{verdict} run {} commit {commit}", run.run_id);
        let failed = verdict != Verdict::Pass;
        let mut body = String::new();
        let _ = writeln!(body, "To: {}", run.event.author);
        let _ = writeln!(body, "Subject: {summary}");
        let _ = writeln!(body, "X-Coins-Run: {}", run.run_id);
        let _ = writeln!(
            body,
            "X-Coins-Verdict: {}",
            verdict.to_string().to_lowercase()
        );
        let _ = writeln!(body);
        let _ = writeln!(body, "{summary}");
        let _ = writeln!(body, "ref: {}", run.event.git_ref);
        let _ = writeln!(body, "state: {}", run.state.label());
        body.push_str(&detail);
        if failed {
            let _ = writeln!(body, "\n--- debug log ---");
            body.push_str(&run.debug_log);
        }
        let path = self.outbox_dir().join(format!("{}.eml", run.run_id));
        write_atomic(&path, body.as_bytes())?;
        Ok(Notification {
            recipient: run.event.author.clone(),
            run_id: run.run_id.clone(),
            verdict,
            summary,
            debug_log: failed.then(|| run.debug_log.clone()),
            path,
        })
    }

    pub fn store(&self) -> &Arc<RepoStore> {
        &self.store
    }

    pub fn registry(&self) -> &Arc<RegistryService> {
        &self.registry
    }
}

impl RunCtx {
    fn report_summary(&self, run: &PipelineRun) -> String {
        let mut s = String::new();
        if let Some(r) = &run.report {
            let _ = writeln!(s, "cause: {}", r.cause.as_str());
            let _ = writeln!(s, "attempts: {}", r.attempts);
            let _ = writeln!(s, "channel: {}", r.channel);
            for sub in &r.subsets {
                let devs: Vec<String> = sub
                    .devices
                    .iter()
                    .map(|(r, d)| format!("{r}={d}"))
                    .collect();
                let _ = writeln!(
                    s,
                    "subset {}: {} cause {} channel {} {}",
                    sub.index,
                    sub.verdict,
                    sub.cause.as_str(),
                    sub.channel,
                    devs.join(" ")
                );
            }
            if !r.flagged_devices.is_empty() {
                let _ = writeln!(s, "flagged: {}", r.flagged_devices.join(", "));
            }
        }
        if let RunState::Failed { stage, reason } = &run.state {
            let _ = writeln!(s, "failed entering {stage}: {:?}", reason.kind);
        }
        s
    }
}

fn catch_stage(f: impl FnOnce() -> Result<(), FailureReason>) -> Result<(), FailureReason> {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Err(FailureReason::new(
                FailureKind::TestError,
                format!("internal error: {msg}"),
            ))
        }
    }
}

fn highest_run(dir: &Path) -> u64 {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter_map(|e| {
                    let n = e.file_name().to_string_lossy().into_owned();
                    n.strip_prefix('r')?.split('.').next()?.parse::<u64>().ok()
                })
                .max()
                .unwrap_or(0)
        })
        .unwrap_or(0)
}

impl From<ServiceError> for FailureReason {
    fn from(e: ServiceError) -> Self {
        FailureReason::new(FailureKind::SelectorUnsatisfiable, e.to_string())
    }
}
