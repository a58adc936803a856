//! HTTP/JSON API.
//!
//! | method | path | body → reply |
//! |---|---|---|
//! | GET | `/health` | → `{status, devices}` |
//! | GET | `/devices?type=&env=&state=` | → `[DeviceRecord]` |
//! | GET | `/devices/{id}` | id or name → `DeviceRecord` |
//! | POST | `/devices` | `DeviceDescriptor` → `{device_id}` |
//! | POST | `/devices/{id}/heartbeat` | `{metrics}` → `{alerts}` |
//! | GET | `/availability` | → `AvailabilityReport` |
//! | POST | `/availability/sweep` | → `AvailabilityReport` |
//! | POST, GET | `/warnings` | `NewRule` → `WarningRule`; list |
//! | GET | `/alerts` | → `[Alert]` |
//! | POST | `/commits` | `{files: {path: base64}, parent?, ref?}` → `{commit}` |
//! | POST | `/tags` | `{commit, tag}` → `{commit, tag}` |
//! | GET | `/tags/{tag}` | → `{commit, tag}` |
//! | GET | `/commits/{id}/results` | → `[run_id]` |
//! | GET | `/commits/{id}/results/{run}` | → `ResultArtifact` |
//! | POST | `/hooks` | `{commit, ref, author}` → `{run_id, coalesced}` |
//! | GET | `/runs`, `/runs/{id}` | → `PipelineRun` |
//! | GET | `/runs/{id}/notification` | → `Notification` |
//! | POST | `/sense` | `SenseQuery` → `SenseReply` |
//! | POST | `/histogram` | `HistogramQuery` → CSV |
//! | GET | `/spectrum/{device}/{channel}` | → `SenseReply` for one second |
//!
//! The per-device management channel is mounted under
//! `/devices/{id}/{deploy,build,flash,exec}`.
//!
//! Errors reply `{error, kind}` with a 4xx or 5xx status.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coins_core::build::FirmwareImage;
use coins_core::lcsp::LcspRequest;
use coins_core::radio::{Band, Environment};
use coins_core::registry::{
    DeviceDescriptor, DeviceFilter, DeviceId, DeviceRecord, InfraState, NewRule, NodeType,
};
use coins_core::run::{HookEvent, RunId};
use coins_core::target::StartCommand;
use coins_core::{Micros, MS, SECOND};
use serde::{Deserialize, Serialize};

use crate::app::App;
use crate::daemon::{DeviceDaemon, DeviceError};
use crate::pipeline::PipelineError;
use crate::registry_service::ServiceError;
use crate::repostore::{base64_map, RepoError, WorkTree};
use crate::testbed::TestbedError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            kind: self.kind.into(),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        use coins_core::registry::RegistryError as R;
        match &e {
            ServiceError::Registry(R::UnknownDevice(_)) => {
                Self::new(StatusCode::NOT_FOUND, "UnknownDevice", e.to_string())
            }
            ServiceError::Registry(R::DuplicateName(_)) => {
                Self::new(StatusCode::CONFLICT, "DuplicateName", e.to_string())
            }
            ServiceError::Registry(R::ReservationConflict(_)) => {
                Self::new(StatusCode::CONFLICT, "ReservationConflict", e.to_string())
            }
            ServiceError::Registry(R::InvalidDescriptor(_)) => {
                Self::new(StatusCode::BAD_REQUEST, "InvalidDescriptor", e.to_string())
            }
            ServiceError::Registry(R::InvalidRule(_)) => {
                Self::new(StatusCode::BAD_REQUEST, "InvalidRule", e.to_string())
            }
            ServiceError::Registry(R::InvalidFilter(_)) => {
                Self::new(StatusCode::BAD_REQUEST, "InvalidFilter", e.to_string())
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()),
        }
    }
}

impl From<RepoError> for ApiError {
    fn from(e: RepoError) -> Self {
        let (status, kind) = match &e {
            RepoError::InvalidPath(_) => (StatusCode::BAD_REQUEST, "InvalidPath"),
            RepoError::EmptyTree => (StatusCode::BAD_REQUEST, "EmptyTree"),
            RepoError::UnknownCommit(_) => (StatusCode::NOT_FOUND, "UnknownCommit"),
            RepoError::InvalidTag(_) => (StatusCode::BAD_REQUEST, "InvalidTag"),
            RepoError::TagExists { .. } => (StatusCode::CONFLICT, "TagExists"),
            RepoError::UnknownResult { .. } => (StatusCode::NOT_FOUND, "UnknownResult"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "Storage"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<DeviceError> for ApiError {
    fn from(e: DeviceError) -> Self {
        let (status, kind) = match &e {
            DeviceError::NotReserved { .. } => (StatusCode::CONFLICT, "NotReserved"),
            DeviceError::StorageFull { .. } => (StatusCode::INSUFFICIENT_STORAGE, "StorageFull"),
            DeviceError::NoWorkspace(_) => (StatusCode::CONFLICT, "NoWorkspace"),
            DeviceError::BuildFailed { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "BuildFailed"),
            DeviceError::Timeout { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "Timeout"),
            DeviceError::FlashVerifyFailed(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "FlashVerifyFailed")
            }
            DeviceError::TargetBusy => (StatusCode::CONFLICT, "TargetBusy"),
            DeviceError::TargetCrash { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "TargetCrash"),
            DeviceError::Deadline { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "Deadline"),
            DeviceError::Lcsp(_) => (StatusCode::BAD_GATEWAY, "Lcsp"),
            DeviceError::UnknownDevice(_) => (StatusCode::NOT_FOUND, "UnknownDevice"),
        };
        let msg = match e.log() {
            Some(log) if !log.is_empty() => format!("{e}\n{log}"),
            _ => e.to_string(),
        };
        Self::new(status, kind, msg)
    }
}

impl From<TestbedError> for ApiError {
    fn from(e: TestbedError) -> Self {
        match e {
            TestbedError::UnknownDevice(d) => Self::new(
                StatusCode::NOT_FOUND,
                "UnknownDevice",
                format!("unknown device {d}"),
            ),
            TestbedError::Radio(m) => Self::bad_request(m),
            TestbedError::Device(d) => d.into(),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

fn find_device(app: &App, id: &str) -> Result<DeviceRecord, ApiError> {
    app.registry
        .get(&DeviceId(id.into()))
        .or_else(|| app.registry.by_name(id))
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "UnknownDevice",
                format!("unknown device {id}"),
            )
        })
}

fn find_daemon(app: &App, id: &str) -> Result<Arc<DeviceDaemon>, ApiError> {
    let rec = find_device(app, id)?;
    app.testbed.daemon(&rec.name).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownDevice",
            format!("no daemon for {id}"),
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub devices: usize,
}

async fn health(State(app): State<Arc<App>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        devices: app.registry.len(),
    })
}

#[derive(Debug, Default, Deserialize)]
struct DeviceQuery {
    #[serde(rename = "type")]
    node_type: Option<String>,
    #[serde(alias = "environment")]
    env: Option<String>,
    state: Option<String>,
}

fn parse_filter(q: &DeviceQuery) -> Result<DeviceFilter, ApiError> {
    let bad = |what: &str, v: &str| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "InvalidFilter",
            format!("unknown {what} {v}"),
        )
    };
    let non_empty = |o: &Option<String>| o.clone().filter(|s| !s.is_empty());
    Ok(DeviceFilter {
        node_type: non_empty(&q.node_type)
            .map(|t| NodeType::parse(&t).ok_or_else(|| bad("type", &t)))
            .transpose()?,
        environment: non_empty(&q.env)
            .map(|e| Environment::parse(&e).ok_or_else(|| bad("environment", &e)))
            .transpose()?,
        state: non_empty(&q.state)
            .map(|s| InfraState::parse(&s).ok_or_else(|| bad("state", &s)))
            .transpose()?,
        within: None,
    })
}

async fn list_devices(
    State(app): State<Arc<App>>,
    Query(q): Query<DeviceQuery>,
) -> ApiResult<Vec<DeviceRecord>> {
    Ok(Json(app.registry.list(&parse_filter(&q)?)?))
}

async fn get_device(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
) -> ApiResult<DeviceRecord> {
    Ok(Json(find_device(&app, &id)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registered {
    pub device_id: DeviceId,
}

async fn register(
    State(app): State<Arc<App>>,
    Json(d): Json<DeviceDescriptor>,
) -> Result<(StatusCode, Json<Registered>), ApiError> {
    let device_id = app.add_device(d, false)?;
    Ok((StatusCode::CREATED, Json(Registered { device_id })))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HeartbeatBody {
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatReply {
    pub alerts: Vec<coins_core::registry::Alert>,
}

async fn heartbeat(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    body: Option<Json<HeartbeatBody>>,
) -> ApiResult<HeartbeatReply> {
    let rec = find_device(&app, &id)?;
    let metrics = body.map(|b| b.0.metrics).unwrap_or_default();
    Ok(Json(HeartbeatReply {
        alerts: app.registry.heartbeat(&rec.device_id, metrics)?,
    }))
}

async fn availability(
    State(app): State<Arc<App>>,
) -> Json<coins_core::registry::AvailabilityReport> {
    Json(app.registry.availability())
}

async fn sweep(State(app): State<Arc<App>>) -> Json<coins_core::registry::AvailabilityReport> {
    Json(app.registry.sweep())
}

async fn add_rule(
    State(app): State<Arc<App>>,
    Json(r): Json<NewRule>,
) -> Result<(StatusCode, Json<coins_core::registry::WarningRule>), ApiError> {
    Ok((StatusCode::CREATED, Json(app.registry.add_rule(r)?)))
}

async fn rules(State(app): State<Arc<App>>) -> Json<Vec<coins_core::registry::WarningRule>> {
    Json(app.registry.rules())
}

async fn alerts(State(app): State<Arc<App>>) -> Json<Vec<coins_core::registry::Alert>> {
    Json(app.registry.alerts())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushBody {
    #[serde(with = "base64_map")]
    pub files: BTreeMap<String, Vec<u8>>,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default, rename = "ref")]
    pub git_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pushed {
    pub commit: String,
}

async fn push(
    State(app): State<Arc<App>>,
    Json(b): Json<PushBody>,
) -> Result<(StatusCode, Json<Pushed>), ApiError> {
    let commit = blocking(move || {
        let tree = WorkTree::from_files(b.files)?;
        let parent = match &b.git_ref {
            _ if b.parent.is_some() => {
                Some(app.store.resolve(b.parent.as_deref().unwrap_or_default())?)
            }
            Some(r) => app.store.ref_head(r)?,
            None => None,
        };
        let id = app.store.ingest(&tree, parent.as_ref())?;
        if let Some(r) = &b.git_ref {
            app.store.set_ref(r, &id)?;
        }
        Ok(id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(Pushed { commit: commit.0 })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagBody {
    pub commit: String,
    pub tag: String,
}

async fn tag(
    State(app): State<Arc<App>>,
    Json(b): Json<TagBody>,
) -> Result<(StatusCode, Json<TagBody>), ApiError> {
    let id = app.store.resolve(&b.commit)?;
    app.store.tag(&id, &b.tag)?;
    Ok((
        StatusCode::CREATED,
        Json(TagBody {
            commit: id.0,
            tag: b.tag,
        }),
    ))
}

async fn get_tag(State(app): State<Arc<App>>, Path(t): Path<String>) -> ApiResult<TagBody> {
    let id = app.store.resolve_tag(&t)?;
    Ok(Json(TagBody {
        commit: id.0,
        tag: t,
    }))
}

async fn results(State(app): State<Arc<App>>, Path(c): Path<String>) -> ApiResult<Vec<String>> {
    let id = app.store.resolve(&c)?;
    Ok(Json(app.store.list_results(&id)?))
}

async fn result(
    State(app): State<Arc<App>>,
    Path((c, run)): Path<(String, String)>,
) -> ApiResult<crate::repostore::ResultArtifact> {
    let id = app.store.resolve(&c)?;
    Ok(Json(app.store.read_result(&id, &run)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triggered {
    pub run_id: RunId,
    pub coalesced: bool,
}

async fn hook(
    State(app): State<Arc<App>>,
    Json(ev): Json<HookEvent>,
) -> Result<(StatusCode, Json<Triggered>), ApiError> {
    let (run_id, coalesced) = app.pipeline.handle_hook_event(ev).map_err(|e| match e {
        PipelineError::UnknownCommit(_) => {
            ApiError::new(StatusCode::NOT_FOUND, "UnknownCommit", e.to_string())
        }
        e => ApiError::bad_request(e.to_string()),
    })?;
    Ok((StatusCode::ACCEPTED, Json(Triggered { run_id, coalesced })))
}

async fn runs(State(app): State<Arc<App>>) -> Json<Vec<coins_core::run::PipelineRun>> {
    Json(app.pipeline.list())
}

async fn get_run(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
) -> ApiResult<coins_core::run::PipelineRun> {
    app.pipeline
        .get(&RunId(id.clone()))
        .map(Json)
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "UnknownRun",
                format!("unknown run {id}"),
            )
        })
}

async fn get_notification(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
) -> ApiResult<crate::pipeline::Notification> {
    app.pipeline
        .notification(&RunId(id.clone()))
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no notification for run {id}")))
}

fn default_window() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenseQuery {
    pub device: String,
    pub channel: u32,
    #[serde(default = "default_window")]
    pub window_ms: u64,
    #[serde(default)]
    pub band: Option<Band>,
    #[serde(default)]
    pub t0_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenseReply {
    pub device: String,
    pub band: Band,
    pub channel: u32,
    pub window_ms: u64,
    pub samples: usize,
    pub occupancy: f64,
    pub mean_psd_dbm: f64,
}

fn do_sense(app: &App, q: &SenseQuery) -> Result<SenseReply, ApiError> {
    let rec = find_device(app, &q.device)?;
    let r = app.testbed.sense(
        &rec.name,
        q.band,
        q.channel,
        q.t0_ms * MS,
        q.window_ms * MS,
        &[],
    )?;
    let n = r.log.samples.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        r.log.samples.iter().map(|s| s.psd_dbm).sum::<f64>() / n as f64
    };
    Ok(SenseReply {
        device: rec.name,
        band: r.log.band,
        channel: q.channel,
        window_ms: q.window_ms,
        samples: n,
        occupancy: r.occupancy,
        mean_psd_dbm: mean,
    })
}

async fn sense(State(app): State<Arc<App>>, Json(q): Json<SenseQuery>) -> ApiResult<SenseReply> {
    blocking(move || do_sense(&app, &q)).await.map(Json)
}

async fn spectrum(
    State(app): State<Arc<App>>,
    Path((device, channel)): Path<(String, u32)>,
) -> ApiResult<SenseReply> {
    let q = SenseQuery {
        device,
        channel,
        window_ms: SECOND / MS,
        band: None,
        t0_ms: 0,
    };
    blocking(move || do_sense(&app, &q)).await.map(Json)
}

fn default_bin() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramQuery {
    #[serde(flatten)]
    pub sense: SenseQuery,
    #[serde(default = "default_bin")]
    pub bin_width_db: f64,
    #[serde(default)]
    pub slice_ms: Option<u64>,
}

async fn histogram(
    State(app): State<Arc<App>>,
    Json(q): Json<HistogramQuery>,
) -> Result<Response, ApiError> {
    let csv = blocking(move || {
        let rec = find_device(&app, &q.sense.device)?;
        let slice = q.slice_ms.unwrap_or(q.sense.window_ms) * MS;
        let h = app.testbed.histogram(
            &rec.name,
            q.sense.band,
            q.sense.channel,
            q.sense.t0_ms * MS,
            q.sense.window_ms * MS,
            q.bin_width_db,
            slice,
        )?;
        Ok(h.to_csv())
    })
    .await?;
    Ok(([(axum::http::header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployBody {
    pub run: String,
    #[serde(with = "base64_map")]
    pub files: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployed {
    pub staged: Vec<String>,
}

async fn m_deploy(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Json(b): Json<DeployBody>,
) -> ApiResult<Deployed> {
    let d = find_daemon(&app, &id)?;
    blocking(move || {
        Ok(Deployed {
            staged: d.deploy(&b.run, b.files)?,
        })
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildBody {
    pub run: String,
    pub spec: String,
    pub image: String,
    pub role: String,
    #[serde(default)]
    pub commit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Built {
    pub report: crate::daemon::BuildReport,
    pub image: Option<FirmwareImage>,
}

async fn m_build(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Json(b): Json<BuildBody>,
) -> ApiResult<Built> {
    let d = find_daemon(&app, &id)?;
    blocking(move || {
        let report = d.build(&b.run, &b.spec, &b.image, &b.role, &b.commit)?;
        let image = d.cached_image(&report.cache_key, &b.commit);
        Ok(Built { report, image })
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flashed {
    pub checksum: String,
    pub verified: bool,
}

async fn m_flash(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Json(img): Json<FirmwareImage>,
) -> ApiResult<Flashed> {
    let d = find_daemon(&app, &id)?;
    blocking(move || {
        let checksum = d.flash(&img)?;
        Ok(Flashed {
            verified: checksum == img.checksum,
            checksum,
        })
    })
    .await
    .map(Json)
}

fn default_deadline() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecBody {
    #[serde(default)]
    pub channel: Option<u32>,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default = "default_deadline")]
    pub deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Executed {
    #[serde(with = "crate::repostore::base64_serde")]
    pub output: Vec<u8>,
    pub log: String,
}

async fn m_exec(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Json(b): Json<ExecBody>,
) -> ApiResult<Executed> {
    let rec = find_device(&app, &id)?;
    blocking(move || {
        let cmd = StartCommand {
            channel: b.channel,
            power_dbm: None,
            start_ms: b.start_ms,
        };
        let req = LcspRequest::post("/start", cmd.encode())
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let deadline: Micros = (b.start_ms + b.deadline_ms) * MS;
        let (output, log) = app.testbed.exec_and_collect(&rec.name, &req, deadline)?;
        Ok(Executed { output, log })
    })
    .await
    .map(Json)
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/devices", get(list_devices).post(register))
        .route("/devices/{id}", get(get_device))
        .route("/devices/{id}/heartbeat", post(heartbeat))
        .route("/devices/{id}/deploy", post(m_deploy))
        .route("/devices/{id}/build", post(m_build))
        .route("/devices/{id}/flash", post(m_flash))
        .route("/devices/{id}/exec", post(m_exec))
        .route("/availability", get(availability))
        .route("/availability/sweep", post(sweep))
        .route("/warnings", get(rules).post(add_rule))
        .route("/alerts", get(alerts))
        .route("/commits", post(push))
        .route("/commits/{id}/results", get(results))
        .route("/commits/{id}/results/{run}", get(result))
        .route("/tags", post(tag))
        .route("/tags/{tag}", get(get_tag))
        .route("/hooks", post(hook))
        .route("/runs", get(runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/notification", get(get_notification))
        .route("/sense", post(sense))
        .route("/histogram", post(histogram))
        .route("/spectrum/{device}/{channel}", get(spectrum))
        .with_state(app)
}

/// A server running on its own runtime thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    /// Stops accepting connections and waits for the server to exit.
    pub fn stop(mut self) -> std::io::Result<()> {
        self.stop_inner()
    }

    /// Blocks until the server exits on its own.
    pub fn join(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    fn stop_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

/// Binds `addr` now (so a busy address fails here) and serves in the
/// background.
pub fn spawn(app: Arc<App>, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("http".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, router(app))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
