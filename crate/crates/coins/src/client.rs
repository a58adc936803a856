//! Blocking HTTP client for the API in [`crate::server`].

use std::collections::BTreeMap;
use std::time::Duration;

use coins_core::registry::{
    Alert, AvailabilityReport, DeviceDescriptor, DeviceRecord, NewRule, WarningRule,
};
use coins_core::run::{HookEvent, PipelineRun};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::pipeline::Notification;
use crate::repostore::ResultArtifact;
use crate::server::{
    ErrorBody, Health, HeartbeatBody, HeartbeatReply, HistogramQuery, PushBody, Pushed, Registered,
    SenseQuery, SenseReply, TagBody, Triggered,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach server at {addr}: {message}")]
    Connect { addr: String, message: String },
    #[error("{kind}: {message}")]
    NotFound { kind: String, message: String },
    #[error("{kind}: {message}")]
    Config { kind: String, message: String },
    #[error("{kind} ({status}): {message}")]
    Api {
        status: u16,
        kind: String,
        message: String,
    },
    #[error("bad reply: {0}")]
    Decode(String),
}

impl ClientError {
    /// 2 connectivity, 3 config, 4 not found, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Connect { .. } => 2,
            ClientError::Config { .. } => 3,
            ClientError::NotFound { .. } => 4,
            _ => 1,
        }
    }
}

pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    /// `addr` is `host:port` or a full `http://` URL.
    pub fn new(addr: &str) -> Self {
        let base = if addr.starts_with("http://") || addr.starts_with("https://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{addr}")
        };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self { base, agent }
    }

    fn connect_err(&self, e: ureq::Error) -> ClientError {
        ClientError::Connect {
            addr: self.base.clone(),
            message: e.to_string(),
        }
    }

    fn finish(&self, mut resp: ureq::http::Response<ureq::Body>) -> Result<String, ClientError> {
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| self.connect_err(e))?;
        if status < 400 {
            return Ok(text);
        }
        let (kind, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.kind, b.error),
            Err(_) => (format!("HTTP{status}"), text),
        };
        Err(match status {
            404 => ClientError::NotFound { kind, message },
            _ => ClientError::Api {
                status,
                kind,
                message,
            },
        })
    }

    fn decode<T: DeserializeOwned>(text: &str) -> Result<T, ClientError> {
        serde_json::from_str(text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn get_text(&self, path: &str) -> Result<String, ClientError> {
        let resp = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .map_err(|e| self.connect_err(e))?;
        self.finish(resp)
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(&self.get_text(path)?)
    }

    pub fn post_text<B: Serialize>(&self, path: &str, body: &B) -> Result<String, ClientError> {
        let resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .send_json(body)
            .map_err(|e| self.connect_err(e))?;
        self.finish(resp)
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, ClientError> {
        Self::decode(&self.post_text(path, body)?)
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        self.get("/health")
    }

    pub fn devices(
        &self,
        node_type: Option<&str>,
        env: Option<&str>,
        state: Option<&str>,
    ) -> Result<Vec<DeviceRecord>, ClientError> {
        let mut q = Vec::new();
        for (k, v) in [("type", node_type), ("env", env), ("state", state)] {
            if let Some(v) = v {
                q.push(format!("{k}={v}"));
            }
        }
        let path = if q.is_empty() {
            "/devices".to_string()
        } else {
            format!("/devices?{}", q.join("&"))
        };
        self.get(&path)
    }

    pub fn device(&self, id: &str) -> Result<DeviceRecord, ClientError> {
        self.get(&format!("/devices/{id}"))
    }

    pub fn register(&self, d: &DeviceDescriptor) -> Result<Registered, ClientError> {
        self.post("/devices", d)
    }

    pub fn heartbeat(
        &self,
        id: &str,
        metrics: BTreeMap<String, f64>,
    ) -> Result<HeartbeatReply, ClientError> {
        self.post(
            &format!("/devices/{id}/heartbeat"),
            &HeartbeatBody { metrics },
        )
    }

    pub fn availability(&self) -> Result<AvailabilityReport, ClientError> {
        self.get("/availability")
    }

    pub fn sweep(&self) -> Result<AvailabilityReport, ClientError> {
        self.post("/availability/sweep", &())
    }

    pub fn add_rule(&self, r: &NewRule) -> Result<WarningRule, ClientError> {
        self.post("/warnings", r)
    }

    pub fn alerts(&self) -> Result<Vec<Alert>, ClientError> {
        self.get("/alerts")
    }

    pub fn push(
        &self,
        files: BTreeMap<String, Vec<u8>>,
        parent: Option<String>,
        git_ref: Option<String>,
    ) -> Result<Pushed, ClientError> {
        self.post(
            "/commits",
            &PushBody {
                files,
                parent,
                git_ref,
            },
        )
    }

    pub fn tag(&self, commit: &str, tag: &str) -> Result<TagBody, ClientError> {
        self.post(
            "/tags",
            &TagBody {
                commit: commit.into(),
                tag: tag.into(),
            },
        )
    }

    pub fn hook(&self, ev: &HookEvent) -> Result<Triggered, ClientError> {
        self.post("/hooks", ev)
    }

    pub fn run(&self, id: &str) -> Result<PipelineRun, ClientError> {
        self.get(&format!("/runs/{id}"))
    }

    pub fn runs(&self) -> Result<Vec<PipelineRun>, ClientError> {
        self.get("/runs")
    }

    pub fn notification(&self, id: &str) -> Result<Notification, ClientError> {
        self.get(&format!("/runs/{id}/notification"))
    }

    pub fn results(&self, commit: &str) -> Result<Vec<String>, ClientError> {
        self.get(&format!("/commits/{commit}/results"))
    }

    pub fn result(&self, commit: &str, run: &str) -> Result<ResultArtifact, ClientError> {
        self.get(&format!("/commits/{commit}/results/{run}"))
    }

    pub fn sense(&self, q: &SenseQuery) -> Result<SenseReply, ClientError> {
        self.post("/sense", q)
    }

    pub fn histogram(&self, q: &HistogramQuery) -> Result<String, ClientError> {
        self.post_text("/histogram", q)
    }
}
