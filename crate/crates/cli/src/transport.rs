//! Blocking HTTP clients for the activation and admin endpoints.

use std::time::Duration;

use ecakp_core::client::{ActivationTransport, TransportError};
use ecakp_core::guard::NetworkGate;
use ecakp_core::licensing::ServerPublicKey;
use ecakp_core::server::{ActivationRequest, ActivationResponse, PolicyMode};
use ecakp_core::ContentId;
use serde::de::DeserializeOwned;
use ureq::http::Response;
use ureq::{Agent, Body};

use crate::api::{ProductStats, RegisterProduct, ServerKeyBody};

fn agent() -> Agent {
    Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

fn base_url(server: &str) -> String {
    let s = server.trim_end_matches('/');
    if s.contains("://") {
        s.to_owned()
    } else {
        format!("http://{s}")
    }
}

fn send_error(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound => TransportError::retryable(e.to_string()),
        other => TransportError::fatal(other.to_string()),
    }
}

fn decode<T: DeserializeOwned>(mut resp: Response<Body>) -> Result<T, TransportError> {
    let status = resp.status();
    if status.is_success() {
        return resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::fatal(format!("malformed server response: {e}")));
    }
    let detail = resp
        .body_mut()
        .read_json::<serde_json::Value>()
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_owned))
        .unwrap_or_default();
    let msg = format!("server answered {status}: {detail}");
    if status.is_server_error() {
        Err(TransportError::retryable(msg))
    } else {
        Err(TransportError::fatal(msg))
    }
}

/// Client-side activation transport. Every call checks the network gate
/// before opening a connection.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    base: String,
    agent: Agent,
    gate: NetworkGate,
}

impl HttpTransport {
    pub fn new(server: &str, gate: NetworkGate) -> Self {
        Self { base: base_url(server), agent: agent(), gate }
    }

    fn open(&self) -> Result<(), TransportError> {
        self.gate.check().map_err(|e| TransportError::fatal(e.to_string()))
    }

    pub fn server_key(&self) -> Result<ServerPublicKey, TransportError> {
        self.open()?;
        let resp = self.agent.get(format!("{}/v1/server-key", self.base)).call().map_err(send_error)?;
        let body: ServerKeyBody = decode(resp)?;
        ServerPublicKey::parse_hex(&body.public_key).map_err(|e| TransportError::fatal(e.to_string()))
    }
}

impl ActivationTransport for HttpTransport {
    fn send(&self, req: &ActivationRequest) -> Result<ActivationResponse, TransportError> {
        self.open()?;
        let resp = self.agent.post(format!("{}/v1/activate", self.base)).send_json(req).map_err(send_error)?;
        decode(resp)
    }
}

/// Bearer-authenticated product administration.
#[derive(Debug, Clone)]
pub struct AdminClient {
    base: String,
    token: String,
    agent: Agent,
}

impl AdminClient {
    pub fn new(server: &str, token: impl Into<String>) -> Self {
        Self { base: base_url(server), token: token.into(), agent: agent() }
    }

    fn bearer(&self) -> String {
        format!("Bearer {}", self.token)
    }

    pub fn register(&self, body: &RegisterProduct) -> Result<(), TransportError> {
        let resp = self
            .agent
            .post(format!("{}/v1/products", self.base))
            .header("Authorization", self.bearer())
            .send_json(body)
            .map_err(send_error)?;
        decode::<serde_json::Value>(resp).map(|_| ())
    }

    pub fn set_policy(&self, id: ContentId, policy: PolicyMode) -> Result<(), TransportError> {
        let resp = self
            .agent
            .put(format!("{}/v1/products/{id}/policy", self.base))
            .header("Authorization", self.bearer())
            .send_json(policy)
            .map_err(send_error)?;
        decode::<serde_json::Value>(resp).map(|_| ())
    }

    pub fn stats(&self, id: ContentId) -> Result<ProductStats, TransportError> {
        let resp = self
            .agent
            .get(format!("{}/v1/products/{id}/stats", self.base))
            .header("Authorization", self.bearer())
            .call()
            .map_err(send_error)?;
        decode(resp)
    }
}
