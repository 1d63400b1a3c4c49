use std::time::Duration;

use oval_core::backend::{HttpReply, Transport, TransportError, WireBackend};
use oval_core::grasp::{plan_with_fallback, CameraIntrinsics, GraspError, GraspPose};
use oval_core::{BackendConfig, BackendError, BinaryMask, DepthImage, Endpoint};
use reqwest::blocking::Client;
use reqwest::header::CONTENT_TYPE;

/// Blocking reqwest transport; one URL per endpoint.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: Client,
    urls: [Option<String>; 4],
    api_key: Option<String>,
}

pub type HttpBackend = WireBackend<HttpTransport>;

fn client(timeout_secs: f64) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(Duration::from_secs_f64(timeout_secs))
        .build()
        .map_err(|e| BackendError::ConfigViolation(format!("http client: {e}")))
}

impl HttpTransport {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let mut urls: [Option<String>; 4] = Default::default();
        for endpoint in Endpoint::ALL {
            urls[endpoint as usize] = config.url(endpoint).map(str::to_string);
        }
        Ok(Self {
            client: client(config.request_timeout_secs)?,
            urls,
            api_key: config.api_key.clone(),
        })
    }

    /// Transport that only knows the grasp planner.
    pub fn planner(url: &str, config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let mut urls: [Option<String>; 4] = Default::default();
        urls[Endpoint::PlanGrasp as usize] = Some(planner_endpoint_url(url));
        Ok(Self {
            client: client(config.request_timeout_secs)?,
            urls,
            api_key: config.api_key.clone(),
        })
    }

    pub fn url(&self, endpoint: Endpoint) -> Option<&str> {
        self.urls[endpoint as usize].as_deref()
    }
}

/// Accepts either a service base (`http://host:port`) or the full endpoint URL.
pub fn planner_endpoint_url(url: &str) -> String {
    let url = url.trim().trim_end_matches('/');
    let path = Endpoint::PlanGrasp.path();
    if url.ends_with(path) {
        url.to_string()
    } else {
        format!("{url}{path}")
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: Endpoint, body: &[u8]) -> Result<HttpReply, TransportError> {
        let Some(url) = self.url(endpoint) else {
            return Err(TransportError {
                reason: format!("no URL configured for {}", endpoint.path()),
            });
        };
        let mut req = self
            .client
            .post(url)
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError { reason: error_chain(&e) })?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| TransportError { reason: error_chain(&e) })?;
        Ok(HttpReply {
            status,
            body: body.to_vec(),
        })
    }

    fn describe(&self, endpoint: Endpoint) -> String {
        self.url(endpoint).unwrap_or(endpoint.path()).to_string()
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        out.push_str(": ");
        out.push_str(&s.to_string());
        cur = s.source();
    }
    out
}

impl HttpTransport {
    pub fn backend(config: &BackendConfig) -> Result<HttpBackend, BackendError> {
        WireBackend::new(HttpTransport::new(config)?, config)
    }
}

/// Plans through the external service at `planner_url`; with `fallback`,
/// an unreachable planner falls back to the built-in top-down planner.
pub fn plan_via_external(
    mask: &BinaryMask,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    planner_url: &str,
    config: &BackendConfig,
    fallback: bool,
) -> Result<GraspPose, GraspError> {
    let transport = HttpTransport::planner(planner_url, config)?;
    plan_with_fallback(&transport, &config.retry_policy(), mask, depth, k, fallback)
}
