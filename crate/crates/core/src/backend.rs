//! Backend capabilities (object detection, part segmentation, chat) and the
//! JSON-over-HTTP wire client shared by the real HTTP transport and the
//! in-process mock.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio;
use crate::model::{BinaryMask, Detection, RgbImage};
use crate::wire::{
    ChatRequest, ChatResponse, DetectRequest, DetectResponse, ErrorBody, SegmentRequest,
    SegmentResponse, WireImage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Detect,
    Segment,
    Chat,
    PlanGrasp,
}

impl Endpoint {
    pub const ALL: [Endpoint; 4] = [
        Endpoint::Detect,
        Endpoint::Segment,
        Endpoint::Chat,
        Endpoint::PlanGrasp,
    ];

    pub fn path(&self) -> &'static str {
        match self {
            Endpoint::Detect => "/v1/detect",
            Endpoint::Segment => "/v1/segment",
            Endpoint::Chat => "/v1/chat",
            Endpoint::PlanGrasp => "/v1/plan_grasp",
        }
    }

    pub fn from_path(path: &str) -> Option<Endpoint> {
        Endpoint::ALL.into_iter().find(|e| e.path() == path)
    }

    pub(crate) fn index(&self) -> usize {
        *self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCandidate {
    pub part_label: String,
    pub confidence: f64,
    pub mask: BinaryMask,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable at {endpoint}: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol {
        endpoint: String,
        message: String,
        body: String,
    },
    #[error("rate limited by {endpoint} after retries")]
    RateLimited { endpoint: String },
    #[error("{endpoint} returned HTTP {status}: {body}")]
    Http {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("no scripted reply for prompt fingerprint {fingerprint}")]
    UnscriptedPrompt { fingerprint: String },
    #[error("{endpoint} does not know the submitted image")]
    UnknownImage { endpoint: String },
    #[error("config violation: {0}")]
    ConfigViolation(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl BackendError {
    /// Transport-level failures (as opposed to contract or usage errors).
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            BackendError::Unreachable { .. }
                | BackendError::RateLimited { .. }
                | BackendError::Http { .. }
        )
    }
}

pub trait Backend: Send + Sync {
    fn detect_objects(
        &self,
        image: &RgbImage,
        candidate_labels: &[String],
    ) -> Result<Vec<Detection>, BackendError>;

    /// Candidates sorted by descending confidence; an empty list means the
    /// part was not found.
    fn segment_part(
        &self,
        image: &RgbImage,
        part_query: &str,
    ) -> Result<Vec<SegmentCandidate>, BackendError>;

    /// Returns the assistant text verbatim.
    fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn detect_objects(&self, image: &RgbImage, labels: &[String]) -> Result<Vec<Detection>, BackendError> {
        (**self).detect_objects(image, labels)
    }
    fn segment_part(&self, image: &RgbImage, q: &str) -> Result<Vec<SegmentCandidate>, BackendError> {
        (**self).segment_part(image, q)
    }
    fn chat(&self, messages: &[ChatMessage], t: f64) -> Result<String, BackendError> {
        (**self).chat(messages, t)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn detect_objects(&self, image: &RgbImage, labels: &[String]) -> Result<Vec<Detection>, BackendError> {
        (**self).detect_objects(image, labels)
    }
    fn segment_part(&self, image: &RgbImage, q: &str) -> Result<Vec<SegmentCandidate>, BackendError> {
        (**self).segment_part(image, q)
    }
    fn chat(&self, messages: &[ChatMessage], t: f64) -> Result<String, BackendError> {
        (**self).chat(messages, t)
    }
}

pub const ENV_API_KEY: &str = "OVAL_API_KEY";
pub const ENV_BACKEND_BASE: &str = "OVAL_BACKEND_BASE";

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_floor() -> f64 {
    0.5
}
fn default_base_delay() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub detect_url: String,
    pub segment_url: String,
    pub chat_url: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub chat_temperature: f64,
    /// Carried for the pipeline's filter step; the gateway never applies it.
    #[serde(default = "default_floor")]
    pub detect_confidence_floor: f64,
    #[serde(default = "default_base_delay")]
    pub retry_base_delay_secs: f64,
    #[serde(default = "default_true")]
    pub retry_jitter: bool,
    #[serde(default = "default_in_flight")]
    pub max_in_flight_chat: usize,
}

impl BackendConfig {
    pub fn with_base(base: &str) -> Self {
        let base = base.trim_end_matches('/');
        BackendConfig {
            detect_url: format!("{base}{}", Endpoint::Detect.path()),
            segment_url: format!("{base}{}", Endpoint::Segment.path()),
            chat_url: format!("{base}{}", Endpoint::Chat.path()),
            api_key: None,
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            chat_temperature: 0.0,
            detect_confidence_floor: default_floor(),
            retry_base_delay_secs: default_base_delay(),
            retry_jitter: true,
            max_in_flight_chat: default_in_flight(),
        }
    }

    /// Applies `OVAL_BACKEND_BASE` and `OVAL_API_KEY` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(base) = lookup(ENV_BACKEND_BASE).filter(|b| !b.trim().is_empty()) {
            let b = BackendConfig::with_base(base.trim());
            self.detect_url = b.detect_url;
            self.segment_url = b.segment_url;
            self.chat_url = b.chat_url;
        }
        if let Some(key) = lookup(ENV_API_KEY).filter(|k| !k.is_empty()) {
            self.api_key = Some(key);
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::ConfigViolation(m.to_string()));
        if !(self.chat_temperature >= 0.0) {
            return bad("chat_temperature must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.detect_confidence_floor) {
            return bad("detect_confidence_floor must lie in [0, 1]");
        }
        if !(self.request_timeout_secs > 0.0) {
            return bad("request_timeout_secs must be > 0");
        }
        if !(self.retry_base_delay_secs >= 0.0) {
            return bad("retry_base_delay_secs must be >= 0");
        }
        if self.max_in_flight_chat == 0 {
            return bad("max_in_flight_chat must be >= 1");
        }
        Ok(())
    }

    pub fn url(&self, endpoint: Endpoint) -> Option<&str> {
        match endpoint {
            Endpoint::Detect => Some(&self.detect_url),
            Endpoint::Segment => Some(&self.segment_url),
            Endpoint::Chat => Some(&self.chat_url),
            Endpoint::PlanGrasp => None,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_secs_f64(self.retry_base_delay_secs),
            jitter: self.retry_jitter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub jitter: bool,
}

impl RetryPolicy {
    /// `base × 2^attempt`, plus up to 25% uniform jitter when enabled.
    pub fn delay(&self, attempt: u32) -> Duration {
        let d = self.base_delay.mul_f64(2f64.powi(attempt as i32));
        if self.jitter && !d.is_zero() {
            d + d.mul_f64(rand::rng().random_range(0.0..0.25))
        } else {
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub reason: String,
}

/// One POST of a JSON body to an endpoint.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: Endpoint, body: &[u8]) -> Result<HttpReply, TransportError>;

    /// Human-readable location used in error messages.
    fn describe(&self, endpoint: Endpoint) -> String {
        endpoint.path().to_string()
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn post(&self, endpoint: Endpoint, body: &[u8]) -> Result<HttpReply, TransportError> {
        (**self).post(endpoint, body)
    }
    fn describe(&self, endpoint: Endpoint) -> String {
        (**self).describe(endpoint)
    }
}

struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

/// Speaks the wire protocol over any [`Transport`], enforcing the client-side
/// contract: retries with exponential backoff, the pinned chat temperature,
/// the chat in-flight bound and response validation.
pub struct WireBackend<T> {
    transport: T,
    retry: RetryPolicy,
    chat_temperature: f64,
    in_flight: InFlight,
}

impl<T: Transport> WireBackend<T> {
    pub fn new(transport: T, config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            transport,
            retry: config.retry_policy(),
            chat_temperature: config.chat_temperature,
            in_flight: InFlight {
                limit: config.max_in_flight_chat,
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
        })
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// POST with retries on transport failures, 429 and 5xx replies.
    pub fn send(&self, endpoint: Endpoint, body: &[u8]) -> Result<HttpReply, BackendError> {
        send_with_retry(&self.transport, &self.retry, endpoint, body)
    }

    fn protocol(&self, endpoint: Endpoint, message: impl Into<String>, body: &[u8]) -> BackendError {
        BackendError::Protocol {
            endpoint: self.transport.describe(endpoint),
            message: message.into(),
            body: String::from_utf8_lossy(body).into_owned(),
        }
    }

    fn exchange<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        endpoint: Endpoint,
        request: &Req,
    ) -> Result<(Resp, Vec<u8>), BackendError> {
        let body = serde_json::to_vec(request).expect("wire types serialize");
        let reply = self.send(endpoint, &body)?;
        if reply.status != 200 {
            return Err(error_from_reply(&self.transport.describe(endpoint), &reply));
        }
        let parsed = serde_json::from_slice(&reply.body)
            .map_err(|e| self.protocol(endpoint, format!("malformed response: {e}"), &reply.body))?;
        Ok((parsed, reply.body))
    }
}

pub fn send_with_retry<T: Transport + ?Sized>(
    transport: &T,
    retry: &RetryPolicy,
    endpoint: Endpoint,
    body: &[u8],
) -> Result<HttpReply, BackendError> {
    let mut attempt = 0;
    let last = loop {
        let outcome = transport.post(endpoint, body);
        match outcome {
            Ok(r) if r.status != 429 && r.status < 500 => return Ok(r),
            other if attempt >= retry.max_retries => break other,
            _ => {}
        }
        std::thread::sleep(retry.delay(attempt));
        attempt += 1;
    };
    let where_ = transport.describe(endpoint);
    Err(match last {
        Ok(r) if r.status == 429 => BackendError::RateLimited { endpoint: where_ },
        Ok(r) => error_from_reply(&where_, &r),
        Err(e) => BackendError::Unreachable {
            endpoint: where_,
            reason: e.reason,
        },
    })
}

fn error_from_reply(endpoint: &str, reply: &HttpReply) -> BackendError {
    let text = String::from_utf8_lossy(&reply.body).into_owned();
    if let Ok(err) = serde_json::from_slice::<ErrorBody>(&reply.body) {
        match err.error.as_str() {
            "unscripted_prompt" => {
                return BackendError::UnscriptedPrompt {
                    fingerprint: err.fingerprint.unwrap_or_default(),
                }
            }
            "unknown_image" => {
                return BackendError::UnknownImage {
                    endpoint: endpoint.to_string(),
                }
            }
            _ => {}
        }
    }
    BackendError::Http {
        endpoint: endpoint.to_string(),
        status: reply.status,
        body: text,
    }
}

fn wire_image(image: &RgbImage) -> Result<WireImage, BackendError> {
    Ok(WireImage {
        width: image.width(),
        height: image.height(),
        png_b64: imageio::rgb_to_png_b64(image)
            .map_err(|e| BackendError::Usage(format!("cannot encode image: {e}")))?,
    })
}

impl<T: Transport> Backend for WireBackend<T> {
    fn detect_objects(
        &self,
        image: &RgbImage,
        candidate_labels: &[String],
    ) -> Result<Vec<Detection>, BackendError> {
        if candidate_labels.is_empty() {
            return Err(BackendError::Usage("candidate_labels must not be empty".into()));
        }
        let request = DetectRequest {
            image: wire_image(image)?,
            candidate_labels: candidate_labels.to_vec(),
        };
        let (resp, raw): (DetectResponse, _) = self.exchange(Endpoint::Detect, &request)?;
        for d in &resp.detections {
            if !candidate_labels.iter().any(|l| *l == d.label) {
                return Err(self.protocol(
                    Endpoint::Detect,
                    format!("label {:?} is not among the candidate labels", d.label),
                    &raw,
                ));
            }
            d.validate(image.width(), image.height())
                .map_err(|e| self.protocol(Endpoint::Detect, e.to_string(), &raw))?;
        }
        Ok(resp.detections)
    }

    fn segment_part(
        &self,
        image: &RgbImage,
        part_query: &str,
    ) -> Result<Vec<SegmentCandidate>, BackendError> {
        if part_query.trim().is_empty() {
            return Err(BackendError::Usage("part query must not be empty".into()));
        }
        let request = SegmentRequest {
            image: wire_image(image)?,
            query: part_query.to_string(),
        };
        let (resp, raw): (SegmentResponse, _) = self.exchange(Endpoint::Segment, &request)?;
        let mut out = Vec::with_capacity(resp.candidates.len());
        for c in resp.candidates {
            if !(0.0..=1.0).contains(&c.confidence) {
                return Err(self.protocol(
                    Endpoint::Segment,
                    format!("candidate confidence {} outside [0, 1]", c.confidence),
                    &raw,
                ));
            }
            let mask = c
                .mask
                .decode()
                .map_err(|e| self.protocol(Endpoint::Segment, e.to_string(), &raw))?;
            if (mask.width(), mask.height()) != (image.width(), image.height()) {
                return Err(self.protocol(
                    Endpoint::Segment,
                    format!(
                        "mask is {}x{}, image is {}x{}",
                        mask.width(),
                        mask.height(),
                        image.width(),
                        image.height()
                    ),
                    &raw,
                ));
            }
            out.push(SegmentCandidate {
                part_label: c.part_label,
                confidence: c.confidence,
                mask,
            });
        }
        out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(out)
    }

    fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, BackendError> {
        if messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(BackendError::Usage(
                "chat needs at least one message and the last must come from the user".into(),
            ));
        }
        if temperature != self.chat_temperature {
            return Err(BackendError::ConfigViolation(format!(
                "chat temperature {temperature} differs from the pinned {}",
                self.chat_temperature
            )));
        }
        let _permit = self.in_flight.acquire();
        let request = ChatRequest {
            messages: messages.to_vec(),
            temperature,
        };
        let (resp, _): (ChatResponse, _) = self.exchange(Endpoint::Chat, &request)?;
        Ok(resp.content)
    }
}
