//! Deterministic scripted backend.
//!
//! A [`MockScript`] maps requests to canned responses. [`MockResponder`]
//! answers raw wire requests from a script; it backs both the HTTP mock
//! server and the in-process [`MockBackend`].
//!
//! Images are matched by content: the responder fingerprints each fixture
//! image listed in the script and looks incoming images up by the same
//! fingerprint. Chat prompts are matched by [`prompt_fingerprint`].

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendConfig, BackendError, Endpoint, HttpReply, Role, Transport, TransportError, WireBackend};
use crate::imageio::{self, ImageIoError};
use crate::model::{Detection, RgbImage};
use crate::wire::{
    ChatRequest, ChatResponse, DetectRequest, DetectResponse, ErrorBody, PlanGraspRequest,
    PlanGraspResponse, SegmentRequest, SegmentResponse, WireCandidate,
};

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot read script {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid script: {0}")]
    Invalid(String),
    #[error("fixture image {id:?}: {source}")]
    Image {
        id: String,
        #[source]
        source: ImageIoError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockImage {
    pub id: String,
    /// Relative to the script file.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub image: String,
    pub query: String,
    pub candidates: Vec<WireCandidate>,
}

/// A chat reply keyed either by the literal prompt text or by its fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub reply: String,
}

/// The first `count` requests to `endpoint` fail with `status`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub endpoint: Endpoint,
    pub status: u16,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub images: Vec<MockImage>,
    #[serde(default)]
    pub detect: BTreeMap<String, Vec<Detection>>,
    #[serde(default)]
    pub segment: Vec<SegmentEntry>,
    #[serde(default)]
    pub chat: Vec<ChatEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<Fault>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_grasp: Option<PlanGraspResponse>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<MockScript, MockError> {
        let text = std::fs::read_to_string(path).map_err(|e| MockError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| MockError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Lowercased, whitespace-collapsed SHA-256 over the concatenated message
/// contents, hex encoded.
pub fn prompt_fingerprint<'a>(contents: impl IntoIterator<Item = &'a str>) -> String {
    let joined = contents.into_iter().collect::<Vec<_>>().join("\n");
    let normalized = joined
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    hex(&Sha256::digest(normalized.as_bytes()))
}

pub fn image_fingerprint(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.height() as u64).to_le_bytes());
    h.update(image.pixels());
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase, trimmed, internal whitespace collapsed.
pub fn normalize_query(query: &str) -> String {
    query
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

struct ActiveFault {
    endpoint: Endpoint,
    status: u16,
    remaining: AtomicUsize,
}

pub struct MockResponder {
    images: HashMap<String, (String, usize, usize)>,
    detect: HashMap<String, Vec<Detection>>,
    segment: HashMap<(String, String), Vec<WireCandidate>>,
    chat: HashMap<String, usize>,
    chat_replies: Vec<String>,
    chat_hits: Vec<AtomicUsize>,
    faults: Vec<ActiveFault>,
    plan_grasp: Option<PlanGraspResponse>,
    total: AtomicUsize,
    per_endpoint: [AtomicUsize; 4],
}

impl std::fmt::Debug for MockResponder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockResponder")
            .field("images", &self.images.len())
            .field("chat_entries", &self.chat_replies.len())
            .field("requests", &self.request_count())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockReply {
    pub status: u16,
    pub body: Vec<u8>,
}

fn json_reply<T: Serialize>(status: u16, body: &T) -> MockReply {
    MockReply {
        status,
        body: serde_json::to_vec(body).expect("mock bodies serialize"),
    }
}

fn error_reply(status: u16, code: &str, message: impl Into<String>) -> MockReply {
    json_reply(status, &ErrorBody::new(code, message))
}

impl MockResponder {
    /// Loads the script and every fixture image it references.
    pub fn load(script_path: &Path) -> Result<MockResponder, MockError> {
        let script = MockScript::load(script_path)?;
        let base = script_path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(script.images.len());
        for img in &script.images {
            let rgb = imageio::load_rgb(&base.join(&img.path)).map_err(|source| MockError::Image {
                id: img.id.clone(),
                source,
            })?;
            images.push((img.id.clone(), rgb));
        }
        MockResponder::with_images(&script, &images)
    }

    /// Builds a responder from a script and already-decoded fixture images.
    pub fn with_images(script: &MockScript, images: &[(String, RgbImage)]) -> Result<MockResponder, MockError> {
        let bad = |m: String| Err(MockError::Invalid(m));
        let mut by_id: HashMap<&str, &RgbImage> = HashMap::new();
        for (id, img) in images {
            by_id.insert(id, img);
        }
        let mut fingerprints = HashMap::new();
        let mut dims = HashMap::new();
        for img in &script.images {
            let Some(rgb) = by_id.get(img.id.as_str()) else {
                return bad(format!("fixture image {:?} was not provided", img.id));
            };
            let fp = image_fingerprint(rgb);
            if let Some((other, _, _)) = fingerprints.insert(fp, (img.id.clone(), rgb.width(), rgb.height())) {
                return bad(format!("images {other:?} and {:?} have identical content", img.id));
            }
            dims.insert(img.id.as_str(), (rgb.width(), rgb.height()));
        }
        for id in script.detect.keys() {
            if !dims.contains_key(id.as_str()) {
                return bad(format!("detect entry references unknown image {id:?}"));
            }
        }
        let mut segment = HashMap::new();
        for entry in &script.segment {
            let Some(&(w, h)) = dims.get(entry.image.as_str()) else {
                return bad(format!("segment entry references unknown image {:?}", entry.image));
            };
            for c in &entry.candidates {
                let m = c
                    .mask
                    .decode()
                    .map_err(|e| MockError::Invalid(format!("segment {:?}: {e}", entry.query)))?;
                if (m.width(), m.height()) != (w, h) {
                    return bad(format!(
                        "segment {:?} on {:?}: mask {}x{} but image {w}x{h}",
                        entry.query,
                        entry.image,
                        m.width(),
                        m.height()
                    ));
                }
            }
            let key = (entry.image.clone(), normalize_query(&entry.query));
            if segment.insert(key, entry.candidates.clone()).is_some() {
                return bad(format!(
                    "duplicate segment entry for {:?} on {:?}",
                    entry.query, entry.image
                ));
            }
        }
        let mut chat = HashMap::new();
        let mut chat_replies = Vec::new();
        for entry in &script.chat {
            let fp = match (&entry.prompt, &entry.fingerprint) {
                (Some(p), None) => prompt_fingerprint([p.as_str()]),
                (None, Some(f)) => f.to_lowercase(),
                _ => return bad("chat entries need exactly one of prompt or fingerprint".into()),
            };
            match chat.get(&fp) {
                Some(&i) if chat_replies[i] != entry.reply => {
                    return bad(format!("conflicting replies for chat fingerprint {fp}"));
                }
                Some(_) => {}
                None => {
                    chat.insert(fp, chat_replies.len());
                    chat_replies.push(entry.reply.clone());
                }
            }
        }
        let chat_hits = chat_replies.iter().map(|_| AtomicUsize::new(0)).collect();
        Ok(MockResponder {
            images: fingerprints,
            detect: script.detect.clone().into_iter().collect(),
            segment,
            chat,
            chat_replies,
            chat_hits,
            faults: script
                .faults
                .iter()
                .map(|f| ActiveFault {
                    endpoint: f.endpoint,
                    status: f.status,
                    remaining: AtomicUsize::new(f.count),
                })
                .collect(),
            plan_grasp: script.plan_grasp.clone(),
            total: AtomicUsize::new(0),
            per_endpoint: Default::default(),
        })
    }

    pub fn request_count(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    pub fn endpoint_count(&self, endpoint: Endpoint) -> usize {
        self.per_endpoint[endpoint.index()].load(Ordering::SeqCst)
    }

    /// Times the reply for `prompt` has been served.
    pub fn chat_hits(&self, prompt: &str) -> usize {
        self.chat
            .get(&prompt_fingerprint([prompt]))
            .map(|&i| self.chat_hits[i].load(Ordering::SeqCst))
            .unwrap_or(0)
    }

    /// Answers one HTTP request.
    pub fn handle(&self, method: &str, path: &str, body: &[u8]) -> MockReply {
        self.total.fetch_add(1, Ordering::SeqCst);
        let Some(endpoint) = Endpoint::from_path(path) else {
            return error_reply(404, "not_found", format!("no route for {path}"));
        };
        self.per_endpoint[endpoint.index()].fetch_add(1, Ordering::SeqCst);
        if method != "POST" {
            return error_reply(405, "method_not_allowed", format!("{method} {path}"));
        }
        for fault in &self.faults {
            if fault.endpoint == endpoint
                && fault
                    .remaining
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |r| r.checked_sub(1))
                    .is_ok()
            {
                return error_reply(fault.status, "injected_fault", "scripted transient failure");
            }
        }
        match endpoint {
            Endpoint::Detect => self.detect(body),
            Endpoint::Segment => self.segment(body),
            Endpoint::Chat => self.chat(body),
            Endpoint::PlanGrasp => self.plan_grasp(body),
        }
    }

    fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, MockReply> {
        serde_json::from_slice(body).map_err(|e| error_reply(400, "bad_request", e.to_string()))
    }

    fn image_id(&self, image: &crate::wire::WireImage) -> Result<&str, MockReply> {
        let rgb = imageio::rgb_from_png_b64(&image.png_b64)
            .map_err(|e| error_reply(400, "bad_image", e.to_string()))?;
        if (rgb.width(), rgb.height()) != (image.width, image.height) {
            return Err(error_reply(
                400,
                "bad_image",
                format!(
                    "declared {}x{} but payload is {}x{}",
                    image.width,
                    image.height,
                    rgb.width(),
                    rgb.height()
                ),
            ));
        }
        self.images
            .get(&image_fingerprint(&rgb))
            .map(|(id, _, _)| id.as_str())
            .ok_or_else(|| error_reply(404, "unknown_image", "image is not part of the fixture set"))
    }

    fn detect(&self, body: &[u8]) -> MockReply {
        let req: DetectRequest = match Self::parse(body) {
            Ok(r) => r,
            Err(e) => return e,
        };
        if req.candidate_labels.is_empty() {
            return error_reply(400, "bad_request", "candidate_labels must not be empty");
        }
        let id = match self.image_id(&req.image) {
            Ok(id) => id,
            Err(e) => return e,
        };
        let detections = self.detect.get(id).cloned().unwrap_or_default();
        json_reply(200, &DetectResponse { detections })
    }

    fn segment(&self, body: &[u8]) -> MockReply {
        let req: SegmentRequest = match Self::parse(body) {
            Ok(r) => r,
            Err(e) => return e,
        };
        if req.query.trim().is_empty() {
            return error_reply(400, "bad_request", "query must not be empty");
        }
        let id = match self.image_id(&req.image) {
            Ok(id) => id,
            Err(e) => return e,
        };
        let candidates = self
            .segment
            .get(&(id.to_string(), normalize_query(&req.query)))
            .cloned()
            .unwrap_or_default();
        json_reply(200, &SegmentResponse { candidates })
    }

    fn chat(&self, body: &[u8]) -> MockReply {
        let req: ChatRequest = match Self::parse(body) {
            Ok(r) => r,
            Err(e) => return e,
        };
        if req.messages.last().map(|m| m.role) != Some(Role::User) {
            return error_reply(400, "bad_request", "last message must have role user");
        }
        if !(req.temperature.is_finite() && req.temperature >= 0.0) {
            return error_reply(400, "bad_request", "temperature must be a finite non-negative number");
        }
        let fp = prompt_fingerprint(req.messages.iter().map(|m| m.content.as_str()));
        match self.chat.get(&fp) {
            Some(&i) => {
                self.chat_hits[i].fetch_add(1, Ordering::SeqCst);
                json_reply(
                    200,
                    &ChatResponse {
                        content: self.chat_replies[i].clone(),
                    },
                )
            }
            None => {
                let mut err = ErrorBody::new("unscripted_prompt", format!("no reply scripted for {fp}"));
                err.fingerprint = Some(fp);
                json_reply(404, &err)
            }
        }
    }

    fn plan_grasp(&self, body: &[u8]) -> MockReply {
        let req: PlanGraspRequest = match Self::parse(body) {
            Ok(r) => r,
            Err(e) => return e,
        };
        if let Err(e) = req.mask.decode() {
            return error_reply(400, "bad_request", e.to_string());
        }
        match &self.plan_grasp {
            Some(resp) => json_reply(200, resp),
            None => error_reply(404, "not_found", "no grasp planner response scripted"),
        }
    }
}

impl Transport for MockResponder {
    fn post(&self, endpoint: Endpoint, body: &[u8]) -> Result<HttpReply, TransportError> {
        let r = self.handle("POST", endpoint.path(), body);
        Ok(HttpReply {
            status: r.status,
            body: r.body,
        })
    }

    fn describe(&self, endpoint: Endpoint) -> String {
        format!("mock{}", endpoint.path())
    }
}

/// In-process mock: the wire client talking straight to a responder.
pub type MockBackend = WireBackend<MockResponder>;

impl MockBackend {
    /// A retry-free, jitter-free client over `responder`.
    pub fn in_process(responder: MockResponder) -> Result<MockBackend, BackendError> {
        let mut config = BackendConfig::with_base("mock://");
        config.retry_base_delay_secs = 0.0;
        config.retry_jitter = false;
        WireBackend::new(responder, &config)
    }
}
