//! JSON bodies of the backend wire protocol.
//!
//! - `POST /v1/detect`     [`DetectRequest`] → [`DetectResponse`]
//! - `POST /v1/segment`    [`SegmentRequest`] → [`SegmentResponse`]
//! - `POST /v1/chat`       [`ChatRequest`] → [`ChatResponse`]
//! - `POST /v1/plan_grasp` [`PlanGraspRequest`] → [`PlanGraspResponse`]
//!
//! Non-200 replies carry an [`ErrorBody`].

use serde::{Deserialize, Serialize};

use crate::backend::ChatMessage;
use crate::model::Detection;
use crate::rle::RleMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireImage {
    pub width: usize,
    pub height: usize,
    pub png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequest {
    pub image: WireImage,
    pub candidate_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub image: WireImage,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub part_label: String,
    pub confidence: f64,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub candidates: Vec<WireCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanGraspRequest {
    pub mask: RleMask,
    pub depth_png_b64: String,
    pub intrinsics: WireIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanGraspResponse {
    pub position: [f64; 3],
    pub approach: [f64; 3],
    pub axis_angle: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl ErrorBody {
    pub fn new(error: &str, message: impl Into<String>) -> Self {
        ErrorBody {
            error: error.to_string(),
            message: message.into(),
            fingerprint: None,
        }
    }
}
