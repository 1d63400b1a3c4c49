//! Published JSON schemas for every wire body, keyed by their `$id`.

use oval_core::Endpoint;

pub const COMMON_ID: &str = "oval://schemas/common.json";
pub const COMMON: &str = include_str!("../../../schemas/common.json");
pub const ERROR: &str = include_str!("../../../schemas/error.json");

pub fn request(endpoint: Endpoint) -> &'static str {
    match endpoint {
        Endpoint::Detect => include_str!("../../../schemas/detect_request.json"),
        Endpoint::Segment => include_str!("../../../schemas/segment_request.json"),
        Endpoint::Chat => include_str!("../../../schemas/chat_request.json"),
        Endpoint::PlanGrasp => include_str!("../../../schemas/plan_grasp_request.json"),
    }
}

pub fn response(endpoint: Endpoint) -> &'static str {
    match endpoint {
        Endpoint::Detect => include_str!("../../../schemas/detect_response.json"),
        Endpoint::Segment => include_str!("../../../schemas/segment_response.json"),
        Endpoint::Chat => include_str!("../../../schemas/chat_response.json"),
        Endpoint::PlanGrasp => include_str!("../../../schemas/plan_grasp_response.json"),
    }
}
