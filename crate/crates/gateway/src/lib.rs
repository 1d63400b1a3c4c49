//! Network side of the grounding stack: a blocking HTTP client for the
//! detection, segmentation, chat and grasp-planning services, and an HTTP
//! front for the scripted mock backend.

mod http;
pub mod schemas;
mod server;

pub use http::{plan_via_external, planner_endpoint_url, HttpBackend, HttpTransport};
pub use server::{serve_until_signal, MockServer};
