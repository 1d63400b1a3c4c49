//! Open-vocabulary affordance grounding engine.
//!
//! The pipeline asks a detection backend which known objects are in an image,
//! lets a language backend pick the object and part that afford a task, then
//! has a part-segmentation backend produce the binary affordance mask,
//! re-asking the language backend for alternative part names when
//! segmentation comes back empty. Masks are scored with a weighted F-measure
//! and saliency metrics, and can be turned into a top-down grasp.

pub mod backend;
pub mod dataset;
pub mod eval;
pub mod grasp;
pub mod imageio;
pub mod metrics;
pub mod mock;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod rle;
pub mod synth;
pub mod wire;

pub use backend::{Backend, BackendConfig, BackendError, ChatMessage, Endpoint, SegmentCandidate};
pub use model::{
    BinaryMask, ConfusionCounts, DepthImage, Detection, GroundingResult, GroundingStatus,
    RgbImage, SaliencyMap,
};
