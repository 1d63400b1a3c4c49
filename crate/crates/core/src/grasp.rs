//! Top-down grasp synthesis from an affordance mask and a depth image.
//!
//! The built-in planner grasps at the mask centroid, takes the depth there as
//! the median of the valid values in a 5×5 window, and closes the gripper
//! across the mask's minor principal axis. The approach direction is always
//! straight down the camera's −z axis.

use std::f64::consts::{FRAC_PI_2, PI};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{send_with_retry, BackendError, Endpoint, RetryPolicy, Transport};
use crate::imageio;
use crate::model::{mask_centroid_and_axes, shape_check, BinaryMask, DepthImage, ModelError};
use crate::rle::RleMask;
use crate::wire::{PlanGraspRequest, PlanGraspResponse, WireIntrinsics};

pub const MIN_MASK_AREA: usize = 10;
pub const DEPTH_WINDOW: usize = 5;
pub const TOP_DOWN: [f64; 3] = [0.0, 0.0, -1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("invalid depth {0} m: must be > 0")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("mask has {area} pixels, need at least {MIN_MASK_AREA}")]
    MaskTooSmall { area: usize },
    #[error("no valid depth within the {DEPTH_WINDOW}x{DEPTH_WINDOW} window at pixel ({u}, {v})")]
    DepthHole { u: usize, v: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("planner returned an unusable grasp: {0}")]
    Planner(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GraspError> {
        let all_finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|x| x.is_finite());
        if !all_finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GraspError::Intrinsics(format!(
                "fx and fy must be positive and all values finite, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(u, v)` of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

impl From<CameraIntrinsics> for WireIntrinsics {
    fn from(k: CameraIntrinsics) -> Self {
        WireIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    /// Meters, camera frame.
    pub position: [f64; 3],
    /// Wrist rotation about the camera z axis, in `[−π/2, π/2)`.
    pub yaw: f64,
    pub approach: [f64; 3],
    /// Grasp pixel `(u, v)`; absent for externally planned grasps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel: Option<(f64, f64)>,
    /// The mask had no dominant axis, so `yaw` is 0 by convention.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
}

pub fn pixel_to_camera(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<[f64; 3], GraspError> {
    k.validate()?;
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GraspError::InvalidDepth(depth));
    }
    Ok([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])
}

/// Maps any angle onto the antipodal-equivalent representative in `[−π/2, π/2)`.
pub fn canonical_yaw(angle: f64) -> f64 {
    let a = (angle + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if a >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        a
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of the valid depth values in the window centred on `(u, v)`,
/// clipped to the image.
pub fn window_depth(depth: &DepthImage, u: usize, v: usize) -> Option<f64> {
    let r = DEPTH_WINDOW / 2;
    let mut vals: Vec<f64> = (v.saturating_sub(r)..=(v + r).min(depth.height() - 1))
        .flat_map(|y| (u.saturating_sub(r)..=(u + r).min(depth.width() - 1)).map(move |x| (x, y)))
        .filter_map(|(x, y)| depth.at(x, y))
        .collect();
    (!vals.is_empty()).then(|| median(&mut vals))
}

pub fn plan_topdown_grasp(mask: &BinaryMask, depth: &DepthImage, k: &CameraIntrinsics) -> Result<GraspPose, GraspError> {
    k.validate()?;
    shape_check((mask.width(), mask.height()), (depth.width(), depth.height()))?;
    let area = mask.area();
    if area < MIN_MASK_AREA {
        return Err(GraspError::MaskTooSmall { area });
    }
    let axes = mask_centroid_and_axes(mask)?;
    let (cu, cv) = axes.centroid;
    let (pu, pv) = (cu.round() as usize, cv.round() as usize);
    let z = window_depth(depth, pu, pv).ok_or(GraspError::DepthHole { u: pu, v: pv })?;
    let yaw = if axes.degenerate { 0.0 } else { canonical_yaw(axes.minor_angle) };
    Ok(GraspPose {
        position: pixel_to_camera(cu, cv, z, k)?,
        yaw,
        approach: TOP_DOWN,
        pixel: Some((cu, cv)),
        degenerate: axes.degenerate,
        quality: None,
    })
}

/// Converts a planner grasp into a top-down pick: position kept, approach
/// forced straight down, in-plane axis kept as the wrist yaw.
pub fn topdown_from_planner(resp: &PlanGraspResponse) -> Result<GraspPose, GraspError> {
    let finite = resp.position.iter().chain(&resp.approach).all(|x| x.is_finite())
        && resp.axis_angle.is_finite()
        && resp.quality.is_finite();
    if !finite {
        return Err(GraspError::Planner("non-finite values".into()));
    }
    if resp.position[2] <= 0.0 {
        return Err(GraspError::Planner(format!("z = {} is not in front of the camera", resp.position[2])));
    }
    Ok(GraspPose {
        position: resp.position,
        yaw: canonical_yaw(resp.axis_angle),
        approach: TOP_DOWN,
        pixel: None,
        degenerate: false,
        quality: Some(resp.quality),
    })
}

pub fn plan_grasp_request(mask: &BinaryMask, depth: &DepthImage, k: &CameraIntrinsics) -> Result<PlanGraspRequest, GraspError> {
    k.validate()?;
    shape_check((mask.width(), mask.height()), (depth.width(), depth.height()))?;
    let png = imageio::encode_depth_png(depth)
        .map_err(|e| GraspError::Planner(format!("cannot encode depth: {e}")))?;
    Ok(PlanGraspRequest {
        mask: RleMask::from(mask),
        depth_png_b64: B64.encode(png),
        intrinsics: (*k).into(),
    })
}

/// Asks an external planner over `transport`, then converts its answer.
pub fn plan_via_transport<T: Transport + ?Sized>(
    transport: &T,
    retry: &RetryPolicy,
    mask: &BinaryMask,
    depth: &DepthImage,
    k: &CameraIntrinsics,
) -> Result<GraspPose, GraspError> {
    let req = plan_grasp_request(mask, depth, k)?;
    let body = serde_json::to_vec(&req).expect("wire types serialize");
    let endpoint = Endpoint::PlanGrasp;
    let reply = send_with_retry(transport, retry, endpoint, &body)?;
    let text = String::from_utf8_lossy(&reply.body).into_owned();
    if reply.status != 200 {
        return Err(BackendError::Http {
            endpoint: transport.describe(endpoint),
            status: reply.status,
            body: text,
        }
        .into());
    }
    let resp: PlanGraspResponse = serde_json::from_slice(&reply.body).map_err(|e| BackendError::Protocol {
        endpoint: transport.describe(endpoint),
        message: format!("malformed response: {e}"),
        body: text,
    })?;
    topdown_from_planner(&resp)
}

/// External planning with an optional fall back to the built-in planner when
/// the planner cannot be reached.
pub fn plan_with_fallback<T: Transport + ?Sized>(
    transport: &T,
    retry: &RetryPolicy,
    mask: &BinaryMask,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    fallback: bool,
) -> Result<GraspPose, GraspError> {
    match plan_via_transport(transport, retry, mask, depth, k) {
        Err(GraspError::Backend(e)) if fallback && e.is_transport() => plan_topdown_grasp(mask, depth, k),
        other => other,
    }
}
