//! Artifact writing. Every artifact carries the effective config and the
//! content hashes of its inputs.

use std::path::Path;

use anyhow::{Context, Result};
use oval_core::imageio;
use oval_core::model::TraceRecord;
use oval_core::rle::RleMask;
use oval_core::{BinaryMask, GroundingResult, RgbImage};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const PNG_CONFIG_KEY: &str = "oval-config";
pub const PNG_INPUTS_KEY: &str = "oval-inputs";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifacts serialize");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// Compact JSON for PNG text chunks.
pub fn provenance_chunks(config: &Value, inputs: &Value) -> [(String, String); 2] {
    [
        (PNG_CONFIG_KEY.to_string(), config.to_string()),
        (PNG_INPUTS_KEY.to_string(), inputs.to_string()),
    ]
}

fn as_refs(chunks: &[(String, String); 2]) -> [(&str, &str); 2] {
    [
        (chunks[0].0.as_str(), chunks[0].1.as_str()),
        (chunks[1].0.as_str(), chunks[1].1.as_str()),
    ]
}

pub fn mask_png(mask: &BinaryMask, config: &Value, inputs: &Value) -> Result<Vec<u8>> {
    let chunks = provenance_chunks(config, inputs);
    Ok(imageio::encode_mask_png(mask, &as_refs(&chunks))?)
}

pub fn rgb_png(img: &RgbImage, config: &Value, inputs: &Value) -> Result<Vec<u8>> {
    let chunks = provenance_chunks(config, inputs);
    Ok(imageio::encode_rgb_png(img, &as_refs(&chunks))?)
}

/// Deterministic tint from the first bytes of the name's SHA-256, lifted so
/// it never comes out near-black.
pub fn affordance_color(name: &str) -> [u8; 3] {
    let d = Sha256::digest(name.as_bytes());
    [d[0] | 0x40, d[1] | 0x40, d[2] | 0x40]
}

/// Foreground pixels blended 50/50 with `color` (rounding half up).
pub fn overlay(rgb: &RgbImage, mask: &BinaryMask, color: [u8; 3]) -> RgbImage {
    let mut out = rgb.clone();
    for (u, v) in mask.foreground() {
        let p = rgb.get(u, v);
        let mix = |a: u8, b: u8| ((a as u16 + b as u16 + 1) / 2) as u8;
        out.set(u, v, [mix(p[0], color[0]), mix(p[1], color[1]), mix(p[2], color[2])]);
    }
    out
}

#[derive(Debug, Serialize)]
pub struct ResultView<'a> {
    pub status: &'static str,
    pub selected_object: Option<&'a str>,
    pub part_names_tried: &'a [String],
    pub mask_area: usize,
    pub mask: Option<RleMask>,
    pub trace: &'a [TraceRecord],
}

impl<'a> ResultView<'a> {
    pub fn of(result: &'a GroundingResult) -> Self {
        ResultView {
            status: result.status.as_str(),
            selected_object: result.selected_object.as_deref(),
            part_names_tried: &result.part_names_tried,
            mask_area: result.mask.as_ref().map_or(0, |m| m.area()),
            mask: result.mask.as_ref().map(RleMask::from),
            trace: &result.trace,
        }
    }
}

/// File-name-safe form of a sample id or affordance.
pub fn file_stem(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| {
            p.chars()
                .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') { c } else { '_' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("__")
}
