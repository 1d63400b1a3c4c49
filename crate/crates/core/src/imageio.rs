//! PNG encode/decode for RGB images, masks, 16-bit depth and heatmaps.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::DynamicImage;
use thiserror::Error;

use crate::model::{BinaryMask, DepthImage, ModelError, RgbImage, SaliencyMap};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("decode failed: {0}")]
    Decode(String),
    #[error("encode failed: {0}")]
    Encode(String),
    #[error("unsupported format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, ImageIoError> {
    std::fs::read(path).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageIoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ImageIoError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn decode_dynamic(bytes: &[u8]) -> Result<DynamicImage, ImageIoError> {
    image::load_from_memory(bytes).map_err(|e| ImageIoError::Decode(e.to_string()))
}

/// Decodes any supported 8-bit image into RGB, dropping alpha.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, ImageIoError> {
    let img = decode_dynamic(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, ImageIoError> {
    decode_rgb(&read_file(path)?)
}

/// `(keyword, text)` pairs written as PNG tEXt chunks.
pub type TextChunks<'a> = &'a [(&'a str, &'a str)];

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    text: TextChunks<'_>,
) -> Result<Vec<u8>, ImageIoError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Balanced);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string())
                .map_err(|e| ImageIoError::Encode(e.to_string()))?;
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| ImageIoError::Encode(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| ImageIoError::Encode(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| ImageIoError::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_rgb_png(img: &RgbImage, text: TextChunks<'_>) -> Result<Vec<u8>, ImageIoError> {
    encode_png(
        img.width(),
        img.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        img.pixels(),
        text,
    )
}

pub fn rgb_to_png_b64(img: &RgbImage) -> Result<String, ImageIoError> {
    Ok(B64.encode(encode_rgb_png(img, &[])?))
}

pub fn rgb_from_png_b64(data: &str) -> Result<RgbImage, ImageIoError> {
    let bytes = B64
        .decode(data.trim())
        .map_err(|e| ImageIoError::Decode(format!("base64: {e}")))?;
    decode_rgb(&bytes)
}

/// Mask as 8-bit grayscale with foreground 255.
pub fn encode_mask_png(mask: &BinaryMask, text: TextChunks<'_>) -> Result<Vec<u8>, ImageIoError> {
    let data: Vec<u8> = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    encode_png(
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
        text,
    )
}

/// Any nonzero luma value counts as foreground.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask, ImageIoError> {
    let img = decode_dynamic(bytes)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(BinaryMask::new(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|x| x > 0).collect(),
    )?)
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask, ImageIoError> {
    decode_mask_png(&read_file(path)?)
}

fn decode_gray16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), ImageIoError> {
    match decode_dynamic(bytes)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok((w as usize, h as usize, img.into_raw()))
        }
        other => Err(ImageIoError::Format(format!(
            "expected 16-bit single-channel PNG, got {:?}",
            other.color()
        ))),
    }
}

fn encode_gray16(width: usize, height: usize, values: &[u16], text: TextChunks<'_>) -> Result<Vec<u8>, ImageIoError> {
    let data: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_png(
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
        text,
    )
}

/// 16-bit depth PNG in millimeters; zero stays zero (no return).
pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthImage, ImageIoError> {
    let (w, h, raw) = decode_gray16(bytes)?;
    Ok(DepthImage::new(
        w,
        h,
        raw.into_iter().map(|mm| mm as f64 / 1000.0).collect(),
    )?)
}

pub fn load_depth_png(path: &Path) -> Result<DepthImage, ImageIoError> {
    decode_depth_png(&read_file(path)?)
}

/// Depth rounded to whole millimeters and clamped to the 16-bit range.
pub fn encode_depth_png(depth: &DepthImage) -> Result<Vec<u8>, ImageIoError> {
    let mm: Vec<u16> = depth
        .values()
        .iter()
        .map(|m| (m * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    encode_gray16(depth.width(), depth.height(), &mm, &[])
}

/// Heatmap stored as 16-bit PNG over `[0, 65535]`, loaded as values in `[0, 1]`.
pub fn decode_heatmap_png(bytes: &[u8]) -> Result<SaliencyMap, ImageIoError> {
    let (w, h, raw) = decode_gray16(bytes)?;
    Ok(SaliencyMap::new(
        w,
        h,
        raw.into_iter().map(|x| x as f64 / u16::MAX as f64).collect(),
    )?)
}

pub fn load_heatmap_png(path: &Path) -> Result<SaliencyMap, ImageIoError> {
    decode_heatmap_png(&read_file(path)?)
}

/// Values are clamped to `[0, 1]` before quantization.
pub fn encode_heatmap_png(map: &SaliencyMap) -> Result<Vec<u8>, ImageIoError> {
    let q: Vec<u16> = map
        .values()
        .iter()
        .map(|x| (x.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16)
        .collect();
    encode_gray16(map.width(), map.height(), &q, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_units_and_invalid_marker() {
        let d = DepthImage::new(3, 1, vec![1.5, 0.0, 0.25]).unwrap();
        let back = decode_depth_png(&encode_depth_png(&d).unwrap()).unwrap();
        assert_eq!(back.values(), &[1.5, 0.0, 0.25]);
        assert_eq!(back.at(0, 0), Some(1.5));
        assert_eq!(back.at(1, 0), None);
    }

    #[test]
    fn depth_rejects_eight_bit_and_rgb() {
        let m = BinaryMask::full(2, 2).unwrap();
        let eight = encode_mask_png(&m, &[]).unwrap();
        assert!(matches!(decode_depth_png(&eight), Err(ImageIoError::Format(_))));
        let rgb = encode_rgb_png(&RgbImage::filled(2, 2, [1, 2, 3]).unwrap(), &[]).unwrap();
        assert!(matches!(decode_depth_png(&rgb), Err(ImageIoError::Format(_))));
    }

    #[test]
    fn gradient_depth_extremes() {
        let values: Vec<f64> = (0..16).map(|i| 0.5 + 0.1 * i as f64).collect();
        let d = DepthImage::new(4, 4, values).unwrap();
        let back = decode_depth_png(&encode_depth_png(&d).unwrap()).unwrap();
        let min = back.values().iter().copied().fold(f64::INFINITY, f64::min);
        let max = back.values().iter().copied().fold(0.0, f64::max);
        assert_eq!(min, 0.5);
        assert_eq!(max, 2.0);
    }

    #[test]
    fn rgb_and_mask_roundtrip() {
        let mut img = RgbImage::filled(5, 3, [10, 20, 30]).unwrap();
        img.set(4, 2, [255, 0, 7]);
        let b64 = rgb_to_png_b64(&img).unwrap();
        assert_eq!(rgb_from_png_b64(&b64).unwrap(), img);
        let m = BinaryMask::from_fn(5, 3, |u, v| u == v).unwrap();
        let bytes = encode_mask_png(&m, &[("provenance", "x")]).unwrap();
        assert_eq!(decode_mask_png(&bytes).unwrap(), m);
        assert_eq!(bytes, encode_mask_png(&m, &[("provenance", "x")]).unwrap());
        assert!(rgb_from_png_b64("not base64!").is_err());
    }
}
