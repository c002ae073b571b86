//! Binary dump format and PNG helpers.
//!
//! Every float payload (depth, Cartesian maps, latents, attention caches) is
//! one line of JSON `{"w":…,"h":…,"c":…,"dtype":"f32"}`, a newline, then
//! `w*h*c` little-endian `f32` values in row-major, channel-interleaved order.

use std::io::Cursor;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageRgb, Mask, SegmentationMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Header<'a> {
    w: usize,
    h: usize,
    c: usize,
    dtype: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F32Blob {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl F32Blob {
    pub fn new(w: usize, h: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != w * h * c {
            return Err(Error::Codec(format!(
                "payload has {} values, header says {}x{}x{}",
                data.len(),
                w,
                h,
                c
            )));
        }
        Ok(F32Blob { w, h, c, data })
    }

    /// From f64 values; the narrowing is intentional.
    pub fn from_f64(w: usize, h: usize, c: usize, data: &[f64]) -> Result<Self> {
        F32Blob::new(w, h, c, data.iter().map(|v| *v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header {
            w: self.w,
            h: self.h,
            c: self.c,
            dtype: "f32",
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 1 + self.data.len() * 4);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Codec("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Codec(format!("bad header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::Codec(format!("unsupported dtype `{}`", header.dtype)));
        }
        let body = &bytes[nl + 1..];
        let n = header.w * header.h * header.c;
        if body.len() != n * 4 {
            return Err(Error::Codec(format!(
                "expected {} payload bytes, found {}",
                n * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        F32Blob::new(header.w, header.h, header.c, data)
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(self.encode())
    }

    pub fn from_base64(s: &str) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(|e| Error::Codec(format!("base64: {e}")))?;
        F32Blob::decode(&bytes)
    }
}

fn png_bytes(img: image::DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn image_to_png(img: &ImageRgb) -> Vec<u8> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("buffer matches dimensions");
    png_bytes(image::DynamicImage::ImageRgb8(buf))
}

pub fn image_from_png(bytes: &[u8]) -> Result<ImageRgb> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(format!("png: {e}")))?
        .to_rgb8();
    Ok(ImageRgb {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Masks are stored as 8-bit grayscale PNGs holding 0 or 255.
pub fn mask_to_png(m: &Mask) -> Vec<u8> {
    let data = m.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(m.width as u32, m.height as u32, data)
        .expect("buffer matches dimensions");
    png_bytes(image::DynamicImage::ImageLuma8(buf))
}

/// 8-bit gray PNG of `round(255·v)`; exact for masks whose values are
/// multiples of 1/255.
pub fn soft_mask_to_png(m: &SegmentationMask) -> Vec<u8> {
    let img = image::GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
        image::Luma([(m.get(x as usize, y as usize) * 255.0).round() as u8])
    });
    png_bytes(image::DynamicImage::ImageLuma8(img))
}

/// Decodes a grayscale PNG as a soft mask (`value / 255`).
pub fn soft_mask_from_png(bytes: &[u8]) -> Result<SegmentationMask> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(format!("png: {e}")))?
        .to_luma8();
    Ok(SegmentationMask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|v| *v as f64 / 255.0).collect(),
    })
}

pub fn mask_from_png(bytes: &[u8]) -> Result<Mask> {
    Ok(soft_mask_from_png(bytes)?.threshold(0.5))
}

pub fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn unb64(s: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Codec(format!("base64: {e}")))
}
