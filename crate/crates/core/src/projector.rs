//! Linear image ↔ latent projector standing in for an autoencoder.
//!
//! Each 8×8 RGB patch maps to one latent cell of 4 channels. The decoder's
//! columns are orthogonal with equal norm, so `encode(decode(z)) == z` up to
//! pixel clamping and rounding.

use crate::error::{Error, Result};
use crate::kernel::Latent;
use crate::raster::ImageRgb;

pub const PATCH: usize = 8;
const PATCH_DIM: usize = PATCH * PATCH * 3;
const AMPLITUDE: f64 = 48.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `PATCH_DIM × 4`, column-major by latent channel.
    columns: Vec<Vec<f64>>,
    norm_sq: f64,
}

impl Default for Projector {
    fn default() -> Self {
        Projector::new()
    }
}

impl Projector {
    pub fn new() -> Self {
        // luminance, red-blue, green, horizontal luminance ramp
        let pattern = |c: usize, idx: usize| -> f64 {
            let (pix, ch) = (idx / 3, idx % 3);
            let x = (pix % PATCH) as f64;
            match c {
                0 => 1.0,
                1 => [1.0, 0.0, -1.0][ch],
                2 => [-0.5, 1.0, -0.5][ch],
                _ => (x - 3.5) / 3.5,
            }
        };
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for c in 0..4 {
            let mut v: Vec<f64> = (0..PATCH_DIM).map(|i| pattern(c, i)).collect();
            for u in &columns {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / u.iter().map(|a| a * a).sum::<f64>();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= d * b;
                }
            }
            columns.push(v);
        }
        let s = AMPLITUDE * (PATCH_DIM as f64).sqrt();
        for v in columns.iter_mut() {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for a in v.iter_mut() {
                *a *= s / n;
            }
        }
        Projector {
            columns,
            norm_sq: s * s,
        }
    }

    pub fn latent_dims(width: usize, height: usize) -> Result<(usize, usize)> {
        if width % PATCH != 0 || height % PATCH != 0 {
            return Err(Error::validation("image", format!("dimensions must be multiples of {PATCH}")));
        }
        Ok((height / PATCH, width / PATCH))
    }

    pub fn encode(&self, img: &ImageRgb) -> Result<Latent> {
        let (lh, lw) = Self::latent_dims(img.width, img.height)?;
        let plane = lh * lw;
        let mut data = vec![0.0; 4 * plane];
        for cy in 0..lh {
            for cx in 0..lw {
                let mut acc = [0.0; 4];
                for py in 0..PATCH {
                    for px in 0..PATCH {
                        let rgb = img.get(cx * PATCH + px, cy * PATCH + py);
                        for (ch, v) in rgb.iter().enumerate() {
                            let idx = (py * PATCH + px) * 3 + ch;
                            let centered = *v as f64 - 127.5;
                            for (a, col) in acc.iter_mut().zip(&self.columns) {
                                *a += col[idx] * centered;
                            }
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    data[c * plane + cy * lw + cx] = a / self.norm_sq;
                }
            }
        }
        Latent::from_vec(4, lh, lw, data)
    }

    pub fn decode(&self, z: &Latent) -> Result<ImageRgb> {
        if z.channels != 4 {
            return Err(Error::validation("latent", "expected 4 channels"));
        }
        let (w, h) = (z.width * PATCH, z.height * PATCH);
        let mut img = ImageRgb::filled(w, h, [0, 0, 0]);
        for cy in 0..z.height {
            for cx in 0..z.width {
                let zc: Vec<f64> = (0..4).map(|c| z.get(c, cy, cx)).collect();
                for py in 0..PATCH {
                    for px in 0..PATCH {
                        let mut rgb = [0u8; 3];
                        for (ch, out) in rgb.iter_mut().enumerate() {
                            let idx = (py * PATCH + px) * 3 + ch;
                            let v: f64 = 127.5 + self.columns.iter().zip(&zc).map(|(col, a)| col[idx] * a).sum::<f64>();
                            *out = v.round().clamp(0.0, 255.0) as u8;
                        }
                        img.set(cx * PATCH + px, cy * PATCH + py, rgb);
                    }
                }
            }
        }
        Ok(img)
    }
}
