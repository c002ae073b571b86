//! Pixel containers shared by the renderer, the translation path, and the
//! metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary H×W mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }
}

/// Soft H×W mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SegmentationMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        SegmentationMask {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_mask(m: &Mask) -> Self {
        SegmentationMask {
            width: m.width,
            height: m.height,
            data: m.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn threshold(&self, t: f64) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| *v > t).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height {
            return Err(Error::validation("mask", "data length does not match dimensions"));
        }
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("mask", "values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageRgb {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageRgb { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, o: &ImageRgb) -> bool {
        self.width == o.width && self.height == o.height
    }

    /// Mean absolute per-channel difference in 8-bit units.
    pub fn mean_abs_diff(&self, o: &ImageRgb) -> f64 {
        assert!(self.same_dims(o));
        let total: u64 = self
            .data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| a.abs_diff(*b) as u64)
            .sum();
        total as f64 / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, o: &ImageRgb) -> u8 {
        assert!(self.same_dims(o));
        self.data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0)
    }
}

/// Inclusive integer pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox2D {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox2D {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        BBox2D {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min as f64 + self.x_max as f64) / 2.0,
            (self.y_min as f64 + self.y_max as f64) / 2.0,
        )
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn intersects(&self, o: &BBox2D) -> bool {
        self.x_min <= o.x_max && o.x_min <= self.x_max && self.y_min <= o.y_max && o.y_min <= self.y_max
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        (self.x_max as usize) < width && (self.y_max as usize) < height
    }

    /// `[x0, y0, x1, y1]`, the wire form used by plugins.
    pub fn to_array(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [u32; 4]) -> Result<Self> {
        if a[0] > a[2] || a[1] > a[3] {
            return Err(Error::validation("bbox", "min must not exceed max"));
        }
        Ok(BBox2D::new(a[0], a[1], a[2], a[3]))
    }
}

/// Tight inclusive box around the true pixels of `mask`.
pub fn fit_bbox2d(mask: &Mask) -> Result<BBox2D> {
    let mut b: Option<BBox2D> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                let (x, y) = (x as u32, y as u32);
                b = Some(match b {
                    None => BBox2D::new(x, y, x, y),
                    Some(b) => BBox2D::new(b.x_min.min(x), b.y_min.min(y), b.x_max.max(x), b.y_max.max(y)),
                });
            }
        }
    }
    b.ok_or(Error::EmptyMask)
}
