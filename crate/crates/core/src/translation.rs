//! Moving an already generated object: coarse localization from
//! cross-attention, fine segmentation, corner correspondences from Cartesian
//! maps, and the homography warp that builds the pasted image.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::denoiser::CrossAttnRecord;
use crate::error::{Error, Result};
use crate::raster::{fit_bbox2d, BBox2D, ImageRgb, Mask, SegmentationMask};
use crate::render::{project, CartesianMap};
use crate::scene::{Camera, Vec3};

/// Default fraction of steps that blend against the warped latents.
pub const DEFAULT_BLEND_FRACTION: f64 = 0.8;
pub const DEFAULT_COARSE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SNAP_RADIUS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationRequest {
    pub box_id: String,
    pub t: Vec3,
    #[serde(default = "default_blend_fraction")]
    pub blend_fraction: f64,
}

fn default_blend_fraction() -> f64 {
    DEFAULT_BLEND_FRACTION
}

impl TranslationRequest {
    pub fn validate(&self) -> Result<()> {
        if !self.t.is_finite() {
            return Err(Error::validation("t", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.blend_fraction) {
            return Err(Error::validation("blend_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of leading denoising steps that use the warp blend.
    pub fn blend_steps(&self, steps: usize) -> usize {
        ((self.blend_fraction * steps as f64).ceil() as usize).min(steps)
    }
}

/// Mean of the selected token's maps, upsampled (nearest) to `width × height`
/// and min-max normalized. A constant map normalizes to zeros.
pub fn accumulate_cross_attention(
    records: &[CrossAttnRecord],
    token_index: usize,
    width: usize,
    height: usize,
) -> Result<SegmentationMask> {
    if records.is_empty() {
        return Err(Error::validation("records", "must not be empty"));
    }
    let picked: Vec<&CrossAttnRecord> = records.iter().filter(|r| r.token_index == token_index).collect();
    let Some(first) = picked.first() else {
        return Err(Error::NotFound {
            kind: "prompt token",
            id: token_index.to_string(),
        });
    };
    let (gh, gw) = (first.grid_h, first.grid_w);
    if picked.iter().any(|r| (r.grid_h, r.grid_w) != (gh, gw) || r.map.len() != gh * gw) {
        return Err(Error::validation("records", "maps of one token must share a grid"));
    }
    if width % gw != 0 || height % gh != 0 {
        return Err(Error::validation("records", "token grid must divide the image"));
    }
    let mut mean = vec![0.0; gh * gw];
    for r in &picked {
        for (m, v) in mean.iter_mut().zip(&r.map) {
            *m += v;
        }
    }
    let n = picked.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let (fy, fx) = (height / gh, width / gw);
    let data = (0..width * height)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            if range > 1e-12 {
                (mean[(y / fy) * gw + x / fx] - lo) / range
            } else {
                0.0
            }
        })
        .collect();
    Ok(SegmentationMask { width, height, data })
}

/// Bounding box of the pixels at or above `threshold`.
pub fn coarse_to_bbox(map: &SegmentationMask, threshold: f64) -> Result<BBox2D> {
    let m = Mask {
        width: map.width,
        height: map.height,
        data: map.data.iter().map(|v| *v >= threshold).collect(),
    };
    fit_bbox2d(&m).map_err(|_| Error::SegmentationFailed(format!("no pixel reaches {threshold}")))
}

/// A fine segmenter given an image and a box prompt.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &ImageRgb, bbox: BBox2D) -> Result<SegmentationMask>;
}

/// Intersection of the box prompt with the object's rendered foreground.
#[derive(Debug, Clone)]
pub struct FallbackSegmenter {
    pub fg: Mask,
}

impl Segmenter for FallbackSegmenter {
    fn segment(&self, image: &ImageRgb, bbox: BBox2D) -> Result<SegmentationMask> {
        if (self.fg.width, self.fg.height) != (image.width, image.height) {
            return Err(Error::validation("fg", "mask must match the image"));
        }
        let m = Mask::from_fn(image.width, image.height, |x, y| {
            self.fg.get(x, y) && bbox.contains(x as u32, y as u32)
        });
        Ok(SegmentationMask::from_mask(&m))
    }
}

/// Returns the box prompt itself as the mask.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxSegmenter;

impl Segmenter for BoxSegmenter {
    fn segment(&self, image: &ImageRgb, bbox: BBox2D) -> Result<SegmentationMask> {
        let m = Mask::from_fn(image.width, image.height, |x, y| bbox.contains(x as u32, y as u32));
        Ok(SegmentationMask::from_mask(&m))
    }
}

pub fn refine_segmentation(image: &ImageRgb, bbox: BBox2D, segmenter: &dyn Segmenter) -> Result<SegmentationMask> {
    if !bbox.fits(image.width, image.height) {
        return Err(Error::validation("bbox", "must lie inside the image"));
    }
    let seg = segmenter.segment(image, bbox).map_err(|e| match e {
        e @ Error::SegmentationFailed(_) => e,
        other => Error::SegmentationFailed(other.to_string()),
    })?;
    if (seg.width, seg.height) != (image.width, image.height) {
        return Err(Error::SegmentationFailed("segmenter returned a mask of the wrong size".into()));
    }
    seg.validate().map_err(|e| Error::SegmentationFailed(e.to_string()))?;
    if seg.threshold(0.5).is_empty() {
        return Err(Error::SegmentationFailed("segmenter returned an empty mask".into()));
    }
    Ok(seg)
}

pub type PixelPair = ([f64; 2], [f64; 2]);

fn nearest_hit(c: &CartesianMap, x: usize, y: usize, radius: usize) -> Option<(usize, usize)> {
    if c.hit[y * c.width + x] {
        return Some((x, y));
    }
    let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(c.width - 1));
    let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(c.height - 1));
    let mut best: Option<((usize, usize), usize)> = None;
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            if !c.hit[yy * c.width + xx] {
                continue;
            }
            let d = xx.abs_diff(x).pow(2) + yy.abs_diff(y).pow(2);
            if d <= radius * radius && best.is_none_or(|(_, bd)| d < bd) {
                best = Some(((xx, yy), d));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Source/destination pixels for the four corners of `obj_bbox`
/// (clockwise from top-left).
///
/// Each corner is lifted to 3D at the depth of the box surface under it (or
/// the nearest surface pixel within `snap_radius`), moved by `t`, and
/// re-projected; the corner shifts by the projected displacement.
/// `c_hat` is only checked for compatibility.
pub fn correspondence_from_maps(
    c: &CartesianMap,
    c_hat: &CartesianMap,
    t: Vec3,
    obj_bbox: BBox2D,
    camera: &Camera,
    snap_radius: usize,
) -> Result<[PixelPair; 4]> {
    if (c.width, c.height) != (c_hat.width, c_hat.height)
        || (c.width, c.height) != (camera.width as usize, camera.height as usize)
    {
        return Err(Error::validation("cartesian", "maps must match the camera"));
    }
    if !obj_bbox.fits(c.width, c.height) {
        return Err(Error::validation("bbox", "must lie inside the image"));
    }
    let corners = [
        (obj_bbox.x_min, obj_bbox.y_min),
        (obj_bbox.x_max, obj_bbox.y_min),
        (obj_bbox.x_max, obj_bbox.y_max),
        (obj_bbox.x_min, obj_bbox.y_max),
    ];
    let mut out = [([0.0; 2], [0.0; 2]); 4];
    for (slot, (x, y)) in out.iter_mut().zip(corners) {
        let (x, y) = (x as usize, y as usize);
        let (hx, hy) = nearest_hit(c, x, y, snap_radius).ok_or_else(|| {
            Error::Correspondence(format!("corner ({x}, {y}) has no box surface within {snap_radius} px"))
        })?;
        let hit = c.at(hx, hy).expect("hit pixel");
        let w = if (hx, hy) == (x, y) {
            hit
        } else {
            camera.unproject(x as f64, y as f64, camera.to_camera(hit).z)
        };
        let (sx, sy, _) = project(camera, w)?;
        let (dx, dy, _) = project(camera, w + t)?;
        let src = [x as f64, y as f64];
        *slot = (src, [src[0] + (dx - sx), src[1] + (dy - sy)]);
    }
    Ok(out)
}

/// Subtracts `t` from every hit of a map rendered after translating by `t`.
pub fn align_cartesian(c_hat: &CartesianMap, t: Vec3) -> CartesianMap {
    CartesianMap {
        width: c_hat.width,
        height: c_hat.height,
        coords: c_hat
            .coords
            .iter()
            .zip(&c_hat.hit)
            .map(|(p, h)| if *h { *p - t } else { *p })
            .collect(),
        hit: c_hat.hit.clone(),
    }
}

/// Projective map of pixel coordinates, stored with `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    fn from_matrix(h: &Matrix3<f64>) -> Result<Self> {
        let s = h[(2, 2)];
        if s.abs() < 1e-12 {
            return Err(Error::Singular("homography has h33 = 0".into()));
        }
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = h[(r, c)] / s;
            }
        }
        let out = Homography { m };
        if out.det().abs() <= 1e-12 {
            return Err(Error::Singular("homography is not invertible".into()));
        }
        Ok(out)
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn det(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn is_identity(&self) -> bool {
        *self == Homography::IDENTITY
    }

    pub fn inverse(&self) -> Result<Homography> {
        if self.is_identity() {
            return Ok(*self);
        }
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::Singular("homography is not invertible".into()))?;
        Homography::from_matrix(&inv)
    }

    pub fn apply(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-15 {
            return None;
        }
        Some([
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ])
    }
}

fn normalizer(pts: &[[f64; 2]; 4]) -> Matrix3<f64> {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean_d = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / 4.0;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn any_three_collinear(pts: &[[f64; 2]; 4]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| (a[0] - b[0]).hypot(a[1] - b[1])))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return true;
    }
    for skip in 0..4 {
        let p: Vec<&[f64; 2]> = pts.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, p)| p).collect();
        let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        if area.abs() <= 1e-9 * scale * scale {
            return true;
        }
    }
    false
}

/// Exact projective map taking each source corner to its destination.
pub fn homography_from_pairs(pairs: &[PixelPair; 4]) -> Result<Homography> {
    if pairs.iter().all(|(s, d)| s == d) {
        if any_three_collinear(&pairs.map(|p| p.0)) {
            return Err(Error::Singular("three source points are collinear".into()));
        }
        return Ok(Homography::IDENTITY);
    }
    let src = pairs.map(|p| p.0);
    let dst = pairs.map(|p| p.1);
    if any_three_collinear(&src) || any_three_collinear(&dst) {
        return Err(Error::Singular("three points are collinear".into()));
    }
    let (ts, td) = (normalizer(&src), normalizer(&dst));
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let s = ts * Vector3::new(s[0], s[1], 1.0);
        let d = td * Vector3::new(d[0], d[1], 1.0);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r = 2 * i;
        a.set_row(r, &SVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]).transpose());
        a.set_row(r + 1, &SVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]).transpose());
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("degenerate correspondence".into()))?;
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let td_inv = td.try_inverse().ok_or_else(|| Error::Singular("degenerate normalization".into()))?;
    Homography::from_matrix(&(td_inv * hn * ts))
}

fn bilinear(width: usize, height: usize, x: f64, y: f64, mut f: impl FnMut(usize, usize, f64)) -> bool {
    if x < 0.0 || y < 0.0 || x > (width - 1) as f64 || y > (height - 1) as f64 {
        return false;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    f(x0, y0, (1.0 - fx) * (1.0 - fy));
    if fx > 0.0 {
        f(x1, y0, fx * (1.0 - fy));
    }
    if fy > 0.0 {
        f(x0, y1, (1.0 - fx) * fy);
    }
    if fx > 0.0 && fy > 0.0 {
        f(x1, y1, fx * fy);
    }
    true
}

/// Inverse-warps `src` and `seg` through `h` and pastes warped pixels with
/// mask above 0.5 onto `base`. Returns the pasted image and the warped mask.
pub fn warp_paste(
    src: &ImageRgb,
    seg: &SegmentationMask,
    h: &Homography,
    base: &ImageRgb,
) -> Result<(ImageRgb, SegmentationMask)> {
    if !src.same_dims(base) || (seg.width, seg.height) != (src.width, src.height) {
        return Err(Error::validation("warp_paste", "image and mask sizes must agree"));
    }
    let inv = h.inverse()?;
    let (w, hgt) = (src.width, src.height);
    let mut out = base.clone();
    let mut warped = SegmentationMask::zeros(w, hgt);
    for y in 0..hgt {
        for x in 0..w {
            let Some([sx, sy]) = inv.apply(x as f64, y as f64) else {
                continue;
            };
            let mut m = 0.0;
            bilinear(w, hgt, sx, sy, |u, v, wt| m += wt * seg.get(u, v));
            warped.data[y * w + x] = m;
            if m > 0.5 {
                let mut rgb = [0.0; 3];
                bilinear(w, hgt, sx, sy, |u, v, wt| {
                    for (a, c) in rgb.iter_mut().zip(src.get(u, v)) {
                        *a += wt * c as f64;
                    }
                });
                out.set(x, y, rgb.map(|v| v.round().clamp(0.0, 255.0) as u8));
            }
        }
    }
    Ok((out, warped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render_cartesian;
    use crate::scene::Box3D;

    fn rec(token: usize, map: Vec<f64>) -> CrossAttnRecord {
        CrossAttnRecord {
            layer: 1,
            timestep: 0,
            token_index: token,
            grid_h: 2,
            grid_w: 2,
            map,
        }
    }

    #[test]
    fn uniform_map_normalizes_to_zeros() {
        let m = accumulate_cross_attention(&[rec(0, vec![0.25; 4])], 0, 4, 4).unwrap();
        assert!(m.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn peak_lands_in_its_block() {
        let m = accumulate_cross_attention(&[rec(1, vec![0.1, 0.1, 0.1, 0.7])], 1, 4, 4).unwrap();
        assert_eq!(m.get(3, 3), 1.0);
        assert_eq!(m.get(2, 2), 1.0);
        assert_eq!(m.get(0, 0), 0.0);
        assert!(accumulate_cross_attention(&[rec(1, vec![0.1; 4])], 0, 4, 4).is_err());
        assert!(accumulate_cross_attention(&[], 0, 4, 4).is_err());
    }

    #[test]
    fn two_records_average() {
        let a = vec![0.0, 0.2, 0.4, 1.0];
        let b = vec![0.4, 0.2, 0.0, 0.6];
        let m = accumulate_cross_attention(&[rec(0, a.clone()), rec(0, b.clone())], 0, 2, 2).unwrap();
        let mean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let (lo, hi) = (0.2, 0.8);
        for (got, want) in m.data.iter().zip(&mean) {
            assert!((got - (want - lo) / (hi - lo)).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_threshold() {
        let map = SegmentationMask {
            width: 3,
            height: 3,
            data: vec![0.0, 0.6, 0.0, 0.0, 0.9, 0.7, 0.0, 0.0, 0.0],
        };
        assert_eq!(coarse_to_bbox(&map, 0.5).unwrap(), BBox2D::new(1, 0, 2, 1));
        assert!(matches!(coarse_to_bbox(&map, 0.95), Err(Error::SegmentationFailed(_))));
    }

    #[test]
    fn segmenters() {
        let img = ImageRgb::filled(6, 6, [0, 0, 0]);
        let fg = Mask::from_fn(6, 6, |x, y| (1..=3).contains(&x) && (2..=4).contains(&y));
        let bb = fit_bbox2d(&fg).unwrap();
        let s = refine_segmentation(&img, bb, &FallbackSegmenter { fg: fg.clone() }).unwrap();
        assert_eq!(s.threshold(0.5), fg);
        let r = refine_segmentation(&img, BBox2D::new(0, 0, 1, 2), &BoxSegmenter).unwrap();
        assert_eq!(r.area(), 6.0);
        let empty = FallbackSegmenter { fg: Mask::new(6, 6, false) };
        assert!(matches!(refine_segmentation(&img, bb, &empty), Err(Error::SegmentationFailed(_))));
        assert!(refine_segmentation(&img, BBox2D::new(0, 0, 6, 2), &BoxSegmenter).is_err());
    }

    fn camera(f: f64) -> Camera {
        let mut c = Camera::looking_forward(128, 128);
        c.focal_px = f;
        c
    }

    fn front_box() -> Box3D {
        Box3D::new("b", Vec3::new(0.0, 0.0, 5.5), [2.0, 2.0, 1.0], 0.0)
    }

    #[test]
    fn zero_translation_pairs_are_identity() {
        let cam = camera(100.0);
        let b = front_box();
        let c = render_cartesian(&b, &cam);
        let bb = fit_bbox2d(&c.hit_mask()).unwrap();
        let pairs = correspondence_from_maps(&c, &c, Vec3::ZERO, bb, &cam, 4).unwrap();
        assert!(pairs.iter().all(|(s, d)| s == d));
        assert!(homography_from_pairs(&pairs).unwrap().is_identity());
    }

    #[test]
    fn pinhole_shift() {
        // front face at depth 5, focal 100: 1 m in x is 20 px
        let cam = camera(100.0);
        let b = front_box();
        let t = Vec3::new(1.0, 0.0, 0.0);
        let c = render_cartesian(&b, &cam);
        let ch = render_cartesian(&crate::scene::apply_translation(&b, t), &cam);
        let bb = fit_bbox2d(&c.hit_mask()).unwrap();
        for (s, d) in correspondence_from_maps(&c, &ch, t, bb, &cam, 4).unwrap() {
            assert!((d[0] - s[0] - 20.0).abs() < 1e-6);
            assert!((d[1] - s[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn receding_corners_approach_principal_point() {
        let cam = camera(100.0);
        let b = front_box();
        let t = Vec3::new(0.0, 0.0, 2.0);
        let c = render_cartesian(&b, &cam);
        let bb = fit_bbox2d(&c.hit_mask()).unwrap();
        let [cx, cy] = cam.principal_point;
        for (s, d) in correspondence_from_maps(&c, &c, t, bb, &cam, 4).unwrap() {
            // oracle: corner lies on the face z = 5, shifted to z = 7
            let want = [cx + (s[0] - cx) * 5.0 / 7.0, cy + (s[1] - cy) * 5.0 / 7.0];
            assert!((d[0] - want[0]).abs() < 1e-6 && (d[1] - want[1]).abs() < 1e-6);
            assert!((d[0] - cx).abs() <= (s[0] - cx).abs());
        }
    }

    #[test]
    fn corner_off_surface_errors_without_snap() {
        let cam = camera(100.0);
        let c = render_cartesian(&front_box(), &cam);
        let bb = BBox2D::new(0, 0, 5, 5);
        assert!(matches!(
            correspondence_from_maps(&c, &c, Vec3::ZERO, bb, &cam, 3),
            Err(Error::Correspondence(_))
        ));
    }

    #[test]
    fn homography_examples() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let pairs = sq.map(|p| (p, [2.0 * p[0], 2.0 * p[1]]));
        let h = homography_from_pairs(&pairs).unwrap();
        let want = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                assert!((h.m[r][c] - want[r][c]).abs() < 1e-9);
            }
        }
        let shift = sq.map(|p| (p, [p[0] + 3.0, p[1] - 2.0]));
        let h = homography_from_pairs(&shift).unwrap();
        assert!((h.m[0][2] - 3.0).abs() < 1e-9 && (h.m[1][2] + 2.0).abs() < 1e-9);
        assert!((h.m[0][0] - 1.0).abs() < 1e-9 && h.m[2][0].abs() < 1e-12);
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 1.0]].map(|p| (p, p));
        assert!(matches!(homography_from_pairs(&line), Err(Error::Singular(_))));
    }

    #[test]
    fn homography_hits_projective_corners() {
        let pairs = [
            ([10.0, 12.0], [14.0, 9.0]),
            ([50.0, 11.0], [61.0, 15.0]),
            ([52.0, 40.0], [58.0, 47.0]),
            ([9.0, 44.0], [12.0, 39.0]),
        ];
        let h = homography_from_pairs(&pairs).unwrap();
        for (s, d) in pairs {
            let p = h.apply(s[0], s[1]).unwrap();
            assert!((p[0] - d[0]).abs() < 1e-6 && (p[1] - d[1]).abs() < 1e-6);
        }
    }

    fn sprite() -> (ImageRgb, SegmentationMask) {
        let mut img = ImageRgb::filled(20, 20, [10, 20, 30]);
        let mut m = Mask::new(20, 20, false);
        for y in 5..9 {
            for x in 4..10 {
                img.set(x, y, [200, (x * 10) as u8, (y * 10) as u8]);
                m.set(x, y, true);
            }
        }
        (img, SegmentationMask::from_mask(&m))
    }

    #[test]
    fn warp_identity_and_empty() {
        let (img, seg) = sprite();
        let base = ImageRgb::filled(20, 20, [1, 2, 3]);
        let full = SegmentationMask::from_mask(&Mask::new(20, 20, true));
        let (out, ws) = warp_paste(&img, &full, &Homography::IDENTITY, &base).unwrap();
        assert_eq!(out, img);
        assert_eq!(ws, full);
        let (out, ws) = warp_paste(&img, &seg, &Homography::IDENTITY, &base).unwrap();
        assert_eq!(ws, seg);
        assert_eq!(out.get(5, 6), img.get(5, 6));
        let (out, _) = warp_paste(&img, &SegmentationMask::zeros(20, 20), &Homography::IDENTITY, &base).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn integer_shift_moves_sprite_exactly() {
        let (img, seg) = sprite();
        let base = ImageRgb::filled(20, 20, [0, 0, 0]);
        let (dx, dy) = (5usize, 3usize);
        let h = Homography {
            m: [[1.0, 0.0, dx as f64], [0.0, 1.0, dy as f64], [0.0, 0.0, 1.0]],
        };
        let (out, ws) = warp_paste(&img, &seg, &h, &base).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let inside = seg.get(x, y) > 0.5;
                if inside {
                    assert_eq!(out.get(x + dx, y + dy), img.get(x, y));
                    assert_eq!(ws.get(x + dx, y + dy), 1.0);
                }
            }
        }
        assert_eq!(ws.threshold(0.5).count(), seg.threshold(0.5).count());
    }

    #[test]
    fn affine_area_scales_with_determinant() {
        let mut m = Mask::new(128, 128, false);
        for y in 20..60 {
            for x in 20..50 {
                m.set(x, y, true);
            }
        }
        let seg = SegmentationMask::from_mask(&m);
        let img = ImageRgb::filled(128, 128, [9, 9, 9]);
        let h = Homography {
            m: [[1.5, 0.0, 4.0], [0.0, 1.2, 3.0], [0.0, 0.0, 1.0]],
        };
        let (_, ws) = warp_paste(&img, &seg, &h, &img).unwrap();
        let got = ws.threshold(0.5).count() as f64;
        let want = m.count() as f64 * 1.5 * 1.2;
        assert!((got - want).abs() / want < 0.02, "{got} vs {want}");
    }

    #[test]
    fn request_validation() {
        let mut r = TranslationRequest {
            box_id: "a".into(),
            t: Vec3::new(0.1, 0.0, 0.0),
            blend_fraction: 0.8,
        };
        assert!(r.validate().is_ok());
        assert_eq!(r.blend_steps(20), 16);
        r.blend_fraction = 1.2;
        assert!(r.validate().is_err());
        let parsed: TranslationRequest = serde_json::from_str(r#"{"box_id":"a","t":[1,0,0]}"#).unwrap();
        assert_eq!(parsed.blend_fraction, DEFAULT_BLEND_FRACTION);
    }
}
