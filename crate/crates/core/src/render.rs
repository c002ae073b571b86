//! Ray-traced conditioning signals: z-depth, per-box Cartesian hit maps, and
//! foreground/background masks. One ray per pixel through the integer pixel
//! coordinate `(u, v)`; image y points down.

use rayon::prelude::*;

use crate::codec::F32Blob;
use crate::error::{Error, Result};
use crate::raster::{fit_bbox2d, BBox2D, Mask};
use crate::scene::{box_corners, rotate_y, Box3D, Camera, Plane, SceneLayout, Vec3};

/// Hits closer than this along the ray are ignored.
const T_EPS: f64 = 1e-9;

/// Pinhole projection to `(px, py, depth)`.
pub fn project(camera: &Camera, p: Vec3) -> Result<(f64, f64, f64)> {
    let c = camera.to_camera(p);
    if c.z <= 0.0 {
        return Err(Error::Projection { depth: c.z });
    }
    let [cx, cy] = camera.principal_point;
    Ok((
        camera.focal_px * c.x / c.z + cx,
        -camera.focal_px * c.y / c.z + cy,
        c.z,
    ))
}

/// Slab test against `b` in its yaw-free local frame. Returns the ray
/// parameter of the first surface crossing in front of the origin.
pub fn ray_box(origin: Vec3, dir: Vec3, b: &Box3D) -> Option<f64> {
    let o = b.to_local(origin);
    let d = rotate_y(dir, -b.yaw);
    let h = b.half_size();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for (o, d, h) in [(o.x, d.x, h.x), (o.y, d.y, h.y), (o.z, d.z, h.z)] {
        if d == 0.0 {
            if o < -h || o > h {
                return None;
            }
            continue;
        }
        let (a, c) = ((-h - o) / d, (h - o) / d);
        let (lo, hi) = if a < c { (a, c) } else { (c, a) };
        t_near = t_near.max(lo);
        t_far = t_far.min(hi);
    }
    if t_far < t_near || t_far < T_EPS {
        return None;
    }
    Some(if t_near > T_EPS { t_near } else { t_far })
}

/// Bounded plane hit, both sides.
pub fn ray_plane(origin: Vec3, dir: Vec3, p: &Plane) -> Option<f64> {
    let denom = dir.dot(p.normal);
    if denom == 0.0 {
        return None;
    }
    let t = (p.anchor - origin).dot(p.normal) / denom;
    if t < T_EPS {
        return None;
    }
    let local = origin + dir * t - p.anchor;
    let (u, v) = p.axes();
    (local.dot(u).abs() <= p.extent[0] && local.dot(v).abs() <= p.extent[1]).then_some(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitId {
    Nothing,
    Plane(usize),
    Box(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// z-depth in meters; `f64::INFINITY` where the ray hits nothing.
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_blob(&self) -> F32Blob {
        F32Blob::from_f64(self.width, self.height, 1, &self.values).expect("depth dims")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartesianMap {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<Vec3>,
    pub hit: Vec<bool>,
}

impl CartesianMap {
    pub fn at(&self, x: usize, y: usize) -> Option<Vec3> {
        let i = y * self.width + x;
        self.hit[i].then(|| self.coords[i])
    }

    /// Three channels of world coordinates; misses are NaN.
    pub fn to_blob(&self) -> F32Blob {
        let mut data = Vec::with_capacity(self.coords.len() * 3);
        for (c, h) in self.coords.iter().zip(&self.hit) {
            if *h {
                data.extend(c.to_array());
            } else {
                data.extend([f64::NAN; 3]);
            }
        }
        F32Blob::from_f64(self.width, self.height, 3, &data).expect("cartesian dims")
    }

    pub fn hit_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.hit.clone(),
        }
    }
}

/// Complementary masks for the box being generated.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMasks {
    pub fg: Mask,
    pub bg: Mask,
}

impl StageMasks {
    pub fn from_fg(fg: Mask) -> Self {
        StageMasks { bg: fg.complement(), fg }
    }
}

/// Depth plus which primitive owns each pixel.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub depth: DepthMap,
    pub ids: Vec<HitId>,
}

fn nearest_hit(scene: &SceneLayout, origin: Vec3, dir: Vec3) -> (f64, HitId) {
    let mut best = (f64::INFINITY, HitId::Nothing);
    for (k, p) in scene.planes.iter().enumerate() {
        if let Some(t) = ray_plane(origin, dir, p) {
            if t < best.0 {
                best = (t, HitId::Plane(k));
            }
        }
    }
    // boxes win ties against planes they rest on
    for (k, b) in scene.boxes.iter().enumerate() {
        if let Some(t) = ray_box(origin, dir, b) {
            if t <= best.0 {
                best = (t, HitId::Box(k));
            }
        }
    }
    best
}

pub fn render_scene(scene: &SceneLayout) -> SceneRender {
    let cam = &scene.camera;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let rows: Vec<Vec<(f64, HitId)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| nearest_hit(scene, cam.position, cam.ray_dir(x as f64, y as f64)))
                .collect()
        })
        .collect();
    let (values, ids) = rows.into_iter().flatten().unzip();
    SceneRender {
        depth: DepthMap {
            width: w,
            height: h,
            values,
        },
        ids,
    }
}

pub fn render_depth(scene: &SceneLayout) -> DepthMap {
    render_scene(scene).depth
}

/// World coordinates of ray hits on `b` alone (no occluders).
pub fn render_cartesian(b: &Box3D, camera: &Camera) -> CartesianMap {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let rows: Vec<Vec<Option<Vec3>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let d = camera.ray_dir(x as f64, y as f64);
                    ray_box(camera.position, d, b).map(|t| camera.position + d * t)
                })
                .collect()
        })
        .collect();
    let (coords, hit) = rows
        .into_iter()
        .flatten()
        .map(|p| match p {
            Some(p) => (p, true),
            None => (Vec3::ZERO, false),
        })
        .unzip();
    CartesianMap {
        width: w,
        height: h,
        coords,
        hit,
    }
}

impl SceneRender {
    pub fn masks_for(&self, scene: &SceneLayout, box_id: &str) -> Result<StageMasks> {
        let k = scene
            .boxes
            .iter()
            .position(|b| b.id == box_id)
            .ok_or_else(|| Error::NotFound {
                kind: "box",
                id: box_id.to_string(),
            })?;
        let fg = Mask {
            width: self.depth.width,
            height: self.depth.height,
            data: self.ids.iter().map(|id| *id == HitId::Box(k)).collect(),
        };
        Ok(StageMasks::from_fg(fg))
    }
}

/// `fg` = pixels where `box_id` is the nearest surface.
pub fn render_masks(scene: &SceneLayout, box_id: &str) -> Result<StageMasks> {
    scene.find_box(box_id)?;
    render_scene(scene).masks_for(scene, box_id)
}

/// Bounding box of the projected corners, clipped to the image. `None` when a
/// corner is behind the camera or the projection misses the image.
pub fn projected_bbox(camera: &Camera, b: &Box3D) -> Option<BBox2D> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in box_corners(b) {
        let (px, py, _) = project(camera, c).ok()?;
        x0 = x0.min(px);
        y0 = y0.min(py);
        x1 = x1.max(px);
        y1 = y1.max(py);
    }
    let (w, h) = (camera.width as f64 - 1.0, camera.height as f64 - 1.0);
    let (x0, y0, x1, y1) = (x0.ceil().max(0.0), y0.ceil().max(0.0), x1.floor().min(w), y1.floor().min(h));
    (x0 <= x1 && y0 <= y1).then(|| BBox2D::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

/// 2D box of the pixels `box_id` owns in the full render.
pub fn visible_bbox(scene: &SceneLayout, box_id: &str) -> Result<BBox2D> {
    fit_bbox2d(&render_masks(scene, box_id)?.fg)
}
