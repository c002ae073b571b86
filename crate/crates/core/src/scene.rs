//! The 3D layout model: a cuboid room bounded by planes, upright oriented
//! boxes, and a pinhole camera.
//!
//! World frame: x right, y up, z forward from a camera at the identity pose.
//! The room spans `x ∈ [-X/2, X/2]`, `y ∈ [-Y/2, Y/2]`, `z ∈ [0, Z]`, so a
//! default camera at the origin stands on the open front face looking at the
//! back wall at `z = Z`.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotation about the world y axis, right-handed:
/// `(x, y, z) -> (x cos + z sin, y, -x sin + z cos)`.
pub fn rotate_y(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(v.x * c + v.z * s, v.y, -v.x * s + v.z * c)
}

/// Rotation about the x axis. Positive angles turn +z towards -y.
fn rotate_x(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(v.x, v.y * c - v.z * s, v.y * s + v.z * c)
}

/// Pinhole camera. Positive `pitch` tilts the view downwards; positive `yaw`
/// turns it towards +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
    pub focal_px: f64,
    pub principal_point: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera at the origin looking down +z with the principal point at the
    /// image center and a 90° horizontal field of view.
    pub fn looking_forward(width: u32, height: u32) -> Self {
        Camera {
            position: Vec3::ZERO,
            yaw: 0.0,
            pitch: 0.0,
            focal_px: width as f64 / 2.0,
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.is_finite() || !self.yaw.is_finite() || !self.pitch.is_finite() {
            return Err(Error::validation("camera", "pose must be finite"));
        }
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(Error::validation("camera.focal_px", "must be > 0"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::validation("camera.width", "image must be at least 8x8"));
        }
        let [px, py] = self.principal_point;
        if !(0.0..=self.width as f64).contains(&px) || !(0.0..=self.height as f64).contains(&py) {
            return Err(Error::validation(
                "camera.principal_point",
                "must lie inside the image",
            ));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera-frame direction to world frame.
    pub fn to_world_dir(&self, d: Vec3) -> Vec3 {
        rotate_y(rotate_x(d, self.pitch), self.yaw)
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        rotate_x(rotate_y(p - self.position, -self.yaw), -self.pitch)
    }

    /// Unnormalized world-space ray direction through pixel `(u, v)` whose
    /// camera-frame z component is 1, so ray parameters are z-depths.
    pub fn ray_dir(&self, u: f64, v: f64) -> Vec3 {
        let [cx, cy] = self.principal_point;
        self.to_world_dir(Vec3::new((u - cx) / self.focal_px, -(v - cy) / self.focal_px, 1.0))
    }

    /// World point on the ray through pixel `(u, v)` at z-depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        self.position + self.ray_dir(u, v) * depth
    }
}

/// Bounded plane. The in-plane axes are derived from the normal by
/// [`Plane::axes`]; `extent` holds half-sizes along them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub anchor: Vec3,
    pub normal: Vec3,
    pub extent: [f64; 2],
}

impl Plane {
    /// `(u, v)` tangent axes: `u = normalize(ref × n)` with `ref = +y`
    /// (or `+z` when the normal is nearly vertical), `v = n × u`.
    pub fn axes(&self) -> (Vec3, Vec3) {
        let n = self.normal;
        let reference = if n.y.abs() > 0.9 {
            Vec3::new(0.0, 0.0, 1.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let u = reference.cross(n).normalized();
        (u, n.cross(u))
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !self.anchor.is_finite() || !self.normal.is_finite() {
            return Err(Error::validation(field, "plane must be finite"));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("{field}.normal"), "must be unit length"));
        }
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(Error::validation(format!("{field}.extent"), "must be > 0"));
        }
        Ok(())
    }
}

/// Upright box rotated by `yaw` about the world y axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub id: String,
    pub center: Vec3,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(id: impl Into<String>, center: Vec3, size: [f64; 3], yaw: f64) -> Self {
        Box3D {
            id: id.into(),
            center,
            size,
            yaw,
        }
    }

    pub fn half_size(&self) -> Vec3 {
        Vec3::new(self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0)
    }

    /// World point to the box's local (centered, yaw-removed) frame.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        rotate_y(p - self.center, -self.yaw)
    }

    pub fn to_world(&self, p: Vec3) -> Vec3 {
        rotate_y(p, self.yaw) + self.center
    }

    pub fn validate(&self) -> Result<()> {
        let f = format!("boxes[{}]", self.id);
        if self.id.is_empty() {
            return Err(Error::validation("boxes.id", "must not be empty"));
        }
        if !self.center.is_finite() {
            return Err(Error::validation(format!("{f}.center"), "must be finite"));
        }
        if !self.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::validation(format!("{f}.size"), "components must be > 0"));
        }
        if !(-PI..PI).contains(&self.yaw) {
            return Err(Error::validation(format!("{f}.yaw"), "must lie in [-pi, pi)"));
        }
        Ok(())
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// The 8 corners of `b`. Corner `k` takes the `+` half-size on axis x when
/// bit 0 of `k` is set, on y for bit 1 and on z for bit 2, i.e. the order is
/// `(-,-,-), (+,-,-), (-,+,-), (+,+,-), (-,-,+), (+,-,+), (-,+,+), (+,+,+)`
/// in the box frame, then rotated by the yaw and shifted to the center.
pub fn box_corners(b: &Box3D) -> [Vec3; 8] {
    let h = b.half_size();
    std::array::from_fn(|k| {
        let sx = if k & 1 != 0 { h.x } else { -h.x };
        let sy = if k & 2 != 0 { h.y } else { -h.y };
        let sz = if k & 4 != 0 { h.z } else { -h.z };
        b.to_world(Vec3::new(sx, sy, sz))
    })
}

pub fn apply_translation(b: &Box3D, t: Vec3) -> Box3D {
    Box3D {
        center: b.center + t,
        ..b.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub extents: [f64; 3],
}

impl Room {
    pub fn min(&self) -> Vec3 {
        let [x, y, _] = self.extents;
        Vec3::new(-x / 2.0, -y / 2.0, 0.0)
    }

    pub fn max(&self) -> Vec3 {
        let [x, y, z] = self.extents;
        Vec3::new(x / 2.0, y / 2.0, z)
    }

    /// Closed containment: points on a wall are inside.
    pub fn contains(&self, p: Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (lo.x..=hi.x).contains(&p.x) && (lo.y..=hi.y).contains(&p.y) && (lo.z..=hi.z).contains(&p.z)
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.extents[2] / 2.0)
    }

    /// Floor, back wall, left and right walls, and optionally the ceiling.
    pub fn boundary_planes(&self, ceiling: bool) -> Vec<Plane> {
        let [x, y, z] = self.extents;
        let (hx, hy, hz) = (x / 2.0, y / 2.0, z / 2.0);
        let mut planes = vec![
            Plane {
                anchor: Vec3::new(0.0, -hy, hz),
                normal: Vec3::new(0.0, 1.0, 0.0),
                extent: [hx, hz],
            },
            Plane {
                anchor: Vec3::new(0.0, 0.0, z),
                normal: Vec3::new(0.0, 0.0, -1.0),
                extent: [hx, hy],
            },
            Plane {
                anchor: Vec3::new(-hx, 0.0, hz),
                normal: Vec3::new(1.0, 0.0, 0.0),
                extent: [hz, hy],
            },
            Plane {
                anchor: Vec3::new(hx, 0.0, hz),
                normal: Vec3::new(-1.0, 0.0, 0.0),
                extent: [hz, hy],
            },
        ];
        if ceiling {
            planes.push(Plane {
                anchor: Vec3::new(0.0, hy, hz),
                normal: Vec3::new(0.0, -1.0, 0.0),
                extent: [hx, hz],
            });
        }
        planes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneLayout {
    pub room: Room,
    pub camera: Camera,
    pub planes: Vec<Plane>,
    pub boxes: Vec<Box3D>,
}

/// Scene with the five boundary planes (ceiling included) and no boxes.
pub fn make_scene(room_extents: [f64; 3], camera: Camera) -> Result<SceneLayout> {
    make_scene_with(room_extents, camera, true)
}

pub fn make_scene_with(room_extents: [f64; 3], camera: Camera, ceiling: bool) -> Result<SceneLayout> {
    validate_extents(room_extents)?;
    camera.validate()?;
    let room = Room {
        extents: room_extents,
    };
    let planes = room.boundary_planes(ceiling);
    Ok(SceneLayout {
        room,
        camera,
        planes,
        boxes: Vec::new(),
    })
}

fn validate_extents(e: [f64; 3]) -> Result<()> {
    if e.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(Error::validation("room.extents", "components must be > 0"))
    }
}

/// True iff every corner of `b` lies inside the room (walls included).
pub fn check_in_bounds(scene: &SceneLayout, b: &Box3D) -> bool {
    box_corners(b).iter().all(|c| scene.room.contains(*c))
}

impl SceneLayout {
    pub fn validate(&self) -> Result<()> {
        validate_extents(self.room.extents)?;
        self.camera.validate()?;
        for (i, p) in self.planes.iter().enumerate() {
            p.validate(&format!("planes[{i}]"))?;
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.boxes {
            b.validate()?;
            if !seen.insert(b.id.as_str()) {
                return Err(Error::validation("boxes.id", format!("duplicate id `{}`", b.id)));
            }
            if !self.room.contains(b.center) {
                return Err(Error::validation(
                    format!("boxes[{}].center", b.id),
                    "must lie inside the room",
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<SceneLayout> {
        let scene: SceneLayout = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn find_box(&self, id: &str) -> Result<&Box3D> {
        self.boxes.iter().find(|b| b.id == id).ok_or_else(|| Error::NotFound {
            kind: "box",
            id: id.to_string(),
        })
    }

    /// Appends a box after checking it is valid, unique, and in bounds.
    pub fn add_box(&mut self, b: Box3D) -> Result<()> {
        b.validate()?;
        if self.boxes.iter().any(|o| o.id == b.id) {
            return Err(Error::validation("boxes.id", format!("duplicate id `{}`", b.id)));
        }
        if !check_in_bounds(self, &b) {
            return Err(Error::OutOfBounds { id: b.id });
        }
        self.boxes.push(b);
        Ok(())
    }

    /// Replaces the box with the same id.
    pub fn replace_box(&mut self, b: Box3D) -> Result<()> {
        b.validate()?;
        if !check_in_bounds(self, &b) {
            return Err(Error::OutOfBounds { id: b.id });
        }
        let slot = self
            .boxes
            .iter_mut()
            .find(|o| o.id == b.id)
            .ok_or_else(|| Error::NotFound {
                kind: "box",
                id: b.id.clone(),
            })?;
        *slot = b;
        Ok(())
    }

    /// Copy of the scene without boxes.
    pub fn planes_only(&self) -> SceneLayout {
        SceneLayout {
            boxes: Vec::new(),
            ..self.clone()
        }
    }
}
