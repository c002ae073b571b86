//! Layout benchmark: catalogs, constrained random layouts, detection and
//! image-similarity metrics, and the benchmark runner.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsModel;
use crate::error::{Error, Result};
use crate::pipeline::{compose_scene_prompt, no_progress, Relation, SessionConfig, StagePrompt};
use crate::raster::{BBox2D, ImageRgb};
use crate::render::{project, visible_bbox};
use crate::scene::{box_corners, check_in_bounds, make_scene, Box3D, Camera, SceneLayout, Vec3};
use crate::session::Session;
use crate::translation::{Segmenter, TranslationRequest};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MAX_SAMPLING_TRIES: usize = 1000;
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_CONFIDENCE: f64 = 0.25;
pub const CROP_SIZE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogObject {
    pub name: String,
    /// Width over height.
    pub aspect_ratio: f64,
    /// Nominal height in meters.
    pub height: f64,
    /// Range of box-center depths (world z).
    pub depth_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalogs {
    pub objects: Vec<CatalogObject>,
    pub scenes: Vec<String>,
}

impl Catalogs {
    /// The shipped 16 objects and 10 scene prompts.
    pub fn builtin() -> Self {
        Catalogs::from_json(include_str!("../assets/catalog.json")).expect("builtin catalog is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Catalogs = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::validation("objects", "must not be empty"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let ok = o.aspect_ratio > 0.0
                && o.height > 0.0
                && o.depth_range[0] > 0.0
                && o.depth_range[0] <= o.depth_range[1]
                && !o.name.trim().is_empty();
            if !ok {
                return Err(Error::validation(format!("objects[{i}]"), "invalid entry"));
            }
        }
        if self.scenes.is_empty() {
            return Err(Error::validation("scenes", "must not be empty"));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.scenes.iter().all(|s| seen.insert(s)) {
            return Err(Error::validation("scenes", "prompts must be unique"));
        }
        Ok(())
    }
}

/// "a chair", "an oven".
pub fn object_prompt(name: &str) -> String {
    let article = match name.chars().next() {
        Some(c) if "aeiouAEIOU".contains(c) => "an",
        _ => "a",
    };
    format!("{article} {name}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub name: String,
    pub prompt: String,
    pub box3d: Box3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSample {
    pub seed: u64,
    pub scene_prompt: String,
    pub room_extents: [f64; 3],
    pub camera: Camera,
    pub objects: [PlacedObject; 2],
    /// Where the second object sits relative to the first.
    pub relation: Relation,
    pub prompt: String,
}

impl LayoutSample {
    /// Scene with both boxes placed.
    pub fn scene(&self) -> Result<SceneLayout> {
        let mut s = make_scene(self.room_extents, self.camera.clone())?;
        for o in &self.objects {
            s.add_box(o.box3d.clone())?;
        }
        Ok(s)
    }
}

/// Pixel box of the projected corners, or `None` if any corner falls
/// outside the image or behind the camera.
pub fn projected_bbox_strict(camera: &Camera, b: &Box3D) -> Option<BBox2D> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (w, h) = (camera.width as f64 - 1.0, camera.height as f64 - 1.0);
    for c in box_corners(b) {
        let (px, py, _) = project(camera, c).ok()?;
        if !(0.0..=w).contains(&px) || !(0.0..=h).contains(&py) {
            return None;
        }
        x0 = x0.min(px);
        y0 = y0.min(py);
        x1 = x1.max(px);
        y1 = y1.max(py);
    }
    Some(BBox2D::new(x0.floor() as u32, y0.floor() as u32, x1.ceil() as u32, y1.ceil() as u32))
}

/// Checks bounds, in-image projection, projected non-overlap, and the
/// relation of projected centers.
pub fn check_layout(sample: &LayoutSample) -> std::result::Result<(), String> {
    let scene = make_scene(sample.room_extents, sample.camera.clone()).map_err(|e| e.to_string())?;
    let [a, b] = &sample.objects;
    for o in &sample.objects {
        if !check_in_bounds(&scene, &o.box3d) {
            return Err(format!("{} leaves the room", o.name));
        }
    }
    let ba = projected_bbox_strict(&sample.camera, &a.box3d).ok_or("first object leaves the image")?;
    let bb = projected_bbox_strict(&sample.camera, &b.box3d).ok_or("second object leaves the image")?;
    if ba.intersects(&bb) {
        return Err("projected boxes overlap".into());
    }
    let (ca, cb) = (ba.center(), bb.center());
    let ok = match sample.relation {
        Relation::Right => cb.0 > ca.0,
        Relation::Left => cb.0 < ca.0,
        Relation::Above => cb.1 < ca.1,
    };
    if !ok {
        return Err(format!("relation {:?} does not hold", sample.relation));
    }
    Ok(())
}

fn object_box(id: &str, o: &CatalogObject, center: Vec3) -> Box3D {
    let w = o.aspect_ratio * o.height;
    Box3D::new(id, center, [w, o.height, w.min(o.height)], 0.0)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Option<f64> {
    (lo <= hi).then(|| if lo == hi { lo } else { rng.random_range(lo..hi) })
}

/// Draws a two-object layout: the first object on the floor, the second
/// left of, right of, or above it. Deterministic in `seed`.
pub fn sample_layout(seed: u64, catalogs: &Catalogs, room_extents: [f64; 3], camera: &Camera) -> Result<LayoutSample> {
    sample_layout_with(seed, catalogs, room_extents, camera, None)
}

/// [`sample_layout`] with the relation optionally fixed.
pub fn sample_layout_with(
    seed: u64,
    catalogs: &Catalogs,
    room_extents: [f64; 3],
    camera: &Camera,
    relation: Option<Relation>,
) -> Result<LayoutSample> {
    catalogs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [rx, ry, rz] = room_extents;
    let floor = -ry / 2.0;
    for _ in 0..MAX_SAMPLING_TRIES {
        let scene_prompt = catalogs.scenes[rng.random_range(0..catalogs.scenes.len())].clone();
        let o1 = &catalogs.objects[rng.random_range(0..catalogs.objects.len())];
        let o2 = &catalogs.objects[rng.random_range(0..catalogs.objects.len())];
        let drawn = [Relation::Left, Relation::Right, Relation::Above][rng.random_range(0..3)];
        let relation = relation.unwrap_or(drawn);
        let place_on_floor = |rng: &mut ChaCha8Rng, o: &CatalogObject, id: &str| -> Option<Box3D> {
            let probe = object_box(id, o, Vec3::ZERO);
            let [w, h, d] = probe.size;
            let z = uniform(rng, o.depth_range[0].max(d / 2.0), o.depth_range[1].min(rz - d / 2.0))?;
            let x = uniform(rng, -rx / 2.0 + w / 2.0, rx / 2.0 - w / 2.0)?;
            Some(object_box(id, o, Vec3::new(x, floor + h / 2.0, z)))
        };
        let Some(b1) = place_on_floor(&mut rng, o1, "object_0") else {
            continue;
        };
        let b2 = match relation {
            Relation::Left | Relation::Right => place_on_floor(&mut rng, o2, "object_1"),
            Relation::Above => {
                let probe = object_box("object_1", o2, Vec3::ZERO);
                let h = probe.size[1];
                let top = b1.center.y + b1.size[1] / 2.0;
                let y = uniform(&mut rng, top + h / 2.0 + 0.05, ry / 2.0 - h / 2.0);
                let jx = rng.random_range(-0.3..0.3);
                let jz = rng.random_range(-0.3..0.3);
                y.map(|y| object_box("object_1", o2, Vec3::new(b1.center.x + jx, y, b1.center.z + jz)))
            }
        };
        let Some(b2) = b2 else { continue };
        let objects = [
            PlacedObject {
                name: o1.name.clone(),
                prompt: object_prompt(&o1.name),
                box3d: b1,
            },
            PlacedObject {
                name: o2.name.clone(),
                prompt: object_prompt(&o2.name),
                box3d: b2,
            },
        ];
        let prompt = compose_scene_prompt(
            &scene_prompt,
            &[objects[0].prompt.as_str(), objects[1].prompt.as_str()],
            Some(relation),
        )?;
        let sample = LayoutSample {
            seed,
            scene_prompt,
            room_extents,
            camera: camera.clone(),
            objects,
            relation,
            prompt,
        };
        if check_layout(&sample).is_ok() {
            return Ok(sample);
        }
    }
    Err(Error::Sampling {
        tries: MAX_SAMPLING_TRIES,
    })
}

/// Intersection over union with inclusive pixel bounds.
pub fn miou(pred: &BBox2D, target: &BBox2D) -> f64 {
    let ix0 = pred.x_min.max(target.x_min);
    let iy0 = pred.y_min.max(target.y_min);
    let ix1 = pred.x_max.min(target.x_max);
    let iy1 = pred.y_max.min(target.y_max);
    let inter = if ix0 <= ix1 && iy0 <= iy1 {
        (ix1 - ix0 + 1) as u64 * (iy1 - iy0 + 1) as u64
    } else {
        0
    };
    let union = pred.area() + target.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BBox2D,
}

/// A layout object as the metrics see it.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetObject {
    pub label: String,
    pub bbox: BBox2D,
}

/// One-to-one greedy assignment of detections (at or above `threshold`,
/// label mapped through `label_map`) to targets of the same label, highest
/// IoU first. Returns, per target, the IoU of its match.
pub fn match_detections(
    detections: &[Detection],
    targets: &[TargetObject],
    label_map: &BTreeMap<String, String>,
    threshold: f64,
) -> Vec<Option<f64>> {
    let mut cands = Vec::new();
    for (di, d) in detections.iter().enumerate() {
        if d.confidence < threshold {
            continue;
        }
        let label = label_map.get(&d.label).unwrap_or(&d.label);
        for (ti, t) in targets.iter().enumerate() {
            if *label == t.label {
                cands.push((miou(&d.bbox, &t.bbox), di, ti));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_d = vec![false; detections.len()];
    let mut out = vec![None; targets.len()];
    for (iou, di, ti) in cands {
        if !used_d[di] && out[ti].is_none() {
            used_d[di] = true;
            out[ti] = Some(iou);
        }
    }
    out
}

/// Fraction of targets with a matching-label detection.
pub fn object_accuracy(
    detections: &[Detection],
    targets: &[TargetObject],
    label_map: &BTreeMap<String, String>,
    threshold: f64,
) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let m = match_detections(detections, targets, label_map, threshold);
    m.iter().filter(|v| v.is_some()).count() as f64 / targets.len() as f64
}

/// Mean over targets of the matched IoU (0 for unmatched targets).
pub fn mean_iou(
    detections: &[Detection],
    targets: &[TargetObject],
    label_map: &BTreeMap<String, String>,
    threshold: f64,
) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let m = match_detections(detections, targets, label_map, threshold);
    m.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / targets.len() as f64
}

fn check_dims(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::validation(
            "image",
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

/// `10·log10(255²/MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_dims(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

fn luma(img: &ImageRgb) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Mean SSIM of the luma channels over every `window × window` position.
pub fn ssim(a: &ImageRgb, b: &ImageRgb, window: usize) -> Result<f64> {
    check_dims(a, b)?;
    if window == 0 || window > a.width || window > a.height {
        return Err(Error::validation("window", "must fit inside the image"));
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let (la, lb) = (luma(a), luma(b));
    let w = a.width;
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=a.height - window {
        for x0 in 0..=w - window {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let (p, q) = (la[y * w + x], lb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Image–text and image–image similarity (a CLIP stand-in).
pub trait Scorer: Send + Sync {
    fn text_image(&self, image: &ImageRgb, text: &str) -> Result<f64>;
    fn image_image(&self, a: &ImageRgb, b: &ImageRgb) -> Result<f64>;
}

/// Scene information available to a detector; remote detectors ignore it.
#[derive(Debug, Clone, Copy)]
pub struct DetectionHint<'a> {
    pub scene: &'a SceneLayout,
    pub labels: &'a [(&'a str, &'a str)],
}

pub trait Detector: Send + Sync {
    fn detect(&self, image: &ImageRgb, hint: &DetectionHint<'_>) -> Result<Vec<Detection>>;
}

/// Reports each layout box's rendered silhouette with its true label.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockDetector;

impl Detector for MockDetector {
    fn detect(&self, _: &ImageRgb, hint: &DetectionHint<'_>) -> Result<Vec<Detection>> {
        hint.labels
            .iter()
            .map(|(id, label)| {
                Ok(Detection {
                    label: label.to_string(),
                    confidence: 1.0,
                    bbox: visible_bbox(hint.scene, id)?,
                })
            })
            .collect()
    }
}

fn crop_resize(img: &ImageRgb, b: &BBox2D) -> Result<ImageRgb> {
    if !b.fits(img.width, img.height) {
        return Err(Error::validation("bbox", "crop leaves the image"));
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::validation("image", "buffer size"))?;
    let crop = image::imageops::crop_imm(&buf, b.x_min, b.y_min, b.width(), b.height()).to_image();
    let out = image::imageops::resize(&crop, CROP_SIZE, CROP_SIZE, image::imageops::FilterType::Triangle);
    Ok(ImageRgb {
        width: CROP_SIZE as usize,
        height: CROP_SIZE as usize,
        data: out.into_raw(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_i2i: Option<f64>,
    pub ssim: f64,
    pub psnr: f64,
}

/// Crops the object from both images, resizes the crops to a common size
/// (bilinear), and compares them.
pub fn consistency_eval(
    before: &ImageRgb,
    after: &ImageRgb,
    bbox_before: &BBox2D,
    bbox_after: &BBox2D,
    scorer: Option<&dyn Scorer>,
) -> Result<ConsistencyScores> {
    let a = crop_resize(before, bbox_before)?;
    let b = crop_resize(after, bbox_after)?;
    Ok(ConsistencyScores {
        clip_i2i: scorer.map(|s| s.image_image(&a, &b)).transpose()?,
        ssim: ssim(&a, &b, 8)?,
        psnr: psnr(&a, &b)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub layouts: usize,
    pub seeds_per_layout: usize,
    pub layout_seed: u64,
    pub room_extents: [f64; 3],
    pub resolution: u32,
    pub confidence_threshold: f64,
    pub label_map: BTreeMap<String, String>,
    /// Sideways move applied to the second object for the consistency
    /// metrics (meters, sign chosen to stay in the room).
    pub translation: f64,
    pub session: SessionConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            layouts: 100,
            seeds_per_layout: 5,
            layout_seed: 0,
            room_extents: [4.0, 3.0, 6.0],
            resolution: 128,
            confidence_threshold: DEFAULT_CONFIDENCE,
            label_map: BTreeMap::new(),
            translation: 0.25,
            session: SessionConfig {
                inversion_max_iter: 0,
                ..SessionConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseResult {
    pub layout: usize,
    pub seed: u64,
    pub prompt: String,
    pub relation: Relation,
    pub objects: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_t2i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyScores>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSummary {
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub cases: usize,
    pub failed_cases: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub backend: String,
    pub detector: String,
    pub config: BenchmarkConfig,
    pub summary: Summary,
    pub cases: Vec<CaseResult>,
}

/// Per-metric means over the cases that produced the metric. Cases are
/// sorted first so the sums do not depend on case order.
pub fn summarize(cases: &[CaseResult]) -> Summary {
    let mut sorted: Vec<&CaseResult> = cases.iter().collect();
    sorted.sort_by_key(|c| (c.layout, c.seed));
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut push = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            let e = acc.entry(name.to_string()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    };
    for c in &sorted {
        push("miou", c.miou);
        push("object_accuracy", c.object_accuracy);
        push("clip_t2i", c.clip_t2i);
        push("ssim", c.consistency.map(|s| s.ssim));
        push("psnr", c.consistency.map(|s| s.psnr));
        push("clip_i2i", c.consistency.and_then(|s| s.clip_i2i));
    }
    Summary {
        cases: cases.len(),
        failed_cases: cases.iter().filter(|c| !c.errors.is_empty()).count(),
        metrics: acc
            .into_iter()
            .map(|(k, (s, n))| (k, MetricSummary { mean: s / n as f64, count: n }))
            .collect(),
    }
}

/// Pluggable components of a benchmark run.
pub struct BenchmarkRig<'a> {
    pub backend: &'a dyn EpsModel,
    pub backend_name: String,
    pub detector: &'a dyn Detector,
    pub detector_name: String,
    pub scorer: Option<&'a dyn Scorer>,
    pub segmenter: Option<&'a dyn Segmenter>,
}

fn run_case(cfg: &BenchmarkConfig, rig: &BenchmarkRig<'_>, layout_idx: usize, sample: &LayoutSample, seed: u64) -> CaseResult {
    let mut case = CaseResult {
        layout: layout_idx,
        seed,
        prompt: sample.prompt.clone(),
        relation: sample.relation,
        objects: sample.objects.iter().map(|o| o.name.clone()).collect(),
        miou: None,
        object_accuracy: None,
        clip_t2i: None,
        consistency: None,
        errors: Vec::new(),
    };
    let session_cfg = SessionConfig {
        seed,
        ..cfg.session.clone()
    };
    let mut progress = no_progress();
    let built = (|| -> Result<Session> {
        let scene = make_scene(sample.room_extents, sample.camera.clone())?;
        let mut s = Session::create(
            rig.backend,
            scene,
            StagePrompt::new(sample.scene_prompt.clone()),
            session_cfg,
            &mut progress,
        )?;
        for o in &sample.objects {
            s.add_object(rig.backend, o.box3d.clone(), StagePrompt::new(o.prompt.clone()), &mut progress)?;
        }
        Ok(s)
    })();
    let mut session = match built {
        Ok(s) => s,
        Err(e) => {
            case.errors.push(format!("generation: {e}"));
            return case;
        }
    };
    let image = session.last().image.clone();
    let scene = session.scene().clone();
    let labels: Vec<(&str, &str)> = sample
        .objects
        .iter()
        .map(|o| (o.box3d.id.as_str(), o.name.as_str()))
        .collect();
    let targets: Result<Vec<TargetObject>> = sample
        .objects
        .iter()
        .map(|o| {
            Ok(TargetObject {
                label: o.name.clone(),
                bbox: visible_bbox(&scene, &o.box3d.id)?,
            })
        })
        .collect();
    match (targets, rig.detector.detect(&image, &DetectionHint { scene: &scene, labels: &labels })) {
        (Ok(targets), Ok(dets)) => {
            case.miou = Some(mean_iou(&dets, &targets, &cfg.label_map, cfg.confidence_threshold));
            case.object_accuracy = Some(object_accuracy(&dets, &targets, &cfg.label_map, cfg.confidence_threshold));
        }
        (Err(e), _) | (_, Err(e)) => case.errors.push(format!("detection: {e}")),
    }
    if let Some(scorer) = rig.scorer {
        match scorer.text_image(&image, &sample.prompt) {
            Ok(v) => case.clip_t2i = Some(v),
            Err(e) => case.errors.push(format!("scorer: {e}")),
        }
    }

    // consistency: move the second object sideways, toward the room center
    let moved = &sample.objects[1].box3d;
    let dx = if moved.center.x > 0.0 { -cfg.translation } else { cfg.translation };
    let consistency = (|| -> Result<ConsistencyScores> {
        let before_box = visible_bbox(&scene, &moved.id)?;
        let req = TranslationRequest {
            box_id: moved.id.clone(),
            t: Vec3::new(dx, 0.0, 0.0),
            blend_fraction: cfg.session.blend_fraction,
        };
        let rec = session.translate_object(rig.backend, req, rig.segmenter, &mut progress)?;
        let after_box = visible_bbox(&rec.scene, &moved.id)?;
        consistency_eval(&image, &rec.image, &before_box, &after_box, rig.scorer)
    })();
    match consistency {
        Ok(c) => case.consistency = Some(c),
        Err(e) => case.errors.push(format!("translation: {e}")),
    }
    case
}

/// Samples `cfg.layouts` layouts and runs each with `cfg.seeds_per_layout`
/// seeds. Failures are recorded in the case rows.
pub fn run_benchmark(cfg: &BenchmarkConfig, rig: &BenchmarkRig<'_>) -> Result<BenchmarkReport> {
    let catalogs = Catalogs::builtin();
    let camera = Camera::looking_forward(cfg.resolution, cfg.resolution);
    let layouts: Vec<Result<LayoutSample>> = (0..cfg.layouts)
        .map(|l| sample_layout(cfg.layout_seed.wrapping_add(l as u64), &catalogs, cfg.room_extents, &camera))
        .collect();
    let jobs: Vec<(usize, u64)> = (0..cfg.layouts)
        .flat_map(|l| (0..cfg.seeds_per_layout as u64).map(move |s| (l, s)))
        .collect();
    let mut cases: Vec<CaseResult> = jobs
        .par_iter()
        .map(|&(l, seed)| match &layouts[l] {
            Ok(sample) => run_case(cfg, rig, l, sample, seed),
            Err(e) => CaseResult {
                layout: l,
                seed,
                prompt: String::new(),
                relation: Relation::Right,
                objects: Vec::new(),
                miou: None,
                object_accuracy: None,
                clip_t2i: None,
                consistency: None,
                errors: vec![format!("layout: {e}")],
            },
        })
        .collect();
    cases.sort_by_key(|c| (c.layout, c.seed));
    Ok(BenchmarkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        backend: rig.backend_name.clone(),
        detector: rig.detector_name.clone(),
        config: cfg.clone(),
        summary: summarize(&cases),
        cases,
    })
}

/// Plain-text summary table.
pub fn report_table(report: &BenchmarkReport) -> String {
    let mut s = format!(
        "cases: {}  failed: {}\n{:<16} {:>10} {:>6}\n",
        report.summary.cases, report.summary.failed_cases, "metric", "mean", "n"
    );
    for (k, m) in &report.summary.metrics {
        s.push_str(&format!("{k:<16} {:>10.4} {:>6}\n", m.mean, m.count));
    }
    s
}
