//! Stage-wise generation: the background stage, add-object stages (DSA,
//! latent blending, AdaIN), and translate-object stages (warp, inversion,
//! warp blending).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::KVRecord;
use crate::denoiser::{downsample_mask, tokenize, AttentionMode, CrossAttnRecord, DepthCond, EpsModel, PredictRequest};
use crate::error::{Error, Result};
use crate::kernel::{
    adain, blend_latents, ddim_invert_step, ddim_step, linear_schedule, warp_blend, Latent, LatentMask, NoiseSchedule,
};
use crate::projector::{Projector, PATCH};
use crate::raster::{fit_bbox2d, BBox2D, ImageRgb, Mask, SegmentationMask};
use crate::render::{render_cartesian, render_scene, DepthMap, StageMasks};
use crate::scene::{apply_translation, check_in_bounds, Box3D, SceneLayout};
use crate::translation::{
    accumulate_cross_attention, coarse_to_bbox, correspondence_from_maps, homography_from_pairs, refine_segmentation,
    warp_paste, FallbackSegmenter, Homography, PixelPair, Segmenter, TranslationRequest, DEFAULT_BLEND_FRACTION,
    DEFAULT_COARSE_THRESHOLD, DEFAULT_SNAP_RADIUS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionChoice {
    Standard,
    CrossFrame,
    Extended,
    #[default]
    Dsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdainMode {
    Off,
    #[default]
    PerStep,
    /// Only after the first denoising step.
    Once,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendTiming {
    /// Blend `x_t` right before ε-prediction (and the final `x_0`).
    #[default]
    BeforePredict,
    /// Blend `x_{t−1}` right after the DDIM step and AdaIN.
    AfterStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Stage `i` uses `seed + i`.
    #[default]
    PerStage,
    /// Every stage uses `seed`.
    Reuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    /// `[width, height]`; must match the scene camera when set.
    pub resolution: Option<[u32; 2]>,
    pub seed: u64,
    pub seed_policy: SeedPolicy,
    pub denoiser_seed: u64,
    pub attention: AttentionChoice,
    pub blend: bool,
    pub blend_timing: BlendTiming,
    pub adain: AdainMode,
    pub cfg_scale: f64,
    pub blend_fraction: f64,
    pub coarse_threshold: f64,
    /// Fraction of the final denoising steps whose cross-attention is
    /// accumulated for segmentation.
    pub cross_attn_fraction: f64,
    pub snap_radius: usize,
    pub inversion_tol: f64,
    pub inversion_max_iter: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            steps: 20,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            eta: 0.0,
            resolution: None,
            seed: 0,
            seed_policy: SeedPolicy::PerStage,
            denoiser_seed: 0,
            attention: AttentionChoice::Dsa,
            blend: true,
            blend_timing: BlendTiming::BeforePredict,
            adain: AdainMode::PerStep,
            cfg_scale: 1.0,
            blend_fraction: DEFAULT_BLEND_FRACTION,
            coarse_threshold: DEFAULT_COARSE_THRESHOLD,
            cross_attn_fraction: 0.5,
            snap_radius: DEFAULT_SNAP_RADIUS,
            inversion_tol: 1e-12,
            inversion_max_iter: 50,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.blend_fraction) {
            return Err(Error::validation("blend_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.cross_attn_fraction) || self.cross_attn_fraction == 0.0 {
            return Err(Error::validation("cross_attn_fraction", "must lie in (0, 1]"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::validation("cfg_scale", "must be finite"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end, self.eta)
    }

    pub fn stage_seed(&self, index: usize) -> u64 {
        match self.seed_policy {
            SeedPolicy::PerStage => self.seed.wrapping_add(index as u64),
            SeedPolicy::Reuse => self.seed,
        }
    }

    pub fn check_scene(&self, scene: &SceneLayout) -> Result<()> {
        let cam = &scene.camera;
        if let Some([w, h]) = self.resolution {
            if (w, h) != (cam.width, cam.height) {
                return Err(Error::validation("resolution", "must match the scene camera"));
            }
        }
        let grid = (PATCH * crate::denoiser::GRID) as u32;
        if cam.width % grid != 0 || cam.height % grid != 0 {
            return Err(Error::validation(
                "camera",
                format!("width and height must be multiples of {grid}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePrompt {
    pub text: String,
    /// Token whose cross-attention localizes the object; defaults to the
    /// last token.
    #[serde(default)]
    pub object_token_index: Option<usize>,
}

impl StagePrompt {
    pub fn new(text: impl Into<String>) -> Self {
        StagePrompt {
            text: text.into(),
            object_token_index: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = tokenize(&self.text).len();
        if n == 0 {
            return Err(Error::validation("prompt.text", "must not be empty"));
        }
        if let Some(k) = self.object_token_index {
            if k >= n {
                return Err(Error::validation(
                    "prompt.object_token_index",
                    format!("{k} is past the {n} prompt tokens"),
                ));
            }
        }
        Ok(())
    }

    pub fn token_index(&self) -> usize {
        self.object_token_index
            .unwrap_or_else(|| tokenize(&self.text).len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Background,
    Add,
    Translate,
}

/// Everything a translate stage derived on its way to the warped image.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationInfo {
    pub request: TranslationRequest,
    pub base_stage: usize,
    pub coarse_bbox: BBox2D,
    pub object_bbox: BBox2D,
    pub pairs: [PixelPair; 4],
    pub homography: Homography,
    pub segmentation: SegmentationMask,
    pub warped_image: ImageRgb,
    pub warped_seg: SegmentationMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub index: usize,
    pub kind: StageKind,
    pub box3d: Option<Box3D>,
    pub prompt: StagePrompt,
    pub seed: u64,
    /// Layout after this stage.
    pub scene: SceneLayout,
    pub depth: DepthMap,
    /// Image-resolution masks of this stage's box.
    pub masks: StageMasks,
    /// `masks.fg` pooled to the latent grid.
    pub latent_fg: Mask,
    /// `x_T, …, x_0` as fed to the network (after any blending).
    pub trajectory: Vec<Latent>,
    /// Self-attention K/V per step, timesteps descending, layers ascending.
    pub kv: Vec<KVRecord>,
    pub cross_attn: Vec<CrossAttnRecord>,
    pub image: ImageRgb,
    /// Box id → stage that introduced it.
    pub introduced: BTreeMap<String, usize>,
    /// Box id → latest stage that generated its appearance.
    pub generated: BTreeMap<String, usize>,
    pub translation: Option<TranslationInfo>,
}

impl StageRecord {
    pub fn steps(&self) -> usize {
        self.trajectory.len() - 1
    }

    /// `x_t` of this stage.
    pub fn latent_at(&self, t: usize) -> &Latent {
        &self.trajectory[self.steps() - t]
    }

    /// K/V records of all layers at timestep `t` (empty when the backend
    /// returned none).
    pub fn kv_at(&self, t: usize) -> &[KVRecord] {
        let steps = self.steps();
        if self.kv.is_empty() {
            return &[];
        }
        let per = self.kv.len() / steps;
        let k = steps - t;
        &self.kv[k * per..(k + 1) * per]
    }

    pub fn final_latent(&self) -> &Latent {
        self.trajectory.last().expect("nonempty trajectory")
    }
}

/// Progress of a running stage, reported once per denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepProgress {
    pub stage: usize,
    pub phase: Phase,
    pub step: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Invert,
    Denoise,
}

pub type ProgressFn<'a> = &'a mut dyn FnMut(StepProgress);

pub fn no_progress() -> impl FnMut(StepProgress) {
    |_| {}
}

fn gaussian_latent(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Latent {
    let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    Latent::from_vec(c, h, w, data).expect("latent dims")
}

struct Ctx {
    schedule: NoiseSchedule,
    projector: Projector,
    latent_hw: (usize, usize),
}

impl Ctx {
    fn new(model: &dyn EpsModel, config: &SessionConfig, scene: &SceneLayout) -> Result<Self> {
        config.validate()?;
        config.check_scene(scene)?;
        let cam = &scene.camera;
        if cam.width.max(cam.height) > model.capabilities().max_resolution {
            return Err(Error::Unsupported(format!(
                "backend resolution limit is {}",
                model.capabilities().max_resolution
            )));
        }
        Ok(Ctx {
            schedule: config.schedule()?,
            projector: Projector::new(),
            latent_hw: (cam.height as usize / PATCH, cam.width as usize / PATCH),
        })
    }

    fn depth_cond(&self, depth: &DepthMap) -> Result<DepthCond> {
        DepthCond::from_depth(depth, self.latent_hw.0, self.latent_hw.1)
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> Latent {
        gaussian_latent(rng, crate::denoiser::LATENT_CHANNELS, self.latent_hw.0, self.latent_hw.1)
    }

    fn step_noise(&self, rng: &mut ChaCha8Rng, t: usize) -> Option<Latent> {
        (self.schedule.sigma(t) > 0.0).then(|| self.noise(rng))
    }
}

fn check_prior(prior: &[StageRecord]) -> Result<&StageRecord> {
    let last = prior
        .last()
        .ok_or_else(|| Error::validation("session", "no prior stage exists"))?;
    for (i, s) in prior.iter().enumerate() {
        assert_eq!(s.index, i, "stage records must be stored in order");
    }
    Ok(last)
}

/// Stage 0: planes-only depth, fresh noise, standard attention.
pub fn run_stage0(
    model: &dyn EpsModel,
    scene: &SceneLayout,
    prompt: &StagePrompt,
    config: &SessionConfig,
    progress: ProgressFn<'_>,
) -> Result<StageRecord> {
    scene.validate()?;
    prompt.validate()?;
    let ctx = Ctx::new(model, config, scene)?;
    let scene = scene.planes_only();
    let depth = render_scene(&scene).depth;
    let cond = ctx.depth_cond(&depth)?;
    let seed = config.stage_seed(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = ctx.schedule.steps;
    let mut x = ctx.noise(&mut rng);
    let mut trajectory = vec![x.clone()];
    let (mut kv, mut cross_attn) = (Vec::new(), Vec::new());
    for t in (1..=steps).rev() {
        let out = model.predict(&PredictRequest {
            x_t: &x,
            t,
            prompt: &prompt.text,
            depth: &cond,
            mode: AttentionMode::Standard,
            cfg_scale: config.cfg_scale,
        })?;
        x = ddim_step(&x, &out.eps, t, &ctx.schedule, ctx.step_noise(&mut rng, t).as_ref())?;
        trajectory.push(x.clone());
        kv.extend(out.kv);
        cross_attn.extend(out.cross_attn);
        progress(StepProgress {
            stage: 0,
            phase: Phase::Denoise,
            step: steps - t + 1,
            total: steps,
        });
    }
    let image = ctx.projector.decode(&x)?;
    let (w, h) = (depth.width, depth.height);
    Ok(StageRecord {
        index: 0,
        kind: StageKind::Background,
        box3d: None,
        prompt: prompt.clone(),
        seed,
        scene,
        depth,
        masks: StageMasks::from_fg(Mask::new(w, h, false)),
        latent_fg: Mask::new(ctx.latent_hw.1, ctx.latent_hw.0, false),
        trajectory,
        kv,
        cross_attn,
        image,
        introduced: BTreeMap::new(),
        generated: BTreeMap::new(),
        translation: None,
    })
}

/// Adds `b` on top of the last prior stage.
pub fn run_add_stage(
    model: &dyn EpsModel,
    prior: &[StageRecord],
    b: &Box3D,
    prompt: &StagePrompt,
    config: &SessionConfig,
    progress: ProgressFn<'_>,
) -> Result<StageRecord> {
    let prev = check_prior(prior)?;
    prompt.validate()?;
    let mut scene = prev.scene.clone();
    scene.add_box(b.clone())?;
    let ctx = Ctx::new(model, config, &scene)?;
    if prev.steps() != ctx.schedule.steps {
        return Err(Error::validation("steps", "must match the prior stages"));
    }
    let needs_kv = matches!(config.attention, AttentionChoice::Dsa | AttentionChoice::CrossFrame | AttentionChoice::Extended);
    if needs_kv && !model.capabilities().supports_kv_injection {
        return Err(Error::Unsupported(format!(
            "attention mode `{:?}` needs K/V injection, which the backend does not support",
            config.attention
        )));
    }
    let index = prior.len();
    let render = render_scene(&scene);
    let masks = render.masks_for(&scene, &b.id)?;
    let depth = render.depth;
    let cond = ctx.depth_cond(&depth)?;
    let (lh, lw) = ctx.latent_hw;
    let latent_fg = crate::denoiser::token_mask_to_mask(&downsample_mask(&masks.fg, lh, lw)?);
    let latent_masks = StageMasks::from_fg(latent_fg.clone());
    let seed = config.stage_seed(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = ctx.schedule.steps;
    let blend_before = config.blend && config.blend_timing == BlendTiming::BeforePredict;
    let blend_after = config.blend && config.blend_timing == BlendTiming::AfterStep;

    let mut x = ctx.noise(&mut rng);
    let mut trajectory = Vec::with_capacity(steps + 1);
    let (mut kv, mut cross_attn) = (Vec::new(), Vec::new());
    for t in (1..=steps).rev() {
        if blend_before {
            x = blend_latents(prev.latent_at(t), &x, &latent_masks)?;
        }
        trajectory.push(x.clone());
        let priors: Vec<&[KVRecord]> = prior.iter().map(|s| s.kv_at(t)).collect();
        let mode = match config.attention {
            AttentionChoice::Standard => AttentionMode::Standard,
            AttentionChoice::CrossFrame => AttentionMode::CrossFrame { prior: prev.kv_at(t) },
            AttentionChoice::Extended => AttentionMode::Extended { priors: &priors },
            AttentionChoice::Dsa => AttentionMode::Dsa {
                prior: prev.kv_at(t),
                fg: &latent_fg,
            },
        };
        let out = model.predict(&PredictRequest {
            x_t: &x,
            t,
            prompt: &prompt.text,
            depth: &cond,
            mode,
            cfg_scale: config.cfg_scale,
        })?;
        x = ddim_step(&x, &out.eps, t, &ctx.schedule, ctx.step_noise(&mut rng, t).as_ref())?;
        let adain_now = match config.adain {
            AdainMode::Off => false,
            AdainMode::PerStep => true,
            AdainMode::Once => t == steps,
        };
        if adain_now {
            x = adain(&x, prev.latent_at(t - 1))?;
        }
        if blend_after {
            x = blend_latents(prev.latent_at(t - 1), &x, &latent_masks)?;
        }
        kv.extend(out.kv);
        cross_attn.extend(out.cross_attn);
        progress(StepProgress {
            stage: index,
            phase: Phase::Denoise,
            step: steps - t + 1,
            total: steps,
        });
    }
    if blend_before {
        x = blend_latents(prev.latent_at(0), &x, &latent_masks)?;
    }
    trajectory.push(x.clone());
    let image = ctx.projector.decode(&x)?;
    let mut introduced = prev.introduced.clone();
    introduced.insert(b.id.clone(), index);
    let mut generated = prev.generated.clone();
    generated.insert(b.id.clone(), index);
    Ok(StageRecord {
        index,
        kind: StageKind::Add,
        box3d: Some(b.clone()),
        prompt: prompt.clone(),
        seed,
        scene,
        depth,
        masks,
        latent_fg,
        trajectory,
        kv,
        cross_attn,
        image,
        introduced,
        generated,
        translation: None,
    })
}

/// Deterministic DDIM inversion of `x0`, each implicit step solved by
/// fixed-point iteration on `x_t = invert(x_{t−1}, ε(x_t))`. Returns
/// `x_T, …, x_0`.
pub fn invert_latent(
    model: &dyn EpsModel,
    x0: &Latent,
    prompt: &str,
    depth: &DepthCond,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    tol: f64,
    max_iter: usize,
    mut progress: impl FnMut(usize),
) -> Result<Vec<Latent>> {
    let steps = schedule.steps;
    let mut traj = vec![x0.clone()];
    let mut x = x0.clone();
    let eps_at = |x: &Latent, t: usize| -> Result<Latent> {
        Ok(model
            .predict(&PredictRequest {
                x_t: x,
                t,
                prompt,
                depth,
                mode: AttentionMode::Standard,
                cfg_scale,
            })?
            .eps)
    };
    for t in 1..=steps {
        let mut guess = ddim_invert_step(&x, &eps_at(&x, t)?, t, schedule)?;
        for _ in 0..max_iter {
            let next = ddim_invert_step(&x, &eps_at(&guess, t)?, t, schedule)?;
            let delta = next.max_rel_diff(&guess);
            guess = next;
            if delta <= tol {
                break;
            }
        }
        x = guess;
        traj.push(x.clone());
        progress(t);
    }
    traj.reverse();
    Ok(traj)
}

/// Moves a box: segment it in the last image, warp it onto the image from
/// before it was introduced, invert, and re-denoise with the warp blend
/// over the first `⌈blend_fraction·T⌉` steps.
pub fn run_translate_stage(
    model: &dyn EpsModel,
    prior: &[StageRecord],
    request: &TranslationRequest,
    segmenter: Option<&dyn Segmenter>,
    config: &SessionConfig,
    progress: ProgressFn<'_>,
) -> Result<StageRecord> {
    let prev = check_prior(prior)?;
    request.validate()?;
    let old = prev.scene.find_box(&request.box_id)?.clone();
    let intro = *prev
        .introduced
        .get(&request.box_id)
        .ok_or_else(|| Error::validation("box_id", "box was not introduced by an add stage"))?;
    let source = prev.generated[&request.box_id];
    if intro == 0 || intro >= prior.len() {
        return Err(Error::validation("box_id", "box has no usable introduction stage"));
    }
    let base = &prior[intro - 1];
    let moved = apply_translation(&old, request.t);
    if !check_in_bounds(&prev.scene, &moved) {
        return Err(Error::OutOfBounds { id: moved.id });
    }
    let mut scene = prev.scene.clone();
    scene.replace_box(moved.clone())?;
    let ctx = Ctx::new(model, config, &scene)?;
    let steps = ctx.schedule.steps;
    if prev.steps() != steps {
        return Err(Error::validation("steps", "must match the prior stages"));
    }
    let index = prior.len();
    let cam = &scene.camera;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let (lh, lw) = ctx.latent_hw;

    // locate and segment the object in the last image
    let src_stage = &prior[source];
    let token = src_stage.prompt.token_index();
    let horizon = ((config.cross_attn_fraction * steps as f64).ceil() as usize).max(1);
    let records: Vec<CrossAttnRecord> = src_stage
        .cross_attn
        .iter()
        .filter(|r| r.timestep <= horizon)
        .cloned()
        .collect();
    let coarse = accumulate_cross_attention(&records, token, w, h)?;
    let coarse_bbox = coarse_to_bbox(&coarse, config.coarse_threshold)?;
    let prev_fg = render_scene(&prev.scene).masks_for(&prev.scene, &old.id)?.fg;
    let fallback = FallbackSegmenter { fg: prev_fg };
    let seg = refine_segmentation(&prev.image, coarse_bbox, segmenter.unwrap_or(&fallback))?;
    let object_bbox = fit_bbox2d(&seg.threshold(0.5))?;

    // corner correspondences and warp
    let c = render_cartesian(&old, cam);
    let c_hat = render_cartesian(&moved, cam);
    let pairs = correspondence_from_maps(&c, &c_hat, request.t, object_bbox, cam, config.snap_radius)?;
    let homography = homography_from_pairs(&pairs)?;
    let (warped_image, warped_seg) = warp_paste(&prev.image, &seg, &homography, &base.image)?;

    // invert the warped image
    let render = render_scene(&scene);
    let masks = render.masks_for(&scene, &moved.id)?;
    let depth = render.depth;
    let cond = ctx.depth_cond(&depth)?;
    let latent_fg = crate::denoiser::token_mask_to_mask(&downsample_mask(&masks.fg, lh, lw)?);
    let s_latent = LatentMask::from_mask(&crate::denoiser::token_mask_to_mask(&downsample_mask(
        &warped_seg.threshold(0.5),
        lh,
        lw,
    )?));
    let prompt = src_stage.prompt.clone();
    let z_w = ctx.projector.encode(&warped_image)?;
    let inverted = invert_latent(
        model,
        &z_w,
        &prompt.text,
        &cond,
        &ctx.schedule,
        config.cfg_scale,
        config.inversion_tol,
        config.inversion_max_iter,
        |k| {
            progress(StepProgress {
                stage: index,
                phase: Phase::Invert,
                step: k,
                total: steps,
            })
        },
    )?;

    // re-denoise with the warp blend
    let blend_steps = request.blend_steps(steps);
    let seed = config.stage_seed(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = inverted[0].clone();
    let mut trajectory = Vec::with_capacity(steps + 1);
    let (mut kv, mut cross_attn) = (Vec::new(), Vec::new());
    for t in (1..=steps).rev() {
        let k = steps - t;
        if k < blend_steps {
            x = warp_blend(&inverted[k], base.latent_at(t), &s_latent)?;
        }
        trajectory.push(x.clone());
        let out = model.predict(&PredictRequest {
            x_t: &x,
            t,
            prompt: &prompt.text,
            depth: &cond,
            mode: AttentionMode::Standard,
            cfg_scale: config.cfg_scale,
        })?;
        x = ddim_step(&x, &out.eps, t, &ctx.schedule, ctx.step_noise(&mut rng, t).as_ref())?;
        kv.extend(out.kv);
        cross_attn.extend(out.cross_attn);
        progress(StepProgress {
            stage: index,
            phase: Phase::Denoise,
            step: k + 1,
            total: steps,
        });
    }
    trajectory.push(x.clone());
    let image = ctx.projector.decode(&x)?;
    let mut generated = prev.generated.clone();
    generated.insert(moved.id.clone(), index);
    Ok(StageRecord {
        index,
        kind: StageKind::Translate,
        box3d: Some(moved),
        prompt,
        seed,
        scene,
        depth,
        masks,
        latent_fg,
        trajectory,
        kv,
        cross_attn,
        image,
        introduced: prev.introduced.clone(),
        generated,
        translation: Some(TranslationInfo {
            request: request.clone(),
            base_stage: intro - 1,
            coarse_bbox,
            object_bbox,
            pairs,
            homography,
            segmentation: seg,
            warped_image,
            warped_seg,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Left,
    Right,
    Above,
}

/// The evaluation prompt `P*` for a background prompt and one or two
/// object prompts. For two objects, `relation` places the second relative
/// to the first.
pub fn compose_scene_prompt(p0: &str, objects: &[&str], relation: Option<Relation>) -> Result<String> {
    match (objects, relation) {
        ([p1], None) => Ok(format!("{p0} with {p1}")),
        ([p1, p2], Some(Relation::Right)) => Ok(format!("{p0} with {p1} on the left and {p2} on the right")),
        ([p1, p2], Some(Relation::Left)) => Ok(format!("{p0} with {p2} on the left and {p1} on the right")),
        ([p1, p2], Some(Relation::Above)) => Ok(format!("{p0} with {p2} on top of {p1}")),
        _ => Err(Error::validation(
            "placements",
            "expected one object, or two objects with a relation",
        )),
    }
}
