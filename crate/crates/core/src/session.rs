//! A session: the append-only list of stages plus the operations that
//! produced them, persisted as a directory and restored by replay.
//!
//! ```text
//! session/
//!   config.json  scene.json  ops.json
//!   stages/<i>/record.json  depth.f32  mask_fg.png  image.png
//!              cartesian.f32  seg.png  warped.png
//!              latents/x_<t>.f32  kv/l<layer>_t<t>_{k,v}.f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{image_from_png, image_to_png, mask_to_png, soft_mask_to_png, F32Blob};
use crate::denoiser::EpsModel;
use crate::error::{Error, Result};
use crate::pipeline::{
    run_add_stage, run_stage0, run_translate_stage, SessionConfig, StageKind, StagePrompt, StageRecord, StepProgress,
};
use crate::raster::{BBox2D, ImageRgb, SegmentationMask};
use crate::render::render_cartesian;
use crate::scene::{Box3D, SceneLayout};
use crate::translation::{Homography, PixelPair, Segmenter, TranslationRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageOp {
    Background { prompt: StagePrompt },
    Add { box3d: Box3D, prompt: StagePrompt },
    Translate { request: TranslationRequest },
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigFile {
    format: u32,
    config: SessionConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct TranslationSummary {
    request: TranslationRequest,
    base_stage: usize,
    coarse_bbox: BBox2D,
    object_bbox: BBox2D,
    pairs: [PixelPair; 4],
    homography: Homography,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordFile {
    index: usize,
    kind: StageKind,
    box3d: Option<Box3D>,
    prompt: StagePrompt,
    seed: u64,
    image_sha256: String,
    introduced: BTreeMap<String, usize>,
    generated: BTreeMap<String, usize>,
    translation: Option<TranslationSummary>,
}

/// Hex SHA-256 of an image's raw RGB bytes.
pub fn image_digest(img: &ImageRgb) -> String {
    let d = Sha256::digest(&img.data);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Replays a stored segmentation regardless of the box prompt.
struct Recorded(SegmentationMask);

impl Segmenter for Recorded {
    fn segment(&self, _: &ImageRgb, _: BBox2D) -> Result<SegmentationMask> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    config: SessionConfig,
    initial_scene: SceneLayout,
    ops: Vec<StageOp>,
    stages: Vec<StageRecord>,
}

impl Session {
    /// Validates the inputs and runs stage 0.
    pub fn create(
        model: &dyn EpsModel,
        scene: SceneLayout,
        prompt: StagePrompt,
        config: SessionConfig,
        progress: &mut dyn FnMut(StepProgress),
    ) -> Result<Self> {
        scene.validate()?;
        let stage0 = run_stage0(model, &scene, &prompt, &config, progress)?;
        Ok(Session {
            config,
            initial_scene: scene,
            ops: vec![StageOp::Background { prompt }],
            stages: vec![stage0],
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn initial_scene(&self) -> &SceneLayout {
        &self.initial_scene
    }

    pub fn ops(&self) -> &[StageOp] {
        &self.ops
    }

    pub fn stages(&self) -> &[StageRecord] {
        &self.stages
    }

    pub fn stage(&self, i: usize) -> Result<&StageRecord> {
        self.stages.get(i).ok_or_else(|| Error::NotFound {
            kind: "stage",
            id: i.to_string(),
        })
    }

    pub fn last(&self) -> &StageRecord {
        self.stages.last().expect("stage 0 exists")
    }

    /// Layout after the latest stage.
    pub fn scene(&self) -> &SceneLayout {
        &self.last().scene
    }

    pub fn add_object(
        &mut self,
        model: &dyn EpsModel,
        box3d: Box3D,
        prompt: StagePrompt,
        progress: &mut dyn FnMut(StepProgress),
    ) -> Result<&StageRecord> {
        let rec = run_add_stage(model, &self.stages, &box3d, &prompt, &self.config, progress)?;
        self.ops.push(StageOp::Add { box3d, prompt });
        self.stages.push(rec);
        Ok(self.last())
    }

    pub fn translate_object(
        &mut self,
        model: &dyn EpsModel,
        request: TranslationRequest,
        segmenter: Option<&dyn Segmenter>,
        progress: &mut dyn FnMut(StepProgress),
    ) -> Result<&StageRecord> {
        let rec = run_translate_stage(model, &self.stages, &request, segmenter, &self.config, progress)?;
        self.ops.push(StageOp::Translate { request });
        self.stages.push(rec);
        Ok(self.last())
    }

    /// Writes the whole session directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("stages"))?;
        let cfg = ConfigFile {
            format: 1,
            config: self.config.clone(),
        };
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
        std::fs::write(dir.join("scene.json"), self.initial_scene.to_json())?;
        for i in 0..self.stages.len() {
            self.save_stage(dir, i)?;
        }
        // the op log goes last so a partial write never lists missing stages
        std::fs::write(dir.join("ops.json"), serde_json::to_vec_pretty(&self.ops)?)?;
        Ok(())
    }

    fn save_stage(&self, dir: &Path, i: usize) -> Result<()> {
        let s = &self.stages[i];
        let sd = dir.join("stages").join(i.to_string());
        std::fs::create_dir_all(sd.join("latents"))?;
        std::fs::create_dir_all(sd.join("kv"))?;
        let rec = RecordFile {
            index: s.index,
            kind: s.kind,
            box3d: s.box3d.clone(),
            prompt: s.prompt.clone(),
            seed: s.seed,
            image_sha256: image_digest(&s.image),
            introduced: s.introduced.clone(),
            generated: s.generated.clone(),
            translation: s.translation.as_ref().map(|t| TranslationSummary {
                request: t.request.clone(),
                base_stage: t.base_stage,
                coarse_bbox: t.coarse_bbox,
                object_bbox: t.object_bbox,
                pairs: t.pairs,
                homography: t.homography,
            }),
        };
        std::fs::write(sd.join("record.json"), serde_json::to_vec_pretty(&rec)?)?;
        std::fs::write(sd.join("depth.f32"), s.depth.to_blob().encode())?;
        std::fs::write(sd.join("mask_fg.png"), mask_to_png(&s.masks.fg))?;
        std::fs::write(sd.join("image.png"), image_to_png(&s.image))?;
        if let Some(b) = &s.box3d {
            std::fs::write(sd.join("cartesian.f32"), render_cartesian(b, &s.scene.camera).to_blob().encode())?;
        }
        if let Some(t) = &s.translation {
            std::fs::write(sd.join("seg.png"), soft_mask_to_png(&t.segmentation))?;
            std::fs::write(sd.join("warped.png"), image_to_png(&t.warped_image))?;
        }
        let steps = s.steps();
        for t in 0..=steps {
            std::fs::write(sd.join("latents").join(format!("x_{t:03}.f32")), s.latent_at(t).to_blob().encode())?;
        }
        for r in &s.kv {
            for (name, m) in [("k", &r.k), ("v", &r.v)] {
                let blob = F32Blob::from_f64(m.cols, m.rows, 1, &m.data)?;
                let file = format!("l{}_t{:03}_{name}.f32", r.layer, r.timestep);
                std::fs::write(sd.join("kv").join(file), blob.encode())?;
            }
        }
        Ok(())
    }

    /// Rebuilds a saved session by replaying its op log, then checks every
    /// stage image against the stored digest.
    pub fn load(dir: &Path, model: &dyn EpsModel) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
        if cfg.format != 1 {
            return Err(Error::Codec(format!("unsupported session format {}", cfg.format)));
        }
        let scene = SceneLayout::from_json(&std::fs::read_to_string(dir.join("scene.json"))?)?;
        let ops: Vec<StageOp> = serde_json::from_slice(&std::fs::read(dir.join("ops.json"))?)?;
        let mut noop = |_: StepProgress| {};
        let mut session: Option<Session> = None;
        for (i, op) in ops.into_iter().enumerate() {
            let sd = dir.join("stages").join(i.to_string());
            match (op, session.as_mut()) {
                (StageOp::Background { prompt }, None) => {
                    session = Some(Session::create(model, scene.clone(), prompt, cfg.config.clone(), &mut noop)?);
                }
                (StageOp::Add { box3d, prompt }, Some(s)) => {
                    s.add_object(model, box3d, prompt, &mut noop)?;
                }
                (StageOp::Translate { request }, Some(s)) => {
                    let seg = crate::codec::soft_mask_from_png(&std::fs::read(sd.join("seg.png"))?)?;
                    s.translate_object(model, request, Some(&Recorded(seg)), &mut noop)?;
                }
                _ => return Err(Error::Codec(format!("op {i} is out of order"))),
            }
            let rec: RecordFile = serde_json::from_slice(&std::fs::read(sd.join("record.json"))?)?;
            let got = session.as_ref().expect("session started").last();
            if image_digest(&got.image) != rec.image_sha256 {
                return Err(Error::Codec(format!("stage {i} replay does not reproduce the stored image")));
            }
        }
        session.ok_or_else(|| Error::Codec("empty op log".into()))
    }

    /// Reads the stored image of stage `i` without replaying.
    pub fn read_image(dir: &Path, i: usize) -> Result<ImageRgb> {
        image_from_png(&std::fs::read(dir.join("stages").join(i.to_string()).join("image.png"))?)
    }
}
