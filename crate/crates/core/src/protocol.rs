//! JSON wire shapes for remote denoisers, segmenters, detectors and scorers.
//!
//! Tensors travel as base64 f32 blobs, images and masks as base64 PNG.
//! Remote tensors are f32, so a round trip through the wire narrows values.

use serde::{Deserialize, Serialize};

use crate::attention::KVRecord;
use crate::codec::{b64, image_from_png, image_to_png, mask_from_png, mask_to_png, soft_mask_from_png, unb64, F32Blob};
use crate::denoiser::{AttentionMode, CrossAttnRecord, DepthCond, PredictOutput, PredictRequest};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::kernel::Latent;
use crate::raster::{BBox2D, ImageRgb, Mask, SegmentationMask};
use crate::tensor::Matrix;

pub const PROTOCOL_VERSION: u32 = 1;

fn blob_b64(w: usize, h: usize, c: usize, data: &[f64]) -> String {
    F32Blob::from_f64(w, h, c, data).expect("dims match data").to_base64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeWire {
    Standard,
    CrossFrame,
    Extended,
    /// `fg` is a PNG at latent resolution.
    Dsa { fg: String },
}

/// One stored K/V pair. `group` separates reference stages in extended mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvWire {
    #[serde(default)]
    pub group: usize,
    pub layer: usize,
    pub timestep: usize,
    pub k: String,
    pub v: String,
}

impl KvWire {
    pub fn encode(group: usize, r: &KVRecord) -> Self {
        KvWire {
            group,
            layer: r.layer,
            timestep: r.timestep,
            k: blob_b64(r.k.cols, r.k.rows, 1, &r.k.data),
            v: blob_b64(r.v.cols, r.v.rows, 1, &r.v.data),
        }
    }

    pub fn decode(&self) -> Result<KVRecord> {
        let m = |s: &str| -> Result<Matrix> {
            let b = F32Blob::from_base64(s)?;
            if b.c != 1 {
                return Err(Error::Codec("kv blobs have one channel".into()));
            }
            Ok(Matrix::from_vec(b.h, b.w, b.to_f64()))
        };
        Ok(KVRecord {
            layer: self.layer,
            timestep: self.timestep,
            k: m(&self.k)?,
            v: m(&self.v)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossAttnWire {
    pub layer: usize,
    pub timestep: usize,
    pub token_index: usize,
    pub map: String,
}

impl CrossAttnWire {
    pub fn encode(r: &CrossAttnRecord) -> Self {
        CrossAttnWire {
            layer: r.layer,
            timestep: r.timestep,
            token_index: r.token_index,
            map: blob_b64(r.grid_w, r.grid_h, 1, &r.map),
        }
    }

    pub fn decode(&self) -> Result<CrossAttnRecord> {
        let b = F32Blob::from_base64(&self.map)?;
        Ok(CrossAttnRecord {
            layer: self.layer,
            timestep: self.timestep,
            token_index: self.token_index,
            grid_h: b.h,
            grid_w: b.w,
            map: b.to_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictWire {
    pub latent: String,
    pub t: usize,
    pub prompt: String,
    pub depth: String,
    pub mode: ModeWire,
    #[serde(default = "one")]
    pub cfg_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_refs: Option<Vec<KvWire>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictReplyWire {
    pub eps: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv: Option<Vec<KvWire>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_attn: Option<Vec<CrossAttnWire>>,
}

pub fn encode_predict(req: &PredictRequest<'_>) -> PredictWire {
    let d = req.depth;
    let kv = |groups: &[&[KVRecord]]| -> Vec<KvWire> {
        groups
            .iter()
            .enumerate()
            .flat_map(|(g, recs)| recs.iter().map(move |r| KvWire::encode(g, r)))
            .collect()
    };
    let (mode, kv_refs) = match &req.mode {
        AttentionMode::Standard => (ModeWire::Standard, None),
        AttentionMode::CrossFrame { prior } => (ModeWire::CrossFrame, Some(kv(&[prior]))),
        AttentionMode::Extended { priors } => (ModeWire::Extended, Some(kv(priors))),
        AttentionMode::Dsa { prior, fg } => (ModeWire::Dsa { fg: b64(&mask_to_png(fg)) }, Some(kv(&[prior]))),
    };
    PredictWire {
        latent: req.x_t.to_blob().to_base64(),
        t: req.t,
        prompt: req.prompt.to_string(),
        depth: blob_b64(d.width, d.height, 1, &d.values),
        mode,
        cfg_scale: req.cfg_scale,
        kv_refs,
    }
}

/// A decoded predict call that owns its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPredict {
    pub x_t: Latent,
    pub t: usize,
    pub prompt: String,
    pub depth: DepthCond,
    pub mode: String,
    pub fg: Option<Mask>,
    pub kv_groups: Vec<Vec<KVRecord>>,
    pub cfg_scale: f64,
}

impl DecodedPredict {
    pub fn decode(w: &PredictWire) -> Result<Self> {
        let x_t = Latent::from_blob(&F32Blob::from_base64(&w.latent)?);
        let db = F32Blob::from_base64(&w.depth)?;
        if db.c != 1 {
            return Err(Error::validation("depth", "must have one channel"));
        }
        let depth = DepthCond {
            height: db.h,
            width: db.w,
            values: db.to_f64(),
        };
        let mut kv_groups: Vec<Vec<KVRecord>> = Vec::new();
        for (i, k) in w.kv_refs.iter().flatten().enumerate() {
            if k.group > kv_groups.len() {
                return Err(Error::validation(format!("kv_refs[{i}].group"), "groups must be contiguous"));
            }
            if k.group == kv_groups.len() {
                kv_groups.push(Vec::new());
            }
            kv_groups[k.group].push(k.decode()?);
        }
        let (mode, fg) = match &w.mode {
            ModeWire::Standard => ("standard", None),
            ModeWire::CrossFrame => ("cross_frame", None),
            ModeWire::Extended => ("extended", None),
            ModeWire::Dsa { fg } => ("dsa", Some(mask_from_png(&unb64(fg)?)?)),
        };
        if mode != "standard" && kv_groups.is_empty() {
            return Err(Error::validation("kv_refs", format!("required for mode `{mode}`")));
        }
        if matches!(mode, "cross_frame" | "dsa") && kv_groups.len() != 1 {
            return Err(Error::validation("kv_refs", "expected a single group"));
        }
        Ok(DecodedPredict {
            x_t,
            t: w.t,
            prompt: w.prompt.clone(),
            depth,
            mode: mode.to_string(),
            fg,
            kv_groups,
            cfg_scale: w.cfg_scale,
        })
    }

    /// Runs `f` on the borrowed request form.
    pub fn with_request<R>(&self, f: impl FnOnce(&PredictRequest<'_>) -> R) -> R {
        let refs: Vec<&[KVRecord]> = self.kv_groups.iter().map(|g| g.as_slice()).collect();
        let mode = match self.mode.as_str() {
            "cross_frame" => AttentionMode::CrossFrame { prior: refs[0] },
            "extended" => AttentionMode::Extended { priors: &refs },
            "dsa" => AttentionMode::Dsa {
                prior: refs[0],
                fg: self.fg.as_ref().expect("dsa carries a mask"),
            },
            _ => AttentionMode::Standard,
        };
        f(&PredictRequest {
            x_t: &self.x_t,
            t: self.t,
            prompt: &self.prompt,
            depth: &self.depth,
            mode,
            cfg_scale: self.cfg_scale,
        })
    }
}

pub fn encode_reply(out: &PredictOutput) -> PredictReplyWire {
    PredictReplyWire {
        eps: out.eps.to_blob().to_base64(),
        kv: Some(out.kv.iter().map(|r| KvWire::encode(0, r)).collect()),
        cross_attn: Some(out.cross_attn.iter().map(CrossAttnWire::encode).collect()),
    }
}

/// Decodes a reply and checks the ε shape against the request latent.
pub fn decode_reply(w: &PredictReplyWire, x_t: &Latent) -> Result<PredictOutput> {
    let eps = Latent::from_blob(&F32Blob::from_base64(&w.eps)?);
    if eps.shape() != x_t.shape() {
        return Err(Error::Backend(format!(
            "eps shape {:?} does not match latent {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    Ok(PredictOutput {
        eps,
        kv: w.kv.iter().flatten().map(KvWire::decode).collect::<Result<_>>()?,
        cross_attn: w.cross_attn.iter().flatten().map(CrossAttnWire::decode).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentWire {
    pub image: String,
    pub bbox: [u32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentReplyWire {
    pub mask: String,
}

pub fn encode_segment(image: &ImageRgb, bbox: BBox2D) -> SegmentWire {
    SegmentWire {
        image: b64(&image_to_png(image)),
        bbox: bbox.to_array(),
        prompt: None,
    }
}

pub fn decode_segment_reply(w: &SegmentReplyWire, width: usize, height: usize) -> Result<SegmentationMask> {
    let m = soft_mask_from_png(&unb64(&w.mask)?)?;
    if (m.width, m.height) != (width, height) {
        return Err(Error::SegmentationFailed(format!(
            "mask is {}x{}, image is {width}x{height}",
            m.width, m.height
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectWire {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionWire {
    pub label: String,
    pub confidence: f64,
    pub bbox: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectReplyWire {
    pub detections: Vec<DetectionWire>,
}

pub fn encode_detect(image: &ImageRgb) -> DetectWire {
    DetectWire {
        image: b64(&image_to_png(image)),
    }
}

pub fn decode_detect_reply(w: &DetectReplyWire, width: usize, height: usize) -> Result<Vec<Detection>> {
    w.detections
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let bbox = BBox2D::from_array(d.bbox)?;
            if !bbox.fits(width, height) || !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::validation(format!("detections[{i}]"), "bbox or confidence out of range"));
            }
            Ok(Detection {
                label: d.label.clone(),
                confidence: d.confidence,
                bbox,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreWire {
    TextImage { image: String, text: String },
    ImageImage { image: String, other: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreReplyWire {
    pub score: f64,
}

pub fn encode_image(image: &ImageRgb) -> String {
    b64(&image_to_png(image))
}

pub fn decode_image(s: &str) -> Result<ImageRgb> {
    image_from_png(&unb64(s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_tags() {
        let j = serde_json::to_string(&ModeWire::Dsa { fg: "x".into() }).unwrap();
        assert_eq!(j, r#"{"kind":"dsa","fg":"x"}"#);
        let j = serde_json::to_string(&ModeWire::CrossFrame).unwrap();
        assert_eq!(j, r#"{"kind":"cross_frame"}"#);
    }

    #[test]
    fn missing_kv_is_rejected() {
        let w = PredictWire {
            latent: Latent::zeros(4, 2, 2).to_blob().to_base64(),
            t: 1,
            prompt: "a".into(),
            depth: blob_b64(2, 2, 1, &[0.0; 4]),
            mode: ModeWire::CrossFrame,
            cfg_scale: 1.0,
            kv_refs: None,
        };
        assert!(DecodedPredict::decode(&w).is_err());
    }
}
