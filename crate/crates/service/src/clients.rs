//! Blocking HTTP clients for remote denoisers, segmenters, detectors and
//! scorers. They speak the JSON shapes in `scenestage::protocol`.

use std::sync::OnceLock;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scenestage::denoiser::{Capabilities, EpsModel, PredictOutput, PredictRequest};
use scenestage::eval::{Detection, DetectionHint, Detector, Scorer};
use scenestage::protocol::{
    decode_detect_reply, decode_reply, decode_segment_reply, encode_detect, encode_image, encode_predict,
    encode_segment, DetectReplyWire, PredictReplyWire, ScoreReplyWire, ScoreWire, SegmentReplyWire,
};
use scenestage::raster::{BBox2D, ImageRgb, SegmentationMask};
use scenestage::translation::Segmenter;
use scenestage::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub capabilities: Capabilities,
}

impl BackendDescriptor {
    pub fn toy() -> Self {
        BackendDescriptor {
            kind: BackendKind::Toy,
            endpoint: None,
            capabilities: scenestage::ToyDenoiser::new(0).capabilities(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BackendKind::External && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(Error::validation("endpoint", "external backends need a URL"));
        }
        Ok(())
    }
}

/// Blocking client built on first use, so handles can be created inside an
/// async runtime and only used from blocking threads.
struct Lazy {
    timeout: Duration,
    cell: OnceLock<reqwest::blocking::Client>,
}

impl Lazy {
    fn get(&self) -> &reqwest::blocking::Client {
        self.cell.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("http client")
        })
    }
}

fn client(timeout: Duration) -> Lazy {
    Lazy {
        timeout,
        cell: OnceLock::new(),
    }
}

fn post<B: Serialize, R: DeserializeOwned>(
    http: &Lazy,
    url: &str,
    body: &B,
    wrap: fn(String) -> Error,
) -> Result<R> {
    let resp = http.get().post(url).json(body).send().map_err(|e| wrap(format!("{url}: {e}")))?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(wrap(format!("{url}: HTTP {status}: {text}")));
    }
    resp.json().map_err(|e| wrap(format!("{url}: bad reply: {e}")))
}

/// Remote ε model. Posts each predict call to `{endpoint}/predict`.
pub struct HttpBackend {
    descriptor: BackendDescriptor,
    http: Lazy,
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor, timeout: Duration) -> Result<Self> {
        descriptor.validate()?;
        Ok(HttpBackend {
            descriptor,
            http: client(timeout),
        })
    }

    fn url(&self) -> String {
        format!("{}/predict", self.descriptor.endpoint.as_deref().unwrap_or("").trim_end_matches('/'))
    }
}

impl EpsModel for HttpBackend {
    fn capabilities(&self) -> Capabilities {
        self.descriptor.capabilities
    }

    fn predict(&self, req: &PredictRequest<'_>) -> Result<PredictOutput> {
        if req.mode.needs_kv() && !self.descriptor.capabilities.supports_kv_injection {
            return Err(Error::Unsupported(format!(
                "attention mode `{}` needs K/V injection, which the backend does not support",
                req.mode.name()
            )));
        }
        let reply: PredictReplyWire = post(&self.http, &self.url(), &encode_predict(req), Error::Backend)?;
        decode_reply(&reply, req.x_t)
    }
}

/// Remote segmenter at `{endpoint}/segment`.
pub struct HttpSegmenter {
    url: String,
    http: Lazy,
}

impl HttpSegmenter {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        HttpSegmenter {
            url: format!("{}/segment", endpoint.trim_end_matches('/')),
            http: client(timeout),
        }
    }
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, image: &ImageRgb, bbox: BBox2D) -> Result<SegmentationMask> {
        let reply: SegmentReplyWire = post(&self.http, &self.url, &encode_segment(image, bbox), Error::SegmentationFailed)?;
        decode_segment_reply(&reply, image.width, image.height)
    }
}

/// Remote detector at `{endpoint}/detect`.
pub struct HttpDetector {
    url: String,
    http: Lazy,
}

impl HttpDetector {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        HttpDetector {
            url: format!("{}/detect", endpoint.trim_end_matches('/')),
            http: client(timeout),
        }
    }
}

impl Detector for HttpDetector {
    fn detect(&self, image: &ImageRgb, _: &DetectionHint<'_>) -> Result<Vec<Detection>> {
        let reply: DetectReplyWire = post(&self.http, &self.url, &encode_detect(image), Error::Backend)?;
        decode_detect_reply(&reply, image.width, image.height)
    }
}

/// Remote CLIP-style scorer at `{endpoint}/score`.
pub struct HttpScorer {
    url: String,
    http: Lazy,
}

impl HttpScorer {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        HttpScorer {
            url: format!("{}/score", endpoint.trim_end_matches('/')),
            http: client(timeout),
        }
    }

    fn score(&self, body: &ScoreWire) -> Result<f64> {
        let reply: ScoreReplyWire = post(&self.http, &self.url, body, Error::Backend)?;
        Ok(reply.score)
    }
}

impl Scorer for HttpScorer {
    fn text_image(&self, image: &ImageRgb, text: &str) -> Result<f64> {
        self.score(&ScoreWire::TextImage {
            image: encode_image(image),
            text: text.into(),
        })
    }

    fn image_image(&self, a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
        self.score(&ScoreWire::ImageImage {
            image: encode_image(a),
            other: encode_image(b),
        })
    }
}
