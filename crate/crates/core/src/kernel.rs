//! Sampler math: linear β schedule, DDIM denoise/invert steps, latent mask
//! blending, and AdaIN.

use serde::{Deserialize, Serialize};

use crate::codec::F32Blob;
use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::render::StageMasks;

/// `C×h×w` latent, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Denoiser output; same layout as the latent it was predicted for.
pub type EpsPrediction = Latent;

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Latent {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::validation("latent", "data length does not match shape"));
        }
        Ok(Latent {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, o: &Latent, what: &str) -> Result<()> {
        if self.shape() != o.shape() {
            return Err(Error::validation(
                what,
                format!("shape {:?} does not match {:?}", o.shape(), self.shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, o: &Latent, f: impl Fn(f64, f64) -> f64) -> Latent {
        self.with_data(self.data.iter().zip(&o.data).map(|(a, b)| f(*a, *b)).collect())
    }

    pub fn max_abs_diff(&self, o: &Latent) -> f64 {
        self.data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest element-wise difference relative to the larger magnitude of
    /// `o` (floored at 1).
    pub fn max_rel_diff(&self, o: &Latent) -> f64 {
        let scale = o.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        self.max_abs_diff(o) / scale
    }

    /// Dumps as an `h×w×c` blob (channel-interleaved, as the format requires).
    pub fn to_blob(&self) -> F32Blob {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    data.push(self.get(c, y, x) as f32);
                }
            }
        }
        F32Blob::new(self.width, self.height, self.channels, data).expect("latent dims")
    }

    pub fn from_blob(b: &F32Blob) -> Latent {
        let mut data = vec![0.0; b.data.len()];
        for y in 0..b.h {
            for x in 0..b.w {
                for c in 0..b.c {
                    data[(c * b.h + y) * b.w + x] = b.data[(y * b.w + x) * b.c + c] as f64;
                }
            }
        }
        Latent {
            channels: b.c,
            height: b.h,
            width: b.w,
            data,
        }
    }
}

impl Latent {
    fn with_data(&self, data: Vec<f64>) -> Latent {
        Latent {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Soft or binary mask at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LatentMask {
    pub fn from_mask(m: &Mask) -> Self {
        LatentMask {
            height: m.height,
            width: m.width,
            data: m.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        LatentMask {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    fn check(&self, x: &Latent) -> Result<()> {
        if (self.height, self.width) != (x.height, x.width) {
            return Err(Error::validation(
                "mask",
                format!(
                    "mask is {}x{}, latent is {}x{}",
                    self.height, self.width, x.height, x.width
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `ᾱ_0 … ᾱ_T`; `ᾱ_0 = 1`.
    pub alphas: Vec<f64>,
    /// `σ_1 … σ_T` (index `t - 1`).
    pub sigmas: Vec<f64>,
    pub eta: f64,
}

impl NoiseSchedule {
    /// Schedule from explicit cumulative alphas `ᾱ_0 … ᾱ_T`. The sequence must
    /// lie in `(0, 1]` and be non-increasing.
    pub fn from_alphas(alphas: Vec<f64>, eta: f64) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::validation("schedule.alphas", "need at least ᾱ_0 and ᾱ_1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::validation("schedule.eta", "must lie in [0, 1]"));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::validation("schedule.alphas", "must lie in (0, 1]"));
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::validation("schedule.alphas", "must be non-increasing"));
        }
        let sigmas = (1..alphas.len())
            .map(|t| {
                if eta == 0.0 {
                    0.0
                } else {
                    let (a_t, a_prev) = (alphas[t], alphas[t - 1]);
                    eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt()
                }
            })
            .collect();
        Ok(NoiseSchedule {
            steps: alphas.len() - 1,
            alphas,
            sigmas,
            eta,
        })
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::validation("t", format!("must lie in 1..={}", self.steps)));
        }
        Ok(())
    }
}

/// `β` linearly spaced over `T` steps, `ᾱ_t = ∏_{s≤t}(1 − β_s)`, DDIM σ for
/// the given `eta`.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::validation("schedule.steps", "must be >= 1"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(
            "schedule.beta",
            "need 0 < beta_start <= beta_end < 1",
        ));
    }
    let mut alphas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    for s in 0..steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64
        };
        let prev = *alphas.last().unwrap();
        alphas.push(prev * (1.0 - beta));
    }
    NoiseSchedule::from_alphas(alphas, eta)
}

/// One DDIM update `x_t → x_{t−1}`:
/// `x̂_0 = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t`,
/// `x_{t−1} = √ᾱ_{t−1}·x̂_0 + √(1−ᾱ_{t−1}−σ_t²)·ε + σ_t·z`.
pub fn ddim_step(
    x_t: &Latent,
    eps: &EpsPrediction,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Latent>,
) -> Result<Latent> {
    schedule.check_t(t)?;
    x_t.check_same_shape(eps, "eps")?;
    let (a_t, a_prev, sigma) = (schedule.alpha(t), schedule.alpha(t - 1), schedule.sigma(t));
    let dir_sq = 1.0 - a_prev - sigma * sigma;
    if dir_sq < 0.0 {
        return Err(Error::Schedule(format!(
            "σ_t² = {} exceeds 1 − ᾱ_(t−1) = {} at t = {t}",
            sigma * sigma,
            1.0 - a_prev
        )));
    }
    let (sa_t, s1a_t, sa_prev, dir) = (a_t.sqrt(), (1.0 - a_t).sqrt(), a_prev.sqrt(), dir_sq.sqrt());
    let mut out = x_t.zip_map(eps, |x, e| {
        let x0 = (x - s1a_t * e) / sa_t;
        sa_prev * x0 + dir * e
    });
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::validation("noise", "required when σ_t > 0"))?;
        x_t.check_same_shape(z, "noise")?;
        for (o, z) in out.data.iter_mut().zip(&z.data) {
            *o += sigma * z;
        }
    }
    Ok(out)
}

/// The deterministic DDIM step solved for `x_t` given `x_{t−1}` and `ε`.
pub fn ddim_invert_step(x_prev: &Latent, eps: &EpsPrediction, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    if schedule.eta != 0.0 {
        return Err(Error::Unsupported("DDIM inversion requires eta = 0".into()));
    }
    schedule.check_t(t)?;
    x_prev.check_same_shape(eps, "eps")?;
    let (a_t, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
    let (sa_t, s1a_t, sa_prev, s1a_prev) = (a_t.sqrt(), (1.0 - a_t).sqrt(), a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(x_prev.zip_map(eps, |x, e| {
        let x0 = (x - s1a_prev * e) / sa_prev;
        sa_t * x0 + s1a_t * e
    }))
}

/// `M_BG ⊙ x_prev_stage + M_FG ⊙ x_cur`, broadcast over channels. Masks must
/// already be at latent resolution.
pub fn blend_latents(x_prev_stage: &Latent, x_cur: &Latent, masks: &StageMasks) -> Result<Latent> {
    x_prev_stage.check_same_shape(x_cur, "x_cur")?;
    let fg = LatentMask::from_mask(&masks.fg);
    let bg = LatentMask::from_mask(&masks.bg);
    fg.check(x_cur)?;
    bg.check(x_cur)?;
    let plane = x_cur.plane();
    let data = (0..x_cur.data.len())
        .map(|i| {
            let (b, f) = (bg.data[i % plane], fg.data[i % plane]);
            if b == 1.0 && f == 0.0 {
                x_prev_stage.data[i]
            } else if b == 0.0 && f == 1.0 {
                x_cur.data[i]
            } else {
                b * x_prev_stage.data[i] + f * x_cur.data[i]
            }
        })
        .collect();
    Ok(x_cur.with_data(data))
}

/// `S ⊙ x_warp + (1 − S) ⊙ x_base`.
pub fn warp_blend(x_warp: &Latent, x_base: &Latent, seg: &LatentMask) -> Result<Latent> {
    x_warp.check_same_shape(x_base, "x_base")?;
    seg.check(x_warp)?;
    let plane = x_warp.plane();
    let data = (0..x_warp.data.len())
        .map(|i| {
            let s = seg.data[i % plane];
            if s == 1.0 {
                x_warp.data[i]
            } else if s == 0.0 {
                x_base.data[i]
            } else {
                s * x_warp.data[i] + (1.0 - s) * x_base.data[i]
            }
        })
        .collect();
    Ok(x_warp.with_data(data))
}

/// Standard deviations below this are treated as a constant channel.
pub const ADAIN_EPS: f64 = 1e-12;

/// Per-channel `(x − μ_x)/σ_x · σ_ref + μ_ref` with population statistics.
/// A constant channel of `x` maps to the constant `μ_ref`.
pub fn adain(x: &Latent, reference: &Latent) -> Result<Latent> {
    if x.channels != reference.channels {
        return Err(Error::validation("ref", "channel counts differ"));
    }
    let mut data = Vec::with_capacity(x.data.len());
    for c in 0..x.channels {
        let (mu_x, sd_x) = channel_stats(x.channel(c));
        let (mu_r, sd_r) = channel_stats(reference.channel(c));
        if sd_x < ADAIN_EPS {
            data.extend(std::iter::repeat_n(mu_r, x.plane()));
        } else {
            data.extend(x.channel(c).iter().map(|v| (v - mu_x) / sd_x * sd_r + mu_r));
        }
    }
    Ok(x.with_data(data))
}

/// Mean and population standard deviation.
pub fn channel_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}
