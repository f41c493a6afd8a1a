//! Affordance-guided mask planning for masked depth pretraining.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Image, RgbImage};

pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_RATIO: f64 = 0.75;

/// Per-pixel task relevance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub values: Image<f64>,
    pub source_text: String,
}

impl AttentionMap {
    pub fn new(values: Image<f64>, source_text: impl Into<String>) -> Result<Self> {
        if let Some(i) = values.pixels.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument(format!("attention value {} at pixel {i} outside [0,1]", values.pixels[i])));
        }
        Ok(Self { values, source_text: source_text.into() })
    }

    /// 8-bit grayscale encoding, `round(255·value)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.pixels.iter().map(|&x| (255.0 * x).round() as u8).collect()
    }

    pub fn from_gray8(width: usize, height: usize, bytes: &[u8], text: impl Into<String>) -> Result<Self> {
        let values = Image::from_pixels(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())?;
        Self::new(values, text)
    }
}

/// Source of attention maps for a (task text, image) pair.
pub trait AttentionProvider {
    fn attention(&self, text: &str, image: &RgbImage) -> Result<AttentionMap>;
}

/// Returns a map that was computed ahead of time (e.g. stored with a record).
pub struct PrecomputedAttention<'a>(pub &'a AttentionMap);

impl AttentionProvider for PrecomputedAttention<'_> {
    fn attention(&self, text: &str, image: &RgbImage) -> Result<AttentionMap> {
        if image.width != self.0.values.width || image.height != self.0.values.height {
            return Err(Error::Shape("attention map and image differ in size".into()));
        }
        Ok(AttentionMap { values: self.0.values.clone(), source_text: text.to_string() })
    }
}

/// All-zero attention: turns affordance masking into plain random masking.
pub struct NoAttention;

impl AttentionProvider for NoAttention {
    fn attention(&self, text: &str, image: &RgbImage) -> Result<AttentionMap> {
        AttentionMap::new(Image::filled(image.width, image.height, 0.0), text)
    }
}

/// Mean attention per `patch×patch` tile, row-major over tiles.
pub fn patch_scores(attn: &AttentionMap, patch: usize) -> Result<Vec<f64>> {
    let (w, h) = (attn.values.width, attn.values.height);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::Shape(format!("{w}x{h} map is not tiled by {patch}-pixel patches")));
    }
    let (gw, gh) = (w / patch, h / patch);
    let mut scores = Vec::with_capacity(gw * gh);
    let area = (patch * patch) as f64;
    for pr in 0..gh {
        for pc in 0..gw {
            let mut s = 0.0;
            for v in pr * patch..(pr + 1) * patch {
                for u in pc * patch..(pc + 1) * patch {
                    s += attn.values.at(u, v);
                }
            }
            scores.push(s / area);
        }
    }
    Ok(scores)
}

/// Partition of patch tokens into visible and masked sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked_affordance: Vec<usize>,
    pub masked_background: Vec<usize>,
    pub n: usize,
    pub theta: f64,
    pub ratio: f64,
}

impl MaskPlan {
    /// Masked token indices in ascending order.
    pub fn masked(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.masked_affordance.iter().chain(&self.masked_background).copied().collect();
        m.sort_unstable();
        m
    }

    /// Every token visible (no masking).
    pub fn all_visible(n: usize) -> Self {
        Self {
            visible: (0..n).collect(),
            masked_affordance: vec![],
            masked_background: vec![],
            n,
            theta: DEFAULT_THETA,
            ratio: 0.0,
        }
    }

    pub fn target_count(n: usize, ratio: f64) -> usize {
        ((ratio * n as f64).ceil() as usize).min(n)
    }
}

/// Masks affordance tokens (`score ≥ theta`) first, then random background
/// tokens up to `⌈ratio·N⌉`. Affordance overflow is uniformly subsampled.
pub fn plan_mask(scores: &[f64], theta: f64, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no tokens to mask".into()));
    }
    let target = MaskPlan::target_count(n, ratio);
    let (afford, background): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scores[i] >= theta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pick = |pool: &[usize], k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut out: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        out.sort_unstable();
        out
    };

    let (masked_affordance, masked_background) = if afford.len() >= target {
        (pick(&afford, target, &mut rng), Vec::new())
    } else {
        let need = target - afford.len();
        let bg = pick(&background, need, &mut rng);
        (afford, bg)
    };

    let masked: BTreeSet<usize> = masked_affordance.iter().chain(&masked_background).copied().collect();
    let visible = (0..n).filter(|i| !masked.contains(i)).collect();
    Ok(MaskPlan { visible, masked_affordance, masked_background, n, theta, ratio })
}
