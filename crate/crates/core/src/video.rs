//! Mouth-ROI clips: cropping, normalisation and clip-consistent augmentation.

use rand::Rng;

use crate::error::{invalid, Result};

pub const PAPER_ROI: usize = 96;
pub const PAPER_JITTER: usize = 4;

/// `T` grayscale frames of `H×W`, frame-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClip {
    pub frames: Vec<u8>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub fps: u32,
}

impl VideoClip {
    pub fn new(frames: Vec<u8>, t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(invalid("video clip", format!("empty dimensions {t}×{h}×{w}")));
        }
        if frames.len() != t * h * w {
            return Err(invalid("video clip", format!("{} bytes for {t}×{h}×{w}", frames.len())));
        }
        Ok(VideoClip { frames, t, h, w, fps: 25 })
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> u8 {
        self.frames[(t * self.h + y) * self.w + x]
    }

    /// The `size×size` window at `(top, left)` of every frame, optionally mirrored.
    pub fn crop(&self, top: usize, left: usize, size: usize, flip: bool) -> Result<VideoClip> {
        if top + size > self.h || left + size > self.w {
            return Err(invalid(
                "crop",
                format!("{size}×{size} window at ({top}, {left}) exceeds {}×{} frame", self.h, self.w),
            ));
        }
        let mut out = Vec::with_capacity(self.t * size * size);
        for t in 0..self.t {
            for y in 0..size {
                let row = &self.frames[(t * self.h + top + y) * self.w + left..][..size];
                if flip {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
        Ok(VideoClip { frames: out, t: self.t, h: size, w: size, fps: self.fps })
    }

    pub fn center_crop(&self, size: usize) -> Result<VideoClip> {
        if self.h < size || self.w < size {
            return Err(invalid("video clip", format!("{}×{} frames are smaller than {size}×{size}", self.h, self.w)));
        }
        self.crop((self.h - size) / 2, (self.w - size) / 2, size, false)
    }

    pub fn hflip(&self) -> VideoClip {
        let mut out = self.clone();
        for row in out.frames.chunks_exact_mut(self.w) {
            row.reverse();
        }
        out
    }
}

/// Dataset-level pixel statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(invalid("norm stats", format!("mean {mean}, std {std}")));
        }
        Ok(NormStats { mean, std })
    }
}

/// Mean and population std over every pixel of every clip.
pub fn compute_norm_stats<'a>(clips: impl IntoIterator<Item = &'a VideoClip>) -> Result<NormStats> {
    let mut hist = [0u64; 256];
    for c in clips {
        for &p in &c.frames {
            hist[p as usize] += 1;
        }
    }
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return Err(invalid("norm stats", "no training pixels"));
    }
    let mean = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum::<f64>() / n as f64;
    let var = hist.iter().enumerate().map(|(v, &c)| (v as f64 - mean).powi(2) * c as f64).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(invalid("norm stats", format!("zero pixel variance (every pixel is {mean})")));
    }
    NormStats::new(mean, var.sqrt())
}

/// Center crop to `size×size` and standardise: `(x − mean) / std`, laid out `T×size×size`.
pub fn preprocess_clip(raw: &VideoClip, stats: &NormStats, size: usize) -> Result<Vec<f32>> {
    let c = raw.center_crop(size)?;
    Ok(normalize(&c, stats))
}

pub fn normalize(clip: &VideoClip, stats: &NormStats) -> Vec<f32> {
    let inv = 1.0 / stats.std;
    clip.frames.iter().map(|&p| ((p as f64 - stats.mean) * inv) as f32).collect()
}

/// Random crop jitter in pixels for a given ROI size (4 px at 96, scaled).
pub fn jitter_for(size: usize) -> usize {
    (PAPER_JITTER as f64 * size as f64 / PAPER_ROI as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub jitter: usize,
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn for_size(crop: usize) -> Self {
        AugmentConfig { crop, jitter: jitter_for(crop), flip_prob: 0.5 }
    }
}

/// One crop offset within `±jitter` of centre and one flip decision, shared by all frames.
pub fn augment_clip<R: Rng>(clip: &VideoClip, config: &AugmentConfig, rng: &mut R) -> Result<VideoClip> {
    let (size, j) = (config.crop, config.jitter);
    if clip.h < size + 2 * j || clip.w < size + 2 * j {
        return Err(invalid(
            "augment",
            format!("{}×{} frames cannot hold a {size} crop with ±{j} jitter", clip.h, clip.w),
        ));
    }
    let (cy, cx) = ((clip.h - size) / 2, (clip.w - size) / 2);
    let dy = rng.gen_range(0..=2 * j);
    let dx = rng.gen_range(0..=2 * j);
    let flip = rng.gen_bool(config.flip_prob);
    clip.crop(cy + dy - j, cx + dx - j, size, flip)
}
