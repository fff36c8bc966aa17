//! Turning samples into network inputs, and evaluation.

use avsr_tensor::{par, Tensor};
use rand::Rng;

use crate::audio::{augment_noise, mfcc_extract, mix_at_snr, synth_babble, z_normalize_in_place, NoiseConfig, WaveformClip};
use crate::data::{derive_seed, rng_for, Sample};
use crate::error::{invalid, Result};
use crate::model::{predictions, Head, Inputs, Model, MFCC_MEAN, MFCC_STD, VIDEO_MEAN, VIDEO_STD};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::video::{augment_clip, normalize, preprocess_clip, AugmentConfig, NormStats};

/// How a batch is perturbed before it reaches the network.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// Random crop/flip and babble augmentation, seeded per sample by `path ++ [index]`.
    Train { seed: u64, path: Vec<u64>, noise: NoiseConfig },
    /// Center crop; audio either clean or mixed with babble seeded by `(noise_seed, index)`.
    Eval { snr: Option<f64>, noise_seed: u64, voices: usize },
}

impl Condition {
    pub fn clean() -> Self {
        Condition::Eval { snr: None, noise_seed: 0, voices: 6 }
    }
}

/// Babble added to clip `index` when evaluating at a fixed SNR; identical for every model.
pub fn eval_noise(clip: &WaveformClip, noise_seed: u64, voices: usize, index: usize) -> Result<WaveformClip> {
    let cfg = NoiseConfig { snr_grid: vec![0.0], voices, seed: derive_seed(noise_seed, &[index as u64]) };
    synth_babble(clip.samples.len(), clip.sample_rate, &cfg)
}

pub fn video_stats(store: &ParamStore<f32>) -> Result<NormStats> {
    NormStats::new(store.tensor(VIDEO_MEAN)?.item() as f64, store.tensor(VIDEO_STD)?.item() as f64)
}

struct Prepared {
    audio: Option<Vec<f32>>,
    video: Option<Vec<f32>>,
    mfcc: Option<Vec<Vec<f64>>>,
}

fn prepare_one(model: &Model, store: &ParamStore<f32>, s: &Sample, index: usize, cond: &Condition) -> Result<Prepared> {
    let t = model.target;
    let size = model.spec.image_size;
    let mut rng = match cond {
        Condition::Train { seed, path, .. } => {
            let mut p = path.clone();
            p.push(index as u64);
            Some(rng_for(*seed, &p))
        }
        Condition::Eval { .. } => None,
    };
    let video = if t.uses_video() {
        let stats = video_stats(store)?;
        Some(match rng.as_mut() {
            Some(r) => normalize(&augment_clip(&s.video, &AugmentConfig::for_size(size), r)?, &stats),
            None => preprocess_clip(&s.video, &stats, size)?,
        })
    } else {
        None
    };
    let (audio, mfcc) = if t.uses_audio() {
        let wave = match (cond, rng.as_mut()) {
            (Condition::Train { noise, .. }, Some(r)) => {
                let mut sub = rng_for(r.gen(), &[]);
                augment_noise(&s.audio, noise, &mut sub)?
            }
            (Condition::Eval { snr: Some(db), noise_seed, voices }, _) => {
                mix_at_snr(&s.audio, &eval_noise(&s.audio, *noise_seed, *voices, index)?, *db)?
            }
            _ => s.audio.clone(),
        };
        if model.mfcc_bgru.is_some() {
            (None, Some(mfcc_extract(&wave, &model.spec.mfcc)?))
        } else {
            let mut x = wave.samples;
            z_normalize_in_place(&mut x);
            (Some(x), None)
        }
    } else {
        (None, None)
    };
    Ok(Prepared { audio, video, mfcc })
}

/// Builds network inputs for `samples`, where `indices[i]` is sample i's
/// position in its split (the key for all per-sample randomness).
pub fn prepare_batch(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[&Sample],
    indices: &[usize],
    cond: &Condition,
) -> Result<Inputs<f32>> {
    let prepared = par::map_indexed(samples.len(), |i| prepare_one(model, store, samples[i], indices[i], cond));
    let prepared = prepared.into_iter().collect::<Result<Vec<_>>>()?;
    let b = samples.len();
    let stack = |parts: Vec<Vec<f32>>, shape: Vec<usize>| -> Result<Tensor<f32>> {
        let data: Vec<f32> = parts.into_iter().flatten().collect();
        Ok(Tensor::new(shape, data)?)
    };
    let mut inputs = Inputs { video: None, audio: None, mfcc: None };
    if prepared[0].video.is_some() {
        let (t, s) = (samples[0].video.t, model.spec.image_size);
        inputs.video = Some(stack(prepared.iter().map(|p| p.video.clone().unwrap_or_default()).collect(), vec![b, 1, t, s, s])?);
    }
    if prepared[0].audio.is_some() {
        let len = prepared[0].audio.as_ref().map_or(0, Vec::len);
        if prepared.iter().any(|p| p.audio.as_ref().map_or(0, Vec::len) != len) {
            return Err(invalid("batch", "clips in a batch differ in length"));
        }
        inputs.audio = Some(stack(prepared.iter().map(|p| p.audio.clone().unwrap_or_default()).collect(), vec![b, 1, len])?);
    }
    if prepared[0].mfcc.is_some() {
        let mean = store.tensor(MFCC_MEAN)?.data();
        let std = store.tensor(MFCC_STD)?.data();
        let frames = prepared[0].mfcc.as_ref().map_or(0, Vec::len);
        let nf = mean.len();
        let mut data = vec![0.0f32; frames * b * nf];
        for (bi, p) in prepared.iter().enumerate() {
            let m = p.mfcc.as_ref().expect("every sample has mfcc");
            if m.len() != frames {
                return Err(invalid("batch", "clips in a batch differ in length"));
            }
            for (t, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    data[(t * b + bi) * nf + j] = ((v - mean[j] as f64) / std[j] as f64) as f32;
                }
            }
        }
        inputs.mfcc = Some(Tensor::new(vec![frames, b, nf], data)?);
    }
    Ok(inputs)
}

/// Per-feature mean and std of clean MFCC frames over a set of clips.
pub fn mfcc_stats(model: &Model, samples: &[Sample]) -> Result<(Vec<f32>, Vec<f32>)> {
    let feats = par::map_indexed(samples.len(), |i| mfcc_extract(&samples[i].audio, &model.spec.mfcc));
    let n = model.spec.mfcc.n_features();
    let (mut sum, mut sq, mut count) = (vec![0.0f64; n], vec![0.0f64; n], 0usize);
    for f in feats {
        for row in f? {
            for j in 0..n {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("mfcc stats", "no training frames"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std: Vec<f32> = sq.iter().zip(&mean).map(|(q, m)| ((q / count as f64 - m * m).max(0.0).sqrt() + 1e-6) as f32).collect();
    Ok((mean.iter().map(|&m| m as f32).collect(), std))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub truth: usize,
    pub predicted: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cr: f64,
    pub predictions: Vec<Prediction>,
}

/// Classification rate over `samples` with eval-mode batch norm.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[Sample],
    head: Head,
    cond: &Condition,
    batch: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid("evaluate", "split is empty"));
    }
    if matches!(cond, Condition::Train { .. }) {
        return Err(invalid("evaluate", "evaluation uses an eval condition"));
    }
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(samples.len());
    for start in (0..samples.len()).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(samples.len())).collect();
        let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let inputs = prepare_batch(model, store, &refs, &idx, cond)?;
        let mut ctx = Ctx::eval(store);
        let logits = model.forward(&mut ctx, &inputs, head)?;
        let probs = ctx.tape.value(logits).softmax_last();
        for (s, (p, conf)) in refs.iter().zip(predictions(&probs, refs.len())) {
            out.push(Prediction { id: s.id.clone(), truth: s.class, predicted: p, confidence: conf });
        }
    }
    let correct = out.iter().filter(|p| p.truth == p.predicted).count();
    Ok(EvalReport { cr: correct as f64 / out.len() as f64, predictions: out })
}
