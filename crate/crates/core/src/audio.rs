//! Waveform preprocessing, babble synthesis, SNR mixing and MFCC features.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, AvsrError, Result};

pub const PAPER_SNR_GRID: [f64; 6] = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// SNR in dB at which noise was mixed in, `None` for clean audio.
    pub snr_applied: Option<f64>,
}

impl WaveformClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("waveform", "sample rate must be positive"));
        }
        Ok(WaveformClip { samples, sample_rate, snr_applied: None })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        power(&self.samples)
    }
}

/// Mean square of a signal, accumulated in f64.
pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// Zero mean, unit population standard deviation. Constant input maps to zeros.
pub fn z_normalize(clip: &WaveformClip) -> WaveformClip {
    let mut out = clip.clone();
    z_normalize_in_place(&mut out.samples);
    out
}

pub fn z_normalize_in_place(x: &mut [f32]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-8);
    for v in x.iter_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub snr_grid: Vec<f64>,
    pub voices: usize,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(snr_grid: Vec<f64>, voices: usize, seed: u64) -> Result<Self> {
        if snr_grid.is_empty() {
            return Err(invalid("noise config", "SNR grid is empty"));
        }
        if let Some(bad) = snr_grid.iter().find(|v| !v.is_finite()) {
            return Err(invalid("noise config", format!("non-finite SNR {bad}")));
        }
        if voices < 3 {
            return Err(invalid("noise config", format!("babble needs at least 3 voices, got {voices}")));
        }
        Ok(NoiseConfig { snr_grid, voices, seed })
    }

    pub fn paper(seed: u64) -> Self {
        NoiseConfig { snr_grid: PAPER_SNR_GRID.to_vec(), voices: 6, seed }
    }
}

/// Two-pole resonator centred on `freq` with bandwidth `bw` (both Hz).
pub(crate) fn resonate(x: &[f64], freq: f64, bw: f64, rate: f64) -> Vec<f64> {
    let r = (-PI * bw / rate).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / rate).cos();
    let a2 = -r * r;
    let gain = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = gain * v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn voice<R: Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let excitation: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let f1 = rng.gen_range(300.0..900.0);
    let f2 = rng.gen_range(900.0..2500.0);
    let f3 = rng.gen_range(2300.0..3500.0);
    let a = resonate(&excitation, f1, 90.0, rate);
    let b = resonate(&excitation, f2, 120.0, rate);
    let c = resonate(&excitation, f3, 180.0, rate);
    let syllable = rng.gen_range(2.0..8.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let env = 0.5 * (1.0 + (2.0 * PI * syllable * t + phase).sin());
            env * env * (a[i] + 0.7 * b[i] + 0.4 * c[i])
        })
        .collect()
}

/// Unit-power babble: a sum of `voices` formant-filtered noise sources, each
/// amplitude-modulated at a syllabic rate.
pub fn synth_babble(n_samples: usize, sample_rate: u32, config: &NoiseConfig) -> Result<WaveformClip> {
    if n_samples == 0 {
        return Err(invalid("babble", "duration must be positive"));
    }
    if config.voices < 3 {
        return Err(invalid("babble", format!("babble needs at least 3 voices, got {}", config.voices)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rate = sample_rate as f64;
    let mut sum = vec![0.0f64; n_samples];
    for _ in 0..config.voices {
        let v = voice(n_samples, rate, &mut rng);
        let gain = rng.gen_range(0.6..1.0) / (v.iter().map(|x| x * x).sum::<f64>() / n_samples as f64).sqrt().max(1e-12);
        for (s, x) in sum.iter_mut().zip(v) {
            *s += gain * x;
        }
    }
    let mut samples: Vec<f32> = sum.iter().map(|&x| x as f32).collect();
    let scale = 1.0 / power(&samples).sqrt();
    for s in samples.iter_mut() {
        *s = (*s as f64 * scale) as f32;
    }
    Ok(WaveformClip { samples, sample_rate, snr_applied: None })
}

/// Noise gain that puts `noise` at `target_db` below `clean`.
pub fn snr_gain(clean: &[f32], noise: &[f32], target_db: f64) -> Result<f64> {
    let (pc, pn) = (power(clean), power(noise));
    if pc <= 0.0 || pn <= 0.0 {
        return Err(invalid("mix", format!("zero-power input (clean {pc}, noise {pn})")));
    }
    Ok((pc / (pn * 10f64.powf(target_db / 10.0))).sqrt())
}

/// `clean + α·noise` with α chosen so that the SNR is exactly `target_db`.
pub fn mix_at_snr(clean: &WaveformClip, noise: &WaveformClip, target_db: f64) -> Result<WaveformClip> {
    if clean.samples.len() != noise.samples.len() {
        return Err(invalid(
            "mix",
            format!("length mismatch: clean {} vs noise {}", clean.samples.len(), noise.samples.len()),
        ));
    }
    let alpha = snr_gain(&clean.samples, &noise.samples, target_db)?;
    let samples = clean
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(&c, &n)| (c as f64 + alpha * n as f64) as f32)
        .collect();
    Ok(WaveformClip { samples, sample_rate: clean.sample_rate, snr_applied: Some(target_db) })
}

/// Training-time noise: clean with probability `1/(|grid|+1)`, otherwise fresh
/// babble at a uniformly chosen grid SNR.
pub fn augment_noise<R: Rng>(clean: &WaveformClip, config: &NoiseConfig, rng: &mut R) -> Result<WaveformClip> {
    let pick = rng.gen_range(0..=config.snr_grid.len());
    let seed = rng.gen::<u64>();
    if pick == config.snr_grid.len() {
        return Ok(clean.clone());
    }
    let noise_cfg = NoiseConfig { seed, ..config.clone() };
    let noise = synth_babble(clean.samples.len(), clean.sample_rate, &noise_cfg)?;
    mix_at_snr(clean, &noise, config.snr_grid[pick])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub step_ms: f64,
    pub n_coeffs: usize,
    pub n_mel_filters: usize,
    pub include_deltas: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig { sample_rate: 16_000, window_ms: 40.0, step_ms: 10.0, n_coeffs: 13, n_mel_filters: 26, include_deltas: true }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_ms <= 0.0 || self.window_ms < self.step_ms {
            return Err(invalid("mfcc config", "need window >= step > 0"));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mel_filters {
            return Err(invalid("mfcc config", "need 0 < coefficients <= filters"));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn step(&self) -> usize {
        (self.step_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_features(&self) -> usize {
        self.n_coeffs * if self.include_deltas { 2 } else { 1 }
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        n_samples.checked_sub(self.window()).map(|r| r / self.step() + 1)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale, evaluated at FFT bin centres.
fn mel_filterbank(n_filters: usize, n_fft: usize, rate: f64) -> Vec<Vec<f64>> {
    let top = hz_to_mel(rate / 2.0);
    let edges: Vec<f64> = (0..n_filters + 2).map(|i| mel_to_hz(top * i as f64 / (n_filters + 1) as f64)).collect();
    let bins = n_fft / 2 + 1;
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * rate / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Regression deltas over ±2 frames with edge replication.
pub fn deltas(frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = frames.len() as isize;
    let at = |t: isize| &frames[t.clamp(0, n - 1) as usize];
    (0..n)
        .map(|t| {
            (0..frames[0].len())
                .map(|j| (1..=2).map(|k| k as f64 * (at(t + k)[j] - at(t - k)[j])).sum::<f64>() / 10.0)
                .collect()
        })
        .collect()
}

/// `frames × n_features` matrix, row-major.
pub fn mfcc_extract(clip: &WaveformClip, config: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let (win, step) = (config.window(), config.step());
    let n_frames = config
        .n_frames(clip.samples.len())
        .ok_or_else(|| invalid("mfcc", format!("clip of {} samples is shorter than one {win}-sample window", clip.samples.len())))?;
    let x = &clip.samples;
    let emph: Vec<f64> = (0..x.len()).map(|i| x[i] as f64 - if i > 0 { 0.97 * x[i - 1] as f64 } else { 0.0 }).collect();
    let hamming: Vec<f64> = (0..win).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1).max(1) as f64).cos()).collect();
    let n_fft = win.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let bank = mel_filterbank(config.n_mel_filters, n_fft, config.sample_rate as f64);
    let nf = config.n_mel_filters;
    let mut cepstra = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..win {
            buf[i].re = emph[f * step + i] * hamming[i];
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect();
        let logmel: Vec<f64> =
            bank.iter().map(|w| w.iter().zip(&mag).map(|(a, b)| a * b).sum::<f64>().max(1e-10).ln()).collect();
        let c: Vec<f64> = (0..config.n_coeffs)
            .map(|k| {
                let norm = if k == 0 { (1.0 / nf as f64).sqrt() } else { (2.0 / nf as f64).sqrt() };
                norm * logmel
                    .iter()
                    .enumerate()
                    .map(|(m, v)| v * (PI * k as f64 * (m as f64 + 0.5) / nf as f64).cos())
                    .sum::<f64>()
            })
            .collect();
        cepstra.push(c);
    }
    if config.include_deltas {
        let d = deltas(&cepstra);
        for (c, d) in cepstra.iter_mut().zip(d) {
            c.extend(d);
        }
    }
    Ok(cepstra)
}

/// Writes mono 16-bit PCM; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, clip: &WaveformClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<WaveformClip> {
    let mut r = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AvsrError::io(path, io),
        other => AvsrError::Wav(other),
    })?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(invalid(
            "wav",
            format!("{}: expected mono 16-bit PCM, got {} channels, {} bits", path.display(), spec.channels, spec.bits_per_sample),
        ));
    }
    let samples = r.samples::<i16>().map(|s| s.map(|v| v as f32 / 32767.0)).collect::<std::result::Result<Vec<_>, _>>()?;
    WaveformClip::new(samples, spec.sample_rate)
}
