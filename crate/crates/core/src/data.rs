//! Synthetic audiovisual words, the AVF1 video format, manifests and batching.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use avsr_tensor::par;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, resonate, write_wav, WaveformClip};
use crate::error::{invalid, AvsrError, Result};
use crate::video::{jitter_for, VideoClip};

pub const AVF_MAGIC: &[u8; 4] = b"AVF1";
pub const AVF_HEADER: usize = 16;
/// Largest payload accepted by the reader (1 GiB).
pub const AVF_MAX_PAYLOAD: u64 = 1 << 30;
pub const MANIFEST_HEADER: [&str; 5] = ["id", "label", "split", "audio_path", "video_path"];

/// Splitmix-style hash used to derive independent seeds from a root seed and a path of indices.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut z = root ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

// ---------------------------------------------------------------- AVF1

pub fn encode_video(clip: &VideoClip) -> Result<Vec<u8>> {
    let dims = [clip.t, clip.h, clip.w].map(|d| u32::try_from(d).map_err(|_| invalid("avf", format!("dimension {d} exceeds u32"))));
    let mut out = Vec::with_capacity(AVF_HEADER + clip.frames.len());
    out.extend_from_slice(AVF_MAGIC);
    for d in dims {
        out.extend_from_slice(&d?.to_le_bytes());
    }
    out.extend_from_slice(&clip.frames);
    Ok(out)
}

/// Parses AVF1 bytes; `path` only labels errors.
pub fn decode_video(bytes: &[u8], path: &Path) -> Result<VideoClip> {
    let err = |offset: u64, detail: String| AvsrError::Format { path: path.to_path_buf(), offset, detail };
    if bytes.len() < AVF_HEADER {
        return Err(err(bytes.len() as u64, format!("truncated header: expected {AVF_HEADER} bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != AVF_MAGIC {
        return Err(err(0, format!("bad magic {:?}, expected \"AVF1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let mut dims = [0u64; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as u64;
        if *d == 0 {
            return Err(err(o as u64, format!("{} is zero", ["T", "H", "W"][i])));
        }
    }
    let payload = dims[0].checked_mul(dims[1]).and_then(|x| x.checked_mul(dims[2]));
    let payload = match payload {
        Some(p) if p <= AVF_MAX_PAYLOAD => p,
        _ => return Err(err(4, format!("dimensions {}×{}×{} overflow the {AVF_MAX_PAYLOAD}-byte limit", dims[0], dims[1], dims[2]))),
    };
    let actual = (bytes.len() - AVF_HEADER) as u64;
    if actual != payload {
        let what = if actual < payload { "truncated payload" } else { "trailing bytes after payload" };
        return Err(err(
            AVF_HEADER as u64 + actual.min(payload),
            format!("{what}: expected {payload} bytes, found {actual}"),
        ));
    }
    VideoClip::new(bytes[AVF_HEADER..].to_vec(), dims[0] as usize, dims[1] as usize, dims[2] as usize)
}

pub fn write_video_file(clip: &VideoClip, path: &Path) -> Result<()> {
    fs::write(path, encode_video(clip)?).map_err(|e| AvsrError::io(path, e))
}

pub fn read_video_file(path: &Path) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| AvsrError::io(path, e))?;
    decode_video(&bytes, path)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub audio_path: String,
    pub video_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Directory that row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Class names in index order (sorted).
    pub fn classes(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

/// Row numbers in errors count the header as row 1.
pub fn read_manifest(path: &Path) -> Result<(Manifest, Vec<String>)> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(path).map_err(|e| AvsrError::io(path, e))?;
    let bad = |row: usize, detail: String| AvsrError::Manifest { path: path.to_path_buf(), row, detail };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(1, format!("header must be {}, got {}", MANIFEST_HEADER.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        if rec.len() != 5 {
            return Err(bad(row, format!("expected 5 fields, found {}", rec.len())));
        }
        let split = Split::parse(&rec[2]).ok_or_else(|| bad(row, format!("unknown split '{}'", &rec[2])))?;
        if rec[0].is_empty() || rec[1].is_empty() {
            return Err(bad(row, "empty id or label".into()));
        }
        if !seen.insert(rec[0].to_string()) {
            return Err(bad(row, format!("duplicate id '{}'", &rec[0])));
        }
        for p in [&rec[3], &rec[4]] {
            if !root.join(p).is_file() {
                return Err(bad(row, format!("missing file {}", root.join(p).display())));
            }
        }
        rows.push(ManifestRow {
            id: rec[0].to_string(),
            label: rec[1].to_string(),
            split,
            audio_path: rec[3].to_string(),
            video_path: rec[4].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(bad(1, "manifest has no rows".into()));
    }
    let manifest = Manifest { root, rows };
    Ok((manifest.clone(), label_warnings(&manifest)))
}

/// Labels missing from some split; a label seen only in test cannot be learned.
pub fn label_warnings(m: &Manifest) -> Vec<String> {
    let mut per: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in &m.rows {
        per.entry(&r.label).or_default().insert(r.split);
    }
    let present: BTreeSet<Split> = m.rows.iter().map(|r| r.split).collect();
    per.into_iter()
        .filter(|(_, s)| *s != present)
        .map(|(label, s)| {
            let have: Vec<_> = s.iter().map(|x| x.as_str()).collect();
            if s.len() == 1 && s.contains(&Split::Test) {
                format!("warning: label '{label}' appears only in test")
            } else {
                format!("warning: label '{label}' appears only in {}", have.join("+"))
            }
        })
        .collect()
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| AvsrError::invalid("manifest", e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in &manifest.rows {
        w.write_record([&r.id, &r.label, r.split.as_str(), &r.audio_path, &r.video_path]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| AvsrError::invalid("manifest", e.to_string()))?;
    fs::write(path, bytes).map_err(|e| AvsrError::io(path, e))
}

// ---------------------------------------------------------------- dataset

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub class: usize,
    pub audio: WaveformClip,
    pub video: VideoClip,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Reads every clip listed in a manifest into memory.
pub fn load_dataset(manifest: &Manifest) -> Result<Dataset> {
    let classes = manifest.classes();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let rows: Vec<&ManifestRow> = manifest.rows.iter().collect();
    let loaded = par::map_indexed(rows.len(), |i| -> Result<Sample> {
        let r = rows[i];
        Ok(Sample {
            id: r.id.clone(),
            class: index[r.label.as_str()],
            audio: read_wav(&manifest.root.join(&r.audio_path))?,
            video: read_video_file(&manifest.root.join(&r.video_path))?,
        })
    });
    let mut ds = Dataset { classes, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (r, s) in rows.iter().zip(loaded) {
        let s = s?;
        match r.split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}

/// Shuffled index batches covering `0..n` exactly once; the last batch may be short.
pub fn iterate_split(n: usize, batch_size: usize, seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(invalid("batch size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

// ---------------------------------------------------------------- synthesis

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub sample_rate: u32,
    pub duration: f64,
    pub fps: u32,
    /// Side of the model's input crop; stored frames add the crop jitter on each side.
    pub image_size: usize,
    /// Background noise amplitude relative to the word.
    pub audio_noise: f64,
    /// Pixel noise standard deviation in gray levels.
    pub visual_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 10,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            sample_rate: 16_000,
            duration: 1.16,
            fps: 25,
            image_size: 32,
            audio_noise: 0.05,
            visual_noise: 12.0,
            seed: 1,
        }
    }
}

/// Formant pairs (Hz) and mouth shape (height, width as fractions of the ROI) per vowel.
const VOWELS: [(f64, f64, f64, f64); 5] = [
    (730.0, 1090.0, 0.34, 0.48),
    (270.0, 2290.0, 0.10, 0.52),
    (300.0, 870.0, 0.22, 0.20),
    (530.0, 1840.0, 0.20, 0.44),
    (570.0, 840.0, 0.30, 0.28),
];

/// Two vowels per word, so the budget is the number of ordered distinct pairs.
pub const MAX_CLASSES: usize = VOWELS.len() * (VOWELS.len() - 1);

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return Err(invalid("n_classes", format!("{} outside 1..={MAX_CLASSES}", self.n_classes)));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(invalid("synth config", "samples per class per split must be positive"));
        }
        if self.sample_rate == 0 || self.fps == 0 || self.duration <= 0.0 {
            return Err(invalid("synth config", "rate, fps and duration must be positive"));
        }
        if self.image_size < 8 {
            return Err(invalid("image_size", format!("{} is below 8", self.image_size)));
        }
        if self.audio_noise < 0.0 || self.visual_noise < 0.0 {
            return Err(invalid("synth config", "noise levels must be non-negative"));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration * self.fps as f64).round() as usize
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    /// Side of the stored frames.
    pub fn frame_size(&self) -> usize {
        self.image_size + 2 * jitter_for(self.image_size)
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// Class `c`'s vowel pair and motion direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordPattern {
    pub vowels: [usize; 2],
    pub direction: f64,
}

pub fn word_pattern(class: usize, n_classes: usize) -> WordPattern {
    let pairs: Vec<[usize; 2]> = (1..VOWELS.len())
        .flat_map(|shift| (0..VOWELS.len()).map(move |a| [a, (a + shift) % VOWELS.len()]))
        .collect();
    WordPattern { vowels: pairs[class], direction: 2.0 * PI * class as f64 / n_classes as f64 }
}

pub fn class_label(class: usize) -> String {
    format!("word{class:02}")
}

/// Nuisance parameters drawn for one clip; also used by the separability oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipParams {
    pub onset: f64,
    pub syllable: f64,
    pub gap: f64,
    pub pitch: f64,
    pub formants: [[f64; 2]; 2],
    pub shapes: [[f64; 2]; 2],
    pub amplitude: f64,
    pub shift: (f64, f64),
    pub brightness: f64,
}

fn draw_params<R: Rng>(pattern: &WordPattern, rng: &mut R) -> ClipParams {
    let j = |rng: &mut R, x: f64, r: f64| x * (1.0 + rng.gen_range(-r..r));
    let mut formants = [[0.0; 2]; 2];
    let mut shapes = [[0.0; 2]; 2];
    for (s, &v) in pattern.vowels.iter().enumerate() {
        let (f1, f2, h, w) = VOWELS[v];
        formants[s] = [j(rng, f1, 0.04), j(rng, f2, 0.04)];
        shapes[s] = [j(rng, h, 0.08), j(rng, w, 0.08)];
    }
    ClipParams {
        onset: rng.gen_range(0.08..0.28),
        syllable: rng.gen_range(0.26..0.34),
        gap: rng.gen_range(0.03..0.08),
        pitch: rng.gen_range(100.0..220.0),
        formants,
        shapes,
        amplitude: rng.gen_range(0.5..1.0),
        shift: (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06)),
        brightness: rng.gen_range(-15.0..15.0),
    }
}

/// Hann-shaped opening of syllable `s` at time `t`.
fn syllable_env(p: &ClipParams, s: usize, t: f64) -> f64 {
    let start = p.onset + s as f64 * (p.syllable + p.gap);
    let u = (t - start) / p.syllable;
    if (0.0..=1.0).contains(&u) {
        (PI * u).sin().powi(2)
    } else {
        0.0
    }
}

fn synth_audio<R: Rng>(cfg: &SynthConfig, p: &ClipParams, rng: &mut R) -> WaveformClip {
    let rate = cfg.sample_rate as f64;
    let n = cfg.samples();
    let mut phase = 0.0;
    let source: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let f0 = p.pitch * (1.0 - 0.1 * t);
            phase += f0 / rate;
            // Band-limited sawtooth-like glottal source.
            (1..=(4000.0 / f0) as usize).map(|k| (2.0 * PI * k as f64 * phase).sin() / k as f64).sum::<f64>()
        })
        .collect();
    let mut word = vec![0.0; n];
    for s in 0..2 {
        let [f1, f2] = p.formants[s];
        let a = resonate(&source, f1, 80.0, rate);
        let b = resonate(&source, f2, 100.0, rate);
        for i in 0..n {
            let e = syllable_env(p, s, i as f64 / rate);
            if e > 0.0 {
                word[i] += e * (a[i] + 0.6 * b[i]);
            }
        }
    }
    let rms = (word.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let samples: Vec<f64> = word
        .iter()
        .map(|&w| p.amplitude * 0.15 * w / rms + cfg.audio_noise * 0.15 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let g = if peak > 0.95 { 0.95 / peak } else { 1.0 };
    WaveformClip { samples: samples.iter().map(|&x| (x * g) as f32).collect(), sample_rate: cfg.sample_rate, snr_applied: None }
}

fn synth_video<R: Rng>(cfg: &SynthConfig, pattern: &WordPattern, p: &ClipParams, rng: &mut R) -> VideoClip {
    let (t_n, size) = (cfg.frames(), cfg.frame_size());
    let roi = cfg.image_size as f64;
    let mut frames = Vec::with_capacity(t_n * size * size);
    for f in 0..t_n {
        let t = (f as f64 + 0.5) / cfg.fps as f64;
        let (e0, e1) = (syllable_env(p, 0, t), syllable_env(p, 1, t));
        let height = roi * (0.06 + e0 * p.shapes[0][0] + e1 * p.shapes[1][0]);
        let width = roi * (0.30 + e0 * (p.shapes[0][1] - 0.3) + e1 * (p.shapes[1][1] - 0.3));
        // The mouth drifts along the class direction during the first syllable and back during the second.
        let drift = 0.12 * roi * (e0 - e1);
        let cx = size as f64 / 2.0 + roi * p.shift.0 + drift * pattern.direction.cos();
        let cy = size as f64 / 2.0 + roi * p.shift.1 + drift * pattern.direction.sin();
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - cx) / (width / 2.0).max(0.5);
                let dy = (y as f64 + 0.5 - cy) / (height / 2.0).max(0.5);
                let blob = (-(dx * dx + dy * dy)).exp();
                let v = 70.0 + p.brightness + 150.0 * blob + cfg.visual_noise * rng.sample::<f64, _>(StandardNormal);
                frames.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    VideoClip { frames, t: t_n, h: size, w: size, fps: cfg.fps }
}

/// One clip of `class`; a pure function of the config and the clip's coordinates.
pub fn synth_sample(cfg: &SynthConfig, class: usize, split: Split, index: usize) -> (WaveformClip, VideoClip, ClipParams) {
    let pattern = word_pattern(class, cfg.n_classes);
    let mut rng = rng_for(cfg.seed, &[class as u64, split.index(), index as u64]);
    let p = draw_params(&pattern, &mut rng);
    let audio = synth_audio(cfg, &p, &mut rng);
    let video = synth_video(cfg, &pattern, &p, &mut rng);
    (audio, video, p)
}

/// In-memory dataset straight from the generator (no files).
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset { classes: (0..cfg.n_classes).map(class_label).collect(), train: vec![], val: vec![], test: vec![] };
    for split in Split::ALL {
        let per = cfg.per_class(split);
        let samples = par::map_indexed(cfg.n_classes * per, |k| {
            let (class, i) = (k / per, k % per);
            let (audio, video, _) = synth_sample(cfg, class, split, i);
            Sample { id: clip_id(class, split, i), class, audio, video }
        });
        match split {
            Split::Train => ds.train = samples,
            Split::Val => ds.val = samples,
            Split::Test => ds.test = samples,
        }
    }
    Ok(ds)
}

pub fn clip_id(class: usize, split: Split, index: usize) -> String {
    format!("{}_{}_{index:04}", class_label(class), split.as_str())
}

/// Writes WAV and AVF1 files plus `manifest.csv` under `dir`. Returns the manifest
/// path and a SHA-256 fingerprint over the manifest and every file it lists.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<(PathBuf, String)> {
    cfg.validate()?;
    for sub in ["audio", "video"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| AvsrError::io(dir.join(sub), e))?;
    }
    let mut jobs = Vec::new();
    for split in Split::ALL {
        for class in 0..cfg.n_classes {
            for i in 0..cfg.per_class(split) {
                jobs.push((class, split, i));
            }
        }
    }
    let rows = par::map_indexed(jobs.len(), |k| -> Result<ManifestRow> {
        let (class, split, i) = jobs[k];
        let id = clip_id(class, split, i);
        let (audio, video, _) = synth_sample(cfg, class, split, i);
        let row = ManifestRow {
            id: id.clone(),
            label: class_label(class),
            split,
            audio_path: format!("audio/{id}.wav"),
            video_path: format!("video/{id}.avf"),
        };
        write_wav(&dir.join(&row.audio_path), &audio)?;
        write_video_file(&video, &dir.join(&row.video_path))?;
        Ok(row)
    });
    let manifest = Manifest { root: dir.to_path_buf(), rows: rows.into_iter().collect::<Result<_>>()? };
    let path = dir.join("manifest.csv");
    write_manifest(&manifest, &path)?;
    Ok((path.clone(), fingerprint_dataset(&manifest, &path)?))
}

pub fn fingerprint_dataset(manifest: &Manifest, manifest_path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let read = |p: &Path| fs::read(p).map_err(|e| AvsrError::io(p, e));
    h.update(read(manifest_path)?);
    for r in &manifest.rows {
        h.update(read(&manifest.root.join(&r.audio_path))?);
        h.update(read(&manifest.root.join(&r.video_path))?);
    }
    Ok(crate::params::hex(&h.finalize()))
}
