//! `key = value` run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SynthConfig;
use crate::error::{AvsrError, Result};
use crate::model::ModelSpec;
use crate::training::TrainSettings;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelSpec,
    pub train: TrainSettings,
    pub noise_seed: u64,
    pub audio_checkpoint: Option<PathBuf>,
    pub video_checkpoint: Option<PathBuf>,
    pub av_checkpoint: Option<PathBuf>,
    pub mfcc_checkpoint: Option<PathBuf>,
}

/// Every accepted key, with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data_dir", "dataset directory (holds manifest.csv)"),
    ("out_dir", "where checkpoints and CSV reports go"),
    ("seed", "root seed for data generation and training"),
    ("n_classes", "number of words"),
    ("train_per_class", "training clips per word"),
    ("val_per_class", "validation clips per word"),
    ("test_per_class", "test clips per word"),
    ("image_size", "side of the mouth crop fed to the network"),
    ("audio_noise", "generator background noise relative to the word"),
    ("visual_noise", "generator pixel noise (gray levels)"),
    ("width", "channel width multiplier in (0, 1]"),
    ("cells", "BGRU cells per direction in each stream"),
    ("fusion_cells", "BGRU cells per direction in the fusion layers"),
    ("batch", "stream and MFCC batch size"),
    ("fusion_batch", "batch size of joint audiovisual training"),
    ("pretrain_lr", "learning rate of temporal-conv pretraining"),
    ("stream_lr", "learning rate of the stream BGRU and end-to-end stages"),
    ("fusion_head_lr", "learning rate while only the fusion layers train"),
    ("joint_lr", "learning rate of joint audiovisual training"),
    ("fixed_epochs", "length of the fixed-length stages"),
    ("delay", "early stopping delay in epochs"),
    ("max_epochs", "hard cap on early-stopped stages"),
    ("clip_norm", "global gradient norm clip"),
    ("babble_voices", "talkers summed into babble noise"),
    ("snr_grid", "comma-separated SNRs in dB for augmentation and sweeps"),
    ("augment", "true/false: crop, flip and noise augmentation while training"),
    ("eval_batch", "batch size for evaluation"),
    ("noise_seed", "seed of evaluation babble"),
    ("audio_checkpoint", "audio-only checkpoint (default out_dir/audio.ckpt)"),
    ("video_checkpoint", "video-only checkpoint (default out_dir/video.ckpt)"),
    ("av_checkpoint", "audiovisual checkpoint (default out_dir/av.ckpt)"),
    ("mfcc_checkpoint", "MFCC baseline checkpoint (default out_dir/mfcc.ckpt)"),
];

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: synth.seed,
            model: ModelSpec::desk(synth.n_classes),
            synth,
            train: TrainSettings::default(),
            noise_seed: 7,
            audio_checkpoint: None,
            video_checkpoint: None,
            av_checkpoint: None,
            mfcc_checkpoint: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| AvsrError::Config(format!("{key}: cannot parse '{v}'")))
}

fn positive(key: &str, v: &str) -> Result<usize> {
    let n: usize = num(key, v)?;
    if n == 0 {
        return Err(AvsrError::Config(format!("{key}: must be at least 1, got 0")));
    }
    Ok(n)
}

fn positive_f(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(AvsrError::Config(format!("{key}: must be a positive number, got {v}")));
    }
    Ok(x)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.set_seed(num(key, v)?),
            "n_classes" => {
                let n: usize = num(key, v)?;
                if n == 0 || n > crate::data::MAX_CLASSES {
                    return Err(AvsrError::Config(format!("n_classes: must be in 1..={}, got {n}", crate::data::MAX_CLASSES)));
                }
                self.synth.n_classes = n;
                self.model.n_classes = n;
            }
            "train_per_class" => self.synth.train_per_class = positive(key, v)?,
            "val_per_class" => self.synth.val_per_class = positive(key, v)?,
            "test_per_class" => self.synth.test_per_class = positive(key, v)?,
            "image_size" => {
                let n = positive(key, v)?;
                if n < 8 {
                    return Err(AvsrError::Config(format!("image_size: must be at least 8, got {n}")));
                }
                self.synth.image_size = n;
                self.model.image_size = n;
            }
            "audio_noise" => self.synth.audio_noise = num::<f64>(key, v)?.max(0.0),
            "visual_noise" => self.synth.visual_noise = num::<f64>(key, v)?.max(0.0),
            "width" => {
                let w = positive_f(key, v)?;
                if w > 1.0 {
                    return Err(AvsrError::Config(format!("width: must be in (0, 1], got {w}")));
                }
                self.model.width = w;
            }
            "cells" => self.model.cells = positive(key, v)?,
            "fusion_cells" => self.model.fusion_cells = positive(key, v)?,
            "batch" => self.train.batch = positive(key, v)?,
            "fusion_batch" => self.train.fusion_batch = positive(key, v)?,
            "pretrain_lr" => self.train.pretrain_lr = positive_f(key, v)?,
            "stream_lr" => self.train.stream_lr = positive_f(key, v)?,
            "fusion_head_lr" => self.train.fusion_head_lr = positive_f(key, v)?,
            "joint_lr" => self.train.joint_lr = positive_f(key, v)?,
            "fixed_epochs" => self.train.fixed_epochs = positive(key, v)?,
            "delay" => self.train.delay = positive(key, v)?,
            "max_epochs" => self.train.max_epochs = positive(key, v)?,
            "clip_norm" => self.train.clip_norm = positive_f(key, v)?,
            "babble_voices" => {
                let n: usize = num(key, v)?;
                if n < 3 {
                    return Err(AvsrError::Config(format!("babble_voices: must be at least 3, got {n}")));
                }
                self.train.babble_voices = n;
            }
            "snr_grid" => {
                let grid = v.split(',').map(|s| num::<f64>(key, s.trim())).collect::<Result<Vec<_>>>()?;
                if grid.is_empty() || grid.iter().any(|x| !x.is_finite()) {
                    return Err(AvsrError::Config("snr_grid: need at least one finite value".into()));
                }
                self.train.snr_grid = grid;
            }
            "augment" => {
                self.train.augment = match v {
                    "true" => true,
                    "false" => false,
                    _ => return Err(AvsrError::Config(format!("augment: expected true or false, got '{v}'"))),
                }
            }
            "eval_batch" => self.train.eval_batch = positive(key, v)?,
            "noise_seed" => self.noise_seed = num(key, v)?,
            "audio_checkpoint" => self.audio_checkpoint = Some(PathBuf::from(v)),
            "video_checkpoint" => self.video_checkpoint = Some(PathBuf::from(v)),
            "av_checkpoint" => self.av_checkpoint = Some(PathBuf::from(v)),
            "mfcc_checkpoint" => self.mfcc_checkpoint = Some(PathBuf::from(v)),
            _ => {
                return Err(AvsrError::Config(format!("unknown key '{key}' (known keys: {})", KEYS.iter().map(|k| k.0).collect::<Vec<_>>().join(", "))))
            }
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AvsrError::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(AvsrError::Config(format!("line {}: duplicate key '{k}'", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                AvsrError::Config(m) => AvsrError::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AvsrError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            AvsrError::Config(m) => AvsrError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn value(&self, key: &str) -> String {
        let opt = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| self.out_dir.join(name)).display().to_string();
        let t = &self.train;
        match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "seed" => self.seed.to_string(),
            "n_classes" => self.synth.n_classes.to_string(),
            "train_per_class" => self.synth.train_per_class.to_string(),
            "val_per_class" => self.synth.val_per_class.to_string(),
            "test_per_class" => self.synth.test_per_class.to_string(),
            "image_size" => self.synth.image_size.to_string(),
            "audio_noise" => self.synth.audio_noise.to_string(),
            "visual_noise" => self.synth.visual_noise.to_string(),
            "width" => self.model.width.to_string(),
            "cells" => self.model.cells.to_string(),
            "fusion_cells" => self.model.fusion_cells.to_string(),
            "batch" => t.batch.to_string(),
            "fusion_batch" => t.fusion_batch.to_string(),
            "pretrain_lr" => t.pretrain_lr.to_string(),
            "stream_lr" => t.stream_lr.to_string(),
            "fusion_head_lr" => t.fusion_head_lr.to_string(),
            "joint_lr" => t.joint_lr.to_string(),
            "fixed_epochs" => t.fixed_epochs.to_string(),
            "delay" => t.delay.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "babble_voices" => t.babble_voices.to_string(),
            "snr_grid" => t.snr_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "augment" => t.augment.to_string(),
            "eval_batch" => t.eval_batch.to_string(),
            "noise_seed" => self.noise_seed.to_string(),
            "audio_checkpoint" => opt(&self.audio_checkpoint, "audio.ckpt"),
            "video_checkpoint" => opt(&self.video_checkpoint, "video.ckpt"),
            "av_checkpoint" => opt(&self.av_checkpoint, "av.ckpt"),
            "mfcc_checkpoint" => opt(&self.mfcc_checkpoint, "mfcc.ckpt"),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// The effective configuration in the file syntax, defaults resolved.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.value(k))).collect()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.csv")
    }

    pub fn checkpoint_for(&self, target: crate::model::Target) -> PathBuf {
        use crate::model::Target::*;
        let explicit = match target {
            Audio => &self.audio_checkpoint,
            Video => &self.video_checkpoint,
            Av => &self.av_checkpoint,
            Mfcc => &self.mfcc_checkpoint,
        };
        explicit.clone().unwrap_or_else(|| self.out_dir.join(format!("{target}.ckpt")))
    }
}
