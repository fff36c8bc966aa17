//! The audio-only, video-only, audiovisual and MFCC classifiers.

use std::fmt;

use avsr_tensor::{Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::MfccConfig;
use crate::error::{invalid, Result};
use crate::nn::{AudioResNet, BgruStack, Ctx, Linear, TemporalConvBackend, VisualFrontend, VisualResNet};
use crate::params::{hex, ParamKind, ParamStore};

pub const BGRU_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Audio,
    Video,
    Av,
    Mfcc,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Audio, Target::Video, Target::Av, Target::Mfcc];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Audio => "audio",
            Target::Video => "video",
            Target::Av => "av",
            Target::Mfcc => "mfcc",
        }
    }

    pub fn parse(s: &str) -> Result<Target> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| invalid("target", format!("'{s}' is not one of audio, video, av, mfcc")))
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Target::Audio | Target::Av | Target::Mfcc)
    }

    pub fn uses_video(self) -> bool {
        matches!(self, Target::Video | Target::Av)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Audio,
    Visual,
}

impl StreamKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StreamKind::Audio => "audio",
            StreamKind::Visual => "visual",
        }
    }
}

/// Architecture hyper-parameters shared by every classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n_classes: usize,
    pub width: f64,
    pub cells: usize,
    pub fusion_cells: usize,
    pub image_size: usize,
    pub frames: usize,
    pub sample_rate: usize,
    pub mfcc: MfccConfig,
}

impl ModelSpec {
    /// Full-size architecture: width 1, 1024 cells, 96×96 crops.
    pub fn paper(n_classes: usize) -> Self {
        ModelSpec {
            n_classes,
            width: 1.0,
            cells: 1024,
            fusion_cells: 1024,
            image_size: 96,
            frames: 29,
            sample_rate: 16_000,
            mfcc: MfccConfig::default(),
        }
    }

    pub fn desk(n_classes: usize) -> Self {
        ModelSpec { width: 0.125, cells: 32, fusion_cells: 32, image_size: 32, ..Self::paper(n_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid("n_classes", format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.cells == 0 || self.fusion_cells == 0 {
            return Err(invalid("cells", "BGRU cell counts must be at least 1"));
        }
        if self.frames == 0 {
            return Err(invalid("frames", "must be positive"));
        }
        self.mfcc.validate()
    }

    /// Hash of everything that determines parameter shapes for `target`.
    pub fn fingerprint(&self, target: Target) -> String {
        let canon = format!(
            "target={target};n_classes={};width={};cells={};fusion_cells={};image_size={};frames={};sample_rate={};mfcc={}/{}/{}/{}",
            self.n_classes,
            self.width,
            self.cells,
            self.fusion_cells,
            self.image_size,
            self.frames,
            self.sample_rate,
            self.mfcc.window_ms,
            self.mfcc.step_ms,
            self.mfcc.n_coeffs,
            self.mfcc.n_mel_filters
        );
        hex(&Sha256::digest(canon.as_bytes()))
    }
}

/// Front-end + ResNet + 2-layer BGRU of one modality, with its own classifier
/// head and the temporal-convolution back-end used for pretraining.
#[derive(Debug, Clone)]
pub struct Stream {
    pub kind: StreamKind,
    pub frontend: Option<VisualFrontend>,
    pub visual: Option<VisualResNet>,
    pub audio: Option<AudioResNet>,
    pub bgru: BgruStack,
    pub head: Linear,
    pub tcn: TemporalConvBackend,
    pub frames: usize,
}

impl Stream {
    pub fn new(kind: StreamKind, spec: &ModelSpec) -> Result<Self> {
        let p = kind.prefix();
        let (frontend, visual, audio, feat) = match kind {
            StreamKind::Visual => {
                let fe = VisualFrontend::new(&format!("{p}.frontend"), spec.width)?;
                let hw = VisualFrontend::output_hw(spec.image_size, spec.image_size)?;
                let rn = VisualResNet::new(&format!("{p}.resnet"), spec.width, fe.channels(), hw)?;
                let d = rn.out_dim;
                (Some(fe), Some(rn), None, d)
            }
            StreamKind::Audio => {
                let rn = AudioResNet::new(&format!("{p}.resnet"), spec.width, spec.sample_rate, spec.frames)?;
                let d = rn.out_dim;
                (None, None, Some(rn), d)
            }
        };
        let bgru = BgruStack::new(&format!("{p}.bgru"), feat, spec.cells, BGRU_LAYERS)?;
        Ok(Stream {
            kind,
            frontend,
            visual,
            audio,
            head: Linear::new(format!("{p}.head"), bgru.output_dim(), spec.n_classes),
            tcn: TemporalConvBackend::new(&format!("{p}.tcn"), feat, spec.n_classes),
            bgru,
            frames: spec.frames,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.bgru.output_dim()
    }

    /// Groups of the feature extractor (everything below the BGRU).
    pub fn feature_groups(&self) -> Vec<String> {
        let p = self.kind.prefix();
        match self.kind {
            StreamKind::Visual => vec![format!("{p}.frontend"), format!("{p}.resnet")],
            StreamKind::Audio => vec![format!("{p}.resnet")],
        }
    }

    /// Groups that make up the embedding (`features + bgru`).
    pub fn embedding_groups(&self) -> Vec<String> {
        let mut g = self.feature_groups();
        g.push(format!("{}.bgru", self.kind.prefix()));
        g
    }

    pub fn head_group(&self) -> String {
        format!("{}.head", self.kind.prefix())
    }

    pub fn tcn_group(&self) -> String {
        format!("{}.tcn", self.kind.prefix())
    }

    pub fn init_embedding(&self, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
        if let Some(fe) = &self.frontend {
            fe.init(store, rng)?;
        }
        if let Some(rn) = &self.visual {
            rn.init(store, rng)?;
        }
        if let Some(rn) = &self.audio {
            rn.init(store, rng)?;
        }
        self.bgru.init(store, rng)
    }

    /// Per-frame features `(T, batch, feat)` before the BGRU.
    pub fn features<S: Scalar>(&self, ctx: &mut Ctx<S>, input: Var) -> Result<Var> {
        let out = match self.kind {
            StreamKind::Visual => {
                let fe = self.frontend.as_ref().expect("visual stream has a front-end");
                let x = fe.forward(ctx, input)?;
                self.visual.as_ref().expect("visual stream has a resnet").forward(ctx, x)?
            }
            StreamKind::Audio => self.audio.as_ref().expect("audio stream has a resnet").forward(ctx, input)?,
        };
        let t = ctx.tape.shape(out)[0];
        if t != self.frames {
            return Err(invalid("stream", format!("{} stream produced {t} frames, spec says {}", self.kind.prefix(), self.frames)));
        }
        Ok(out)
    }

    /// Per-frame embedding `(T, batch, 2·cells)`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, input: Var) -> Result<Var> {
        let f = self.features(ctx, input)?;
        self.bgru.forward(ctx, f)
    }
}

/// Which classifier sits on top during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Temporal-convolution back-end: one logit row per clip.
    TemporalConv,
    /// BGRU + softmax head: one logit row per frame.
    Recurrent,
}

/// Network inputs for one batch. Layouts: video `(B, 1, T, H, W)`, audio
/// `(B, 1, L)`, MFCC `(frames, B, features)`.
#[derive(Debug, Clone)]
pub struct Inputs<S> {
    pub video: Option<Tensor<S>>,
    pub audio: Option<Tensor<S>>,
    pub mfcc: Option<Tensor<S>>,
}

impl<S: Scalar> Inputs<S> {
    pub fn cast<T: Scalar>(&self) -> Inputs<T> {
        Inputs {
            video: self.video.as_ref().map(Tensor::cast),
            audio: self.audio.as_ref().map(Tensor::cast),
            mfcc: self.mfcc.as_ref().map(Tensor::cast),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub target: Target,
    pub spec: ModelSpec,
    pub audio: Option<Stream>,
    pub visual: Option<Stream>,
    /// MFCC baseline BGRU over normalised MFCC frames.
    pub mfcc_bgru: Option<BgruStack>,
    pub fusion_bgru: Option<BgruStack>,
    pub head: Linear,
}

pub const MFCC_MEAN: &str = "mfcc.norm.mean";
pub const MFCC_STD: &str = "mfcc.norm.std";
pub const VIDEO_MEAN: &str = "visual.norm.mean";
pub const VIDEO_STD: &str = "visual.norm.std";

impl Model {
    pub fn new(target: Target, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let audio = target.uses_audio().then(|| Stream::new(StreamKind::Audio, spec)).transpose()?;
        let visual = target.uses_video().then(|| Stream::new(StreamKind::Visual, spec)).transpose()?;
        let (audio, mfcc_bgru) = if target == Target::Mfcc {
            (None, Some(BgruStack::new("mfcc.bgru", spec.mfcc.n_features(), spec.cells, BGRU_LAYERS)?))
        } else {
            (audio, None)
        };
        let (fusion_bgru, head) = match target {
            Target::Av => {
                let a = audio.as_ref().expect("av has audio");
                let v = visual.as_ref().expect("av has video");
                let f = BgruStack::new("fusion.bgru", a.embedding_dim() + v.embedding_dim(), spec.fusion_cells, BGRU_LAYERS)?;
                let head = Linear::new("fusion.head", f.output_dim(), spec.n_classes);
                (Some(f), head)
            }
            Target::Audio => (None, audio.as_ref().expect("audio").head.clone()),
            Target::Video => (None, visual.as_ref().expect("video").head.clone()),
            Target::Mfcc => {
                let d = mfcc_bgru.as_ref().expect("mfcc").output_dim();
                (None, Linear::new("mfcc.head", d, spec.n_classes))
            }
        };
        Ok(Model { target, spec: spec.clone(), audio, visual, mfcc_bgru, fusion_bgru, head })
    }

    pub fn single_stream(&self) -> Option<&Stream> {
        match self.target {
            Target::Audio => self.audio.as_ref(),
            Target::Video => self.visual.as_ref(),
            _ => None,
        }
    }

    /// Fresh parameters, He/uniform initialised from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in [&self.audio, &self.visual].into_iter().flatten() {
            s.init_embedding(&mut store, &mut rng)?;
            if self.target != Target::Av {
                s.tcn.init(&mut store, &mut rng)?;
            }
        }
        if self.visual.is_some() {
            store.insert(VIDEO_MEAN, Tensor::scalar(0.0), ParamKind::Buffer)?;
            store.insert(VIDEO_STD, Tensor::scalar(1.0), ParamKind::Buffer)?;
        }
        if let Some(m) = &self.mfcc_bgru {
            let n = self.spec.mfcc.n_features();
            store.insert(MFCC_MEAN, Tensor::zeros(vec![n]), ParamKind::Buffer)?;
            store.insert(MFCC_STD, Tensor::full(vec![n], 1.0), ParamKind::Buffer)?;
            m.init(&mut store, &mut rng)?;
        }
        if let Some(f) = &self.fusion_bgru {
            f.init(&mut store, &mut rng)?;
        }
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Weight groups of this model, for building freeze masks.
    pub fn groups(&self, store: &ParamStore<f32>) -> Vec<String> {
        store.groups().into_iter().collect()
    }

    fn leaf<S: Scalar>(ctx: &mut Ctx<S>, t: &Option<Tensor<S>>, what: &str) -> Result<Var> {
        let t = t.as_ref().ok_or_else(|| invalid("inputs", format!("{what} input missing")))?;
        Ok(ctx.tape.constant(t.clone()))
    }

    /// Logits: `(batch, classes)` for [`Head::TemporalConv`], otherwise `(T, batch, classes)`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, inputs: &Inputs<S>, head: Head) -> Result<Var> {
        if head == Head::TemporalConv {
            let s = self.single_stream().ok_or_else(|| invalid("head", "temporal-conv back-end needs a single-stream model"))?;
            let x = Self::leaf(ctx, if s.kind == StreamKind::Audio { &inputs.audio } else { &inputs.video }, s.kind.prefix())?;
            let f = s.features(ctx, x)?;
            return s.tcn.forward(ctx, f);
        }
        let seq = match self.target {
            Target::Audio => {
                let x = Self::leaf(ctx, &inputs.audio, "audio")?;
                self.audio.as_ref().expect("audio").forward(ctx, x)?
            }
            Target::Video => {
                let x = Self::leaf(ctx, &inputs.video, "video")?;
                self.visual.as_ref().expect("video").forward(ctx, x)?
            }
            Target::Mfcc => {
                let x = Self::leaf(ctx, &inputs.mfcc, "mfcc")?;
                self.mfcc_bgru.as_ref().expect("mfcc").forward(ctx, x)?
            }
            Target::Av => {
                let a = Self::leaf(ctx, &inputs.audio, "audio")?;
                let v = Self::leaf(ctx, &inputs.video, "video")?;
                let ea = self.audio.as_ref().expect("audio").forward(ctx, a)?;
                let ev = self.visual.as_ref().expect("video").forward(ctx, v)?;
                fusion_forward(ctx, self.fusion_bgru.as_ref().expect("fusion"), ea, ev)?
            }
        };
        self.head.forward(ctx, seq)
    }
}

/// Concatenates audio then visual embeddings per frame and runs the fusion BGRU.
pub fn fusion_forward<S: Scalar>(ctx: &mut Ctx<S>, bgru: &BgruStack, audio: Var, visual: Var) -> Result<Var> {
    let (a, v) = (ctx.tape.shape(audio).to_vec(), ctx.tape.shape(visual).to_vec());
    if a[..2] != v[..2] {
        return Err(invalid("fusion", format!("audio embedding {a:?} and visual embedding {v:?} disagree on (T, batch)")));
    }
    let x = ctx.tape.concat_last(&[audio, visual])?;
    bgru.forward(ctx, x)
}

/// Mean cross-entropy over every logit row, each row labelled with its clip's class.
pub fn sequence_loss<S: Scalar>(ctx: &mut Ctx<S>, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<S>)> {
    let shape = ctx.tape.shape(logits).to_vec();
    let c = *shape.last().expect("logits have rank >= 2");
    let rows = shape.iter().product::<usize>() / c;
    if rows % labels.len() != 0 {
        return Err(invalid("loss", format!("{rows} logit rows for {} labels", labels.len())));
    }
    let flat = ctx.tape.reshape(logits, &[rows, c])?;
    let per_row: Vec<usize> = (0..rows).map(|r| labels[r % labels.len()]).collect();
    Ok(ctx.tape.softmax_cross_entropy(flat, &per_row)?)
}

/// Label with the highest mean probability over frames; ties go to the lowest index.
pub fn classify_sequence(frames: &[Vec<f64>]) -> (usize, f64) {
    let c = frames.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; c];
    for f in frames {
        for (m, p) in mean.iter_mut().zip(f) {
            *m += p;
        }
    }
    let n = frames.len().max(1) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, m) in mean.iter().enumerate() {
        let m = m / n;
        if m > best.1 {
            best = (i, m);
        }
    }
    best
}

/// Splits `probs (rows, C)` with rows ordered `(frame, batch)` into per-clip
/// predictions.
pub fn predictions<S: Scalar>(probs: &Tensor<S>, batch: usize) -> Vec<(usize, f64)> {
    let c = *probs.shape().last().expect("rank >= 1");
    let rows = probs.len() / c;
    let frames = rows / batch;
    (0..batch)
        .map(|b| {
            let per: Vec<Vec<f64>> = (0..frames)
                .map(|t| probs.data()[(t * batch + b) * c..][..c].iter().map(|v| v.as_f64()).collect())
                .collect();
            classify_sequence(&per)
        })
        .collect()
}
