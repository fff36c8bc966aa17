use avsr_tensor::{conv_out_len, Scalar, Var};
use rand::Rng;

use super::basic::{BatchNorm, Conv};
use super::ctx::Ctx;
use crate::error::{invalid, Result};
use crate::params::ParamStore;

pub const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const VISUAL_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const AUDIO_BLOCKS: [usize; 4] = [2, 2, 2, 2];
pub const FRONTEND_CHANNELS: usize = 64;
pub const SAMPLE_RATE: usize = 16_000;
pub const FRAMES: usize = 29;

/// `round(c·w)`, refusing widths that would leave a layer with no channels.
pub fn scaled(channels: usize, width: f64) -> Result<usize> {
    if !(width > 0.0 && width <= 1.0) {
        return Err(invalid("width", format!("multiplier {width} outside (0, 1]")));
    }
    let c = (channels as f64 * width).round() as usize;
    if c == 0 {
        return Err(invalid("width", format!("multiplier {width} leaves 0 of {channels} channels")));
    }
    Ok(c)
}

/// Pre-activation residual block: `skip(x) + conv2(relu(bn2(conv1(relu(bn1(x))))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
    pub proj: Option<Conv>,
}

impl ResidualBlock {
    pub fn new(name: &str, dims: usize, cin: usize, cout: usize, stride: usize, projection: bool) -> Result<Self> {
        if !(1..=2).contains(&dims) {
            return Err(invalid(name, format!("residual blocks are 1-D or 2-D, got {dims}")));
        }
        let reshapes = cin != cout || stride != 1;
        if reshapes && !projection {
            return Err(invalid(name, format!("{cin}->{cout} channels, stride {stride} needs a projection")));
        }
        let k3 = vec![3; dims];
        let conv = |n: &str, ci, s| Conv::new(format!("{name}.{n}"), ci, cout, &k3, &vec![s; dims], &vec![1; dims]);
        Ok(ResidualBlock {
            bn1: BatchNorm::new(format!("{name}.bn1"), cin),
            conv1: conv("conv1", cin, stride),
            bn2: BatchNorm::new(format!("{name}.bn2"), cout),
            conv2: conv("conv2", cout, 1),
            proj: projection.then(|| {
                Conv::new(format!("{name}.proj"), cin, cout, &vec![1; dims], &vec![stride; dims], &vec![0; dims])
            }),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.bn1.init(store)?;
        self.conv1.init(store, rng)?;
        self.bn2.init(store)?;
        self.conv2.init(store, rng)?;
        if let Some(p) = &self.proj {
            p.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let a = self.bn1.relu_after(ctx, x)?;
        let b = self.conv1.forward(ctx, a)?;
        let c = self.bn2.relu_after(ctx, b)?;
        let d = self.conv2.forward(ctx, c)?;
        let skip = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        Ok(ctx.tape.add(skip, d)?)
    }
}

/// Stages of residual blocks; the first block of a stage changes width and stride.
#[derive(Debug, Clone, PartialEq)]
pub struct ResStages {
    pub blocks: Vec<ResidualBlock>,
}

impl ResStages {
    fn new(name: &str, dims: usize, cin: usize, channels: &[usize], counts: &[usize], strides: &[usize]) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c = cin;
        for (s, ((&cout, &n), &stride)) in channels.iter().zip(counts).zip(strides).enumerate() {
            for i in 0..n {
                let st = if i == 0 { stride } else { 1 };
                let proj = c != cout || st != 1;
                blocks.push(ResidualBlock::new(&format!("{name}.s{s}b{i}"), dims, c, cout, st, proj)?);
                c = cout;
            }
        }
        Ok(ResStages { blocks })
    }

    fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.init(store, rng))
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Spatiotemporal front-end: 5×7×7 convolution, stride (1, 2, 2), then BN and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFrontend {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl VisualFrontend {
    pub fn new(prefix: &str, width: f64) -> Result<Self> {
        let c = scaled(FRONTEND_CHANNELS, width)?;
        Ok(VisualFrontend {
            conv: Conv::new(format!("{prefix}.conv"), 1, c, &[5, 7, 7], &[1, 2, 2], &[2, 3, 3]),
            bn: BatchNorm::new(format!("{prefix}.bn"), c),
        })
    }

    pub fn channels(&self) -> usize {
        self.conv.cout
    }

    /// Output spatial size for an `h × w` frame.
    pub fn output_hw(h: usize, w: usize) -> Result<(usize, usize)> {
        if h < 7 || w < 7 {
            return Err(invalid("visual frontend", format!("frames must be at least 7×7, got {h}×{w}")));
        }
        let f = |n| conv_out_len(n, 7, 2, 3).expect("checked above");
        Ok((f(h), f(w)))
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)?;
        self.bn.init(store)
    }

    /// `clip (batch, 1, T, H, W)` → `(batch, C, T, H', W')`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<Var> {
        let s = ctx.tape.shape(clip).to_vec();
        if s.len() != 5 || s[1] != 1 {
            return Err(invalid("visual frontend", format!("expected (batch, 1, T, H, W), got {s:?}")));
        }
        Self::output_hw(s[3], s[4])?;
        let y = self.conv.forward(ctx, clip)?;
        self.bn.relu_after(ctx, y)
    }
}

/// 34-layer 2-D ResNet applied to every time step, ending in global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualResNet {
    pub stages: ResStages,
    pub out_dim: usize,
}

impl VisualResNet {
    /// `in_hw` is the front-end output size; construction fails if a stage would collapse it.
    pub fn new(prefix: &str, width: f64, cin: usize, in_hw: (usize, usize)) -> Result<Self> {
        let channels = STAGE_CHANNELS.map(|c| scaled(c, width)).into_iter().collect::<Result<Vec<_>>>()?;
        let strides = [1, 2, 2, 2];
        let (mut h, mut w) = in_hw;
        for (i, &s) in strides.iter().enumerate() {
            match (conv_out_len(h, 3, s, 1), conv_out_len(w, 3, s, 1)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (h, w) = (a, b),
                _ => return Err(invalid("visual resnet", format!("spatial size {h}×{w} vanishes at stage {i}"))),
            }
        }
        let stages = ResStages::new(prefix, 2, cin, &channels, &VISUAL_BLOCKS, &strides)?;
        Ok(VisualResNet { stages, out_dim: channels[3] })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.stages.init(store, rng)
    }

    /// `(batch, C, T, H, W)` → `(T, batch, out_dim)`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let (b, c, t) = (s[0], s[1], s[2]);
        let x = ctx.tape.permute(x, &[2, 0, 1, 3, 4])?;
        let x = ctx.tape.reshape(x, &[t * b, c, s[3], s[4]])?;
        let y = self.stages.forward(ctx, x)?;
        let pooled = ctx.tape.mean_trailing(y, 2)?;
        Ok(ctx.tape.reshape(pooled, &[t, b, self.out_dim])?)
    }
}

/// 18-layer 1-D ResNet on raw waveform. The first convolution spans 5 ms with a
/// 0.25 ms hop; its output is average-pooled to the video frame count before the
/// residual stages.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioResNet {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub stages: ResStages,
    pub frames: usize,
    pub out_dim: usize,
}

impl AudioResNet {
    pub fn new(prefix: &str, width: f64, sample_rate: usize, frames: usize) -> Result<Self> {
        let (k, stride) = (sample_rate / 200, sample_rate / 4000);
        if k == 0 || stride == 0 || frames == 0 {
            return Err(invalid("audio resnet", format!("sample rate {sample_rate} / {frames} frames unusable")));
        }
        let c0 = scaled(STAGE_CHANNELS[0], width)?;
        let channels = STAGE_CHANNELS.map(|c| scaled(c, width)).into_iter().collect::<Result<Vec<_>>>()?;
        Ok(AudioResNet {
            conv: Conv::new(format!("{prefix}.conv"), 1, c0, &[k], &[stride], &[0]),
            bn: BatchNorm::new(format!("{prefix}.bn"), c0),
            stages: ResStages::new(prefix, 1, c0, &channels, &AUDIO_BLOCKS, &[1; 4])?,
            frames,
            out_dim: channels[3],
        })
    }

    /// Shortest waveform whose first-layer output still covers every frame.
    pub fn min_samples(&self) -> usize {
        self.conv.kernel[0] + (self.frames - 1) * self.conv.stride[0]
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)?;
        self.bn.init(store)?;
        self.stages.init(store, rng)
    }

    /// `wave (batch, 1, L)` → `(frames, batch, out_dim)`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, wave: Var) -> Result<Var> {
        let s = ctx.tape.shape(wave).to_vec();
        if s.len() != 3 || s[1] != 1 {
            return Err(invalid("audio resnet", format!("expected (batch, 1, L), got {s:?}")));
        }
        if s[2] < self.min_samples() {
            return Err(invalid(
                "audio resnet",
                format!("waveform has {} samples, needs at least {}", s[2], self.min_samples()),
            ));
        }
        let y = self.conv.forward(ctx, wave)?;
        let y = self.bn.relu_after(ctx, y)?;
        let y = ctx.tape.adaptive_avg_pool(y, self.frames)?;
        let y = self.stages.forward(ctx, y)?;
        Ok(ctx.tape.permute(y, &[2, 0, 1])?)
    }
}
