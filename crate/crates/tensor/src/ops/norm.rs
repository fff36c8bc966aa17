use crate::error::{Result, TensorError};
use crate::par;
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Batch normalisation mode. Eval mode carries the running statistics.
#[derive(Debug, Clone)]
pub enum BnMode<'a, S> {
    Train,
    Eval { running_mean: &'a [S], running_var: &'a [S] },
}

/// Per-channel statistics of one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<S>,
    /// Number of values per channel.
    pub count: usize,
}

pub(crate) struct BnContext<S> {
    channels: usize,
    plane: usize,
    mean: Vec<S>,
    inv_std: Vec<S>,
    train: bool,
}

pub(crate) struct BnGrads<S> {
    pub input: Option<Vec<S>>,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

/// Sums `f(value, channel)` per channel over a `(batch, channel, plane)` buffer.
/// Eight interleaved partial sums keep the loop vectorisable.
fn channel_sums<S: Scalar>(data: &[S], channels: usize, plane: usize, f: impl Fn(usize, usize) -> S + Sync + Send) -> Vec<S> {
    let batch = data.len() / (channels * plane);
    par::map_indexed(channels, |c| {
        let mut lanes = [S::zero(); 8];
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            let mut i = base;
            while i + 8 <= base + plane {
                for (l, lane) in lanes.iter_mut().enumerate() {
                    *lane += f(i + l, c);
                }
                i += 8;
            }
            for (l, j) in (i..base + plane).enumerate() {
                lanes[l] += f(j, c);
            }
        }
        lanes.into_iter().sum()
    })
}

pub(crate) fn backward<S: Scalar>(ctx: &BnContext<S>, x: &[S], gamma: &[S], dy: &[S], want_x: bool) -> BnGrads<S> {
    let (c, p) = (ctx.channels, ctx.plane);
    let xhat = |i: usize, ch: usize| (x[i] - ctx.mean[ch]) * ctx.inv_std[ch];
    let dbeta = channel_sums(dy, c, p, |i, _| dy[i]);
    let dgamma = channel_sums(dy, c, p, |i, ch| dy[i] * xhat(i, ch));
    let input = want_x.then(|| {
        let n = S::of((x.len() / c) as f64);
        let mut dx = vec![S::zero(); x.len()];
        par::for_each_chunk_mut(&mut dx, p, |blk, out| {
            let ch = blk % c;
            let base = blk * p;
            let k = gamma[ch] * ctx.inv_std[ch];
            if ctx.train {
                let (sb, sg) = (dbeta[ch] / n, dgamma[ch] / n);
                for (j, o) in out.iter_mut().enumerate() {
                    let i = base + j;
                    *o = k * (dy[i] - sb - xhat(i, ch) * sg);
                }
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = k * dy[base + j];
                }
            }
        });
        dx
    });
    BnGrads { input, gamma: dgamma, beta: dbeta }
}

impl<S: Scalar> Tape<S> {
    /// Per-channel batch normalisation of `x (batch, channels, spatial...)`.
    /// Returns the batch statistics in train mode so the caller can update
    /// its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, S>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape("batch_norm", format!("input rank < 2: {shape:?}")));
        }
        let c = shape[1];
        let plane: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::shape(
                    "batch_norm",
                    format!("{name} shape {:?} != [{c}] channels", self.shape(v)),
                ));
            }
        }
        let xd = self.value(x).data();
        let count = shape[0] * plane;
        let eps = S::of(eps);
        let (mean, var, train) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(TensorError::invalid(
                        "batch_norm",
                        "train mode needs at least 2 values per channel for a variance",
                    ));
                }
                let n = S::of(count as f64);
                let mean: Vec<S> = channel_sums(xd, c, plane, |i, _| xd[i]).into_iter().map(|s| s / n).collect();
                let var: Vec<S> = channel_sums(xd, c, plane, |i, ch| {
                    let d = xd[i] - mean[ch];
                    d * d
                })
                .into_iter()
                .map(|s| s / n)
                .collect();
                (mean, var, true)
            }
            BnMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(TensorError::shape("batch_norm", "running statistics length != channels"));
                }
                (running_mean.to_vec(), running_var.to_vec(), false)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![S::zero(); xd.len()];
        par::for_each_chunk_mut(&mut y, plane, |blk, out| {
            let ch = blk % c;
            let base = blk * plane;
            let (k, m, b) = (gd[ch] * inv_std[ch], mean[ch], bd[ch]);
            for (j, o) in out.iter_mut().enumerate() {
                *o = k * (xd[base + j] - m) + b;
            }
        });
        let stats = train.then(|| BatchStats { mean: mean.clone(), var: var.clone(), count });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let ctx = BnContext { channels: c, plane, mean, inv_std, train };
        let out = self.push(Tensor::new(shape, y)?, rg, Op::BatchNorm { x, gamma, beta, ctx });
        Ok((out, stats))
    }
}
