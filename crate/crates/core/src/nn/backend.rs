use avsr_tensor::{Scalar, Var};
use rand::Rng;

use super::basic::{BatchNorm, Conv, Linear};
use super::ctx::Ctx;
use crate::error::{invalid, Result};
use crate::params::ParamStore;

pub const TCN_KERNEL: usize = 5;

/// Temporal-convolution back-end used to pretrain a stream: two k=5 convolutions
/// with BN and ReLU, mean over time, then a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConvBackend {
    pub convs: [Conv; 2],
    pub bns: [BatchNorm; 2],
    pub head: Linear,
}

impl TemporalConvBackend {
    pub fn new(prefix: &str, features: usize, n_classes: usize) -> Self {
        let conv = |i| Conv::new(format!("{prefix}.conv{i}"), features, features, &[TCN_KERNEL], &[1], &[TCN_KERNEL / 2]);
        let bn = |i| BatchNorm::new(format!("{prefix}.bn{i}"), features);
        TemporalConvBackend {
            convs: [conv(0), conv(1)],
            bns: [bn(0), bn(1)],
            head: Linear::new(format!("{prefix}.fc"), features, n_classes),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        for (c, b) in self.convs.iter().zip(&self.bns) {
            c.init(store, rng)?;
            b.init(store)?;
        }
        self.head.init(store, rng)
    }

    /// `seq (T, batch, features)` → logits `(batch, n_classes)`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, seq: Var) -> Result<Var> {
        let s = ctx.tape.shape(seq).to_vec();
        if s.len() != 3 || s[0] < TCN_KERNEL {
            return Err(invalid("temporal conv backend", format!("need (T >= {TCN_KERNEL}, batch, features), got {s:?}")));
        }
        let mut x = ctx.tape.permute(seq, &[1, 2, 0])?;
        for (c, b) in self.convs.iter().zip(&self.bns) {
            let y = c.forward(ctx, x)?;
            x = b.relu_after(ctx, y)?;
        }
        let pooled = ctx.tape.mean_trailing(x, 1)?;
        self.head.forward(ctx, pooled)
    }
}
