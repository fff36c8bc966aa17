use avsr_tensor::{BnMode, Scalar, Tensor, Var};
use rand::Rng;

use super::ctx::Ctx;
use crate::error::Result;
use crate::params::{ParamKind, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution without bias (every convolution here feeds a batch norm).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: &[usize], stride: &[usize], pad: &[usize]) -> Self {
        Conv { name: name.into(), cin, cout, kernel: kernel.to_vec(), stride: stride.to_vec(), pad: pad.to_vec() }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        let fan_in = self.cin * self.kernel.iter().product::<usize>();
        let mut shape = vec![self.cout, self.cin];
        shape.extend(&self.kernel);
        store.insert(self.weight_name(), Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng), ParamKind::Weight)
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        Ok(ctx.tape.conv(x, w, None, &self.stride, &self.pad)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm { name: name.into(), channels }
    }

    pub fn init(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::full(vec![c], 1.0), ParamKind::Weight)?;
        store.insert(format!("{}.beta", self.name), Tensor::zeros(vec![c]), ParamKind::Weight)?;
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(vec![c]), ParamKind::Buffer)?;
        store.insert(format!("{}.running_var", self.name), Tensor::full(vec![c], 1.0), ParamKind::Buffer)
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        if ctx.learns(&self.name) {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, BnMode::Train, BN_EPS)?;
            if let Some(stats) = stats {
                ctx.record_bn(&self.name, stats);
            }
            Ok(y)
        } else {
            let rm = ctx.buffer(&format!("{}.running_mean", self.name))?;
            let rv = ctx.buffer(&format!("{}.running_var", self.name))?;
            let mode = BnMode::Eval { running_mean: rm.data(), running_var: rv.data() };
            Ok(ctx.tape.batch_norm(x, gamma, beta, mode, BN_EPS)?.0)
        }
    }

    /// Conv → BN → ReLU, the unit shared by both front-ends and the temporal back-end.
    pub fn relu_after<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = self.forward(ctx, x)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Folds one batch's statistics into running averages:
/// `running ← (1 − m)·running + m·batch`, with the unbiased batch variance.
pub fn update_running_stats(store: &mut ParamStore<f32>, prefix: &str, mean: &[f32], var: &[f32], count: usize) -> Result<()> {
    let m = BN_MOMENTUM as f32;
    let unbias = count as f32 / (count.max(2) - 1) as f32;
    for (suffix, batch, scale) in [("running_mean", mean, 1.0), ("running_var", var, unbias)] {
        let name = format!("{prefix}.{suffix}");
        let p = store.get_mut(&name).ok_or_else(|| crate::AvsrError::Missing(name.clone()))?;
        for (r, &b) in p.tensor.data_mut().iter_mut().zip(batch) {
            *r = (1.0 - m) * *r + m * b * scale;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inp: usize, out: usize) -> Self {
        Linear { name: name.into(), inp, out }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        let std = (2.0 / self.inp as f64).sqrt();
        store.insert(format!("{}.weight", self.name), Tensor::randn(vec![self.out, self.inp], std, rng), ParamKind::Weight)?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.out]), ParamKind::Weight)
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        Ok(ctx.tape.linear(x, w, Some(b))?)
    }
}
