use avsr_tensor::{Scalar, Tensor, Var};
use rand::Rng;

use super::ctx::Ctx;
use crate::error::{invalid, Result};
use crate::params::{ParamKind, ParamStore};

const GATES: [&str; 3] = ["z", "r", "h"];

/// One GRU direction:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h~
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

/// Input projections `W x + b` for every gate, precomputed over a whole sequence.
pub struct Projected {
    pub z: Var,
    pub r: Var,
    pub h: Var,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        GruCell { name: name.into(), input, hidden }
    }

    fn key(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}_{gate}", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        for g in GATES {
            store.insert(self.key("w", g), Tensor::uniform(vec![self.hidden, self.input], bound, rng), ParamKind::Weight)?;
        }
        for g in GATES {
            store.insert(self.key("u", g), Tensor::uniform(vec![self.hidden, self.hidden], bound, rng), ParamKind::Weight)?;
        }
        for g in GATES {
            store.insert(self.key("b", g), Tensor::zeros(vec![self.hidden]), ParamKind::Weight)?;
        }
        Ok(())
    }

    /// Applies the input weights to `x (..., input)`.
    pub fn project<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Projected> {
        let last = *ctx.tape.shape(x).last().unwrap_or(&0);
        if last != self.input {
            return Err(invalid(&self.name, format!("input width {last}, expected {}", self.input)));
        }
        let mut out = Vec::with_capacity(3);
        for g in GATES {
            let w = ctx.param(&self.key("w", g))?;
            let b = ctx.param(&self.key("b", g))?;
            out.push(ctx.tape.linear(x, w, Some(b))?);
        }
        Ok(Projected { z: out[0], r: out[1], h: out[2] })
    }

    /// Recurrent half of a step, given the input projections of this step.
    pub fn recur<S: Scalar>(&self, ctx: &mut Ctx<S>, xz: Var, xr: Var, xh: Var, h: Var) -> Result<Var> {
        let (uz, ur, uh) = (ctx.param(&self.key("u", "z"))?, ctx.param(&self.key("u", "r"))?, ctx.param(&self.key("u", "h"))?);
        let t = &mut ctx.tape;
        let hz = t.linear(h, uz, None)?;
        let pre_z = t.add(xz, hz)?;
        let z = t.sigmoid(pre_z);
        let hr = t.linear(h, ur, None)?;
        let pre_r = t.add(xr, hr)?;
        let r = t.sigmoid(pre_r);
        let rh = t.mul(r, h)?;
        let hh = t.linear(rh, uh, None)?;
        let pre_c = t.add(xh, hh)?;
        let cand = t.tanh(pre_c);
        let delta = t.sub(cand, h)?;
        let step = t.mul(z, delta)?;
        Ok(t.add(h, step)?)
    }

    /// Full step on `x (batch, input)` and `h (batch, hidden)`.
    pub fn step<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var, h: Var) -> Result<Var> {
        let hs = ctx.tape.shape(h).to_vec();
        let xs = ctx.tape.shape(x).to_vec();
        if hs.len() != 2 || hs[1] != self.hidden || xs.len() != 2 || xs[0] != hs[0] {
            return Err(invalid(&self.name, format!("step shapes x {xs:?}, h {hs:?} for hidden {}", self.hidden)));
        }
        let p = self.project(ctx, x)?;
        self.recur(ctx, p.z, p.r, p.h, h)
    }

    /// Runs over `seq (T, batch, input)`, returning hidden states in the order consumed.
    pub fn run<S: Scalar>(&self, ctx: &mut Ctx<S>, seq: Var, reverse: bool) -> Result<Vec<Var>> {
        let shape = ctx.tape.shape(seq).to_vec();
        if shape.len() != 3 {
            return Err(invalid(&self.name, format!("sequence must be (T, batch, features), got {shape:?}")));
        }
        let (steps, batch) = (shape[0], shape[1]);
        let p = self.project(ctx, seq)?;
        let mut h = ctx.tape.constant(Tensor::zeros(vec![batch, self.hidden]));
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = if reverse { steps - 1 - i } else { i };
            let xz = ctx.tape.select(p.z, t)?;
            let xr = ctx.tape.select(p.r, t)?;
            let xh = ctx.tape.select(p.h, t)?;
            h = self.recur(ctx, xz, xr, xh, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Bidirectional layer: per step, forward state after steps `1..=t` next to
/// backward state after steps `T..=t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bgru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl Bgru {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        Bgru { fwd: GruCell::new(format!("{name}.fwd"), input, hidden), bwd: GruCell::new(format!("{name}.bwd"), input, hidden) }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.fwd.init(store, rng)?;
        self.bwd.init(store, rng)
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, seq: Var) -> Result<Var> {
        if ctx.tape.shape(seq).first() == Some(&0) {
            return Err(invalid("bgru", "empty sequence"));
        }
        let f = self.fwd.run(ctx, seq, false)?;
        let mut b = self.bwd.run(ctx, seq, true)?;
        b.reverse();
        let f = ctx.tape.stack(&f)?;
        let b = ctx.tape.stack(&b)?;
        Ok(ctx.tape.concat_last(&[f, b])?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BgruStack {
    pub layers: Vec<Bgru>,
}

impl BgruStack {
    pub fn new(name: &str, input: usize, cells: usize, n_layers: usize) -> Result<Self> {
        if cells == 0 || n_layers == 0 {
            return Err(invalid(name, "BGRU needs at least one cell and one layer"));
        }
        let layers = (0..n_layers)
            .map(|i| Bgru::new(&format!("{name}.l{i}"), if i == 0 { input } else { 2 * cells }, cells))
            .collect();
        Ok(BgruStack { layers })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.layers.last().map_or(0, |l| l.fwd.hidden)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, mut seq: Var) -> Result<Var> {
        for l in &self.layers {
            seq = l.forward(ctx, seq)?;
        }
        Ok(seq)
    }
}
