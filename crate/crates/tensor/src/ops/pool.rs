use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Window `i` of an adaptive average pool covers `[floor(i·L/T), floor((i+1)·L/T))`.
pub fn adaptive_window(i: usize, len: usize, target: usize) -> (usize, usize) {
    (i * len / target, (i + 1) * len / target)
}

pub(crate) fn adaptive_backward<S: Scalar>(g: &[S], len_in: usize, target: usize) -> Vec<S> {
    let rows = g.len() / target;
    let mut dx = vec![S::zero(); rows * len_in];
    for (r, grow) in g.chunks(target).enumerate() {
        let drow = &mut dx[r * len_in..(r + 1) * len_in];
        for (i, &gi) in grow.iter().enumerate() {
            let (a, b) = adaptive_window(i, len_in, target);
            let share = gi / S::of((b - a) as f64);
            for d in &mut drow[a..b] {
                *d += share;
            }
        }
    }
    dx
}

impl<S: Scalar> Tape<S> {
    /// Average-pools the last axis down to exactly `target` steps.
    pub fn adaptive_avg_pool(&mut self, x: Var, target: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len_in = *shape.last().unwrap();
        if target == 0 || len_in < target {
            return Err(TensorError::invalid(
                "adaptive_avg_pool",
                format!("input length {len_in} shorter than target {target}"),
            ));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() / len_in * target);
        for row in xd.chunks(len_in) {
            for i in 0..target {
                let (a, b) = adaptive_window(i, len_in, target);
                let s: S = row[a..b].iter().copied().sum();
                out.push(s / S::of((b - a) as f64));
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = target;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(oshape, out)?, rg, Op::AdaptivePool { x, len_in, target }))
    }

    /// Mean over the trailing `n_axes` axes (global average pooling).
    pub fn mean_trailing(&mut self, x: Var, n_axes: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if n_axes == 0 || n_axes >= shape.len() {
            return Err(TensorError::shape(
                "mean_trailing",
                format!("cannot reduce {n_axes} trailing axes of {shape:?}"),
            ));
        }
        let keep = shape.len() - n_axes;
        let inner: usize = shape[keep..].iter().product();
        let scale = S::one() / S::of(inner as f64);
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<S>() * scale)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape[..keep].to_vec(), out)?, rg, Op::MeanTrailing { x, inner }))
    }
}
