use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn forward<S: Scalar>(x: &[S], w: &[S], b: Option<&[S]>, rows: usize, inp: usize, out: usize) -> Vec<S> {
    let mut y = vec![S::zero(); rows * out];
    if let Some(b) = b {
        for row in y.chunks_mut(out) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { S::one() } else { S::zero() };
    // y (rows×out) = x (rows×inp) · wᵀ, w stored (out×inp)
    S::gemm(rows, inp, out, x, inp as isize, 1, w, 1, inp as isize, beta, &mut y, out as isize, 1);
    y
}

pub(crate) fn grad_input<S: Scalar>(g: &[S], w: &[S], rows: usize, inp: usize, out: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); rows * inp];
    S::gemm(rows, out, inp, g, out as isize, 1, w, inp as isize, 1, S::zero(), &mut dx, inp as isize, 1);
    dx
}

pub(crate) fn grad_weight<S: Scalar>(g: &[S], x: &[S], rows: usize, inp: usize, out: usize) -> Vec<S> {
    let mut dw = vec![S::zero(); out * inp];
    // dW (out×inp) = gᵀ (out×rows) · x (rows×inp)
    S::gemm(out, rows, inp, g, 1, out as isize, x, inp as isize, 1, S::zero(), &mut dw, inp as isize, 1);
    dw
}

pub(crate) fn grad_bias<S: Scalar>(g: &[S], rows: usize, out: usize) -> Vec<S> {
    let mut db = vec![S::zero(); out];
    for row in g.chunks(out).take(rows) {
        for (a, &d) in db.iter_mut().zip(row) {
            *a += d;
        }
    }
    db
}

impl<S: Scalar> Tape<S> {
    /// Affine map over the last axis: `x (..., in)`, `w (out, in)`, `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(TensorError::shape("linear", format!("weight must be 2-D, got {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        let last = *xs.last().unwrap();
        if last != inp {
            return Err(TensorError::shape(
                "linear",
                format!("input feature dim {last} does not match weight input dim {inp}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(TensorError::shape(
                    "linear",
                    format!("bias shape {:?} != [{out}]", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / inp;
        let y = forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            inp,
            out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y)?, rg, Op::Linear { x, w, b, rows, inp, out }))
    }
}
