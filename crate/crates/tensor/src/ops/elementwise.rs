use crate::error::{Result, TensorError};
use crate::par;
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn mul_grad<S: Scalar>(g: &[S], other: &[S]) -> Vec<S> {
    g.iter().zip(other).map(|(&a, &b)| a * b).collect()
}

pub(crate) fn relu_grad<S: Scalar>(g: &[S], y: &[S]) -> Vec<S> {
    g.iter().zip(y).map(|(&d, &v)| if v > S::zero() { d } else { S::zero() }).collect()
}

pub(crate) fn sigmoid_grad<S: Scalar>(g: &[S], y: &[S]) -> Vec<S> {
    g.iter().zip(y).map(|(&d, &s)| d * s * (S::one() - s)).collect()
}

pub(crate) fn tanh_grad<S: Scalar>(g: &[S], y: &[S]) -> Vec<S> {
    g.iter().zip(y).map(|(&d, &t)| d * (S::one() - t * t)).collect()
}

impl<S: Scalar> Tape<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (S::of(scale), S::of(shift));
        let t = self.value(x).map(|v| s * v + c);
        let rg = self.rg(x);
        self.push(t, rg, Op::Affine { x, scale: s })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = self.value(x);
        let mut out = vec![S::zero(); v.len()];
        match kind {
            Activation::Relu => par::map_into(v.data(), &mut out, |&a| a.max(S::zero())),
            Activation::Sigmoid => par::map_into(v.data(), &mut out, |&a| sigmoid(a)),
            Activation::Tanh => par::map_into(v.data(), &mut out, |&a| a.tanh()),
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        let op = match kind {
            Activation::Relu => Op::Relu(x),
            Activation::Sigmoid => Op::Sigmoid(x),
            Activation::Tanh => Op::Tanh(x),
        };
        self.push(t, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: S = v.data().iter().copied().sum::<S>() / S::of(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }
}
