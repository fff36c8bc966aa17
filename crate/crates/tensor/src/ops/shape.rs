use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
pub fn permute_data<S: Copy>(data: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // The innermost output axis is copied as a strided run.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn split_last<S: Copy>(data: &[S], widths: &[usize]) -> Vec<Vec<S>> {
    let total: usize = widths.iter().sum();
    let rows = data.len() / total;
    let mut parts: Vec<Vec<S>> = widths.iter().map(|w| Vec::with_capacity(w * rows)).collect();
    for row in data.chunks(total) {
        let mut off = 0;
        for (p, &w) in parts.iter_mut().zip(widths) {
            p.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    parts
}

impl<S: Scalar> Tape<S> {
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Slice `x[index]` along axis 0.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(TensorError::shape("select", format!("index {index} out of range for {shape:?}")));
        }
        let n: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * n..(index + 1) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape[1..].to_vec(), data)?, rg, Op::Select { x, index }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("stack", "no inputs"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).len());
        for p in parts {
            if self.shape(*p) != inner.as_slice() {
                return Err(TensorError::shape("stack", format!("{:?} vs {:?}", self.shape(*p), inner)));
            }
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Stack(parts.to_vec())))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::shape("concat", format!("leading dims {:?} vs {:?}", &s[..s.len() - 1], lead)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Concat(parts.to_vec())))
    }
}
