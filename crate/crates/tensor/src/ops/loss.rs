use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{softmax_in_place, Tensor};

pub(crate) fn softmax_ce_grad<S: Scalar>(g: S, probs: &[S], labels: &[usize]) -> Vec<S> {
    let rows = labels.len();
    let c = probs.len() / rows;
    let scale = g / S::of(rows as f64);
    let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
    for (r, &l) in labels.iter().enumerate() {
        d[r * c + l] -= scale;
    }
    d
}

impl<S: Scalar> Tape<S> {
    /// Mean cross-entropy of softmax(`logits (rows, classes)`) against one
    /// label per row. Returns the scalar loss and the row probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<S>)> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("logits {shape:?} need shape [{}, classes]", labels.len()),
            ));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = S::zero();
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            // log p_l = z_l − max − log Σ exp(z − max), computed before normalising
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
            loss -= row[l] - max - lse;
            softmax_in_place(row);
        }
        loss /= S::of(labels.len() as f64);
        let probs_t = Tensor::new(shape, probs.clone())?;
        let rg = self.rg(logits);
        let v = self.push(Tensor::scalar(loss), rg, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs });
        Ok((v, probs_t))
    }
}
