use crate::error::{contract_err, shape_err, Result};
use crate::graph::{Contributions, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.value(logits).shape() {
            [n, k] => (n, k),
            ref s => return shape_err(format!("cross entropy expects N×K logits, got {s:?}")),
        };
        if labels.len() != n {
            return contract_err(format!("{} labels for a batch of {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return contract_err(format!("label {bad} out of range for {k} classes"));
        }
        let lv = self.value(logits).data();
        let probs = softmax(lv, k);
        let mut total = T::zero();
        for (row, &label) in lv.chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / T::cast(n as f64));
        let op = Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() };
        Ok(self.push(value, op, &[logits]))
    }
}

pub(crate) fn softmax_cross_entropy_backward<T: Scalar>(
    logits: Var,
    probs: &[T],
    labels: &[usize],
    g: T,
    out: &mut Contributions<T>,
) {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = g / T::cast(n as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (s, &label) in labels.iter().enumerate() {
        d[s * k + label] -= scale;
    }
    out.push((logits, d));
}
