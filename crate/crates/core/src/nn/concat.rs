use crate::error::{shape_err, Result};
use crate::graph::{Contributions, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Joins `N×Cᵢ×H×W` tensors along the channel axis, preserving order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat needs at least one input");
        };
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let [xn, c, xh, xw] = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return shape_err(format!("concat: {xn}×{xh}×{xw} does not match {n}×{h}×{w}"));
            }
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(x).data()[s * c * hw..][..c * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }
}

pub(crate) fn backward<T: Scalar>(graph: &Graph<T>, xs: &[Var], g: &[T], out: &mut Contributions<T>) {
    let [n, _, h, w] = graph.value(xs[0]).dims4().expect("concat input rank");
    let hw = h * w;
    let channels: Vec<usize> = xs.iter().map(|&x| graph.value(x).shape()[1]).collect();
    let total: usize = channels.iter().sum();
    let mut offset = 0;
    for (&x, &c) in xs.iter().zip(&channels) {
        if graph.requires_grad(x) {
            let mut dx = Vec::with_capacity(n * c * hw);
            for s in 0..n {
                dx.extend_from_slice(&g[(s * total + offset) * hw..][..c * hw]);
            }
            out.push((x, dx));
        }
        offset += c;
    }
}
