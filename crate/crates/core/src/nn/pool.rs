//! Max pooling (valid windows) and global average pooling.

use crate::error::{shape_err, Result};
use crate::graph::{Contributions, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a valid pooling window, `None` when it does not fit.
pub fn pool_output_extent(extent: usize, window: usize, stride: usize) -> Option<usize> {
    (extent >= window).then(|| (extent - window) / stride + 1)
}

impl<T: Scalar> Graph<T> {
    /// Max pooling without padding. Ties resolve to the first element in
    /// row-major window order, which is where the gradient goes.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (Some(ho), Some(wo)) = (pool_output_extent(h, window, stride), pool_output_extent(w, window, stride))
        else {
            return shape_err(format!("maxpool {window}×{window} needs spatial extents ≥ {window}, got {h}×{w}"));
        };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    let mut best_v = xv[best];
                    for ky in 0..window {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        for (j, &v) in xv[row..row + window].iter().enumerate() {
                            if v > best_v {
                                best_v = v;
                                best = row + j;
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Per-channel spatial mean: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::cast(hw as f64);
        let out = self.value(x).data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }
}

pub(crate) fn maxpool_backward<T: Scalar>(
    input_len: usize,
    x: Var,
    argmax: &[usize],
    g: &[T],
    out: &mut Contributions<T>,
) {
    let mut dx = vec![T::zero(); input_len];
    for (&idx, &gv) in argmax.iter().zip(g) {
        dx[idx] += gv;
    }
    out.push((x, dx));
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(xt: &Tensor<T>, x: Var, g: &[T], out: &mut Contributions<T>) {
    let [_, _, h, w] = xt.dims4().expect("pool input rank");
    let hw = h * w;
    let inv = T::one() / T::cast(hw as f64);
    let mut dx = Vec::with_capacity(xt.len());
    for &gv in g {
        dx.extend(std::iter::repeat_n(gv * inv, hw));
    }
    out.push((x, dx));
}
