use crate::error::{contract_err, Result};
use crate::graph::{Contributions, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Negative-side slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.3;

impl<T: Scalar> Graph<T> {
    /// `max(x, a·x)` for `0 ≤ a < 1`; the derivative at exactly zero is 1.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return contract_err(format!("leaky relu slope must be in [0, 1), got {slope}"));
        }
        let value = self.value(x).map(|v| if v >= T::zero() { v } else { slope * v });
        Ok(self.push(value, Op::LeakyRelu { x, slope }, &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }
}

pub(crate) fn leaky_relu_backward<T: Scalar>(xt: &Tensor<T>, x: Var, slope: T, g: &[T], out: &mut Contributions<T>) {
    let dx = xt.data().iter().zip(g).map(|(&v, &gv)| if v >= T::zero() { gv } else { slope * gv }).collect();
    out.push((x, dx));
}

pub(crate) fn tanh_backward<T: Scalar>(yt: &Tensor<T>, x: Var, g: &[T], out: &mut Contributions<T>) {
    let dx = yt.data().iter().zip(g).map(|(&y, &gv)| gv * (T::one() - y * y)).collect();
    out.push((x, dx));
}
