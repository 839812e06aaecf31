//! Gram-matrix texture features.
//!
//! For a feature map with `C` channels over `H·W` positions, entry `(i, j)`
//! is the inner product of channel `i` with channel `j` across all
//! positions. The result is `C×C` no matter how large the map is, which is
//! what lets the network accept inputs of any size.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Contributions, Graph, Op, Var};
use crate::nn::{BatchNorm, Conv2d, Mode};
use crate::params::ParamStore;
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// `N×C×H×W → N×1×C×C`, per sample. With `normalize` every entry is
    /// divided by `H·W`. The upper triangle is computed and mirrored, so the
    /// output is exactly symmetric.
    pub fn gram_matrix(&mut self, x: Var, normalize: bool) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let alpha = if normalize { T::one() / T::cast(hw as f64) } else { T::one() };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * c];
        for s in 0..n {
            let f = &xv[s * c * hw..][..c * hw];
            let gs = &mut out[s * c * c..][..c * c];
            gemm(c, hw, c, alpha, f, Trans::No, f, Trans::Yes, T::zero(), gs);
            for i in 0..c {
                for j in 0..i {
                    gs[i * c + j] = gs[j * c + i];
                }
            }
        }
        let value = Tensor::from_vec(&[n, 1, c, c], out)?;
        Ok(self.push(value, Op::Gram { x, normalize }, &[x]))
    }
}

/// `dF = alpha · (dG + dGᵀ) · F` per sample.
pub(crate) fn backward<T: Scalar>(xt: &Tensor<T>, x: Var, normalize: bool, g: &[T], out: &mut Contributions<T>) {
    let [n, c, h, w] = xt.dims4().expect("gram input rank");
    let hw = h * w;
    let alpha = if normalize { T::one() / T::cast(hw as f64) } else { T::one() };
    let mut dx = vec![T::zero(); xt.len()];
    let mut sym = vec![T::zero(); c * c];
    for s in 0..n {
        let gs = &g[s * c * c..][..c * c];
        for i in 0..c {
            for j in 0..c {
                sym[i * c + j] = gs[i * c + j] + gs[j * c + i];
            }
        }
        let f = &xt.data()[s * c * hw..][..c * hw];
        gemm(c, c, hw, alpha, &sym, Trans::No, f, Trans::No, T::zero(), &mut dx[s * c * hw..][..c * hw]);
    }
    out.push((x, dx));
}

/// Gram-K module: `1×1 conv (K filters) → batch norm → tanh → gram`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramModule {
    pub name: String,
    pub in_ch: usize,
    pub k: usize,
    pub normalize: bool,
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl GramModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        k: usize,
        normalize: bool,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_ch, k, 1, 1, 0, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), k, bn_momentum, bn_eps)?;
        Ok(Self { name: name.to_string(), in_ch, k, normalize, conv, bn })
    }

    /// Convolution weights and biases: `in_ch·K + K`.
    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn bn_param_count(&self) -> usize {
        self.bn.param_count()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        let y = g.tanh(y);
        g.gram_matrix(y, self.normalize)
    }

    pub fn descriptors(&self) -> Vec<String> {
        vec![
            format!("{} gram k{} normalize={}", self.name, self.k, self.normalize),
            self.conv.descriptor(),
            format!("{} bn {}", self.bn.name, self.bn.channels),
        ]
    }
}
