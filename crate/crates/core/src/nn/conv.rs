//! 2-D cross-correlation via im2col and GEMM.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Contributions, Graph, Op, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::{Init, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// `floor((extent + 2·pad − k) / stride) + 1`, or `None` when the
    /// window does not fit.
    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Valid output-column range for kernel offset `kj`: every `ox` in the
/// range reads an in-bounds input column.
fn valid_range(geom: &ConvGeom, kj: usize, w: usize, wo: usize) -> (usize, usize) {
    let (s, p) = (geom.stride, geom.padding);
    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
    let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, geom: &ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let k = geom.kernel;
    let hw_o = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..][..h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw_o..][..hw_o];
                let (lo, hi) = valid_range(geom, kj, w, wo);
                for oy in 0..ho {
                    let d = &mut dst[oy * wo..][..wo];
                    let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * geom.stride + kj - geom.padding;
                        if geom.stride == 1 {
                            d[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (slot, &v) in d[lo..hi].iter_mut().zip(src[start..].iter().step_by(geom.stride)) {
                                *slot = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let k = geom.kernel;
    let hw_o = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..][..h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw_o..][..hw_o];
                let (lo, hi) = valid_range(geom, kj, w, wo);
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let s = &src[oy * wo..][..wo];
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * geom.stride + kj - geom.padding;
                    if geom.stride == 1 {
                        dst[start..start + hi - lo].iter_mut().zip(&s[lo..hi]).for_each(|(d, &v)| *d += v);
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(geom.stride).zip(&s[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `x: N×C×H×W` with `w: O×C×k×k` plus per-channel
    /// bias `b: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [o, wc, kh, kw] = self.value(w).dims4()?;
        if kh != kw {
            return shape_err(format!("conv2d kernel must be square, got {kh}×{kw}"));
        }
        if wc != c {
            return shape_err(format!("conv2d expects {wc} input channels, got {c}"));
        }
        if self.value(b).shape() != [o] {
            return shape_err(format!("conv2d bias must have shape [{o}], got {:?}", self.value(b).shape()));
        }
        let geom = ConvGeom { kernel: kh, stride, padding };
        let (Some(ho), Some(wo)) = (geom.output_extent(h), geom.output_extent(wd)) else {
            return shape_err(format!("conv2d {kh}×{kh}/{stride} pad {padding} does not fit a {h}×{wd} input"));
        };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let ckk = c * kh * kh;
        let hw_o = ho * wo;
        let mut out = vec![T::zero(); n * o * hw_o];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw_o] };
        for s in 0..n {
            let xs = &xv[s * c * h * wd..][..c * h * wd];
            let src: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, c, h, wd, &geom, ho, wo, &mut cols);
                &cols
            };
            let dst = &mut out[s * o * hw_o..][..o * hw_o];
            for (oc, row) in dst.chunks_exact_mut(hw_o).enumerate() {
                row.fill(bv[oc]);
            }
            gemm(o, ckk, hw_o, T::one(), wv, Trans::No, src, Trans::No, T::one(), dst);
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    geom: &ConvGeom,
    g: &[T],
    out: &mut Contributions<T>,
) {
    let xt = graph.value(x);
    let wt = graph.value(w);
    let [n, c, h, wd] = xt.dims4().expect("conv input rank");
    let o = wt.shape()[0];
    let k = geom.kernel;
    let ho = geom.output_extent(h).expect("recorded geometry");
    let wo = geom.output_extent(wd).expect("recorded geometry");
    let hw_o = ho * wo;
    let ckk = c * k * k;

    if graph.requires_grad(b) {
        let mut db = vec![T::zero(); o];
        for s in 0..n {
            for (oc, row) in g[s * o * hw_o..][..o * hw_o].chunks_exact(hw_o).enumerate() {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
        out.push((b, db));
    }

    let need_w = graph.requires_grad(w);
    let need_x = graph.requires_grad(x);
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise || !need_w { Vec::new() } else { vec![T::zero(); ckk * hw_o] };
    let mut dcols = if pointwise || !need_x { Vec::new() } else { vec![T::zero(); ckk * hw_o] };
    let mut dw = if need_w { vec![T::zero(); o * ckk] } else { Vec::new() };
    let mut dx = if need_x { vec![T::zero(); xt.len()] } else { Vec::new() };
    for s in 0..n {
        let gs = &g[s * o * hw_o..][..o * hw_o];
        let xs = &xt.data()[s * c * h * wd..][..c * h * wd];
        if need_w {
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, c, h, wd, geom, ho, wo, &mut cols);
                &cols
            };
            gemm(o, hw_o, ckk, T::one(), gs, Trans::No, src, Trans::Yes, T::one(), &mut dw);
        }
        if need_x {
            let dxs = &mut dx[s * c * h * wd..][..c * h * wd];
            if pointwise {
                gemm(ckk, o, hw_o, T::one(), wt.data(), Trans::Yes, gs, Trans::No, T::zero(), dxs);
            } else {
                gemm(ckk, o, hw_o, T::one(), wt.data(), Trans::Yes, gs, Trans::No, T::zero(), &mut dcols);
                col2im_add(&dcols, c, h, wd, geom, ho, wo, dxs);
            }
        }
    }
    if need_w {
        out.push((w, dw));
    }
    if need_x {
        out.push((x, dx));
    }
}

/// Convolution layer: square kernel, symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    /// Glorot-uniform weights (fans include the kernel area), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let area = kernel * kernel;
        let init = Init::GlorotUniform { fan_in: in_ch * area, fan_out: out_ch * area };
        let weight = Tensor::init(&[out_ch, in_ch, kernel, kernel], init, rng)?;
        let weight = store.add(format!("{name}.weight"), ParamKind::Trainable, weight);
        let bias = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out_ch])?);
        Ok(Self { name: name.to_string(), in_ch, out_ch, geom: ConvGeom { kernel, stride, padding }, weight, bias })
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.geom.kernel * self.geom.kernel + self.out_ch
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight, store.get(self.weight));
        let b = g.param(self.bias, store.get(self.bias));
        g.conv2d(x, w, b, self.geom.stride, self.geom.padding)
            .map_err(|e| crate::Error::InvalidShape(format!("{}: {e}", self.name)))
    }

    pub fn descriptor(&self) -> String {
        let ConvGeom { kernel, stride, padding } = self.geom;
        format!("{} conv {}>{} k{kernel} s{stride} p{padding}", self.name, self.in_ch, self.out_ch)
    }
}
