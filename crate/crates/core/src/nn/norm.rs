//! Batch normalization over (N, H, W) per channel.

use crate::error::{contract_err, shape_err, Result};
use crate::graph::{Contributions, Graph, Op, Var};
use crate::nn::Mode;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Statistics to fold into the running buffers after a train-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased (`M − 1` denominator) batch variance.
    pub batch_var: Vec<T>,
    pub momentum: T,
}

/// Which statistics normalize the input.
pub enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

pub(crate) struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BnCache<T> {
    /// `sqrt(var + eps)` per channel when batch statistics were used.
    pub(crate) fn batch_std(&self) -> Option<impl Iterator<Item = T> + '_> {
        self.batch_stats.then(|| self.inv_std.iter().map(|&s| T::one() / s))
    }
}

/// Per-channel `(mean, variance)`.
pub type ChannelStats<T> = (Vec<T>, Vec<T>);

/// `(N, C, spatial)` view of a rank-2 `N×C` or rank-4 `N×C×H×W` tensor.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => shape_err(format!("batch norm expects N×C or N×C×H×W, got {shape:?}")),
    }
}

impl<T: Scalar> Graph<T> {
    /// Returns the normalized output and, for batch statistics, the batch
    /// mean and unbiased variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: BnStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<ChannelStats<T>>)> {
        let (n, c, sp) = layout(self.value(x).shape())?;
        for (what, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return shape_err(format!("batch norm {what} must have shape [{c}], got {:?}", self.value(v).shape()));
            }
        }
        let m = n * sp;
        let xv = self.value(x).data();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut observed = None;
        let batch_stats = matches!(stats, BnStats::Batch);
        match stats {
            BnStats::Batch => {
                if m < 2 {
                    return contract_err(format!("train-mode batch norm needs ≥ 2 values per channel, got {m}"));
                }
                let mf = T::cast(m as f64);
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let plane = |s: usize| &xv[(s * c + ch) * sp..][..sp];
                    let mean = (0..n).map(|s| plane(s).iter().copied().sum::<T>()).sum::<T>() / mf;
                    let ss = (0..n).map(|s| plane(s).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()).sum::<T>();
                    let var = ss / mf;
                    let inv = T::one() / (var + eps).sqrt();
                    for s in 0..n {
                        let base = (s * c + ch) * sp;
                        for (dst, &v) in xhat[base..base + sp].iter_mut().zip(plane(s)) {
                            *dst = (v - mean) * inv;
                        }
                    }
                    means[ch] = mean;
                    vars[ch] = ss / T::cast((m - 1) as f64);
                    inv_std[ch] = inv;
                }
                observed = Some((means, vars));
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!("running statistics must have {c} channels"));
                }
                for ch in 0..c {
                    inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
                }
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * sp;
                        for (dst, &v) in xhat[base..base + sp].iter_mut().zip(&xv[base..base + sp]) {
                            *dst = (v - mean[ch]) * inv_std[ch];
                        }
                    }
                }
            }
        }
        let mut y = xhat.clone();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                for v in &mut y[base..base + sp] {
                    *v = *v * sc[ch] + sh[ch];
                }
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), y)?;
        let cache = if self.is_tracking() {
            BnCache { xhat, inv_std, batch_stats }
        } else {
            BnCache { xhat: Vec::new(), inv_std: Vec::new(), batch_stats }
        };
        let out = self.push(value, Op::BatchNorm { x, scale, shift, cache }, &[x, scale, shift]);
        Ok((out, observed))
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    x: Var,
    scale: Var,
    shift: Var,
    cache: &BnCache<T>,
    g: &[T],
    out: &mut Contributions<T>,
) {
    let (n, c, sp) = layout(graph.value(x).shape()).expect("recorded layout");
    let sc = graph.value(scale).data();
    let mf = T::cast((n * sp) as f64);
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * sp;
            for (&gv, &xh) in g[base..base + sp].iter().zip(&cache.xhat[base..base + sp]) {
                dshift[ch] += gv;
                dscale[ch] += gv * xh;
            }
        }
    }
    if graph.requires_grad(x) {
        let mut dx = vec![T::zero(); g.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                let k = sc[ch] * cache.inv_std[ch];
                let rows = dx[base..base + sp].iter_mut().zip(&g[base..base + sp]).zip(&cache.xhat[base..base + sp]);
                if cache.batch_stats {
                    for ((d, &gv), &xh) in rows {
                        *d = k * (gv - (dshift[ch] + xh * dscale[ch]) / mf);
                    }
                } else {
                    for ((d, &gv), _) in rows {
                        *d = k * gv;
                    }
                }
            }
        }
        out.push((x, dx));
    }
    out.push((scale, dscale));
    out.push((shift, dshift));
}

/// Batch-norm layer: learnable scale/shift plus running mean/variance
/// buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        let mut add = |suffix: &str, kind, fill: f64| -> Result<ParamId> {
            Ok(store.add(format!("{name}.{suffix}"), kind, Tensor::full(&[channels], T::cast(fill))?))
        };
        Ok(Self {
            name: name.to_string(),
            channels,
            momentum,
            eps,
            scale: add("scale", ParamKind::Trainable, 1.0)?,
            shift: add("shift", ParamKind::Trainable, 0.0)?,
            running_mean: add("running_mean", ParamKind::Buffer, 0.0)?,
            running_var: add("running_var", ParamKind::Buffer, 1.0)?,
        })
    }

    /// Scale, shift, running mean and running variance.
    pub fn param_count(&self) -> usize {
        4 * self.channels
    }

    /// In train mode the observed statistics are queued on the graph; see
    /// [`Graph::take_stat_updates`].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let scale = g.param(self.scale, store.get(self.scale));
        let shift = g.param(self.shift, store.get(self.shift));
        let stats = match mode {
            Mode::Train => BnStats::Batch,
            Mode::Infer => {
                BnStats::Running { mean: store.get(self.running_mean).data(), var: store.get(self.running_var).data() }
            }
        };
        let (y, observed) = g.batch_norm(x, scale, shift, stats, T::cast(self.eps)).map_err(|e| match e {
            crate::Error::InvalidShape(m) => crate::Error::InvalidShape(format!("{}: {m}", self.name)),
            crate::Error::Contract(m) => crate::Error::Contract(format!("{}: {m}", self.name)),
            other => other,
        })?;
        if let Some((batch_mean, batch_var)) = observed {
            g.push_stat_update(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean,
                batch_var,
                momentum: T::cast(self.momentum),
            });
        }
        Ok(y)
    }
}
