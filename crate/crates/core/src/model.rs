//! The full liveness network.
//!
//! Trunk: `conv1 → maxpool1 → fire2 → maxpool2 → fire3 → maxpool3 → fire4`.
//! Three Gram-128 taps (after maxpool1, maxpool2 and fire4) each yield a
//! `128×128` map regardless of input size. The stacked `3×128×128` texture
//! tensor feeds the head: `fire5 → maxpool5 → fire6 → maxpool6 → conv10 →
//! global average pool`, producing two logits (live, fake).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::fire::{FireModule, FireSpec};
use crate::gram::GramModule;
use crate::graph::{Graph, Var};
use crate::nn::{
    pool_output_extent, softmax, BatchNorm, Conv2d, ConvGeom, Mode, LEAKY_SLOPE, POOL_STRIDE, POOL_WINDOW,
};
use crate::params::{ParamKind, ParamStore};
use crate::report::{LayerReport, LayerRow};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Filters in every gram module.
pub const GRAM_K: usize = 128;
pub const NUM_CLASSES: usize = 2;
/// Largest input extent probed when searching for the minimum.
const EXTENT_SEARCH_LIMIT: usize = 4096;
/// 96 filters of 7×7, stride 2, padding 3.
pub const CONV1_GEOM: ConvGeom = ConvGeom { kernel: 7, stride: 2, padding: 3 };

/// Hyperparameters that shape the network's function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    /// Divide gram entries by `H·W`.
    pub gram_normalize: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { gram_normalize: false, bn_momentum: 0.9, bn_eps: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramNet<T> {
    pub store: ParamStore<T>,
    pub config: NetConfig,
    conv1: Conv2d,
    bn1: BatchNorm,
    gram1: GramModule,
    fire2: FireModule,
    gram2: GramModule,
    fire3: FireModule,
    fire4: FireModule,
    gram3: GramModule,
    fire5: FireModule,
    fire6: FireModule,
    conv10: Conv2d,
    bn10: BatchNorm,
}

/// Spatial extents along one axis at each downsampling stage of the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrunkExtents {
    pub conv1: usize,
    pub maxpool1: usize,
    pub maxpool2: usize,
    pub maxpool3: usize,
}

impl<T: Scalar> GramNet<T> {
    /// Deterministic for a fixed seed.
    pub fn build(seed: u64, config: NetConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let NetConfig { gram_normalize: norm, bn_momentum: mom, bn_eps: eps } = config;
        let fire = |s: &mut ParamStore<T>, name: &str, in_ch, e, rng: &mut ChaCha8Rng| {
            FireModule::new(s, name, FireSpec::from_expand(in_ch, e)?, mom, eps, rng)
        };
        let ConvGeom { kernel, stride, padding } = CONV1_GEOM;
        let conv1 = Conv2d::new(s, "conv1", 1, 96, kernel, stride, padding, rng)?;
        let bn1 = BatchNorm::new(s, "conv1_bn", 96, mom, eps)?;
        let gram1 = GramModule::new(s, "gram1", 96, GRAM_K, norm, mom, eps, rng)?;
        let fire2 = fire(s, "fire2", 96, 128, rng)?;
        let gram2 = GramModule::new(s, "gram2", 128, GRAM_K, norm, mom, eps, rng)?;
        let fire3 = fire(s, "fire3", 128, 256, rng)?;
        let fire4 = fire(s, "fire4", 256, 384, rng)?;
        let gram3 = GramModule::new(s, "gram3", 384, GRAM_K, norm, mom, eps, rng)?;
        let fire5 = fire(s, "fire5", 3, 128, rng)?;
        let fire6 = fire(s, "fire6", 128, 256, rng)?;
        let conv10 = Conv2d::new(s, "conv10", 256, NUM_CLASSES, 1, 1, 0, rng)?;
        let bn10 = BatchNorm::new(s, "conv10_bn", NUM_CLASSES, mom, eps)?;
        Ok(Self { store, config, conv1, bn1, gram1, fire2, gram2, fire3, fire4, gram3, fire5, fire6, conv10, bn10 })
    }

    pub fn trunk_extents(&self, extent: usize) -> std::result::Result<TrunkExtents, String> {
        trunk_extents(self.conv1.geom, extent)
    }

    pub fn min_input_extent(&self) -> usize {
        min_input_extent(self.conv1.geom)
    }

    /// Fails with the first stage that cannot run on an `h×w` input.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        for extent in [h, w] {
            if let Err(stage) = self.trunk_extents(extent) {
                let min = self.min_input_extent();
                return shape_err(format!("input {h}×{w} is below the minimum {min}×{min}: {stage}"));
            }
        }
        Ok(())
    }

    /// `x: N×1×H×W` to logits `N×2`. In train mode batch-norm statistics are
    /// queued on the graph.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4()?;
        if c != 1 {
            return shape_err(format!("expected a single-channel image, got {c} channels"));
        }
        self.check_input_size(h, w)?;
        let s = &self.store;
        let slope = T::cast(LEAKY_SLOPE);

        let y = self.conv1.forward(g, s, x)?;
        let y = self.bn1.forward(g, s, y, mode)?;
        let y = g.leaky_relu(y, slope)?;
        let p1 = g.maxpool2d(y, POOL_WINDOW, POOL_STRIDE)?;
        let g1 = self.gram1.forward(g, s, p1, mode)?;

        let f2 = self.fire2.forward(g, s, p1, mode)?;
        let p2 = g.maxpool2d(f2, POOL_WINDOW, POOL_STRIDE)?;
        let g2 = self.gram2.forward(g, s, p2, mode)?;

        let f3 = self.fire3.forward(g, s, p2, mode)?;
        let p3 = g.maxpool2d(f3, POOL_WINDOW, POOL_STRIDE)?;
        let f4 = self.fire4.forward(g, s, p3, mode)?;
        let g3 = self.gram3.forward(g, s, f4, mode)?;

        let texture = g.concat_channels(&[g1, g2, g3])?;
        let f5 = self.fire5.forward(g, s, texture, mode)?;
        let p5 = g.maxpool2d(f5, POOL_WINDOW, POOL_STRIDE)?;
        let f6 = self.fire6.forward(g, s, p5, mode)?;
        let p6 = g.maxpool2d(f6, POOL_WINDOW, POOL_STRIDE)?;
        let z = self.conv10.forward(g, s, p6)?;
        let z = self.bn10.forward(g, s, z, mode)?;
        g.global_avg_pool(z)
    }

    /// Infer-mode logits without recording backward state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv, Mode::Infer)?;
        Ok(g.value(y).clone())
    }

    /// Softmax probability of the fake class for each sample.
    pub fn p_fake(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let logits = self.infer(x)?;
        Ok(softmax(logits.data(), NUM_CLASSES).chunks_exact(NUM_CLASSES).map(|p| p[1]).collect())
    }

    /// Folds queued batch-norm statistics into the running buffers.
    pub fn apply_stat_updates(&mut self, g: &mut Graph<T>) {
        let updates = g.take_stat_updates();
        self.store.apply_stat_updates(&updates);
    }

    /// Ordered layer descriptors; the architecture hash covers these.
    pub fn descriptors(&self) -> Vec<String> {
        let mut d = vec![
            "input 1ch".to_string(),
            self.conv1.descriptor(),
            format!("{} bn {}", self.bn1.name, self.bn1.channels),
        ];
        d.push("maxpool1 pool k3 s2".into());
        d.extend(self.gram1.descriptors());
        d.extend(self.fire2.descriptors());
        d.push("maxpool2 pool k3 s2".into());
        d.extend(self.gram2.descriptors());
        d.extend(self.fire3.descriptors());
        d.push("maxpool3 pool k3 s2".into());
        d.extend(self.fire4.descriptors());
        d.extend(self.gram3.descriptors());
        d.push("concat gram1,gram2,gram3".into());
        d.extend(self.fire5.descriptors());
        d.push("maxpool5 pool k3 s2".into());
        d.extend(self.fire6.descriptors());
        d.push("maxpool6 pool k3 s2".into());
        d.push(self.conv10.descriptor());
        d.push(format!("{} bn {}", self.bn10.name, self.bn10.channels));
        d.push("avgpool10 global".into());
        d
    }

    /// 64-bit FNV-1a over the descriptors, each terminated by a newline.
    pub fn architecture_hash(&self) -> u64 {
        fnv1a64(self.descriptors().iter().flat_map(|d| d.bytes().chain(std::iter::once(b'\n'))))
    }

    /// Per-layer parameter accounting in the order the network is listed.
    pub fn count_params(&self) -> LayerReport {
        let k = GRAM_K;
        let row = |name: &str, output: String, filter: &str, params: usize, bn_params: usize| LayerRow {
            name: name.to_string(),
            output,
            filter: filter.to_string(),
            params,
            bn_params,
        };
        let fire_filter = |f: &FireModule| format!("s{} / e1 {} / e3 {}", f.spec.squeeze, f.spec.half(), f.spec.half());
        let gram =
            |m: &GramModule| row(&m.name, format!("{k} × {k} × 1"), "1×1 (×128)", m.param_count(), m.bn_param_count());
        let fire = |m: &FireModule, out: String| LayerRow {
            name: m.name.clone(),
            output: out,
            filter: fire_filter(m),
            params: m.param_count(),
            bn_params: m.bn_param_count(),
        };
        let rows = vec![
            row("input image", "K × K × 1".into(), "", 0, 0),
            row("conv1", "K/2 × K/2 × 96".into(), "7×7 / 2 (×96)", self.conv1.param_count(), self.bn1.param_count()),
            row("maxpool1", "K/4 × K/4 × 96".into(), "3×3 / 2", 0, 0),
            gram(&self.gram1),
            fire(&self.fire2, "K/4 × K/4 × 128".into()),
            row("maxpool2", "K/8 × K/8 × 128".into(), "3×3 / 2", 0, 0),
            gram(&self.gram2),
            fire(&self.fire3, "K/8 × K/8 × 256".into()),
            row("maxpool3", "K/16 × K/16 × 256".into(), "3×3 / 2", 0, 0),
            fire(&self.fire4, "K/16 × K/16 × 384".into()),
            gram(&self.gram3),
            row("concatenation", format!("{k} × {k} × 3"), "", 0, 0),
            fire(&self.fire5, format!("{k} × {k} × 128")),
            row("maxpool5", "63 × 63 × 128".into(), "3×3 / 2", 0, 0),
            fire(&self.fire6, "63 × 63 × 256".into()),
            row("maxpool6", "31 × 31 × 256".into(), "3×3 / 2", 0, 0),
            row("conv10", "31 × 31 × 2".into(), "1×1 / 1 (×2)", self.conv10.param_count(), self.bn10.param_count()),
            row("avgpool10", "1 × 1 × 2".into(), "global", 0, 0),
        ];
        LayerReport::new(rows)
    }

    pub fn trainable_count(&self) -> usize {
        self.store.element_count(Some(ParamKind::Trainable))
    }
}

/// Per-axis trunk extents for an input extent, or the name of the first
/// stage that cannot run.
pub fn trunk_extents(conv1: ConvGeom, extent: usize) -> std::result::Result<TrunkExtents, String> {
    let pool = |e: usize, stage: &str| {
        pool_output_extent(e, POOL_WINDOW, POOL_STRIDE)
            .ok_or_else(|| format!("{stage} needs a map of at least {POOL_WINDOW}, got {e}"))
    };
    let c1 = conv1.output_extent(extent).ok_or_else(|| format!("conv1 cannot run on extent {extent}"))?;
    let maxpool1 = pool(c1, "maxpool1")?;
    let maxpool2 = pool(maxpool1, "maxpool2")?;
    let maxpool3 = pool(maxpool2, "maxpool3")?;
    Ok(TrunkExtents { conv1: c1, maxpool1, maxpool2, maxpool3 })
}

/// Smallest input height (and width) the trunk accepts with this conv1
/// geometry.
pub fn min_input_extent(conv1: ConvGeom) -> usize {
    (1..EXTENT_SEARCH_LIMIT).find(|&e| trunk_extents(conv1, e).is_ok()).expect("some extent fits the trunk")
}

pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.into_iter().fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME))
}
