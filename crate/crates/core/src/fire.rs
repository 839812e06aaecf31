//! Fire module: a 1×1 squeeze followed by parallel 1×1 and 3×3 expands whose
//! outputs are concatenated on the channel axis.

use rand::Rng;

use crate::error::{contract_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Conv2d, Mode, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Channel plan of a fire module. The squeeze width is always one eighth of
/// the expand total, split evenly between the two expand branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireSpec {
    pub in_ch: usize,
    pub squeeze: usize,
    pub expand: usize,
}

impl FireSpec {
    pub fn new(in_ch: usize, squeeze: usize, expand: usize) -> Result<Self> {
        if in_ch == 0 || expand == 0 {
            return contract_err("fire module channel counts must be positive");
        }
        if !expand.is_multiple_of(8) || squeeze * 8 != expand {
            return contract_err(format!(
                "fire module needs squeeze = expand / 8 with an even split, got squeeze {squeeze} for expand {expand}"
            ));
        }
        Ok(Self { in_ch, squeeze, expand })
    }

    pub fn from_expand(in_ch: usize, expand: usize) -> Result<Self> {
        Self::new(in_ch, expand / 8, expand)
    }

    /// Filters in each expand branch.
    pub fn half(&self) -> usize {
        self.expand / 2
    }

    /// Convolution weights and biases of all three convolutions.
    pub fn param_count(&self) -> usize {
        let (s, h) = (self.squeeze, self.half());
        (self.in_ch * s + s) + (s * h + h) + (9 * s * h + h)
    }

    /// Normalized channels: squeeze plus both expands.
    pub fn bn_param_count(&self) -> usize {
        4 * (self.squeeze + self.expand)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FireModule {
    pub name: String,
    pub spec: FireSpec,
    pub squeeze: Conv2d,
    pub squeeze_bn: BatchNorm,
    pub expand1: Conv2d,
    pub expand1_bn: BatchNorm,
    pub expand3: Conv2d,
    pub expand3_bn: BatchNorm,
}

impl FireModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: FireSpec,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (s, h) = (spec.squeeze, spec.half());
        let bn = |store: &mut ParamStore<T>, part: &str, c| {
            BatchNorm::new(store, &format!("{name}.{part}_bn"), c, bn_momentum, bn_eps)
        };
        let squeeze = Conv2d::new(store, &format!("{name}.squeeze"), spec.in_ch, s, 1, 1, 0, rng)?;
        let squeeze_bn = bn(store, "squeeze", s)?;
        let expand1 = Conv2d::new(store, &format!("{name}.expand1"), s, h, 1, 1, 0, rng)?;
        let expand1_bn = bn(store, "expand1", h)?;
        let expand3 = Conv2d::new(store, &format!("{name}.expand3"), s, h, 3, 1, 1, rng)?;
        let expand3_bn = bn(store, "expand3", h)?;
        Ok(Self { name: name.to_string(), spec, squeeze, squeeze_bn, expand1, expand1_bn, expand3, expand3_bn })
    }

    /// Output has `expand` channels and the input's spatial extents.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let slope = T::cast(LEAKY_SLOPE);
        let z = self.squeeze.forward(g, store, x)?;
        let z = self.squeeze_bn.forward(g, store, z, mode)?;
        let z = g.leaky_relu(z, slope)?;
        let mut branches = [None, None];
        for (slot, (conv, bn)) in
            branches.iter_mut().zip([(&self.expand1, &self.expand1_bn), (&self.expand3, &self.expand3_bn)])
        {
            let y = conv.forward(g, store, z)?;
            let y = bn.forward(g, store, y, mode)?;
            *slot = Some(g.leaky_relu(y, slope)?);
        }
        let [Some(a), Some(b)] = branches else { unreachable!() };
        g.concat_channels(&[a, b])
    }

    pub fn param_count(&self) -> usize {
        self.squeeze.param_count() + self.expand1.param_count() + self.expand3.param_count()
    }

    pub fn bn_param_count(&self) -> usize {
        self.squeeze_bn.param_count() + self.expand1_bn.param_count() + self.expand3_bn.param_count()
    }

    pub fn descriptors(&self) -> Vec<String> {
        let mut d =
            vec![format!("{} fire in{} s{} e{}", self.name, self.spec.in_ch, self.spec.squeeze, self.spec.expand)];
        for (conv, bn) in
            [(&self.squeeze, &self.squeeze_bn), (&self.expand1, &self.expand1_bn), (&self.expand3, &self.expand3_bn)]
        {
            d.push(conv.descriptor());
            d.push(format!("{} bn {}", bn.name, bn.channels));
        }
        d
    }
}
