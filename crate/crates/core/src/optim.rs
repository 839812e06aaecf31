//! Adamax and the plateau learning-rate schedule.

use crate::checkpoint::{OptimizerSection, Record};
use crate::error::{contract_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam variant with an infinity-norm second moment:
///
/// ```text
/// m ← β₁·m + (1 − β₁)·g
/// u ← max(β₂·u, |g|)
/// θ ← θ − lr / (1 − β₁ᵗ) · m / (u + ε)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    u: Vec<Vec<T>>,
}

impl<T: Scalar> Adamax<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1: T::cast(beta1), beta2: T::cast(beta2), eps: T::cast(eps), step: 0, m: Vec::new(), u: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, slot: usize) -> Option<&[T]> {
        self.m.get(slot).map(Vec::as_slice)
    }

    pub fn inf_norm(&self, slot: usize) -> Option<&[T]> {
        self.u.get(slot).map(Vec::as_slice)
    }

    /// One update of every `(parameter, gradient)` slot, in order. The step
    /// counter advances once per call.
    pub fn apply(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: T) -> Result<()> {
        if params.len() != grads.len() {
            return contract_err(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.u = self.m.clone();
        }
        if self.m.len() != params.len() {
            return contract_err(format!("optimizer tracks {} slots, got {}", self.m.len(), params.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return contract_err(format!(
                    "slot {i}: parameter {} / gradient {} / state {} lengths differ",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                ));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let step_size = lr / (T::one() - b1.powi(self.step.min(i32::MAX as u64) as i32));
        for ((p, g), (m, u)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.u.iter_mut())) {
            for (((theta, &gv), mv), uv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(u.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *uv = (b2 * *uv).max(gv.abs());
                *theta -= step_size * *mv / (*uv + self.eps);
            }
        }
        Ok(())
    }

    /// Updates every trainable parameter of `store` from its accumulated
    /// gradient; a parameter without one sees a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) -> Result<()> {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let grads: Vec<Vec<T>> = ids
            .iter()
            .map(|&id| match store.grad(id) {
                Some(g) => g.data().to_vec(),
                None => vec![T::zero(); store.get(id).len()],
            })
            .collect();
        let mut values: Vec<Tensor<T>> = ids.iter().map(|&id| store.get(id).clone()).collect();
        {
            let mut params: Vec<&mut [T]> = values.iter_mut().map(|t| t.data_mut()).collect();
            let grads: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
            self.apply(&mut params, &grads, lr)?;
        }
        for (id, v) in ids.into_iter().zip(values) {
            *store.get_mut(id) = v;
        }
        Ok(())
    }

    /// Moment buffers keyed by the trainable parameter names of `store`.
    pub fn to_section(&self, store: &ParamStore<T>) -> OptimizerSection {
        let mut records = Vec::new();
        for (slot, id) in store.trainable_ids().enumerate() {
            let (Some(m), Some(u)) = (self.m.get(slot), self.u.get(slot)) else { break };
            let shape = store.get(id).shape();
            let name = &store.entry(id).name;
            let t = |v: &Vec<T>| Tensor::from_vec(shape, v.clone()).expect("state matches parameter");
            records.push(Record::from_tensor(format!("m/{name}"), &t(m)));
            records.push(Record::from_tensor(format!("u/{name}"), &t(u)));
        }
        OptimizerSection { step: self.step, records }
    }

    pub fn from_section(
        section: &OptimizerSection,
        store: &ParamStore<T>,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<Self> {
        let mut opt = Self::new(beta1, beta2, eps);
        opt.step = section.step;
        if section.records.is_empty() {
            return Ok(opt);
        }
        for id in store.trainable_ids() {
            let name = &store.entry(id).name;
            let find = |prefix: &str| {
                section
                    .records
                    .iter()
                    .find(|r| r.name == format!("{prefix}/{name}"))
                    .ok_or_else(|| Error::CheckpointFormat(format!("optimizer state for {name} is missing")))
                    .and_then(|r| r.to_tensor::<T>())
            };
            let (m, u) = (find("m")?, find("u")?);
            if m.shape() != store.get(id).shape() || u.shape() != store.get(id).shape() {
                return Err(Error::IncompatibleCheckpoint(format!("optimizer state for {name} has the wrong shape")));
            }
            opt.m.push(m.into_data());
            opt.u.push(u.into_data());
        }
        Ok(opt)
    }
}

/// Halves (by `factor`) the learning rate once the best validation loss has
/// gone `patience` epochs without strict improvement. The counter restarts
/// on improvement and after every reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    patience: usize,
    factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Result<Self> {
        if patience == 0 {
            return contract_err("plateau patience must be at least 1");
        }
        if !(factor > 0.0 && factor < 1.0) {
            return contract_err(format!("plateau factor must be in (0, 1), got {factor}"));
        }
        Ok(Self { lr, patience, factor, best: None, stale: 0 })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one completed epoch and returns the learning rate for the next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        match self.best {
            // NaN never counts as an improvement
            Some(best) if val_loss.partial_cmp(&best) != Some(std::cmp::Ordering::Less) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying a whole validation-loss history.
pub fn plateau_schedule(history: &[f64], patience: usize, factor: f64, lr: f64) -> Result<f64> {
    let mut s = PlateauScheduler::new(lr, patience, factor)?;
    for &loss in history {
        s.observe(loss);
    }
    Ok(s.lr())
}
