//! Saving and restoring a [`GramNet`] through the checkpoint format.

use std::fs;
use std::path::Path;

use crate::checkpoint::{Checkpoint, OptimizerSection, Record};
use crate::error::{Error, Result};
use crate::model::{GramNet, NetConfig};
use crate::scalar::Scalar;

const META_GRAM_NORMALIZE: &str = "meta.gram_normalize";
const META_BN_MOMENTUM: &str = "meta.bn_momentum";
const META_BN_EPS: &str = "meta.bn_eps";

fn meta(ckpt: &Checkpoint, name: &str) -> Result<f64> {
    ckpt.find(name).and_then(Record::first_f64).ok_or_else(|| Error::CheckpointFormat(format!("missing record {name}")))
}

impl<T: Scalar> GramNet<T> {
    pub fn to_checkpoint(&self, optimizer: Option<OptimizerSection>) -> Checkpoint {
        let c = self.config;
        let mut records = vec![
            Record::scalar_f64(META_GRAM_NORMALIZE, if c.gram_normalize { 1.0 } else { 0.0 }),
            Record::scalar_f64(META_BN_MOMENTUM, c.bn_momentum),
            Record::scalar_f64(META_BN_EPS, c.bn_eps),
        ];
        records.extend(self.store.entries().iter().map(|e| Record::from_tensor(e.name.clone(), &e.value)));
        Checkpoint { arch_hash: self.architecture_hash(), records, optimizer }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = NetConfig {
            gram_normalize: meta(ckpt, META_GRAM_NORMALIZE)? != 0.0,
            bn_momentum: meta(ckpt, META_BN_MOMENTUM)?,
            bn_eps: meta(ckpt, META_BN_EPS)?,
        };
        let mut net = Self::build(0, config)?;
        let expected = net.architecture_hash();
        if ckpt.arch_hash != expected {
            return Err(Error::IncompatibleCheckpoint(format!(
                "architecture hash {:016x} does not match this network ({expected:016x})",
                ckpt.arch_hash
            )));
        }
        let tensors = ckpt.records.iter().filter(|r| !r.name.starts_with("meta."));
        let mut seen = 0;
        for r in tensors {
            let id = net
                .store
                .find(&r.name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("unexpected record {}", r.name)))?;
            let t = r.to_tensor::<T>()?;
            if t.shape() != net.store.get(id).shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "record {} has shape {:?}, expected {:?}",
                    r.name,
                    t.shape(),
                    net.store.get(id).shape()
                )));
            }
            *net.store.get_mut(id) = t;
            seen += 1;
        }
        if seen != net.store.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint holds {seen} of {} parameter tensors",
                net.store.len()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with_optimizer(path, None)
    }

    pub fn save_with_optimizer(&self, path: impl AsRef<Path>, optimizer: Option<OptimizerSection>) -> Result<()> {
        fs::write(path, self.to_checkpoint(optimizer).encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::decode(&fs::read(path)?)?)
    }
}
