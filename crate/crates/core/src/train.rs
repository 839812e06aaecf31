//! Training loop: Adamax, plateau halving, flip augmentation, best-model
//! retention and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Label, Sample};
use crate::error::{contract_err, Error, Result};
use crate::graph::Graph;
use crate::model::{GramNet, NetConfig, NUM_CLASSES};
use crate::nn::{softmax, Mode};
use crate::optim::{Adamax, PlateauScheduler};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.grmn";
pub const LAST_CHECKPOINT: &str = "last.grmn";
pub const TRAIN_LOG: &str = "train_log.csv";
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adamax_eps: f64,
    pub val_fraction: f64,
    pub augment_hflip: bool,
    pub augment_vflip: bool,
    pub gram_normalize: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            batch_size: 8,
            epochs: 80,
            plateau_patience: 4,
            lr_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            adamax_eps: 1e-8,
            val_fraction: 0.10,
            augment_hflip: true,
            augment_vflip: false,
            gram_normalize: false,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "lr",
        "batch_size",
        "epochs",
        "plateau_patience",
        "lr_factor",
        "beta1",
        "beta2",
        "adamax_eps",
        "val_fraction",
        "augment_hflip",
        "augment_vflip",
        "gram_normalize",
        "bn_momentum",
        "bn_eps",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, v)?,
            "lr_factor" => self.lr_factor = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "adamax_eps" => self.adamax_eps = parse_value(key, v)?,
            "val_fraction" => self.val_fraction = parse_value(key, v)?,
            "augment_hflip" => self.augment_hflip = parse_value(key, v)?,
            "augment_vflip" => self.augment_vflip = parse_value(key, v)?,
            "gram_normalize" => self.gram_normalize = parse_value(key, v)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, v)?,
            "bn_eps" => self.bn_eps = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("lr", &self.lr);
        line("batch_size", &self.batch_size);
        line("epochs", &self.epochs);
        line("plateau_patience", &self.plateau_patience);
        line("lr_factor", &self.lr_factor);
        line("beta1", &self.beta1);
        line("beta2", &self.beta2);
        line("adamax_eps", &self.adamax_eps);
        line("val_fraction", &self.val_fraction);
        line("augment_hflip", &self.augment_hflip);
        line("augment_vflip", &self.augment_vflip);
        line("gram_normalize", &self.gram_normalize);
        line("bn_momentum", &self.bn_momentum);
        line("bn_eps", &self.bn_eps);
        line("seed", &self.seed);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.lr > 0.0 && self.lr.is_finite(), format!("lr must be positive, got {}", self.lr))?;
        check(self.batch_size >= 1, "batch_size must be at least 1".into())?;
        check(self.epochs >= 1, "epochs must be at least 1".into())?;
        check(self.plateau_patience >= 1, "plateau_patience must be at least 1".into())?;
        check(
            self.lr_factor > 0.0 && self.lr_factor < 1.0,
            format!("lr_factor must be in (0, 1), got {}", self.lr_factor),
        )?;
        check((0.0..1.0).contains(&self.beta1), format!("beta1 must be in [0, 1), got {}", self.beta1))?;
        check((0.0..1.0).contains(&self.beta2), format!("beta2 must be in [0, 1), got {}", self.beta2))?;
        check(self.adamax_eps > 0.0, format!("adamax_eps must be positive, got {}", self.adamax_eps))?;
        check(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            format!("val_fraction must be in (0, 1), got {}", self.val_fraction),
        )?;
        check(
            self.bn_momentum > 0.0 && self.bn_momentum < 1.0,
            format!("bn_momentum must be in (0, 1), got {}", self.bn_momentum),
        )?;
        check(self.bn_eps > 0.0, format!("bn_eps must be positive, got {}", self.bn_eps))
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig { gram_normalize: self.gram_normalize, bn_momentum: self.bn_momentum, bn_eps: self.bn_eps }
    }
}

/// Mirrors the last axis.
pub fn hflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let w = *image.shape().last().expect("rank ≥ 1");
    let mut out = image.clone();
    out.data_mut().chunks_exact_mut(w).for_each(<[T]>::reverse);
    out
}

/// Mirrors the second-to-last axis.
pub fn vflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
    out
}

/// Flips each image independently with probability ½ per enabled axis. Two
/// draws are consumed per image regardless of the configuration.
pub fn augment<T: Scalar, R: Rng + ?Sized>(images: &mut [Tensor<T>], cfg: &TrainConfig, rng: &mut R) {
    for img in images {
        let (h, v) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
        if cfg.augment_hflip && h {
            *img = hflip(img);
        }
        if cfg.augment_vflip && v {
            *img = vflip(img);
        }
    }
}

/// Partitions `indices` into runs of equal image size, ordered by first
/// appearance.
pub fn size_groups<T: Scalar>(indices: &[usize], samples: &[Sample<T>]) -> Vec<Vec<usize>> {
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for &i in indices {
        let key = (samples[i].height(), samples[i].width());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

fn batch_tensor<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::stack(images)
}

/// Per-sample `[live, fake]` logits in infer mode, batching equal sizes.
pub fn predict_logits<T: Scalar>(net: &GramNet<T>, samples: &[Sample<T>], batch_size: usize) -> Result<Vec<[T; 2]>> {
    let mut out = vec![[T::zero(); 2]; samples.len()];
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        for group in size_groups(chunk, samples) {
            let images: Vec<&Tensor<T>> = group.iter().map(|&i| &samples[i].image).collect();
            let logits = net.infer(&batch_tensor(&images)?)?;
            for (&i, row) in group.iter().zip(logits.data().chunks_exact(NUM_CLASSES)) {
                out[i] = [row[0], row[1]];
            }
        }
    }
    Ok(out)
}

/// Softmax probability of fake for each sample.
pub fn score_samples<T: Scalar>(net: &GramNet<T>, samples: &[Sample<T>], batch_size: usize) -> Result<Vec<f64>> {
    Ok(predict_logits(net, samples, batch_size)?
        .into_iter()
        .map(|l| softmax(&l, NUM_CLASSES)[1].to_f64_lossy())
        .collect())
}

/// Mean cross-entropy and accuracy of a set in infer mode.
pub fn evaluate<T: Scalar>(net: &GramNet<T>, samples: &[Sample<T>], batch_size: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return contract_err("cannot evaluate an empty set");
    }
    let logits = predict_logits(net, samples, batch_size)?;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (l, s) in logits.iter().zip(samples) {
        let (a, b) = (l[0].to_f64_lossy(), l[1].to_f64_lossy());
        let max = a.max(b);
        let lse = max + ((a - max).exp() + (b - max).exp()).ln();
        loss += lse - [a, b][s.label.index()];
        correct += usize::from(predicted(a, b) == s.label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn predicted(live: f64, fake: f64) -> Label {
    if fake >= live {
        Label::Fake
    } else {
        Label::Live
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr,seconds";

    pub fn csv_line(&self) -> String {
        format!("{},{:.9},{:.9},{},{:.3}", self.epoch, self.train_loss, self.val_loss, self.lr, self.seconds)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where checkpoints and the training log go; nothing is written when
    /// unset.
    pub out_dir: Option<PathBuf>,
    /// Record wall-clock seconds per epoch; when off the log shows zero so
    /// that runs compare byte for byte.
    pub record_timing: bool,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    pub best: GramNet<T>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochRecord>,
}

fn check_set<T: Scalar>(net: &GramNet<T>, samples: &[Sample<T>], what: &str) -> Result<()> {
    if samples.is_empty() {
        return contract_err(format!("{what} set is empty"));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.image.rank() != 3 || s.image.shape()[0] != 1 {
            return Err(Error::InvalidShape(format!(
                "{}: expected a 1×H×W image, got {:?}",
                s.describe(i),
                s.image.shape()
            )));
        }
        net.check_input_size(s.height(), s.width())
            .map_err(|e| Error::InvalidShape(format!("{}: {e}", s.describe(i))))?;
    }
    Ok(())
}

/// Runs one optimizer step over a mini-batch, returning the summed loss and
/// the number of correct train-mode predictions.
fn train_batch<T: Scalar>(
    net: &mut GramNet<T>,
    opt: &mut Adamax<T>,
    samples: &[Sample<T>],
    batch: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut images: Vec<Tensor<T>> = batch.iter().map(|&i| samples[i].image.clone()).collect();
    augment(&mut images, cfg, rng);
    let position = |i: usize| batch.iter().position(|&b| b == i).expect("member of batch");
    let (mut loss_sum, mut correct) = (0.0, 0);
    net.store.zero_grads();
    for group in size_groups(batch, samples) {
        let refs: Vec<&Tensor<T>> = group.iter().map(|&i| &images[position(i)]).collect();
        let labels: Vec<usize> = group.iter().map(|&i| samples[i].label.index()).collect();
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&refs)?);
        let logits = net.forward(&mut g, x, Mode::Train)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let loss_value = g.value(loss).data()[0].to_f64_lossy();
        for (row, &label) in g.value(logits).data().chunks_exact(NUM_CLASSES).zip(&labels) {
            correct += usize::from(predicted(row[0].to_f64_lossy(), row[1].to_f64_lossy()).index() == label);
        }
        g.backward(loss)?;
        let weight = T::cast(group.len() as f64 / batch.len() as f64);
        net.store.accumulate_scaled_grads(&g, weight)?;
        net.apply_stat_updates(&mut g);
        loss_sum += loss_value * group.len() as f64;
    }
    opt.step(&mut net.store, T::cast(lr))?;
    net.store.zero_grads();
    Ok((loss_sum, correct))
}

/// Trains `net` in place (it ends holding the last epoch's parameters) and
/// returns the best-validation-loss model. The sink sees every epoch and may
/// stop training early.
pub fn fit<T: Scalar>(
    net: &mut GramNet<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
    opts: &FitOptions,
    sink: &mut dyn FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    check_set(net, train, "training")?;
    check_set(net, val, "validation")?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_rng.set_stream(AUGMENT_STREAM);
    let mut opt = Adamax::new(cfg.beta1, cfg.beta2, cfg.adamax_eps);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_patience, cfg.lr_factor)?;

    let log_path = opts.out_dir.as_ref().map(|d| d.join(TRAIN_LOG));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    if let Some(p) = &log_path {
        fs::write(p, format!("{}\n", EpochRecord::CSV_HEADER))?;
    }

    let mut best: Option<(GramNet<T>, usize, f64)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = sched.lr();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let (l, c) = train_batch(net, &mut opt, train, batch, cfg, lr, &mut augment_rng)?;
            loss_sum += l;
            correct += c;
        }
        let (val_loss, val_accuracy) = evaluate(net, val, cfg.batch_size)?;
        sched.observe(val_loss);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            lr,
            seconds: if opts.record_timing { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.2}% | val loss {:.4} acc {:.2}% | lr {}",
            record.train_loss,
            100.0 * record.train_accuracy,
            val_loss,
            100.0 * val_accuracy,
            lr
        );
        let improved = best.as_ref().is_none_or(|(_, _, b)| val_loss < *b);
        if improved {
            if let Some(dir) = &opts.out_dir {
                net.save(dir.join(BEST_CHECKPOINT))?;
            }
            best = Some((net.clone(), epoch, val_loss));
        }
        if let Some(dir) = &opts.out_dir {
            net.save_with_optimizer(dir.join(LAST_CHECKPOINT), Some(opt.to_section(&net.store)))?;
        }
        if let Some(p) = &log_path {
            let mut f = fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{}", record.csv_line())?;
        }
        log.push(record);
        if sink(&record).is_break() {
            log::info!("stopped after epoch {epoch} at the caller's request");
            break;
        }
    }
    let (best, best_epoch, best_val_loss) = best.expect("at least one epoch ran");
    Ok(FitOutcome { best, best_epoch, best_val_loss, log })
}
