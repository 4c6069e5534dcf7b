//! Period batches, forecasting pairs, the optimization loop shared by all
//! methods, and checkpoint/history files.

mod checkpoint;
mod hypergpa;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use hypergpa::{HyperGpa, HyperGpaConfig, LossParts};

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step, grad, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::data::TimeSeriesCorpus;
use crate::error::{Error, Result};
use crate::path::SolverConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub pair_batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            lambda: 0.1,
            lr: 1e-2,
            weight_decay: 1e-6,
            pair_batch: 256,
            epochs: 300,
            patience: 50,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for directly trained baselines.
    pub fn baseline() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            pair_batch: 32,
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config {
                key: "train.lambda".into(),
                msg: format!("must be >= 0, got {}", self.lambda),
            });
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config {
                key: "train.lr".into(),
                msg: "learning rate must be > 0 and weight decay >= 0".into(),
            });
        }
        if self.k == 0 {
            return Err(Error::Config {
                key: "train.k".into(),
                msg: "K must be at least 1".into(),
            });
        }
        if self.pair_batch == 0 {
            return Err(Error::Config {
                key: "train.pair_batch".into(),
                msg: "must be at least 1".into(),
            });
        }
        self.solver.validate()
    }
}

/// Input periods `inputs` of every series forecast period `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeriodBatch {
    pub inputs: Range<usize>,
    pub target: usize,
}

impl PeriodBatch {
    pub fn for_target(target: usize, k: usize) -> Result<Self> {
        if target < k {
            return Err(Error::Invalid(format!(
                "period {target} has fewer than K = {k} predecessors"
            )));
        }
        Ok(Self {
            inputs: target - k..target,
            target,
        })
    }
}

/// One batch per zero-based target `b` in `[K, N-2]`, i.e. `N - 1 - K`.
pub fn make_period_batches(n: usize, k: usize) -> Result<Vec<PeriodBatch>> {
    if k == 0 || n < k + 2 {
        return Err(Error::Invalid(format!(
            "insufficient periods: N = {n} with K = {k} needs N >= K + 2"
        )));
    }
    (k..n - 1).map(|b| PeriodBatch::for_target(b, k)).collect()
}

/// Sliding windows over one period: inputs `pairs × s_in × d`, targets
/// `pairs × s_out × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub x: Tensor,
    pub y: Tensor,
}

impl Pairs {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Pairs {
        let pick = |t: &Tensor| {
            let s = t.shape();
            let stride = s[1] * s[2];
            let mut data = Vec::with_capacity(idx.len() * stride);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
            }
            Tensor::new(&[idx.len(), s[1], s[2]], data)
        };
        Pairs {
            x: pick(&self.x),
            y: pick(&self.y),
        }
    }

    /// Stacks pair sets of equal window sizes.
    pub fn concat(parts: &[Pairs]) -> Result<Pairs> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("no pairs to concatenate".into()))?;
        let (xs, ys) = (first.x.shape(), first.y.shape());
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.x.shape()[1..] != xs[1..] || p.y.shape()[1..] != ys[1..] {
                return Err(Error::Shape("pair sets have different window sizes".into()));
            }
            x.extend_from_slice(p.x.data());
            y.extend_from_slice(p.y.data());
            n += p.len();
        }
        Ok(Pairs {
            x: Tensor::new(&[n, xs[1], xs[2]], x),
            y: Tensor::new(&[n, ys[1], ys[2]], y),
        })
    }

    pub fn digest(&self, h: &mut Sha256) {
        for t in [&self.x, &self.y] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
}

pub fn make_pairs(period: &Tensor, s_in: usize, s_out: usize) -> Result<Pairs> {
    let t = period.shape()[0];
    if s_in == 0 || s_out == 0 || t < s_in + s_out {
        return Err(Error::Invalid(format!(
            "period of length {t} is too short for s_in = {s_in}, s_out = {s_out}"
        )));
    }
    let d = period.shape()[1];
    let n = t - s_in - s_out + 1;
    let mut x = Vec::with_capacity(n * s_in * d);
    let mut y = Vec::with_capacity(n * s_out * d);
    for p in 0..n {
        x.extend_from_slice(&period.data()[p * d..(p + s_in) * d]);
        y.extend_from_slice(&period.data()[(p + s_in) * d..(p + s_in + s_out) * d]);
    }
    Ok(Pairs {
        x: Tensor::new(&[n, s_in, d], x),
        y: Tensor::new(&[n, s_out, d], y),
    })
}

/// Hex SHA-256 over a list of pair sets.
pub fn pair_hash(pairs: &[Pairs]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        p.digest(&mut h);
    }
    hex::encode(h.finalize())
}

/// A trained method that forecasts every pair of a target period.
pub trait Forecaster {
    /// One `pairs × s_out × d` tensor per series for period `target`,
    /// reading only periods before it.
    fn predict(&self, corpus: &TimeSeriesCorpus, target: usize) -> Result<Vec<Tensor>>;

    fn window(&self) -> (usize, usize);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub mse1: f64,
    pub mse2: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,mse1,mse2,val_mse")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?}",
                r.epoch, r.train_loss, r.mse1, r.mse2, r.val_mse
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn best_val(&self) -> f64 {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(f64::INFINITY, |r| r.val_mse)
    }
}

/// Loss terms of one optimization step, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub mse1: f64,
    pub mse2: f64,
    /// Pairs the step averaged over.
    pub pairs: usize,
}

/// A model trainable by [`fit`]: builds the loss for one step on a fresh
/// tape and scores the validation period.
pub trait Objective {
    type Unit;
    /// One epoch's optimization steps, in order.
    fn units(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Self::Unit>>;
    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], unit: &Self::Unit) -> Result<(Var<'t>, StepLoss)>;
    fn validate(&self, store: &ParamStore) -> Result<f64>;
}

/// Adam over all parameters in `store`, keeping the best-validation state.
pub fn fit<O: Objective>(
    obj: &O,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<History> {
    let mut opt = OptimizerState::new(store.tensors(), cfg.lr, cfg.weight_decay);
    let names = store.names().to_vec();
    let mut history = History::default();
    let mut best = store.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..=cfg.epochs {
        let mut acc = StepLoss::default();
        let mut weight = 0.0;
        for unit in obj.units(rng)? {
            let tape = Tape::new();
            let vars: Vec<Var> = store.tensors().iter().map(|t| tape.param(t.clone())).collect();
            let (loss, parts) = obj.loss(&tape, &vars, &unit)?;
            if !parts.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss in epoch {epoch}; last finite epoch {}",
                    history.records.last().map_or(0, |r| r.epoch)
                )));
            }
            let w = parts.pairs as f64;
            acc.loss += w * parts.loss;
            acc.mse1 += w * parts.mse1;
            acc.mse2 += w * parts.mse2;
            weight += w;
            // epoch 0 scores the initial parameters without updating them
            if epoch > 0 {
                let grads = grad(loss, &vars)?;
                adam_step(store.tensors_mut(), &grads, &names, &mut opt)?;
            }
        }
        let val_mse = obj.validate(store)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite(format!("validation MSE in epoch {epoch}")));
        }
        let rec = EpochRecord {
            epoch,
            train_loss: acc.loss / weight,
            mse1: acc.mse1 / weight,
            mse2: acc.mse2 / weight,
            val_mse,
        };
        progress(&rec);
        history.records.push(rec);
        if val_mse < best_val {
            best_val = val_mse;
            best = store.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    *store = best;
    Ok(history)
}

/// Pair indices `0..n` shuffled and cut into chunks of `size`.
pub fn shuffled_chunks(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}
