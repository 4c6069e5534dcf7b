use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    fit, make_pairs, make_period_batches, Checkpoint, EpochRecord, Forecaster, History, Objective, Pairs, PeriodBatch,
    StepLoss, TrainConfig,
};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::data::TimeSeriesCorpus;
use crate::error::{Error, Result};
use crate::l1::{L1Config, L1};
use crate::l2::{Generated, L2Config, L2};
use crate::path::SolverConfig;
use crate::target::{build_param_graph, forecast, ParamGraph, TargetArch, WindowInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGpaConfig {
    pub arch: TargetArch,
    pub l1: L1Config,
    pub l2: L2Config,
    pub train: TrainConfig,
    /// Solver of ODE-RNN / NCDE target models.
    pub target_solver: SolverConfig,
}

impl HyperGpaConfig {
    pub fn new(arch: TargetArch, series: usize) -> Self {
        Self {
            arch,
            l1: L1Config::new(series),
            l2: L2Config::default(),
            train: TrainConfig::default(),
            target_solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.l1.validate()?;
        self.l2.validate()?;
        self.train.validate()?;
        self.target_solver.validate()
    }
}

/// Loss terms of one period batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub mse1: f64,
    pub mse2: f64,
    pub per_series: Vec<f64>,
    pub pairs: usize,
}

/// Hypernetwork structure; parameter values live in a separate store.
#[derive(Clone, Debug)]
pub struct HyperGpa {
    pub cfg: HyperGpaConfig,
    pub graph: ParamGraph,
    pub l1: L1,
    pub l2: L2,
    pub store: ParamStore,
}

impl HyperGpa {
    pub fn new(cfg: HyperGpaConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let graph = build_param_graph(&cfg.arch);
        let mut store = ParamStore::new();
        let l1 = L1::new(cfg.l1, cfg.arch.input_dim, &mut store, &mut rng)?;
        let l2 = L2::new(cfg.l2, &graph, cfg.l1.hidden, &mut store, &mut rng)?;
        Ok(Self {
            cfg,
            graph,
            l1,
            l2,
            store,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            "hypergpa",
            serde_json::to_value(&self.cfg)?,
            &self.store,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.method != "hypergpa" {
            return Err(Error::Invalid(format!(
                "checkpoint holds `{}`, not hypergpa",
                ckpt.method
            )));
        }
        let cfg: HyperGpaConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(cfg)?;
        model.store.load_from(&ckpt.store()?)?;
        Ok(model)
    }

    /// Parameters generated for every series from periods `inputs`.
    pub fn generate<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        corpus: &TimeSeriesCorpus,
        inputs: Range<usize>,
    ) -> Result<Vec<Generated<'t>>> {
        if inputs.end > corpus.periods() || inputs.is_empty() {
            return Err(Error::Invalid(format!("input periods {inputs:?} outside the corpus")));
        }
        let series: Vec<Tensor> = (0..corpus.series()).map(|i| corpus.concat(i, inputs.clone())).collect();
        let h = self.l1.encode(tape, bound, &series, &self.cfg.train.solver)?;
        (0..series.len()).map(|i| self.l2.generate(bound, h.row(i))).collect()
    }

    /// `MSE₁ + λ MSE₂` over every series; `pairs[i]` belongs to series `i`.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        corpus: &TimeSeriesCorpus,
        batch: &PeriodBatch,
        pairs: &[Pairs],
    ) -> Result<(Var<'t>, LossParts)> {
        let gens = self.generate(tape, bound, corpus, batch.inputs.clone())?;
        let mut sse1 = tape.scalar(0.0);
        let mut sse2 = tape.scalar(0.0);
        let mut per_series = Vec::with_capacity(gens.len());
        let mut count = 0usize;
        for (g, p) in gens.iter().zip(pairs) {
            let y = tape.constant(p.y.clone());
            let e1 = self.forecast_with(&g.blended, &p.x)?.sub(y).square().sum();
            let e2 = self.forecast_with(&g.selected, &p.x)?.sub(y).square().sum();
            per_series.push(e1.item() / p.y.len() as f64);
            count += p.y.len();
            sse1 = sse1.add(e1);
            sse2 = sse2.add(e2);
        }
        let mse1 = sse1.scale(1.0 / count as f64);
        let mse2 = sse2.scale(1.0 / count as f64);
        let lambda = self.cfg.train.lambda;
        let loss = if lambda == 0.0 {
            mse1
        } else {
            mse1.add(mse2.scale(lambda))
        };
        let parts = LossParts {
            loss: loss.item(),
            mse1: mse1.item(),
            mse2: mse2.item(),
            per_series,
            pairs: pairs.iter().map(Pairs::len).sum(),
        };
        if !parts.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of batch targeting period {}",
                batch.target
            )));
        }
        Ok((loss, parts))
    }

    fn forecast_with<'t>(&self, params: &[Var<'t>], x: &Tensor) -> Result<Var<'t>> {
        forecast(
            &self.graph,
            params,
            &WindowInput::new(x.clone())?,
            &self.cfg.target_solver,
        )
    }

    /// Forecasts of every pair of period `target` from the K periods before it.
    pub fn predict_period(&self, corpus: &TimeSeriesCorpus, target: usize) -> Result<Vec<Tensor>> {
        let batch = PeriodBatch::for_target(target, self.cfg.train.k)?;
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let gens = self.generate(&tape, &bound, corpus, batch.inputs)?;
        let arch = &self.cfg.arch;
        gens.iter()
            .enumerate()
            .map(|(i, g)| {
                let p = make_pairs(corpus.period(i, target), arch.s_in, arch.s_out)?;
                Ok(self.forecast_with(&g.blended, &p.x)?.to_tensor())
            })
            .collect()
    }

    /// Trains on a normalized corpus of `N >= K + 3` periods. Periods up
    /// to `N - 3` are targets, `N - 2` validates, `N - 1` is never read.
    pub fn train(
        cfg: HyperGpaConfig,
        corpus: &TimeSeriesCorpus,
        progress: impl FnMut(&EpochRecord),
    ) -> Result<(Self, History)> {
        let mut model = Self::new(cfg)?;
        let n = corpus.periods();
        let k = model.cfg.train.k;
        if n < k + 3 {
            return Err(Error::Invalid(format!(
                "insufficient periods: training with K = {k} needs at least {} periods, got {n}",
                k + 3
            )));
        }
        if corpus.series() != model.cfg.l1.series || corpus.dim() != model.cfg.arch.input_dim {
            return Err(Error::Invalid(format!(
                "corpus has {} series of dim {}, model expects {} of dim {}",
                corpus.series(),
                corpus.dim(),
                model.cfg.l1.series,
                model.cfg.arch.input_dim
            )));
        }
        let batches = make_period_batches(n - 1, k)?;
        let arch = model.cfg.arch;
        let pairs_of = |j: usize| -> Result<Vec<Pairs>> {
            (0..corpus.series())
                .map(|i| make_pairs(corpus.period(i, j), arch.s_in, arch.s_out))
                .collect()
        };
        let train_pairs = batches.iter().map(|b| pairs_of(b.target)).collect::<Result<Vec<_>>>()?;
        let val = PeriodBatch::for_target(n - 2, k)?;
        let val_pairs = pairs_of(val.target)?;
        let mut store = std::mem::take(&mut model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.train.seed ^ 0x5eed_0f_7a1e);
        let obj = HyperObjective {
            model: &model,
            corpus,
            batches: &batches,
            train_pairs: &train_pairs,
            val: &val,
            val_pairs: &val_pairs,
        };
        let cfg = model.cfg.train;
        let history = fit(&obj, &mut store, &cfg, &mut rng, progress)?;
        model.store = store;
        Ok((model, history))
    }
}

struct HyperObjective<'a> {
    model: &'a HyperGpa,
    corpus: &'a TimeSeriesCorpus,
    batches: &'a [PeriodBatch],
    train_pairs: &'a [Vec<Pairs>],
    val: &'a PeriodBatch,
    val_pairs: &'a [Pairs],
}

impl Objective for HyperObjective<'_> {
    type Unit = (usize, Vec<usize>);

    fn units(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Self::Unit>> {
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        order.shuffle(rng);
        let size = self.model.cfg.train.pair_batch;
        let mut out = Vec::new();
        for b in order {
            for chunk in super::shuffled_chunks(self.train_pairs[b][0].len(), size, rng) {
                out.push((b, chunk));
            }
        }
        Ok(out)
    }

    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], unit: &Self::Unit) -> Result<(Var<'t>, StepLoss)> {
        let (b, idx) = unit;
        let pairs: Vec<Pairs> = self.train_pairs[*b].iter().map(|p| p.subset(idx)).collect();
        let bound = Bound::from_vars(params.to_vec());
        let (loss, parts) = self
            .model
            .batch_loss(tape, &bound, self.corpus, &self.batches[*b], &pairs)?;
        Ok((
            loss,
            StepLoss {
                loss: parts.loss,
                mse1: parts.mse1,
                mse2: parts.mse2,
                pairs: parts.pairs,
            },
        ))
    }

    fn validate(&self, store: &ParamStore) -> Result<f64> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let gens = self
            .model
            .generate(&tape, &bound, self.corpus, self.val.inputs.clone())?;
        let mut sse = 0.0;
        let mut count = 0;
        for (g, p) in gens.iter().zip(self.val_pairs) {
            let pred = self.model.forecast_with(&g.blended, &p.x)?.to_tensor();
            sse += pred.zip_map(&p.y, |a, b| (a - b) * (a - b)).sum();
            count += p.y.len();
        }
        Ok(sse / count as f64)
    }
}

impl Forecaster for HyperGpa {
    fn predict(&self, corpus: &TimeSeriesCorpus, target: usize) -> Result<Vec<Tensor>> {
        self.predict_period(corpus, target)
    }

    fn window(&self) -> (usize, usize) {
        (self.cfg.arch.s_in, self.cfg.arch.s_out)
    }
}
