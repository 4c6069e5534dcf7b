//! Directly trained comparison methods: plain target models, the same with
//! reversible instance normalization, and HyperGRU.

mod hypergru;
mod revin;

pub use hypergru::{hypergru_step, HyperCell, HyperGruDims, LN_EPS};
pub use revin::{revin_apply, revin_invert, window_stats, RevinMap, RevinState, REVIN_EPS};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::data::{split, TimeSeriesCorpus};
use crate::error::{Error, Result};
use crate::path::SolverConfig;
use crate::target::{build_param_graph, forecast, init_params, ParamGraph, TargetArch, TargetKind, WindowInput};
use crate::train::{
    fit, make_pairs, shuffled_chunks, Checkpoint, EpochRecord, Forecaster, History, Objective, Pairs, StepLoss,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectMethod {
    Vanilla,
    Revin,
    HyperGru,
}

impl DirectMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectMethod::Vanilla => "vanilla",
            DirectMethod::Revin => "revin",
            DirectMethod::HyperGru => "hypergru",
        }
    }
}

impl fmt::Display for DirectMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DirectMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(DirectMethod::Vanilla),
            "revin" => Ok(DirectMethod::Revin),
            "hypergru" => Ok(DirectMethod::HyperGru),
            other => Err(Error::Invalid(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectConfig {
    pub method: DirectMethod,
    pub arch: TargetArch,
    pub series: usize,
    pub train: TrainConfig,
    pub target_solver: SolverConfig,
    /// HyperGRU `dim(ĥ)` and `dim(a)`.
    pub hyper_hidden: usize,
    pub hyper_embed: usize,
}

impl DirectConfig {
    pub fn new(method: DirectMethod, arch: TargetArch, series: usize) -> Self {
        Self {
            method,
            arch,
            series,
            train: TrainConfig::baseline(),
            target_solver: SolverConfig::default(),
            hyper_hidden: 8,
            hyper_embed: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.target_solver.validate()?;
        if self.series == 0 {
            return Err(Error::Invalid("need at least one series".into()));
        }
        if self.method == DirectMethod::HyperGru {
            if !matches!(self.arch.kind, TargetKind::Gru | TargetKind::SeqToSeqGru) {
                return Err(Error::Config {
                    key: "method".into(),
                    msg: format!("incompatible method/arch: hypergru cannot drive {}", self.arch.kind),
                });
            }
            self.hyper_dims(self.arch.input_dim).validate()?;
        }
        Ok(())
    }

    fn hyper_dims(&self, input: usize) -> HyperGruDims {
        HyperGruDims {
            input,
            hidden: self.arch.hidden_dim,
            hyper: self.hyper_hidden,
            embed: self.hyper_embed,
        }
    }
}

/// One independent parameter set per series, trained on every training
/// period; series `i` owns store entries `i * per .. (i + 1) * per`.
#[derive(Clone, Debug)]
pub struct Direct {
    pub cfg: DirectConfig,
    pub graph: ParamGraph,
    pub store: ParamStore,
    per: usize,
}

impl Direct {
    pub fn new(cfg: DirectConfig) -> Result<Self> {
        cfg.validate()?;
        let graph = build_param_graph(&cfg.arch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut store = ParamStore::new();
        for i in 0..cfg.series {
            for (name, t) in Self::init_series(&cfg, &graph, &mut rng) {
                store.add(format!("s{i}.{name}"), t);
            }
        }
        let per = store.len() / cfg.series;
        Ok(Self { cfg, graph, store, per })
    }

    fn init_series(cfg: &DirectConfig, graph: &ParamGraph, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        let arch = &cfg.arch;
        match cfg.method {
            DirectMethod::Vanilla | DirectMethod::Revin => {
                let mut out: Vec<(String, Tensor)> = graph
                    .nodes
                    .iter()
                    .map(|n| n.name.clone())
                    .zip(init_params(graph, rng))
                    .collect();
                if cfg.method == DirectMethod::Revin {
                    let d = arch.input_dim;
                    out.push(("revin.gamma".into(), Tensor::new(&[1, d], vec![1.0; d])));
                    out.push(("revin.beta".into(), Tensor::zeros(&[1, d])));
                }
                out
            }
            DirectMethod::HyperGru => {
                let mut out = Vec::new();
                let seq = arch.kind == TargetKind::SeqToSeqGru;
                let parts: &[&str] = if seq { &["enc", "dec"] } else { &["enc"] };
                for part in parts {
                    for l in 0..arch.layers {
                        let input = if l == 0 { arch.input_dim } else { arch.hidden_dim };
                        for (name, t) in cfg.hyper_dims(input).init(rng) {
                            out.push((format!("{part}{l}.{name}"), t));
                        }
                    }
                }
                let width = if seq {
                    arch.input_dim
                } else {
                    arch.s_out * arch.input_dim
                };
                out.push(("head.w".into(), crate::autodiff::xavier(&[arch.hidden_dim, width], rng)));
                out.push(("head.b".into(), Tensor::zeros(&[width])));
                out
            }
        }
    }

    pub fn per_series(&self) -> usize {
        self.per
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            self.cfg.method.as_str(),
            serde_json::to_value(&self.cfg)?,
            &self.store,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: DirectConfig = serde_json::from_value(ckpt.config.clone())?;
        if ckpt.method != cfg.method.as_str() {
            return Err(Error::Invalid(format!(
                "checkpoint method `{}` disagrees with its config",
                ckpt.method
            )));
        }
        let mut model = Self::new(cfg)?;
        model.store.load_from(&ckpt.store()?)?;
        Ok(model)
    }

    /// Forecasts `pairs × s_out × d` for series-local parameters `p`.
    pub fn forecast_series<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: &Tensor) -> Result<Var<'t>> {
        let solver = &self.cfg.target_solver;
        match self.cfg.method {
            DirectMethod::Vanilla => forecast(&self.graph, p, &WindowInput::new(x.clone())?, solver),
            DirectMethod::Revin => {
                let n = self.graph.len();
                let map = RevinMap::new(tape, x, p[n], p[n + 1])?;
                let input = WindowInput::new(x.clone())?.with_affine(map.scale, map.shift)?;
                Ok(map.invert(forecast(&self.graph, &p[..n], &input, solver)?))
            }
            DirectMethod::HyperGru => self.hyper_forecast(tape, p, x),
        }
    }

    fn hyper_forecast<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: &Tensor) -> Result<Var<'t>> {
        let arch = &self.cfg.arch;
        let input = WindowInput::new(x.clone())?;
        if input.len() != arch.s_in || input.dim() != arch.input_dim {
            return Err(Error::Shape(format!(
                "window {:?} does not match the architecture",
                x.shape()
            )));
        }
        let rows = input.pairs();
        let cell_len = self.cfg.hyper_dims(1).layout().len();
        let cells: Vec<HyperCell> = p[..p.len() - 2].chunks(cell_len).map(HyperCell::from_slice).collect();
        let (hw, hb) = (p[p.len() - 2], p[p.len() - 1]);
        let head = |h: Var<'t>| h.matmul(hw).add(hb);
        let zeros = |n: usize| tape.constant(Tensor::zeros(&[rows, n]));
        let layers = arch.layers;
        let mut h = vec![zeros(arch.hidden_dim); layers];
        let mut hh = vec![zeros(self.cfg.hyper_hidden); layers];
        let run = |cells: &[HyperCell<'t>], h: &mut [Var<'t>], hh: &mut [Var<'t>], x: Var<'t>| {
            let mut v = x;
            for l in 0..cells.len() {
                let (a, b) = cells[l].step(v, h[l], hh[l]);
                h[l] = a;
                hh[l] = b;
                v = a;
            }
            v
        };
        let mut top = h[0];
        for k in 0..arch.s_in {
            top = run(&cells[..layers], &mut h, &mut hh, input.step(tape, k));
        }
        let out = if arch.kind == TargetKind::SeqToSeqGru {
            let mut x = input.step(tape, arch.s_in - 1);
            let mut outs = Vec::with_capacity(arch.s_out);
            for _ in 0..arch.s_out {
                x = head(run(&cells[layers..], &mut h, &mut hh, x));
                outs.push(x.reshape(&[rows, 1, arch.input_dim]));
            }
            tape.concat(&outs, 1)
        } else {
            head(top).reshape(&[rows, arch.s_out, arch.input_dim])
        };
        if !out.value().all_finite() {
            return Err(Error::NonFinite("hypergru forecast".into()));
        }
        Ok(out)
    }

    fn pairs_of(&self, corpus: &TimeSeriesCorpus, j: usize) -> Result<Vec<Pairs>> {
        (0..corpus.series())
            .map(|i| make_pairs(corpus.period(i, j), self.cfg.arch.s_in, self.cfg.arch.s_out))
            .collect()
    }

    fn sse(&self, tape: &Tape, params: &[Var<'_>], pairs: &[Pairs]) -> Result<(f64, usize)> {
        let mut sse = 0.0;
        let mut count = 0;
        for (i, p) in pairs.iter().enumerate() {
            let pred = self.forecast_series(tape, &params[i * self.per..(i + 1) * self.per], &p.x)?;
            sse += pred.value().zip_map(&p.y, |a, b| (a - b) * (a - b)).sum();
            count += p.y.len();
        }
        Ok((sse, count))
    }

    /// Trains on every pair of periods `0..N-2`, validating on `N-2`.
    pub fn train(
        cfg: DirectConfig,
        corpus: &TimeSeriesCorpus,
        progress: impl FnMut(&EpochRecord),
    ) -> Result<(Self, History)> {
        let mut model = Self::new(cfg)?;
        if corpus.series() != model.cfg.series || corpus.dim() != model.cfg.arch.input_dim {
            return Err(Error::Invalid(format!(
                "corpus has {} series of dim {}, model expects {} of dim {}",
                corpus.series(),
                corpus.dim(),
                model.cfg.series,
                model.cfg.arch.input_dim
            )));
        }
        let sp = split(corpus.periods())?;
        let mut pool: Vec<Vec<Pairs>> = vec![Vec::new(); corpus.series()];
        for j in sp.train.clone() {
            for (i, p) in model.pairs_of(corpus, j)?.into_iter().enumerate() {
                pool[i].push(p);
            }
        }
        let pool: Vec<Pairs> = pool.iter().map(|p| Pairs::concat(p)).collect::<Result<_>>()?;
        let val = model.pairs_of(corpus, sp.val)?;
        let mut store = std::mem::take(&mut model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.train.seed ^ 0x5eed_0f_7a1e);
        let obj = DirectObjective {
            model: &model,
            pool: &pool,
            val: &val,
        };
        let tc = model.cfg.train;
        let history = fit(&obj, &mut store, &tc, &mut rng, progress)?;
        model.store = store;
        Ok((model, history))
    }
}

struct DirectObjective<'a> {
    model: &'a Direct,
    pool: &'a [Pairs],
    val: &'a [Pairs],
}

impl Objective for DirectObjective<'_> {
    type Unit = Vec<usize>;

    fn units(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Self::Unit>> {
        Ok(shuffled_chunks(
            self.pool[0].len(),
            self.model.cfg.train.pair_batch,
            rng,
        ))
    }

    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], unit: &Self::Unit) -> Result<(Var<'t>, StepLoss)> {
        let per = self.model.per;
        let mut sse = tape.scalar(0.0);
        let mut count = 0;
        for (i, p) in self.pool.iter().enumerate() {
            let p = p.subset(unit);
            let pred = self
                .model
                .forecast_series(tape, &params[i * per..(i + 1) * per], &p.x)?;
            sse = sse.add(pred.sub(tape.constant(p.y.clone())).square().sum());
            count += p.y.len();
        }
        let loss = sse.scale(1.0 / count as f64);
        let v = loss.item();
        Ok((
            loss,
            StepLoss {
                loss: v,
                mse1: v,
                mse2: 0.0,
                pairs: unit.len() * self.pool.len(),
            },
        ))
    }

    fn validate(&self, store: &ParamStore) -> Result<f64> {
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let (sse, n) = self.model.sse(&tape, vars.vars(), self.val)?;
        Ok(sse / n as f64)
    }
}

impl Forecaster for Direct {
    fn predict(&self, corpus: &TimeSeriesCorpus, target: usize) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let vars = self.store.bind(&tape);
        let p = vars.vars();
        self.pairs_of(corpus, target)?
            .iter()
            .enumerate()
            .map(|(i, pairs)| {
                Ok(self
                    .forecast_series(&tape, &p[i * self.per..(i + 1) * self.per], &pairs.x)?
                    .to_tensor())
            })
            .collect()
    }

    fn window(&self) -> (usize, usize) {
        (self.cfg.arch.s_in, self.cfg.arch.s_out)
    }
}
