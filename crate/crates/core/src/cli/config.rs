//! Run configuration: a TOML file whose every key has a default.
//!
//! ```toml
//! method = "hypergpa"        # hypergpa | vanilla | revin | hypergru
//! seeds = [0, 1, 2]
//!
//! [corpus.synth]             # or: [corpus] csv = "data.csv"
//! series = 4
//! periods = 8
//!
//! [arch]
//! kind = "gru"
//! hidden_dim = 16
//! s_in = 12
//! s_out = 4
//!
//! [train]                    # HyperGPA optimizer; [baseline_train] for the others
//! k = 2
//! lambda = 0.1
//!
//! [l2]
//! candidates = 3
//! graph_fn = "gat"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{DirectConfig, DirectMethod};
use crate::data::{load_csv, synth_drift, SynthConfig, TimeSeriesCorpus};
use crate::error::{Error, Result};
use crate::l1::L1Config;
use crate::l2::L2Config;
use crate::path::SolverConfig;
use crate::target::{TargetArch, TargetKind};
use crate::train::{HyperGpaConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    HyperGpa,
    Vanilla,
    Revin,
    HyperGru,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::HyperGpa => "hypergpa",
            Method::Vanilla => "vanilla",
            Method::Revin => "revin",
            Method::HyperGru => "hypergru",
        }
    }

    pub fn direct(self) -> Option<DirectMethod> {
        match self {
            Method::HyperGpa => None,
            Method::Vanilla => Some(DirectMethod::Vanilla),
            Method::Revin => Some(DirectMethod::Revin),
            Method::HyperGru => Some(DirectMethod::HyperGru),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hypergpa" => Ok(Method::HyperGpa),
            other => other.parse::<DirectMethod>().map(|d| match d {
                DirectMethod::Vanilla => Method::Vanilla,
                DirectMethod::Revin => Method::Revin,
                DirectMethod::HyperGru => Method::HyperGru,
            }),
        }
    }
}

/// Exactly one of `csv` and `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub synth: Option<SynthConfig>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            csv: None,
            synth: Some(SynthConfig::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: TargetKind,
    pub hidden_dim: usize,
    pub layers: usize,
    pub s_in: usize,
    pub s_out: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::Gru,
            hidden_dim: 16,
            layers: 1,
            s_in: 12,
            s_out: 4,
        }
    }
}

impl ArchConfig {
    pub fn arch(&self, input_dim: usize) -> TargetArch {
        TargetArch {
            kind: self.kind,
            input_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            s_in: self.s_in,
            s_out: self.s_out,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGruConfig {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for HyperGruConfig {
    fn default() -> Self {
        Self { hidden: 8, embed: 4 }
    }
}

/// What `bench` sweeps; empty lists fall back to `arch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub targets: Vec<TargetKind>,
    pub hidden_sizes: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Vanilla, Method::HyperGpa],
            targets: Vec::new(),
            hidden_sizes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub baseline_train: TrainConfig,
    pub l1: L1Config,
    pub l2: L2Config,
    pub target_solver: SolverConfig,
    pub hypergru: HyperGruConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.solver.steps_per_interval = 1;
        Self {
            method: Method::HyperGpa,
            seeds: vec![0],
            corpus: CorpusConfig::default(),
            arch: ArchConfig::default(),
            train,
            baseline_train: TrainConfig::baseline(),
            l1: L1Config::default(),
            l2: L2Config::default(),
            target_solver: SolverConfig::default(),
            hypergru: HyperGruConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn config_err(key: &str, e: impl fmt::Display) -> Error {
    Error::Config {
        key: key.into(),
        msg: e.to_string(),
    }
}

/// Dotted key of the TOML line holding byte `at`.
fn key_at(src: &str, at: usize) -> Option<String> {
    let before = &src[..at.min(src.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = src[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    let table = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
    if key.is_empty() || key.starts_with('[') {
        return table;
    }
    Some(match table {
        Some(t) => format!("{t}.{key}"),
        None => key.to_string(),
    })
}

impl RunConfig {
    pub fn parse(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| {
            let key = e
                .span()
                .and_then(|s| key_at(src, s.start))
                .unwrap_or_else(|| "config".into());
            config_err(&key, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| config_err("config", format!("reading {}: {e}", path.display())))?;
        Self::parse(&src)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("serializing config: {e}")))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.corpus.csv, &self.corpus.synth) {
            (Some(_), Some(_)) => return Err(config_err("corpus", "set exactly one of csv and synth, not both")),
            (None, None) => return Err(config_err("corpus", "set one of csv and synth")),
            (None, Some(s)) => s
                .validate(self.arch.s_in + self.arch.s_out)
                .map_err(|e| config_err("corpus.synth", e))?,
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "need at least one seed"));
        }
        self.arch.arch(1).validate().map_err(|e| config_err("arch", e))?;
        self.train.validate()?;
        self.baseline_train.validate().map_err(|e| match e {
            Error::Config { key, msg } => config_err(&key.replacen("train", "baseline_train", 1), msg),
            e => e,
        })?;
        let mut l1 = self.l1;
        l1.series = l1.series.max(1);
        l1.validate().map_err(|e| config_err("l1", e))?;
        self.l2.validate().map_err(|e| config_err("l2", e))?;
        self.target_solver
            .validate()
            .map_err(|e| config_err("target_solver", e))?;
        for (method, kind) in self.runs_methods_kinds() {
            if method == Method::HyperGru && !kind.is_gru_family() {
                return Err(config_err(
                    "method",
                    format!("incompatible method/arch: hypergru cannot drive {kind}"),
                ));
            }
        }
        Ok(())
    }

    fn runs_methods_kinds(&self) -> Vec<(Method, TargetKind)> {
        let mut out = vec![(self.method, self.arch.kind)];
        for m in &self.bench.methods {
            for k in self.bench_targets() {
                out.push((*m, k));
            }
        }
        out
    }

    pub fn bench_targets(&self) -> Vec<TargetKind> {
        if self.bench.targets.is_empty() {
            vec![self.arch.kind]
        } else {
            self.bench.targets.clone()
        }
    }

    pub fn bench_hidden(&self) -> Vec<usize> {
        if self.bench.hidden_sizes.is_empty() {
            vec![self.arch.hidden_dim]
        } else {
            self.bench.hidden_sizes.clone()
        }
    }

    /// Raw (unnormalized) corpus.
    pub fn load_corpus(&self) -> Result<TimeSeriesCorpus> {
        match (&self.corpus.csv, &self.corpus.synth) {
            (Some(p), None) => load_csv(p),
            (None, Some(s)) => Ok(synth_drift(s)?.corpus),
            _ => Err(config_err("corpus", "set exactly one of csv and synth")),
        }
    }

    pub fn hypergpa(&self, arch: TargetArch, series: usize, seed: u64) -> HyperGpaConfig {
        let mut l1 = self.l1;
        l1.series = series;
        HyperGpaConfig {
            arch,
            l1,
            l2: self.l2,
            train: TrainConfig { seed, ..self.train },
            target_solver: self.target_solver,
        }
    }

    pub fn direct(&self, method: DirectMethod, arch: TargetArch, series: usize, seed: u64) -> DirectConfig {
        DirectConfig {
            method,
            arch,
            series,
            train: TrainConfig {
                seed,
                ..self.baseline_train
            },
            target_solver: self.target_solver,
            hyper_hidden: self.hypergru.hidden,
            hyper_embed: self.hypergru.embed,
        }
    }
}
