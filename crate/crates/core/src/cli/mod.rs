//! The `hypergpa` command line: `synth`, `train`, `eval`, `gradcheck`,
//! `bench`. Exit codes: 0 success, 1 configuration error, 2 runtime failure.

pub mod config;
pub mod gradcheck;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

pub use config::{Method, RunConfig};

use crate::autodiff::Tensor;
use crate::baselines::Direct;
use crate::data::{normalize, write_csv, NormStats, TimeSeriesCorpus};
use crate::error::{Error, Result};
use crate::l2::GraphFnKind;
use crate::metrics::{emit_report, evaluate, ReportMeta, RunResult};
use crate::target::{TargetArch, TargetKind};
use crate::train::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, Forecaster, History, HyperGpa};

#[derive(Parser, Debug)]
#[command(
    name = "hypergpa",
    version,
    about = "Drift-adaptive parameter generation for time-series forecasters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic corpus as CSV to --out.
    Synth(Common),
    /// Train one method per seed; writes checkpoints and histories under --out.
    Train(Common),
    /// Score the checkpoints of a `train` run directory on the test period.
    Eval(Common),
    /// Run the finite-difference gradient suites.
    Gradcheck(Common),
    /// Train and score every benchmark method on the same corpus and seeds.
    Bench(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable; replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory (a file path for `synth`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// gru, lstm, seq2seq-gru, seq2seq-lstm, odernn or ncde.
    #[arg(long, value_parser = parse_with::<TargetKind>)]
    target: Option<TargetKind>,
    /// hypergpa, vanilla, revin or hypergru.
    #[arg(long, value_parser = parse_with::<Method>)]
    method: Option<Method>,
    /// Number of past periods read per forecast.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the loss under the argmax-selected candidates.
    #[arg(long)]
    lambda: Option<f64>,
    /// Candidate parameter sets per target tensor.
    #[arg(long)]
    candidates: Option<usize>,
    /// gat, gcn or agc.
    #[arg(long = "graph-fn", value_parser = parse_with::<GraphFnKind>)]
    graph_fn: Option<GraphFnKind>,
    /// Drop the cross-series coupling in the shared encoder.
    #[arg(long = "no-agc")]
    no_agc: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config { .. }) {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => synth(&c),
        Command::Train(c) => train(&c),
        Command::Eval(c) => eval(&c),
        Command::Gradcheck(c) => gradcheck_cmd(&c),
        Command::Bench(c) => bench(&c),
    }
}

fn resolve(c: &Common, base: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match c.config.as_deref().or(base) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !c.seeds.is_empty() {
        cfg.seeds = c.seeds.clone();
    }
    if let Some(t) = c.target {
        cfg.arch.kind = t;
    }
    if let Some(m) = c.method {
        cfg.method = m;
    }
    if let Some(k) = c.k {
        cfg.train.k = k;
        cfg.baseline_train.k = k;
    }
    if let Some(l) = c.lambda {
        cfg.train.lambda = l;
    }
    if let Some(n) = c.candidates {
        cfg.l2.candidates = n;
    }
    if let Some(g) = c.graph_fn {
        cfg.l2.graph_fn = g;
    }
    if c.no_agc {
        cfg.l1.use_agc = false;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
        cfg.baseline_train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| Error::Config {
        key: "out".into(),
        msg: "--out is required".into(),
    })
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved"), cfg.to_toml()?)?;
    Ok(())
}

fn synth(c: &Common) -> Result<()> {
    let out = need_out(c)?;
    let mut cfg = resolve(c, None)?;
    let Some(s) = cfg.corpus.synth.as_mut() else {
        return Err(Error::Config {
            key: "corpus".into(),
            msg: "synth needs a [corpus.synth] source".into(),
        });
    };
    if let Some(&seed) = c.seeds.first() {
        s.seed = seed;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(out, &cfg.load_corpus()?)
}

/// A trained model of any method.
pub enum Trained {
    Hyper(HyperGpa),
    Direct(Direct),
}

impl Trained {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        match self {
            Trained::Hyper(m) => m.checkpoint(),
            Trained::Direct(m) => m.checkpoint(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.method == "hypergpa" {
            Ok(Trained::Hyper(HyperGpa::from_checkpoint(ckpt)?))
        } else {
            Ok(Trained::Direct(Direct::from_checkpoint(ckpt)?))
        }
    }
}

impl Forecaster for Trained {
    fn predict(&self, corpus: &TimeSeriesCorpus, target: usize) -> Result<Vec<Tensor>> {
        match self {
            Trained::Hyper(m) => m.predict(corpus, target),
            Trained::Direct(m) => m.predict(corpus, target),
        }
    }

    fn window(&self) -> (usize, usize) {
        match self {
            Trained::Hyper(m) => m.window(),
            Trained::Direct(m) => m.window(),
        }
    }
}

/// Trains `method` on a normalized corpus; progress goes to stderr.
pub fn fit_method(
    cfg: &RunConfig,
    method: Method,
    arch: TargetArch,
    corpus: &TimeSeriesCorpus,
    seed: u64,
    label: &str,
) -> Result<(Trained, History)> {
    let progress = |r: &EpochRecord| {
        if r.epoch % 25 == 0 {
            eprintln!(
                "[{label} seed {seed}] epoch {:>4} train {:.5} val {:.5}",
                r.epoch, r.train_loss, r.val_mse
            );
        }
    };
    let series = corpus.series();
    Ok(match method.direct() {
        None => {
            let (m, h) = HyperGpa::train(cfg.hypergpa(arch, series, seed), corpus, progress)?;
            (Trained::Hyper(m), h)
        }
        Some(d) => {
            let (m, h) = Direct::train(cfg.direct(d, arch, series, seed), corpus, progress)?;
            (Trained::Direct(m), h)
        }
    })
}

fn prepared(cfg: &RunConfig) -> Result<(TimeSeriesCorpus, NormStats)> {
    normalize(&cfg.load_corpus()?)
}

fn train(c: &Common) -> Result<()> {
    let out = need_out(c)?;
    let cfg = resolve(c, None)?;
    write_resolved(&cfg, out)?;
    let (corpus, stats) = prepared(&cfg)?;
    fs::write(out.join("norm_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    let arch = cfg.arch.arch(corpus.dim());
    let label = cfg.method.as_str();
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let (model, history) = fit_method(&cfg, cfg.method, arch, &corpus, seed, label)?;
            let dir = out.join(format!("seed{seed}"));
            fs::create_dir_all(&dir)?;
            save_checkpoint(dir.join("checkpoint.json"), &model.checkpoint()?)?;
            history.save(dir.join("history.csv"))?;
            eprintln!(
                "[{label} seed {seed}] best epoch {} val {:.5}",
                history.best_epoch,
                history.best_val()
            );
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let out = need_out(c)?;
    let resolved = out.join("config.resolved");
    let cfg = resolve(c, Some(&resolved))?;
    let (corpus, _) = prepared(&cfg)?;
    let test = corpus.periods() - 1;
    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let ckpt = load_checkpoint(out.join(format!("seed{seed}")).join("checkpoint.json"))?;
            let model = Trained::from_checkpoint(&ckpt)?;
            Ok(RunResult {
                method: ckpt.method.clone(),
                target: cfg.arch.kind.to_string(),
                seed,
                eval: evaluate(&model, &corpus, test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = ReportMeta {
        seeds: cfg.seeds.clone(),
        config_hash: cfg.hash()?,
    };
    let files = emit_report(&results, meta, out.join("eval"))?;
    for r in &results {
        println!(
            "{} {} seed {}: test mse {:.6}",
            r.method, r.target, r.seed, r.eval.metrics.mse
        );
    }
    println!("report: {}", files.report.display());
    Ok(())
}

fn gradcheck_cmd(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        for s in gradcheck::run_suites(seed)? {
            println!(
                "seed {seed} {:<22} max_rel {:.3e} max_abs {:.3e} tol {:.0e} {}",
                s.name,
                s.max_rel_err,
                s.max_abs_err,
                s.tol,
                if s.passed() { "ok" } else { "FAIL" }
            );
            all.push((seed, s));
        }
    }
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        let json: Vec<_> = all
            .iter()
            .map(|(seed, s)| serde_json::json!({ "seed": seed, "suite": s }))
            .collect();
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    }
    let failed: Vec<&str> = all
        .iter()
        .filter(|(_, s)| !s.passed())
        .map(|(_, s)| s.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn bench(c: &Common) -> Result<()> {
    let out = need_out(c)?;
    let cfg = resolve(c, None)?;
    write_resolved(&cfg, out)?;
    let (corpus, _) = prepared(&cfg)?;
    let test = corpus.periods() - 1;
    let sizes = cfg.bench_hidden();
    let mut jobs = Vec::new();
    for kind in cfg.bench_targets() {
        for &hidden in &sizes {
            let label = if sizes.len() > 1 {
                format!("{kind}-h{hidden}")
            } else {
                kind.to_string()
            };
            let mut arch = cfg.arch.arch(corpus.dim());
            arch.kind = kind;
            arch.hidden_dim = hidden;
            for &method in &cfg.bench.methods {
                for &seed in &cfg.seeds {
                    jobs.push((label.clone(), arch, method, seed));
                }
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|(label, arch, method, seed)| {
            let tag = format!("{method} {label}");
            let (model, _) = fit_method(&cfg, *method, *arch, &corpus, *seed, &tag)?;
            Ok(RunResult {
                method: method.to_string(),
                target: label.clone(),
                seed: *seed,
                eval: evaluate(&model, &corpus, test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hashes: BTreeMap<&str, &str> = BTreeMap::new();
    for r in &results {
        let h = hashes.entry(&r.target).or_insert(&r.eval.pair_hash);
        if *h != r.eval.pair_hash {
            return Err(Error::Contract(format!(
                "methods were scored on different test pairs for {}",
                r.target
            )));
        }
    }
    let meta = ReportMeta {
        seeds: cfg.seeds.clone(),
        config_hash: cfg.hash()?,
    };
    let files = emit_report(&results, meta, out)?;
    let report: crate::metrics::EvalReport = serde_json::from_str(&fs::read_to_string(&files.report)?)?;
    for (method, targets) in &report.per_method {
        for (target, m) in targets {
            let mse = &m["mse"];
            println!("{method:>9} {target:<14} mse {:.6}", mse.mean.unwrap_or(f64::NAN));
        }
    }
    for (method, targets) in &report.improvements {
        for (target, r) in targets {
            println!("improvement {method} over vanilla on {target}: {:.1}%", 100.0 * r);
        }
    }
    println!("report: {}", files.report.display());
    Ok(())
}
