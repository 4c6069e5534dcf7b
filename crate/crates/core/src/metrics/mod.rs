//! Forecast metrics, improvement ratios and report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::TimeSeriesCorpus;
use crate::error::{Error, Result};
use crate::train::{make_pairs, pair_hash, Forecaster, Pairs};

/// `pcc`, `r2` and `expvar` are `None` when the truth (or, for `pcc`, the
/// prediction) has zero variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub pcc: Option<f64>,
    pub r2: Option<f64>,
    pub expvar: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["mse", "mae", "pcc", "r2", "expvar"];

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "mse" => Some(self.mse),
            "mae" => Some(self.mae),
            "pcc" => self.pcc,
            "r2" => self.r2,
            "expvar" => self.expvar,
            _ => None,
        }
    }
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (mean, v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Pooled over every entry of the two arrays.
pub fn compute_metrics(pred: &Tensor, truth: &Tensor) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Invalid("metrics need at least two values".into()));
    }
    let (p, t) = (pred.data(), truth.data());
    let nf = n as f64;
    let resid = p.iter().zip(t).map(|(a, b)| b - a);
    let sse: f64 = resid.clone().map(|r| r * r).sum();
    let mse = sse / nf;
    let mae = resid.clone().map(f64::abs).sum::<f64>() / nf;
    let (pm, pv) = variance(p.iter().copied());
    let (tm, tv) = variance(t.iter().copied());
    let (_, rv) = variance(resid);
    let cov = p.iter().zip(t).map(|(a, b)| (a - pm) * (b - tm)).sum::<f64>() / nf;
    let pcc = (pv > 0.0 && tv > 0.0).then(|| cov / (pv * tv).sqrt());
    let r2 = (tv > 0.0).then(|| 1.0 - sse / (tv * nf));
    let expvar = (tv > 0.0).then(|| 1.0 - rv / tv);
    Ok(Metrics {
        mse,
        mae,
        pcc,
        r2,
        expvar,
    })
}

/// `(vanilla - method) / vanilla`; negative when the method is worse.
pub fn improvement_ratio(vanilla_mse: f64, method_mse: f64) -> Result<f64> {
    if !(vanilla_mse > 0.0) {
        return Err(Error::Invalid(format!("vanilla MSE must be > 0, got {vanilla_mse}")));
    }
    Ok((vanilla_mse - method_mse) / vanilla_mse)
}

/// Test-period scores of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// MSE of each forecast window position, averaged over series.
    pub per_step: Vec<f64>,
    /// Hash of the evaluated pairs, equal across methods on the same data.
    pub pair_hash: String,
}

pub fn evaluate(model: &impl Forecaster, corpus: &TimeSeriesCorpus, target: usize) -> Result<Evaluation> {
    let (s_in, s_out) = model.window();
    let truth: Vec<Pairs> = (0..corpus.series())
        .map(|i| make_pairs(corpus.period(i, target), s_in, s_out))
        .collect::<Result<_>>()?;
    let preds = model.predict(corpus, target)?;
    if preds.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} forecasts for {} series",
            preds.len(),
            truth.len()
        )));
    }
    let stack = |ts: Vec<&Tensor>| {
        let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&[data.len()], data)
    };
    let flat_pred = stack(preds.iter().collect());
    let flat_truth = stack(truth.iter().map(|p| &p.y).collect());
    let metrics = compute_metrics(&flat_pred, &flat_truth)?;
    let pairs = truth[0].len();
    let width = s_out * corpus.dim();
    let mut per_step = vec![0.0; pairs];
    for (p, t) in preds.iter().zip(&truth) {
        for (k, step) in per_step.iter_mut().enumerate() {
            let range = k * width..(k + 1) * width;
            let sse: f64 = p.data()[range.clone()]
                .iter()
                .zip(&t.y.data()[range])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *step += sse / (width * truth.len()) as f64;
        }
    }
    Ok(Evaluation {
        metrics,
        per_step,
        pair_hash: pair_hash(&truth),
    })
}

/// One method, target model and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: String,
    pub target: String,
    pub seed: u64,
    pub eval: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Sample standard deviation; only with two or more defined seeds.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub per_seed: Vec<Option<f64>>,
}

impl MetricSummary {
    pub fn of(values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
        let std = mean
            .filter(|_| n >= 2)
            .map(|m| (defined.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self {
            mean,
            std,
            per_seed: values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    /// method → target → metric → summary.
    pub per_method: BTreeMap<String, BTreeMap<String, BTreeMap<String, MetricSummary>>>,
    /// method → target → improvement of mean MSE over vanilla.
    pub improvements: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn build_report(results: &[RunResult], meta: ReportMeta) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Invalid("no results".into()));
    }
    let mut grouped: BTreeMap<(String, String), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        grouped.entry((r.method.clone(), r.target.clone())).or_default().push(r);
    }
    let mut per_method: BTreeMap<String, BTreeMap<String, BTreeMap<String, MetricSummary>>> = BTreeMap::new();
    for ((method, target), mut runs) in grouped {
        runs.sort_by_key(|r| r.seed);
        let summaries = METRIC_NAMES
            .iter()
            .map(|m| {
                let vals = runs.iter().map(|r| r.eval.metrics.get(m)).collect();
                (m.to_string(), MetricSummary::of(vals))
            })
            .collect();
        per_method.entry(method).or_default().insert(target, summaries);
    }
    let mut improvements: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    if let Some(vanilla) = per_method.get("vanilla") {
        for (method, targets) in &per_method {
            if method == "vanilla" {
                continue;
            }
            for (target, sums) in targets {
                let base = vanilla.get(target).and_then(|s| s["mse"].mean);
                if let (Some(v), Some(m)) = (base, sums["mse"].mean) {
                    improvements
                        .entry(method.clone())
                        .or_default()
                        .insert(target.clone(), improvement_ratio(v, m)?);
                }
            }
        }
    }
    Ok(EvalReport {
        meta,
        per_method,
        improvements,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub per_seed: PathBuf,
    pub per_step: PathBuf,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:?}"))
}

/// Writes `report.json`, `metrics.csv` (one row per run) and
/// `per_step_mse.csv` (`t,method,mse`, averaged over seeds).
pub fn emit_report(results: &[RunResult], meta: ReportMeta, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let report = build_report(results, meta)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let files = ReportFiles {
        report: dir.join("report.json"),
        per_seed: dir.join("metrics.csv"),
        per_step: dir.join("per_step_mse.csv"),
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&files.report, json)?;

    let mut runs: Vec<&RunResult> = results.iter().collect();
    runs.sort_by(|a, b| (&a.method, &a.target, a.seed).cmp(&(&b.method, &b.target, b.seed)));
    let mut w = std::io::BufWriter::new(fs::File::create(&files.per_seed)?);
    writeln!(w, "method,target,seed,mse,mae,pcc,r2,expvar")?;
    for r in &runs {
        let m = &r.eval.metrics;
        writeln!(
            w,
            "{},{},{},{:?},{:?},{},{},{}",
            r.method,
            r.target,
            r.seed,
            m.mse,
            m.mae,
            opt(m.pcc),
            opt(m.r2),
            opt(m.expvar)
        )?;
    }
    w.flush()?;

    let mut steps: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for r in &runs {
        let e = steps
            .entry(format!("{}/{}", r.method, r.target))
            .or_insert_with(|| (vec![0.0; r.eval.per_step.len()], 0));
        if e.0.len() != r.eval.per_step.len() {
            return Err(Error::Invalid(format!(
                "runs of {} disagree on the test length",
                r.method
            )));
        }
        e.0.iter_mut().zip(&r.eval.per_step).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(&files.per_step)?);
    writeln!(w, "t,method,mse")?;
    for (label, (sums, n)) in &steps {
        for (t, s) in sums.iter().enumerate() {
            writeln!(w, "{t},{label},{:?}", s / *n as f64)?;
        }
    }
    w.flush()?;
    Ok(files)
}

#[cfg(test)]
mod tests;
