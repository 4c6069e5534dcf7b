//! Corpus of M series over N disjoint periods, plus ingestion,
//! normalization, splitting and a synthetic drift generator.

mod csv_io;
mod synth;

pub use csv_io::{load_csv, read_csv, write_csv, write_csv_to};
pub use synth::{synth_drift, DriftKind, SynthConfig, SynthOutput};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// `periods[i][j]` holds series `i`, period `j` as `len_j × dim(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesCorpus {
    dim: usize,
    periods: Vec<Vec<Tensor>>,
}

impl TimeSeriesCorpus {
    pub fn new(periods: Vec<Vec<Tensor>>) -> Result<Self> {
        let m = periods.len();
        if m == 0 || periods[0].is_empty() {
            return Err(Error::Data("corpus needs at least one series and one period".into()));
        }
        let n = periods[0].len();
        let dim = periods[0][0].shape().get(1).copied().unwrap_or(0);
        if dim == 0 {
            return Err(Error::Data("observations need at least one feature".into()));
        }
        for (i, s) in periods.iter().enumerate() {
            if s.len() != n {
                return Err(Error::Data(format!("series {i} has {} periods, expected {n}", s.len())));
            }
            for (j, p) in s.iter().enumerate() {
                if p.ndim() != 2 || p.shape()[1] != dim {
                    return Err(Error::Data(format!(
                        "series {i} period {j} has shape {:?}, expected [_, {dim}]",
                        p.shape()
                    )));
                }
                if p.shape()[0] != periods[0][j].shape()[0] {
                    return Err(Error::Data(format!(
                        "period length mismatch at series {i} period {j}: {} vs {}",
                        p.shape()[0],
                        periods[0][j].shape()[0]
                    )));
                }
                if p.shape()[0] == 0 {
                    return Err(Error::Data(format!("series {i} period {j} is empty")));
                }
                if !p.all_finite() {
                    return Err(Error::Data(format!("series {i} period {j} has non-finite values")));
                }
            }
        }
        Ok(Self { dim, periods })
    }

    pub fn series(&self) -> usize {
        self.periods.len()
    }

    pub fn periods(&self) -> usize {
        self.periods[0].len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self, i: usize, j: usize) -> &Tensor {
        &self.periods[i][j]
    }

    pub fn period_len(&self, j: usize) -> usize {
        self.periods[0][j].shape()[0]
    }

    /// Periods `range` of series `i`, stacked in time.
    pub fn concat(&self, i: usize, range: Range<usize>) -> Tensor {
        let rows: usize = range.clone().map(|j| self.period_len(j)).sum();
        let mut data = Vec::with_capacity(rows * self.dim);
        for j in range {
            data.extend_from_slice(self.periods[i][j].data());
        }
        Tensor::new(&[rows, self.dim], data)
    }

    /// Copy with period `j` of every series replaced by `f(i, values)`.
    pub fn map_period(&self, j: usize, f: impl Fn(usize, &Tensor) -> Tensor) -> Result<Self> {
        let mut periods = self.periods.clone();
        for (i, s) in periods.iter_mut().enumerate() {
            s[j] = f(i, &self.periods[i][j]);
        }
        Self::new(periods)
    }
}

/// Per-series, per-feature statistics of the training periods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// `(series, feature)` pairs whose std was floored.
    pub floored: Vec<(usize, usize)>,
}

/// Index partition: training periods, then validation, then test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: usize,
    pub test: usize,
}

/// Zero-based: periods `0..N-2` train, `N-2` validates, `N-1` tests.
pub fn split(n: usize) -> Result<Split> {
    if n < 3 {
        return Err(Error::Data(format!("a split needs at least 3 periods, got {n}")));
    }
    Ok(Split {
        train: 0..n - 2,
        val: n - 2,
        test: n - 1,
    })
}

fn transform(corpus: &TimeSeriesCorpus, f: impl Fn(usize, usize, f64) -> f64) -> Result<TimeSeriesCorpus> {
    let d = corpus.dim;
    let periods = corpus
        .periods
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.iter()
                .map(|p| {
                    let mut p = p.clone();
                    for (k, v) in p.data_mut().iter_mut().enumerate() {
                        *v = f(i, k % d, *v);
                    }
                    p
                })
                .collect()
        })
        .collect();
    TimeSeriesCorpus::new(periods)
}

/// Z-scores every series with statistics of its training periods only.
pub fn normalize(corpus: &TimeSeriesCorpus) -> Result<(TimeSeriesCorpus, NormStats)> {
    let sp = split(corpus.periods())?;
    let d = corpus.dim;
    let mut stats = NormStats {
        mean: Vec::new(),
        std: Vec::new(),
        floored: Vec::new(),
    };
    for i in 0..corpus.series() {
        let train = corpus.concat(i, sp.train.clone());
        let n = train.rows() as f64;
        let mut mean = vec![0.0; d];
        for r in 0..train.rows() {
            for (f, m) in mean.iter_mut().enumerate() {
                *m += train.at2(r, f) / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in 0..train.rows() {
            for (f, s) in std.iter_mut().enumerate() {
                *s += (train.at2(r, f) - mean[f]).powi(2) / n;
            }
        }
        for (f, s) in std.iter_mut().enumerate() {
            *s = s.sqrt();
            if *s < STD_FLOOR {
                *s = STD_FLOOR;
                stats.floored.push((i, f));
            }
        }
        stats.mean.push(mean);
        stats.std.push(std);
    }
    let out = transform(corpus, |i, f, v| (v - stats.mean[i][f]) / stats.std[i][f])?;
    Ok((out, stats))
}

pub fn denormalize(corpus: &TimeSeriesCorpus, stats: &NormStats) -> Result<TimeSeriesCorpus> {
    if stats.mean.len() != corpus.series() {
        return Err(Error::Data("statistics do not match the corpus series count".into()));
    }
    transform(corpus, |i, f, v| v * stats.std[i][f] + stats.mean[i][f])
}

#[cfg(test)]
mod tests;
