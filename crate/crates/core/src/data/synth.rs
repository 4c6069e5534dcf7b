use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TimeSeriesCorpus;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    AmplitudeRamp,
    FrequencyRamp,
    RegimeSwitch,
}

impl DriftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DriftKind::AmplitudeRamp => "amplitude-ramp",
            DriftKind::FrequencyRamp => "frequency-ramp",
            DriftKind::RegimeSwitch => "regime-switch",
        }
    }
}

impl fmt::Display for DriftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DriftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude-ramp" => Ok(DriftKind::AmplitudeRamp),
            "frequency-ramp" => Ok(DriftKind::FrequencyRamp),
            "regime-switch" => Ok(DriftKind::RegimeSwitch),
            other => Err(Error::Invalid(format!("unknown drift kind `{other}`"))),
        }
    }
}

/// Sinusoidal series whose per-period amplitude, frequency or regime
/// drifts. `latent_noise` scales the seeded per-period drivers and
/// `noise` the observation noise; both zero makes the corpus noise-free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub series: usize,
    pub periods: usize,
    pub period_len: usize,
    pub dim: usize,
    pub drift: DriftKind,
    pub coupling: f64,
    pub noise: f64,
    pub latent_noise: f64,
    /// Per-period growth of the drifting quantity.
    pub ramp: f64,
    /// AR(1) coefficient of the drivers across periods.
    pub persistence: f64,
    /// Steps per oscillation before any drift.
    pub cycle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            series: 4,
            periods: 8,
            period_len: 48,
            dim: 2,
            drift: DriftKind::AmplitudeRamp,
            coupling: 0.5,
            noise: 0.05,
            latent_noise: 0.3,
            ramp: 0.25,
            persistence: 0.6,
            cycle: 12.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, min_period_len: usize) -> Result<()> {
        if self.series == 0 || self.periods == 0 || self.dim == 0 {
            return Err(Error::Invalid(format!(
                "synthetic corpus sizes must be positive: {self:?}"
            )));
        }
        if self.period_len < min_period_len.max(2) {
            return Err(Error::Invalid(format!(
                "period length {} shorter than s_in + s_out = {min_period_len}",
                self.period_len
            )));
        }
        if !(0.0..=1.0).contains(&self.coupling) || !(0.0..1.0).contains(&self.persistence.abs()) {
            return Err(Error::Invalid(
                "coupling must be in [0, 1] and |persistence| < 1".into(),
            ));
        }
        if self.noise < 0.0 || self.latent_noise < 0.0 || self.cycle <= 0.0 {
            return Err(Error::Invalid("noise scales must be >= 0 and cycle > 0".into()));
        }
        Ok(())
    }
}

/// Corpus plus the latent quantities that produced it, indexed `[i][j]`.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub corpus: TimeSeriesCorpus,
    pub drivers: Vec<Vec<f64>>,
    pub amplitude: Vec<Vec<f64>>,
    pub frequency: Vec<Vec<f64>>,
}

const REGIMES: [(f64, f64); 3] = [(1.0, 1.0), (1.8, 0.6), (0.6, 1.6)];

pub fn synth_drift(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate(2)?;
    let (m, n) = (cfg.series, cfg.periods);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    let phases: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..cfg.dim).map(|_| PI * (normal().tanh() + 1.0)).collect())
        .collect();
    let base: Vec<f64> = (0..m).map(|_| 1.0 + 0.2 * normal().tanh()).collect();
    let mut mix: Vec<Vec<f64>> = (0..m).map(|_| (0..m).map(|_| normal()).collect()).collect();
    for row in &mut mix {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }

    // stationary AR(1) drivers, then mixed across series
    let rho = cfg.persistence;
    let mut own = vec![vec![0.0; n]; m];
    for s in own.iter_mut() {
        for j in 0..n {
            let e = normal();
            s[j] = if j == 0 {
                e
            } else {
                rho * s[j - 1] + (1.0 - rho * rho).sqrt() * e
            };
        }
    }
    let drivers: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mixed: f64 = (0..m).map(|k| mix[i][k] * own[k][j]).sum();
                    (1.0 - cfg.coupling) * own[i][j] + cfg.coupling * mixed
                })
                .collect()
        })
        .collect();

    let omega0 = 2.0 * PI / cfg.cycle;
    let mut amplitude = vec![vec![0.0; n]; m];
    let mut frequency = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let v = cfg.latent_noise * drivers[i][j];
            let t = j as f64;
            let (a, w) = match cfg.drift {
                DriftKind::AmplitudeRamp => (base[i] * (1.0 + cfg.ramp * t) * v.exp(), omega0),
                DriftKind::FrequencyRamp => (
                    base[i] * (0.5 * v).exp(),
                    omega0 * (1.0 + 0.5 * cfg.ramp * t) * (0.2 * v).exp(),
                ),
                DriftKind::RegimeSwitch => {
                    let r = (j / 2 + usize::from(v > 0.5 * cfg.latent_noise)) % REGIMES.len();
                    (base[i] * REGIMES[r].0, omega0 * REGIMES[r].1)
                }
            };
            amplitude[i][j] = a;
            frequency[i][j] = w;
        }
    }

    let mut periods = Vec::with_capacity(m);
    for i in 0..m {
        let mut theta = 0.0;
        let mut series = Vec::with_capacity(n);
        for j in 0..n {
            let mut data = Vec::with_capacity(cfg.period_len * cfg.dim);
            for _ in 0..cfg.period_len {
                for d in 0..cfg.dim {
                    let clean = amplitude[i][j] * (theta + phases[i][d]).sin();
                    data.push(clean + cfg.noise * normal());
                }
                theta += frequency[i][j];
            }
            series.push(Tensor::new(&[cfg.period_len, cfg.dim], data));
        }
        periods.push(series);
    }
    Ok(SynthOutput {
        corpus: TimeSeriesCorpus::new(periods)?,
        drivers,
        amplitude,
        frequency,
    })
}
