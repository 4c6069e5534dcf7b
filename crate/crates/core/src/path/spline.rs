use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Natural cubic spline through regularly or irregularly spaced knots,
/// one independent spline per channel.
///
/// On segment `k` the value is `a + b·dt + c·dt² + d·dt³` with
/// `dt = t - t_k`, so `a` is the knot observation itself.
#[derive(Clone, Debug)]
pub struct ControlPath {
    times: Vec<f64>,
    channels: usize,
    // [segment][channel] -> (a, b, c, d)
    coeffs: Vec<Vec<[f64; 4]>>,
    last: Vec<f64>,
}

impl ControlPath {
    /// Fits a natural cubic spline to `values` (one row per knot).
    pub fn fit(times: &[f64], values: &Tensor) -> Result<Self> {
        let n = times.len();
        if n < 2 {
            return Err(Error::Invalid(format!(
                "a control path needs at least 2 knots, got {n}"
            )));
        }
        if values.ndim() != 2 || values.rows() != n {
            return Err(Error::Shape(format!(
                "path values {:?} do not match {n} knot times",
                values.shape()
            )));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Invalid(format!(
                    "knot times must be strictly increasing (found {} then {})",
                    w[0], w[1]
                )));
            }
        }
        let channels = values.cols();
        let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let mut coeffs = vec![Vec::with_capacity(channels); n - 1];
        for ch in 0..channels {
            let y: Vec<f64> = (0..n).map(|k| values.at2(k, ch)).collect();
            let m = second_derivatives(&h, &y);
            for k in 0..n - 1 {
                let hk = h[k];
                let b = (y[k + 1] - y[k]) / hk - hk * (2.0 * m[k] + m[k + 1]) / 6.0;
                let c = m[k] / 2.0;
                let d = (m[k + 1] - m[k]) / (6.0 * hk);
                coeffs[k].push([y[k], b, c, d]);
            }
        }
        Ok(Self {
            times: times.to_vec(),
            channels,
            coeffs,
            last: values.row(n - 1).to_vec(),
        })
    }

    /// Knots at the integer times `1..=T`.
    pub fn fit_indexed(values: &Tensor) -> Result<Self> {
        let times: Vec<f64> = (1..=values.shape()[0]).map(|k| k as f64).collect();
        Self::fit(&times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::Invalid(format!(
                "t = {t} outside path range [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let k = self.times.partition_point(|&x| x <= t).saturating_sub(1);
        let k = k.min(self.coeffs.len() - 1);
        Ok((k, t - self.times[k]))
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if t == self.end() {
            return Ok(self.last.clone());
        }
        let (k, dt) = self.locate(t)?;
        Ok(self.coeffs[k]
            .iter()
            .map(|[a, b, c, d]| a + dt * (b + dt * (c + dt * d)))
            .collect())
    }

    pub fn eval_deriv(&self, t: f64) -> Result<Vec<f64>> {
        let (k, dt) = self.locate(t)?;
        Ok(self.coeffs[k]
            .iter()
            .map(|[_, b, c, d]| b + dt * (2.0 * c + 3.0 * dt * d))
            .collect())
    }

    pub fn eval_second_deriv(&self, t: f64) -> Result<Vec<f64>> {
        let (k, dt) = self.locate(t)?;
        Ok(self.coeffs[k]
            .iter()
            .map(|[_, _, c, d]| 2.0 * c + 6.0 * dt * d)
            .collect())
    }
}

/// Second derivatives at the knots with natural boundary conditions
/// (zero at both ends), via the Thomas algorithm.
fn second_derivatives(h: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let interior = n - 2;
    let mut diag = vec![0.0; interior];
    let mut upper = vec![0.0; interior];
    let mut rhs = vec![0.0; interior];
    for i in 0..interior {
        let k = i + 1;
        diag[i] = 2.0 * (h[k - 1] + h[k]);
        upper[i] = h[k];
        rhs[i] = 6.0 * ((y[k + 1] - y[k]) / h[k] - (y[k] - y[k - 1]) / h[k - 1]);
    }
    for i in 1..interior {
        let lower = h[i];
        let w = lower / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    m[interior] = rhs[interior - 1] / diag[interior - 1];
    for i in (0..interior - 1).rev() {
        m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
    }
    m
}
