use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const REVIN_EPS: f64 = 1e-5;

/// Per-window, per-feature statistics plus the affine map, all
/// `pairs × dim(x)` (`gamma`, `beta` are `1 × dim(x)`).
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    pub mean: Tensor,
    pub std: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Mean and floored std over the time axis of `pairs × s × d` windows.
pub fn window_stats(windows: &Tensor) -> Result<(Tensor, Tensor)> {
    if windows.ndim() != 3 || windows.shape()[1] < 2 {
        return Err(Error::Shape(format!(
            "windows must be pairs × s × d with s >= 2, got {:?}",
            windows.shape()
        )));
    }
    let (p, s, d) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    let x = windows.data();
    let mut mean = vec![0.0; p * d];
    let mut std = vec![0.0; p * d];
    for i in 0..p {
        for f in 0..d {
            let at = |t: usize| x[(i * s + t) * d + f];
            let m = (0..s).map(at).sum::<f64>() / s as f64;
            let v = (0..s).map(|t| (at(t) - m).powi(2)).sum::<f64>() / s as f64;
            mean[i * d + f] = m;
            std[i * d + f] = v.sqrt().max(REVIN_EPS);
        }
    }
    Ok((Tensor::new(&[p, d], mean), Tensor::new(&[p, d], std)))
}

fn per_step(windows: &Tensor, f: impl Fn(usize, usize, f64) -> f64) -> Tensor {
    let (s, d) = (windows.shape()[1], windows.shape()[2]);
    let data = windows
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| f(k / (s * d), k % d, v))
        .collect();
    Tensor::new(windows.shape(), data)
}

/// `((x - μ) / σ) γ + β` per window.
pub fn revin_apply(windows: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, RevinState)> {
    let (mean, std) = window_stats(windows)?;
    let d = windows.shape()[2];
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!("affine maps must have {d} entries")));
    }
    let (g, b) = (gamma.data(), beta.data());
    let out = per_step(windows, |i, f, v| {
        (v - mean.data()[i * d + f]) / std.data()[i * d + f] * g[f] + b[f]
    });
    let state = RevinState {
        mean,
        std,
        gamma: gamma.clone().reshaped(&[1, d]),
        beta: beta.clone().reshaped(&[1, d]),
    };
    Ok((out, state))
}

/// Inverse of [`revin_apply`] on `pairs × s_out × d` outputs.
pub fn revin_invert(outputs: &Tensor, state: &RevinState) -> Result<Tensor> {
    let d = state.gamma.len();
    if outputs.ndim() != 3 || outputs.shape()[2] != d || outputs.shape()[0] * d != state.mean.len() {
        return Err(Error::Shape(format!(
            "outputs {:?} do not match the RevIN state",
            outputs.shape()
        )));
    }
    let (g, b) = (state.gamma.data(), state.beta.data());
    let (m, s) = (state.mean.data(), state.std.data());
    Ok(per_step(outputs, |i, f, v| {
        (v - b[f]) / g[f] * s[i * d + f] + m[i * d + f]
    }))
}

/// Tape version: the `(scale, shift)` pair for [`crate::target::WindowInput::with_affine`]
/// and a closure undoing it on the model output.
pub struct RevinMap<'t> {
    pub scale: Var<'t>,
    pub shift: Var<'t>,
    mean: Var<'t>,
    std: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
}

impl<'t> RevinMap<'t> {
    pub fn new(tape: &'t Tape, windows: &Tensor, gamma: Var<'t>, beta: Var<'t>) -> Result<Self> {
        let (mean, std) = window_stats(windows)?;
        let (mean, std) = (tape.constant(mean), tape.constant(std));
        let scale = gamma.div(std);
        Ok(Self {
            scale,
            shift: beta.sub(mean.mul(scale)),
            mean,
            std,
            gamma,
            beta,
        })
    }

    pub fn invert(&self, out: Var<'t>) -> Var<'t> {
        let s = out.shape();
        let (p, d) = (s[0], s[2]);
        let g = self.gamma.reshape(&[1, 1, d]);
        out.sub(self.beta.reshape(&[1, 1, d]))
            .div(g)
            .mul(self.std.reshape(&[p, 1, d]))
            .add(self.mean.reshape(&[p, 1, d]))
    }
}
