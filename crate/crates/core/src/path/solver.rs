//! Fixed-step RK4 for controlled differential equations
//! `dh = field(h) · dX(t)`, batched over independent or coupled rows.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::spline::ControlPath;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// The solve is recorded on the tape op by op.
    Backprop,
    /// Gradients come from a backward-in-time augmented solve.
    Adjoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub steps_per_interval: usize,
    pub mode: GradMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps_per_interval: 4,
            mode: GradMode::Backprop,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_interval == 0 {
            return Err(Error::Invalid("steps-per-interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Source of the control derivative `dX/dt`, one row per state row.
pub trait Drive {
    fn rows(&self) -> usize;
    fn channels(&self) -> usize;
    /// `rows × channels` derivative at `t`.
    fn derivative(&self, t: f64) -> Result<Tensor>;
    /// Knot grid the integration steps align with, if any.
    fn knots(&self) -> Option<&[f64]> {
        None
    }
}

/// The CDE vector field. Maps a `rows × hidden` state to a
/// `rows × hidden × channels` tensor.
pub trait VectorField {
    fn eval<'t>(&self, tape: &'t Tape, state: Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>>;
}

/// One control path per row, all on the same knot grid.
#[derive(Clone, Debug)]
pub struct PathBundle {
    paths: Rc<Vec<ControlPath>>,
}

impl PathBundle {
    pub fn new(paths: Vec<ControlPath>) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| Error::Invalid("empty path bundle".into()))?;
        for p in &paths[1..] {
            if p.times() != first.times() || p.channels() != first.channels() {
                return Err(Error::Invalid(
                    "all paths in a bundle must share knots and channel count".into(),
                ));
            }
        }
        Ok(Self { paths: Rc::new(paths) })
    }

    pub fn paths(&self) -> &[ControlPath] {
        &self.paths
    }

    pub fn start(&self) -> f64 {
        self.paths[0].start()
    }

    pub fn end(&self) -> f64 {
        self.paths[0].end()
    }
}

impl Drive for PathBundle {
    fn rows(&self) -> usize {
        self.paths.len()
    }

    fn channels(&self) -> usize {
        self.paths[0].channels()
    }

    fn derivative(&self, t: f64) -> Result<Tensor> {
        let c = self.channels();
        let mut data = Vec::with_capacity(self.rows() * c);
        for p in self.paths.iter() {
            data.extend(p.eval_deriv(t)?);
        }
        Ok(Tensor::new(&[self.rows(), c], data))
    }

    fn knots(&self) -> Option<&[f64]> {
        Some(self.paths[0].times())
    }
}

/// `X(t) = t` on every row: turns the CDE into an autonomous ODE.
#[derive(Clone, Copy, Debug)]
pub struct TimeDrive {
    pub rows: usize,
}

impl Drive for TimeDrive {
    fn rows(&self) -> usize {
        self.rows
    }

    fn channels(&self) -> usize {
        1
    }

    fn derivative(&self, _t: f64) -> Result<Tensor> {
        Ok(Tensor::ones(&[self.rows, 1]))
    }
}

/// Analytic control given by its derivative.
#[derive(Clone)]
pub struct FnDrive {
    pub rows: usize,
    pub channels: usize,
    pub deriv: Rc<dyn Fn(f64) -> Vec<f64>>,
}

impl Drive for FnDrive {
    fn rows(&self) -> usize {
        self.rows
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn derivative(&self, t: f64) -> Result<Tensor> {
        Ok(Tensor::new(&[self.rows, self.channels], (self.deriv)(t)))
    }
}

/// Step times from `t0` to `t1`, `steps_per_interval` per knot interval.
fn step_grid(knots: Option<&[f64]>, t0: f64, t1: f64, per: usize) -> Vec<f64> {
    let mut breaks = vec![t0];
    if let Some(k) = knots {
        breaks.extend(k.iter().copied().filter(|&t| t > t0 && t < t1));
    }
    breaks.push(t1);
    let mut grid = vec![t0];
    for w in breaks.windows(2) {
        let h = (w[1] - w[0]) / per as f64;
        for s in 1..per {
            grid.push(w[0] + h * s as f64);
        }
        grid.push(w[1]);
    }
    grid
}

/// `field(h) · dX`: contracts the channel axis.
fn apply_control<'t>(f: Var<'t>, dx: &Tensor) -> Var<'t> {
    let shape = f.shape();
    let (rows, channels) = (shape[0], shape[2]);
    let dx = f.tape().constant(dx.clone().reshaped(&[rows, 1, channels]));
    f.mul(dx).sum_last()
}

fn rhs<'t, F: VectorField>(tape: &'t Tape, field: &F, h: Var<'t>, params: &[Var<'t>], dx: &Tensor) -> Result<Var<'t>> {
    let f = field.eval(tape, h, params)?;
    let fs = f.shape();
    let hs = h.shape();
    if fs.len() != 3 || fs[0] != hs[0] || fs[1] != hs[1] || fs[2] != dx.shape()[1] {
        return Err(Error::Shape(format!(
            "vector field returned {fs:?} for state {hs:?} and control {:?}",
            dx.shape()
        )));
    }
    Ok(apply_control(f, dx))
}

fn check_range<D: Drive>(drive: &D, h0: &[usize], t0: f64, t1: f64) -> Result<()> {
    if !(t0 < t1) {
        return Err(Error::Invalid(format!("integration requires t0 < t1 (got {t0}, {t1})")));
    }
    if h0.len() != 2 || h0[0] != drive.rows() {
        return Err(Error::Shape(format!(
            "state {h0:?} does not match {} control rows",
            drive.rows()
        )));
    }
    if let Some(k) = drive.knots() {
        if t0 < k[0] || t1 > *k.last().unwrap() {
            return Err(Error::Invalid(format!(
                "[{t0}, {t1}] outside control range [{}, {}]",
                k[0],
                k.last().unwrap()
            )));
        }
    }
    Ok(())
}

/// Solves `h(t1) = h(t0) + ∫ field(h) dX` with fixed-step RK4.
pub fn integrate_cde<'t, F, D>(
    tape: &'t Tape,
    h0: Var<'t>,
    field: &F,
    params: &[Var<'t>],
    drive: &D,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Var<'t>>
where
    F: VectorField + Clone + 'static,
    D: Drive + Clone + 'static,
{
    cfg.validate()?;
    check_range(drive, &h0.shape(), t0, t1)?;
    let grid = step_grid(drive.knots(), t0, t1, cfg.steps_per_interval);
    match cfg.mode {
        GradMode::Backprop => solve_on_tape(tape, h0, field, params, drive, &grid),
        GradMode::Adjoint => solve_adjoint(tape, h0, field, params, drive, grid),
    }
}

fn solve_on_tape<'t, F: VectorField, D: Drive>(
    tape: &'t Tape,
    h0: Var<'t>,
    field: &F,
    params: &[Var<'t>],
    drive: &D,
    grid: &[f64],
) -> Result<Var<'t>> {
    let mut h = h0;
    for (step, w) in grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        let d0 = drive.derivative(t)?;
        let dm = drive.derivative(t + 0.5 * dt)?;
        let d1 = drive.derivative(w[1])?;
        let k1 = rhs(tape, field, h, params, &d0)?;
        let k2 = rhs(tape, field, h.add(k1.scale(0.5 * dt)), params, &dm)?;
        let k3 = rhs(tape, field, h.add(k2.scale(0.5 * dt)), params, &dm)?;
        let k4 = rhs(tape, field, h.add(k3.scale(dt)), params, &d1)?;
        let incr = k1.add(k2.scale(2.0)).add(k3.scale(2.0)).add(k4);
        h = h.add(incr.scale(dt / 6.0));
        if !h.value().all_finite() {
            return Err(Error::NonFinite(format!("CDE state at step {step} (t = {})", w[1])));
        }
    }
    Ok(h)
}

/// Field value and, when `cotangent` is given, its VJPs w.r.t. state and params.
fn eval_detached<F: VectorField>(
    field: &F,
    h: &Tensor,
    params: &[Tensor],
    dx: &Tensor,
    cotangent: Option<&Tensor>,
) -> Result<(Tensor, Option<(Tensor, Vec<Tensor>)>)> {
    let tape = Tape::new();
    let hv = tape.param(h.clone());
    let pv: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = rhs(&tape, field, hv, &pv, dx)?;
    let value = out.to_tensor();
    let Some(a) = cotangent else {
        return Ok((value, None));
    };
    let g = tape.backward_with(out, a.clone())?;
    let gh = g.get(hv).cloned().unwrap_or_else(|| Tensor::zeros(h.shape()));
    let gp = pv
        .iter()
        .zip(params)
        .map(|(v, p)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, Some((gh, gp))))
}

fn rk4_values<F: VectorField, D: Drive>(
    field: &F,
    params: &[Tensor],
    drive: &D,
    mut h: Tensor,
    grid: &[f64],
) -> Result<Tensor> {
    for (step, w) in grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        let dm = drive.derivative(t + 0.5 * dt)?;
        let k1 = eval_detached(field, &h, params, &drive.derivative(t)?, None)?.0;
        let mut y = h.clone();
        y.axpy(0.5 * dt, &k1);
        let k2 = eval_detached(field, &y, params, &dm, None)?.0;
        let mut y = h.clone();
        y.axpy(0.5 * dt, &k2);
        let k3 = eval_detached(field, &y, params, &dm, None)?.0;
        let mut y = h.clone();
        y.axpy(dt, &k3);
        let k4 = eval_detached(field, &y, params, &drive.derivative(w[1])?, None)?.0;
        h.axpy(dt / 6.0, &k1);
        h.axpy(dt / 3.0, &k2);
        h.axpy(dt / 3.0, &k3);
        h.axpy(dt / 6.0, &k4);
        if !h.all_finite() {
            return Err(Error::NonFinite(format!("CDE state at step {step} (t = {})", w[1])));
        }
    }
    Ok(h)
}

/// Augmented state `(h, a, g_θ)` integrated backwards in time.
struct Augmented {
    h: Tensor,
    a: Tensor,
    gp: Vec<Tensor>,
}

impl Augmented {
    fn plus(&self, dt: f64, d: &Augmented) -> Augmented {
        let mut out = Augmented {
            h: self.h.clone(),
            a: self.a.clone(),
            gp: self.gp.clone(),
        };
        out.h.axpy(dt, &d.h);
        out.a.axpy(dt, &d.a);
        for (x, y) in out.gp.iter_mut().zip(&d.gp) {
            x.axpy(dt, y);
        }
        out
    }

    fn accumulate(&mut self, dt: f64, d: &Augmented) {
        self.h.axpy(dt, &d.h);
        self.a.axpy(dt, &d.a);
        for (x, y) in self.gp.iter_mut().zip(&d.gp) {
            x.axpy(dt, y);
        }
    }
}

fn augmented_rhs<F: VectorField>(field: &F, params: &[Tensor], y: &Augmented, dx: &Tensor) -> Result<Augmented> {
    let (f, vjp) = eval_detached(field, &y.h, params, dx, Some(&y.a))?;
    let (gh, gp) = vjp.expect("cotangent supplied");
    Ok(Augmented {
        h: f,
        a: gh.scale(-1.0),
        gp: gp.into_iter().map(|g| g.scale(-1.0)).collect(),
    })
}

fn solve_adjoint<'t, F, D>(
    tape: &'t Tape,
    h0: Var<'t>,
    field: &F,
    params: &[Var<'t>],
    drive: &D,
    grid: Vec<f64>,
) -> Result<Var<'t>>
where
    F: VectorField + Clone + 'static,
    D: Drive + Clone + 'static,
{
    let pvals: Vec<Tensor> = params.iter().map(Var::to_tensor).collect();
    let h1 = rk4_values(field, &pvals, drive, h0.to_tensor(), &grid)?;
    let field = field.clone();
    let drive = drive.clone();
    let h1_saved = h1.clone();
    let backward = move |g: &Tensor| -> Result<Vec<Tensor>> {
        let mut y = Augmented {
            h: h1_saved.clone(),
            a: g.clone(),
            gp: pvals.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        };
        for w in grid.windows(2).rev() {
            // integrate from w[1] down to w[0]
            let (t, dt) = (w[1], w[0] - w[1]);
            let dm = drive.derivative(t + 0.5 * dt)?;
            let k1 = augmented_rhs(&field, &pvals, &y, &drive.derivative(t)?)?;
            let k2 = augmented_rhs(&field, &pvals, &y.plus(0.5 * dt, &k1), &dm)?;
            let k3 = augmented_rhs(&field, &pvals, &y.plus(0.5 * dt, &k2), &dm)?;
            let k4 = augmented_rhs(&field, &pvals, &y.plus(dt, &k3), &drive.derivative(w[0])?)?;
            y.accumulate(dt / 6.0, &k1);
            y.accumulate(dt / 3.0, &k2);
            y.accumulate(dt / 3.0, &k3);
            y.accumulate(dt / 6.0, &k4);
        }
        let mut out = Vec::with_capacity(1 + y.gp.len());
        out.push(y.a);
        out.extend(y.gp);
        Ok(out)
    };
    let mut parents = Vec::with_capacity(1 + params.len());
    parents.push(h0);
    parents.extend_from_slice(params);
    Ok(tape.custom(&parents, h1, backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;

    /// field(h) = w · h, one channel.
    #[derive(Clone)]
    struct Linear;

    impl VectorField for Linear {
        fn eval<'t>(&self, _tape: &'t Tape, h: Var<'t>, p: &[Var<'t>]) -> Result<Var<'t>> {
            let s = h.shape();
            Ok(h.mul(p[0]).reshape(&[s[0], s[1], 1]))
        }
    }

    #[derive(Clone)]
    struct Zero;

    impl VectorField for Zero {
        fn eval<'t>(&self, tape: &'t Tape, h: Var<'t>, _p: &[Var<'t>]) -> Result<Var<'t>> {
            let s = h.shape();
            Ok(tape.constant(Tensor::zeros(&[s[0], s[1], 2])))
        }
    }

    /// tanh(h W) per row, reshaped to hidden × channels.
    #[derive(Clone)]
    struct Mlp {
        hidden: usize,
        channels: usize,
    }

    impl VectorField for Mlp {
        fn eval<'t>(&self, _tape: &'t Tape, h: Var<'t>, p: &[Var<'t>]) -> Result<Var<'t>> {
            let rows = h.shape()[0];
            Ok(h.matmul(p[0])
                .add(p[1])
                .tanh()
                .reshape(&[rows, self.hidden, self.channels]))
        }
    }

    fn square_drive() -> FnDrive {
        FnDrive {
            rows: 1,
            channels: 1,
            deriv: Rc::new(|t| vec![2.0 * t]),
        }
    }

    fn solve_square(steps: usize) -> f64 {
        let tape = Tape::new();
        let h0 = tape.constant(Tensor::new(&[1, 1], vec![1.0]));
        let w = tape.constant(Tensor::scalar(1.0));
        let cfg = SolverConfig {
            steps_per_interval: steps,
            mode: GradMode::Backprop,
        };
        integrate_cde(&tape, h0, &Linear, &[w], &square_drive(), 0.0, 1.0, &cfg)
            .unwrap()
            .item()
    }

    #[test]
    fn exponential_of_control() {
        let e = std::f64::consts::E;
        assert!((solve_square(64) - e).abs() < 1e-4);
    }

    #[test]
    fn fourth_order_convergence() {
        let e = std::f64::consts::E;
        let errs: Vec<f64> = [4, 8, 16, 32].iter().map(|&n| (solve_square(n) - e).abs()).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((12.0..=20.0).contains(&ratio), "ratio {ratio} from {errs:?}");
        }
    }

    #[test]
    fn zero_field_keeps_state() {
        let tape = Tape::new();
        let h0 = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let paths = PathBundle::new(vec![
            ControlPath::fit_indexed(&Tensor::new(&[4, 2], vec![0.0, 1.0, 2.0, 0.5, 1.0, 1.0, 0.0, 3.0])).unwrap(),
            ControlPath::fit_indexed(&Tensor::new(&[4, 2], vec![1.0, 1.0, 0.0, 0.5, 2.0, 1.0, 1.0, 0.0])).unwrap(),
        ])
        .unwrap();
        let h = integrate_cde(&tape, h0, &Zero, &[], &paths, 1.0, 4.0, &SolverConfig::default()).unwrap();
        assert_eq!(h.to_tensor(), h0.to_tensor());
    }

    #[test]
    fn linear_in_initial_state() {
        let run = |scale: f64| {
            let tape = Tape::new();
            let h0 = tape.constant(Tensor::new(&[1, 2], vec![0.3 * scale, -0.8 * scale]));
            let w = tape.constant(Tensor::vector(&[0.7, -0.4]));
            integrate_cde(
                &tape,
                h0,
                &Linear,
                &[w],
                &square_drive(),
                0.0,
                1.0,
                &SolverConfig::default(),
            )
            .unwrap()
            .to_tensor()
        };
        let one = run(1.0);
        let three = run(3.0);
        for (a, b) in one.data().iter().zip(three.data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors_surface() {
        let tape = Tape::new();
        let h0 = tape.constant(Tensor::new(&[1, 1], vec![1.0]));
        let w = tape.constant(Tensor::scalar(1.0));
        let cfg = SolverConfig::default();
        assert!(integrate_cde(&tape, h0, &Linear, &[w], &square_drive(), 1.0, 1.0, &cfg).is_err());
        let bad = SolverConfig {
            steps_per_interval: 0,
            ..cfg
        };
        assert!(integrate_cde(&tape, h0, &Linear, &[w], &square_drive(), 0.0, 1.0, &bad).is_err());
        let w = tape.constant(Tensor::scalar(1e200));
        let err = integrate_cde(&tape, h0, &Linear, &[w], &square_drive(), 0.0, 1.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }

    fn loss_grads(mode: GradMode, params: &[Tensor], h0: &Tensor, paths: &PathBundle) -> Vec<Tensor> {
        let tape = Tape::new();
        let hv = tape.param(h0.clone());
        let pv: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let field = Mlp { hidden: 2, channels: 2 };
        let cfg = SolverConfig {
            steps_per_interval: 4,
            mode,
        };
        let h = integrate_cde(&tape, hv, &field, &pv, paths, 1.0, 5.0, &cfg).unwrap();
        let target = tape.constant(Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 0.4]));
        let loss = h.mse(target);
        let mut all = vec![hv];
        all.extend(pv);
        grad(loss, &all).unwrap()
    }

    #[test]
    fn adjoint_matches_backprop() {
        let params = vec![
            Tensor::new(&[2, 4], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25, 0.05, -0.3]),
            Tensor::vector(&[0.1, -0.05, 0.02, 0.2]),
        ];
        let h0 = Tensor::new(&[2, 2], vec![0.2, -0.1, 0.4, 0.3]);
        let paths = PathBundle::new(vec![
            ControlPath::fit_indexed(&Tensor::new(
                &[5, 2],
                vec![0.0, 0.1, 0.3, 0.2, 0.5, 0.6, 0.4, 0.9, 0.8, 1.0],
            ))
            .unwrap(),
            ControlPath::fit_indexed(&Tensor::new(
                &[5, 2],
                vec![1.0, 0.0, 0.7, 0.2, 0.6, 0.1, 0.2, 0.5, 0.1, 0.4],
            ))
            .unwrap(),
        ])
        .unwrap();
        let bp = loss_grads(GradMode::Backprop, &params, &h0, &paths);
        let adj = loss_grads(GradMode::Adjoint, &params, &h0, &paths);
        for (a, b) in bp.iter().zip(&adj) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() / (x.abs() + 1e-12) < 1e-4, "{x} vs {y}");
            }
        }
    }
}
