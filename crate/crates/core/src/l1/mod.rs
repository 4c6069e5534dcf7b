//! Shared multi-task layer: per-series initial embeddings and a joint
//! neural CDE over all series whose vector field mixes series through an
//! adaptive graph convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::path::{integrate_cde, ControlPath, PathBundle, SolverConfig, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L1Config {
    pub series: usize,
    pub hidden: usize,
    pub gamma_hidden: usize,
    pub gamma_depth: usize,
    pub embed_dim: usize,
    /// Series coupling in the field; off gives `Â = 0`.
    pub use_agc: bool,
}

impl Default for L1Config {
    /// `series` is filled in from the corpus.
    fn default() -> Self {
        Self::new(0)
    }
}

impl L1Config {
    pub fn new(series: usize) -> Self {
        Self {
            series,
            hidden: 32,
            gamma_hidden: 32,
            gamma_depth: 2,
            embed_dim: 32,
            use_agc: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.series == 0 {
            return Err(Error::Invalid("L1 needs at least one series".into()));
        }
        if self.hidden == 0 || self.gamma_hidden == 0 || self.gamma_depth == 0 || self.embed_dim == 0 {
            return Err(Error::Invalid(format!("L1 sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `Â = row-softmax(ReLU(E Eᵀ))`.
pub fn agc_adjacency<'t>(e: Var<'t>) -> Var<'t> {
    e.matmul(e.t()).relu().softmax()
}

/// `(I + Â) Z W + b` for a precomputed `Â`.
pub fn agc_with<'t>(z: Var<'t>, adj: Option<Var<'t>>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    let zw = z.matmul(w);
    let mixed = match adj {
        Some(a) => zw.add(a.matmul(zw)),
        None => zw,
    };
    mixed.add(b)
}

pub fn agc<'t>(z: Var<'t>, e: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (zs, es) = (z.shape(), e.shape());
    if zs.len() != 2 || es.len() != 2 || zs[0] == 0 || zs[0] != es[0] {
        return Err(Error::Shape(format!(
            "agc needs Z [M, d] and E [M, d_e], got {zs:?}, {es:?}"
        )));
    }
    Ok(agc_with(z, Some(agc_adjacency(e)), w, b))
}

/// The graph vector field `G`. Parameters: `[E?, W1, b1, W2, b2, Wo, bo]`,
/// with `E` present only when coupling is on.
#[derive(Clone, Copy, Debug)]
pub struct GraphField {
    pub channels: usize,
    pub use_agc: bool,
}

impl VectorField for GraphField {
    fn eval<'t>(&self, _tape: &'t Tape, h: Var<'t>, p: &[Var<'t>]) -> Result<Var<'t>> {
        let (adj, p) = if self.use_agc {
            (Some(agc_adjacency(p[0])), &p[1..])
        } else {
            (None, p)
        };
        let (m, hidden) = (h.shape()[0], h.shape()[1]);
        let z = agc_with(h, adj, p[0], p[1]).tanh();
        let z = agc_with(z, adj, p[2], p[3]).tanh();
        Ok(z.matmul(p[4]).add(p[5]).tanh().reshape(&[m, hidden, self.channels]))
    }
}

#[derive(Clone, Debug)]
pub struct L1 {
    pub cfg: L1Config,
    pub input_dim: usize,
    gamma: Vec<Vec<(ParamId, ParamId)>>,
    field: Vec<ParamId>,
}

impl L1 {
    pub fn new(cfg: L1Config, input_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut gamma = Vec::with_capacity(cfg.series);
        for i in 0..cfg.series {
            let mut layers = Vec::with_capacity(cfg.gamma_depth);
            for l in 0..cfg.gamma_depth {
                let fan_in = if l == 0 { input_dim } else { cfg.gamma_hidden };
                let fan_out = if l + 1 == cfg.gamma_depth {
                    cfg.hidden
                } else {
                    cfg.gamma_hidden
                };
                let w = store.xavier(format!("l1.gamma{i}.w{l}"), &[fan_in, fan_out], rng);
                let b = store.zeros(format!("l1.gamma{i}.b{l}"), &[fan_out]);
                layers.push((w, b));
            }
            gamma.push(layers);
        }
        let h = cfg.hidden;
        let mut field = Vec::new();
        if cfg.use_agc {
            field.push(store.xavier("l1.field.embed", &[cfg.series, cfg.embed_dim], rng));
        }
        for (l, out) in [(1, h), (2, h), (3, h * input_dim)] {
            let name = if l == 3 { "out".to_string() } else { format!("agc{l}") };
            field.push(store.xavier(format!("l1.field.{name}.w"), &[h, out], rng));
            field.push(store.zeros(format!("l1.field.{name}.b"), &[out]));
        }
        Ok(Self {
            cfg,
            input_dim,
            gamma,
            field,
        })
    }

    pub fn field(&self) -> GraphField {
        GraphField {
            channels: self.input_dim,
            use_agc: self.cfg.use_agc,
        }
    }

    pub fn field_ids(&self) -> &[ParamId] {
        &self.field
    }

    pub fn field_params<'t>(&self, bound: &Bound<'t>) -> Vec<Var<'t>> {
        self.field.iter().map(|&id| bound.get(id)).collect()
    }

    /// `Γ_i(x_i(1))` stacked over series: `M × dim(h')`.
    pub fn embed_initial<'t>(&self, bound: &Bound<'t>, x_first: Var<'t>) -> Result<Var<'t>> {
        let s = x_first.shape();
        if s != [self.cfg.series, self.input_dim] {
            return Err(Error::Shape(format!(
                "initial observations {s:?}, expected [{}, {}]",
                self.cfg.series, self.input_dim
            )));
        }
        let tape = x_first.tape();
        let rows: Vec<Var> = self
            .gamma
            .iter()
            .enumerate()
            .map(|(i, layers)| {
                let mut z = x_first.row(i);
                for (l, &(w, b)) in layers.iter().enumerate() {
                    z = z.matmul(bound.get(w)).add(bound.get(b));
                    if l + 1 < layers.len() {
                        z = z.tanh();
                    }
                }
                z
            })
            .collect();
        Ok(tape.concat(&rows, 0))
    }

    /// Jointly encodes the series (each `T × dim(x)`, the K input periods
    /// concatenated) into final states `M × dim(h')`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        series: &[Tensor],
        solver: &SolverConfig,
    ) -> Result<Var<'t>> {
        if series.len() != self.cfg.series {
            return Err(Error::Shape(format!(
                "{} series given, L1 built for {}",
                series.len(),
                self.cfg.series
            )));
        }
        let len = series[0].shape()[0];
        for (i, s) in series.iter().enumerate() {
            if s.ndim() != 2 || s.shape()[0] != len || s.shape()[1] != self.input_dim {
                return Err(Error::Shape(format!(
                    "series {i} is {:?}; all series need equal length T and dim(x) = {}",
                    s.shape(),
                    self.input_dim
                )));
            }
        }
        if len < 2 {
            return Err(Error::Invalid(format!("encoding needs T >= 2 observations, got {len}")));
        }
        let first: Vec<f64> = series.iter().flat_map(|s| s.row(0).to_vec()).collect();
        let x1 = tape.constant(Tensor::new(&[series.len(), self.input_dim], first));
        let h0 = self.embed_initial(bound, x1)?;
        let paths = PathBundle::new(
            series
                .iter()
                .map(ControlPath::fit_indexed)
                .collect::<Result<Vec<_>>>()?,
        )?;
        let params = self.field_params(bound);
        integrate_cde(
            tape,
            h0,
            &self.field(),
            &params,
            &paths,
            paths.start(),
            paths.end(),
            solver,
        )
    }
}

#[cfg(test)]
mod tests;
