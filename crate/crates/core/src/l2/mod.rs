//! Parameter-generating layer: per-node queries from a series
//! representation, refined over the target's parameter graph, then used
//! as attention over a bank of candidate parameter sets.

mod graph_fn;

pub use graph_fn::{gat_head, sym_normalize, GraphFn, GraphFnDims, GraphFnKind, LEAKY_SLOPE};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier, Bound, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::target::ParamGraph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2Config {
    pub query_dim: usize,
    pub refined_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    pub candidates: usize,
    pub graph_fn: GraphFnKind,
    /// Node-embedding size when `graph_fn` is AGC.
    pub embed_dim: usize,
}

impl Default for L2Config {
    fn default() -> Self {
        Self {
            query_dim: 512,
            refined_dim: 128,
            heads: 4,
            layers: 3,
            hidden: 128,
            candidates: 3,
            graph_fn: GraphFnKind::Gat,
            embed_dim: 16,
        }
    }
}

impl L2Config {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Invalid("candidate count must be at least 1".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "hidden size {} must split evenly over {} heads",
                self.hidden, self.heads
            )));
        }
        if self.query_dim == 0 || self.refined_dim == 0 || self.layers == 0 || self.embed_dim == 0 {
            return Err(Error::Invalid(format!("L2 sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `softmax(q θ_F)` for one node; `q` is `1 × dim(q)`, the key `dim(q) × C`.
pub fn attention_coeffs<'t>(q: Var<'t>, key: Var<'t>) -> Var<'t> {
    q.matmul(key).softmax()
}

/// `Σ_c a_c θ̃_c` reshaped to `shape`; `a` is `1 × C`, `cands` is `C × numel`.
pub fn assemble<'t>(a: Var<'t>, cands: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let (as_, cs) = (a.shape(), cands.shape());
    let numel: usize = shape.iter().product();
    if as_.len() != 2 || as_[0] != 1 || cs.len() != 2 || as_[1] != cs[0] || cs[1] != numel {
        return Err(Error::Shape(format!(
            "coefficients {as_:?} and candidates {cs:?} cannot form {shape:?}"
        )));
    }
    Ok(a.matmul(cands).reshape(shape))
}

/// Index of the largest coefficient; ties go to the lowest index.
pub fn argmax_index(a: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in a.iter().enumerate() {
        if v > a[best] {
            best = c;
        }
    }
    best
}

/// The selected candidate, verbatim; gradients reach only that row.
pub fn select<'t>(cands: Var<'t>, index: usize, shape: &[usize]) -> Var<'t> {
    cands.slice(0, index, 1).reshape(shape)
}

/// Generated parameters for one series.
pub struct Generated<'t> {
    pub coeffs: Vec<Var<'t>>,
    pub blended: Vec<Var<'t>>,
    pub selected: Vec<Var<'t>>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct L2 {
    pub cfg: L2Config,
    shapes: Vec<Vec<usize>>,
    phi: ParamId,
    graph_fn: GraphFn,
    keys: Vec<ParamId>,
    cands: Vec<ParamId>,
}

impl L2 {
    pub fn new(
        cfg: L2Config,
        graph: &ParamGraph,
        input_dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = graph.len();
        let phi = store.xavier("l2.phi", &[input_dim, n * cfg.query_dim], rng);
        let dims = GraphFnDims {
            input: cfg.query_dim,
            hidden: cfg.hidden,
            output: cfg.refined_dim,
            layers: cfg.layers,
            heads: cfg.heads,
            embed: cfg.embed_dim,
        };
        let graph_fn = GraphFn::new(cfg.graph_fn, &graph.adjacency(), dims, store, rng)?;
        let mut keys = Vec::with_capacity(n);
        let mut cands = Vec::with_capacity(n);
        for node in &graph.nodes {
            keys.push(store.xavier(format!("l2.key.{}", node.name), &[cfg.refined_dim, cfg.candidates], rng));
            let mut data = Vec::with_capacity(cfg.candidates * node.numel());
            for _ in 0..cfg.candidates {
                if node.is_bias() {
                    data.extend(std::iter::repeat(0.0).take(node.numel()));
                } else {
                    data.extend(xavier(&node.shape, rng).into_data());
                }
            }
            cands.push(store.add(
                format!("l2.cand.{}", node.name),
                Tensor::new(&[cfg.candidates, node.numel()], data),
            ));
        }
        Ok(Self {
            cfg,
            shapes: graph.nodes.iter().map(|n| n.shape.clone()).collect(),
            phi,
            graph_fn,
            keys,
            cands,
        })
    }

    pub fn nodes(&self) -> usize {
        self.shapes.len()
    }

    pub fn graph_fn(&self) -> &GraphFn {
        &self.graph_fn
    }

    /// `L × dim(z)` initial queries from a `1 × dim(h')` representation.
    pub fn initial_queries<'t>(&self, bound: &Bound<'t>, h: Var<'t>) -> Var<'t> {
        h.matmul(bound.get(self.phi))
            .reshape(&[self.nodes(), self.cfg.query_dim])
    }

    pub fn refine<'t>(&self, bound: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.graph_fn.apply(bound, z)
    }

    pub fn generate<'t>(&self, bound: &Bound<'t>, h: Var<'t>) -> Result<Generated<'t>> {
        let q = self.refine(bound, self.initial_queries(bound, h))?;
        let n = self.nodes();
        let mut out = Generated {
            coeffs: Vec::with_capacity(n),
            blended: Vec::with_capacity(n),
            selected: Vec::with_capacity(n),
            indices: Vec::with_capacity(n),
        };
        for l in 0..n {
            let a = attention_coeffs(q.row(l), bound.get(self.keys[l]));
            let cands = bound.get(self.cands[l]);
            let shape = &self.shapes[l];
            let idx = argmax_index(a.value().data());
            out.blended.push(assemble(a, cands, shape)?);
            out.selected.push(select(cands, idx, shape));
            out.indices.push(idx);
            out.coeffs.push(a);
        }
        Ok(out)
    }
}
