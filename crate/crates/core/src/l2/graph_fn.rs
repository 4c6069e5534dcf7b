use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::l1::{agc_adjacency, agc_with};

pub const LEAKY_SLOPE: f64 = 0.2;
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFnKind {
    Gat,
    Gcn,
    Agc,
}

impl GraphFnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphFnKind::Gat => "gat",
            GraphFnKind::Gcn => "gcn",
            GraphFnKind::Agc => "agc",
        }
    }
}

impl fmt::Display for GraphFnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphFnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(GraphFnKind::Gat),
            "gcn" => Ok(GraphFnKind::Gcn),
            "agc" => Ok(GraphFnKind::Agc),
            other => Err(Error::Invalid(format!("unknown graph function `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
struct GatHead {
    w: ParamId,
    src: ParamId,
    dst: ParamId,
}

#[derive(Clone, Debug)]
struct GatLayer {
    heads: Vec<GatHead>,
    bias: ParamId,
    last: bool,
}

#[derive(Clone, Debug)]
enum Layers {
    Gat(Vec<GatLayer>),
    Gcn(Vec<(ParamId, ParamId)>),
    Agc {
        embed: ParamId,
        layers: Vec<(ParamId, ParamId)>,
    },
}

/// Query refinement over the parameter graph.
#[derive(Clone, Debug)]
pub struct GraphFn {
    pub kind: GraphFnKind,
    mask: Tensor,
    norm_adj: Tensor,
    layers: Layers,
}

/// Sizes shared by all graph-function kinds.
#[derive(Clone, Copy, Debug)]
pub struct GraphFnDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed: usize,
}

fn check_adjacency(adj: &Tensor) -> Result<usize> {
    if adj.ndim() != 2 || adj.rows() != adj.cols() {
        return Err(Error::Shape(format!("adjacency must be square, got {:?}", adj.shape())));
    }
    if adj.rows() == 0 {
        return Err(Error::Invalid("graph function over an empty graph".into()));
    }
    Ok(adj.rows())
}

/// `D^{-1/2} (A ∨ I) D^{-1/2}`.
pub fn sym_normalize(adj: &Tensor) -> Tensor {
    let n = adj.rows();
    let mut a = adj.clone();
    for i in 0..n {
        a.data_mut()[i * n + i] = 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>().sqrt().recip()).collect();
    for i in 0..n {
        for j in 0..n {
            a.data_mut()[i * n + j] *= d[i] * d[j];
        }
    }
    a
}

impl GraphFn {
    pub fn new(
        kind: GraphFnKind,
        adj: &Tensor,
        dims: GraphFnDims,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = check_adjacency(adj)?;
        if dims.layers == 0 || dims.heads == 0 || dims.hidden % dims.heads != 0 {
            return Err(Error::Invalid(format!(
                "graph function needs layers >= 1 and hidden divisible by heads: {dims:?}"
            )));
        }
        let width = |l: usize| {
            (
                if l == 0 { dims.input } else { dims.hidden },
                if l + 1 == dims.layers { dims.output } else { dims.hidden },
            )
        };
        let layers = match kind {
            GraphFnKind::Gat => Layers::Gat(
                (0..dims.layers)
                    .map(|l| {
                        let (fan_in, fan_out) = width(l);
                        let last = l + 1 == dims.layers;
                        let per_head = if last { fan_out } else { fan_out / dims.heads };
                        let heads = (0..dims.heads)
                            .map(|h| GatHead {
                                w: store.xavier(format!("l2.gat{l}.h{h}.w"), &[fan_in, per_head], rng),
                                src: store.xavier(format!("l2.gat{l}.h{h}.src"), &[per_head, 1], rng),
                                dst: store.xavier(format!("l2.gat{l}.h{h}.dst"), &[per_head, 1], rng),
                            })
                            .collect();
                        let bias = store.zeros(format!("l2.gat{l}.b"), &[fan_out]);
                        GatLayer { heads, bias, last }
                    })
                    .collect(),
            ),
            GraphFnKind::Gcn | GraphFnKind::Agc => {
                let prefix = if kind == GraphFnKind::Gcn { "l2.gcn" } else { "l2.agc" };
                let embed = (kind == GraphFnKind::Agc).then(|| store.xavier("l2.agc.embed", &[n, dims.embed], rng));
                let layers = (0..dims.layers)
                    .map(|l| {
                        let (fan_in, fan_out) = width(l);
                        (
                            store.xavier(format!("{prefix}{l}.w"), &[fan_in, fan_out], rng),
                            store.zeros(format!("{prefix}{l}.b"), &[fan_out]),
                        )
                    })
                    .collect();
                match embed {
                    Some(embed) => Layers::Agc { embed, layers },
                    None => Layers::Gcn(layers),
                }
            }
        };
        let mut mask = adj.map(|v| if v != 0.0 { 0.0 } else { MASKED });
        for i in 0..n {
            mask.data_mut()[i * n + i] = 0.0;
        }
        Ok(Self {
            kind,
            mask,
            norm_adj: sym_normalize(adj),
            layers,
        })
    }

    pub fn nodes(&self) -> usize {
        self.mask.rows()
    }

    /// Refines `L × input` queries into `L × output`.
    pub fn apply<'t>(&self, bound: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        if z.shape().len() != 2 || z.shape()[0] != self.nodes() {
            return Err(Error::Shape(format!(
                "queries {:?} for a {}-node graph",
                z.shape(),
                self.nodes()
            )));
        }
        let tape = z.tape();
        let mut x = z;
        match &self.layers {
            Layers::Gat(layers) => {
                let mask = tape.constant(self.mask.clone());
                for layer in layers {
                    let outs: Vec<Var> = layer
                        .heads
                        .iter()
                        .map(|h| gat_head(x, bound.get(h.w), bound.get(h.src), bound.get(h.dst), mask))
                        .collect();
                    x = if layer.last {
                        let mut acc = outs[0];
                        for o in &outs[1..] {
                            acc = acc.add(*o);
                        }
                        acc.scale(1.0 / outs.len() as f64).add(bound.get(layer.bias))
                    } else {
                        tape.concat(&outs, 1).add(bound.get(layer.bias)).tanh()
                    };
                }
            }
            Layers::Gcn(layers) => {
                let a = tape.constant(self.norm_adj.clone());
                for (l, &(w, b)) in layers.iter().enumerate() {
                    x = a.matmul(x.matmul(bound.get(w))).add(bound.get(b));
                    if l + 1 < layers.len() {
                        x = x.tanh();
                    }
                }
            }
            Layers::Agc { embed, layers } => {
                let adj = agc_adjacency(bound.get(*embed));
                for (l, &(w, b)) in layers.iter().enumerate() {
                    x = agc_with(x, Some(adj), bound.get(w), bound.get(b));
                    if l + 1 < layers.len() {
                        x = x.tanh();
                    }
                }
            }
        }
        Ok(x)
    }
}

/// One attention head: `softmax_j(LeakyReLU(s_i + d_j) + mask_ij) · (Z W)`.
pub fn gat_head<'t>(z: Var<'t>, w: Var<'t>, src: Var<'t>, dst: Var<'t>, mask: Var<'t>) -> Var<'t> {
    let wh = z.matmul(w);
    let s = wh.matmul(src);
    let d = wh.matmul(dst).t();
    let e = s.add(d).leaky_relu(LEAKY_SLOPE).add(mask);
    e.softmax().matmul(wh)
}
