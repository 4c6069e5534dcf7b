//! GRU whose gate weights are rescaled at every step by a smaller GRU
//! running on `x ⊕ h`.

use rand::Rng;

use crate::autodiff::{xavier, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::target::Gate;

pub const LN_EPS: f64 = 1e-5;

const GATES: [&str; 3] = ["r", "z", "g"];
const SCALED: [&str; 3] = ["h", "x", "b"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperGruDims {
    pub input: usize,
    pub hidden: usize,
    /// Size of the hyper state `ĥ`.
    pub hyper: usize,
    /// Size of the embeddings `a`.
    pub embed: usize,
}

impl HyperGruDims {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.hyper == 0 || self.embed == 0 {
            return Err(Error::Invalid(format!("HyperGRU sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(name, shape)` of every cell tensor, in the order [`HyperCell::from_slice`] reads.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (dx, dh, dq, da) = (self.input, self.hidden, self.hyper, self.embed);
        let mut out = Vec::new();
        for y in GATES {
            out.push((format!("{y}.w_x"), vec![dx, dh]));
            out.push((format!("{y}.w_h"), vec![dh, dh]));
            out.push((format!("{y}.b"), vec![dh]));
        }
        for y in GATES {
            out.push((format!("hyper.{y}.w_x"), vec![dx + dh, dq]));
            out.push((format!("hyper.{y}.w_h"), vec![dq, dq]));
            out.push((format!("hyper.{y}.b"), vec![dq]));
        }
        for k in SCALED {
            for y in GATES {
                out.push((format!("emb.{k}.{y}.w"), vec![dq, da]));
                out.push((format!("emb.{k}.{y}.b"), vec![da]));
                out.push((format!("scale.{k}.{y}.w"), vec![da, dh]));
                out.push((format!("scale.{k}.{y}.b"), vec![dh]));
            }
        }
        for part in ["ln", "hyper.ln"] {
            let n = if part == "ln" { dh } else { dq };
            for y in GATES {
                out.push((format!("{part}.{y}.gain"), vec![n]));
                out.push((format!("{part}.{y}.bias"), vec![n]));
            }
        }
        out
    }

    /// Xavier matrices and zero biases, except that scalings start at one
    /// (`scale.*.w = 0`, `scale.*.b = 1`) and layer-norm gains at one.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<(String, Tensor)> {
        self.layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.starts_with("scale.") && name.ends_with(".w") {
                    Tensor::zeros(&shape)
                } else if (name.starts_with("scale.") && name.ends_with(".b")) || name.ends_with(".gain") {
                    Tensor::new(&shape, vec![1.0; shape[0]])
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    xavier(&shape, rng)
                };
                (name, t)
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
struct Affine<'t> {
    w: Var<'t>,
    b: Var<'t>,
}

impl<'t> Affine<'t> {
    fn apply(&self, x: Var<'t>) -> Var<'t> {
        x.matmul(self.w).add(self.b)
    }
}

#[derive(Clone, Copy)]
struct Norm<'t> {
    gain: Var<'t>,
    bias: Var<'t>,
}

/// One HyperGRU cell bound to tape variables.
#[derive(Clone)]
pub struct HyperCell<'t> {
    main: [Gate<'t>; 3],
    hyper: [Gate<'t>; 3],
    /// `[k][y]`: embedding map then scaling map, `k ∈ {h, x, b}`.
    scale: [[(Affine<'t>, Affine<'t>); 3]; 3],
    ln: [Norm<'t>; 3],
    hyper_ln: [Norm<'t>; 3],
    /// Off replaces every layer norm by the identity.
    pub layer_norm: bool,
}

impl<'t> HyperCell<'t> {
    pub fn from_slice(p: &[Var<'t>]) -> Self {
        let gate = |o: usize| Gate::from_slice(&p[o..o + 3]);
        let aff = |o: usize| Affine { w: p[o], b: p[o + 1] };
        let norm = |o: usize| Norm {
            gain: p[o],
            bias: p[o + 1],
        };
        let scale = std::array::from_fn(|k| {
            std::array::from_fn(|y| {
                let o = 18 + (k * 3 + y) * 4;
                (aff(o), aff(o + 2))
            })
        });
        Self {
            main: std::array::from_fn(|y| gate(3 * y)),
            hyper: std::array::from_fn(|y| gate(9 + 3 * y)),
            scale,
            ln: std::array::from_fn(|y| norm(54 + 2 * y)),
            hyper_ln: std::array::from_fn(|y| norm(60 + 2 * y)),
            layer_norm: true,
        }
    }

    fn norm(&self, v: Var<'t>, n: Norm<'t>) -> Var<'t> {
        if self.layer_norm {
            v.layer_norm(LN_EPS).mul(n.gain).add(n.bias)
        } else {
            v
        }
    }

    /// Scalings `d^{k,y}` from the previous hyper state.
    fn d(&self, hh: Var<'t>, k: usize, y: usize) -> Var<'t> {
        let (emb, out) = self.scale[k][y];
        out.apply(emb.apply(hh))
    }

    /// Batched step on rows of `x`, `h` and `ĥ`; returns `(h', ĥ')`.
    pub fn step(&self, x: Var<'t>, h: Var<'t>, hh: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape = x.tape();
        let xh = tape.concat(&[x, h], 1);
        let hg = &self.hyper;
        let hr = self
            .norm(
                xh.matmul(hg[0].w_x).add(hh.matmul(hg[0].w_h)).add(hg[0].b),
                self.hyper_ln[0],
            )
            .sigmoid();
        let hz = self
            .norm(
                xh.matmul(hg[1].w_x).add(hh.matmul(hg[1].w_h)).add(hg[1].b),
                self.hyper_ln[1],
            )
            .sigmoid();
        let hc = self
            .norm(
                xh.matmul(hg[2].w_x).add(hr.mul(hh.matmul(hg[2].w_h))).add(hg[2].b),
                self.hyper_ln[2],
            )
            .tanh();
        let hh_next = hz.rsub_scalar(1.0).mul(hc).add(hz.mul(hh));

        // k index: 0 = h, 1 = x, 2 = b
        let pre = |y: usize, r: Option<Var<'t>>| {
            let g = self.main[y];
            let wx = self.d(hh, 1, y).mul(x.matmul(g.w_x));
            let mut wh = self.d(hh, 0, y).mul(h.matmul(g.w_h));
            if let Some(r) = r {
                wh = r.mul(wh);
            }
            wx.add(wh).add(self.d(hh, 2, y).mul(g.b))
        };
        let r = self.norm(pre(0, None), self.ln[0]).sigmoid();
        let z = self.norm(pre(1, None), self.ln[1]).sigmoid();
        let g = self.norm(pre(2, Some(r)), self.ln[2]).tanh();
        (z.rsub_scalar(1.0).mul(g).add(z.mul(h)), hh_next)
    }
}

/// One HyperGRU step on vectors. `p` follows [`HyperGruDims::layout`].
pub fn hypergru_step(
    x: &Tensor,
    h: &Tensor,
    hh: &Tensor,
    p: &[Tensor],
    dims: &HyperGruDims,
    layer_norm: bool,
) -> Result<(Tensor, Tensor)> {
    dims.validate()?;
    let layout = dims.layout();
    if p.len() != layout.len() {
        return Err(Error::Shape(format!(
            "expected {} HyperGRU tensors, got {}",
            layout.len(),
            p.len()
        )));
    }
    for ((name, shape), t) in layout.iter().zip(p) {
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("`{name}` is {:?}, expected {shape:?}", t.shape())));
        }
    }
    for (v, n, what) in [(x, dims.input, "x"), (h, dims.hidden, "h"), (hh, dims.hyper, "ĥ")] {
        if v.len() != n || v.ndim() != 1 {
            return Err(Error::Shape(format!("{what} is {:?}, expected [{n}]", v.shape())));
        }
    }
    let tape = Tape::new();
    let row = |v: &Tensor| tape.constant(v.clone().reshaped(&[1, v.len()]));
    let vars: Vec<Var> = p.iter().map(|t| tape.constant(t.clone())).collect();
    let mut cell = HyperCell::from_slice(&vars);
    cell.layer_norm = layer_norm;
    let (h2, hh2) = cell.step(row(x), row(h), row(hh));
    Ok((
        h2.to_tensor().reshaped(&[dims.hidden]),
        hh2.to_tensor().reshaped(&[dims.hyper]),
    ))
}
