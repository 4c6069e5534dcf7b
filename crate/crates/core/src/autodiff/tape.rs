//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends one node to its [`Tape`]. Parents
//! always precede children, so a single reverse sweep over the node list
//! visits each node exactly once.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{broadcast_map, broadcast_shape, matmul_into, matmul_nt_into, matmul_tn_into, numel, Tensor};
use crate::error::{Error, Result};

type CustomBackward = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { src: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Softmax(usize),
    LayerNorm { src: usize, eps: f64 },
    BroadcastTo(usize),
    Custom(Vec<usize>, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an operation whose backward rule is supplied by the caller.
    /// `backward` maps the output cotangent to one cotangent per parent.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Result<Vec<Tensor>> + 'static,
    ) -> Var<'t> {
        let rg = parents.iter().any(|p| self.rg(p.id));
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, Op::Custom(ids, Box::new(backward)), rg)
    }

    /// Concatenates along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].id].value;
            let mut shape = first.shape().to_vec();
            assert!(axis < shape.len(), "concat axis out of range");
            let outer: usize = shape[..axis].iter().product();
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                assert_eq!(s.len(), shape.len(), "concat rank mismatch");
                for (d, (&x, &y)) in s.iter().zip(&shape).enumerate() {
                    assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {shape:?}");
                }
                total += s[axis];
            }
            shape[axis] = total;
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk: usize = v.shape()[axis..].iter().product();
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&shape, data)
        };
        let rg = parts.iter().any(|p| self.rg(p.id));
        self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg)
    }

    /// Full backward sweep from a scalar.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let shape = loss.shape();
        if numel(&shape) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {shape:?}"
            )));
        }
        self.backward_with(loss, Tensor::ones(&shape))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back through the tape.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            seed.shape(),
            nodes[output.id].value.shape(),
            "seed shape must match output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = local_backward(&nodes, node, &g)?;
            for (pid, pg) in contributions {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate_broadcast(g: &Tensor, in_shape: &[usize]) -> Tensor {
    if g.shape() == in_shape {
        return g.clone();
    }
    let map = broadcast_map(in_shape, g.shape());
    let mut out = vec![0.0; numel(in_shape)];
    for (k, &src) in map.iter().enumerate() {
        out[src] += g.data()[k];
    }
    Tensor::new(in_shape, out)
}

fn local_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| &nodes[id].value;
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (*a, accumulate_broadcast(g, val(*a).shape())),
            (*b, accumulate_broadcast(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, accumulate_broadcast(g, val(*a).shape())),
            (*b, accumulate_broadcast(&g.scale(-1.0), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = g.zip_map(&broadcast_value(vb, g.shape()), |x, y| x * y);
            let gb = g.zip_map(&broadcast_value(va, g.shape()), |x, y| x * y);
            vec![
                (*a, accumulate_broadcast(&ga, va.shape())),
                (*b, accumulate_broadcast(&gb, vb.shape())),
            ]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let bb = broadcast_value(vb, g.shape());
            let ga = g.zip_map(&bb, |x, y| x / y);
            // d(a/b)/db = -out / b
            let gb = g.zip_map(&out.zip_map(&bb, |o, y| -o / y), |x, y| x * y);
            vec![
                (*a, accumulate_broadcast(&ga, va.shape())),
                (*b, accumulate_broadcast(&gb, vb.shape())),
            ]
        }
        Op::Scale(a, s) => vec![(*a, g.scale(*s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |x, y| x * y * (1.0 - y)))],
        Op::Tanh(a) => vec![(*a, g.zip_map(out, |x, y| x * (1.0 - y * y)))],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }))],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n, k, m) = (va.rows(), va.cols(), vb.cols());
            let mut ga = vec![0.0; n * k];
            matmul_nt_into(g.data(), vb.data(), &mut ga, n, m, k);
            let mut gb = vec![0.0; k * m];
            matmul_tn_into(va.data(), g.data(), &mut gb, n, k, m);
            vec![(*a, Tensor::new(&[n, k], ga)), (*b, Tensor::new(&[k, m], gb))]
        }
        Op::Transpose(a) => vec![(*a, g.t())],
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape()))],
        Op::Concat(parts, axis) => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let out_chunk: usize = out.shape()[*axis..].iter().product();
            let mut res = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let s = val(p).shape();
                let chunk: usize = s[*axis..].iter().product();
                let mut data = Vec::with_capacity(numel(s));
                for o in 0..outer {
                    let base = o * out_chunk + offset;
                    data.extend_from_slice(&g.data()[base..base + chunk]);
                }
                offset += chunk;
                res.push((p, Tensor::new(s, data)));
            }
            res
        }
        Op::Slice { src, axis, start } => {
            let s = val(*src).shape();
            let mut gi = vec![0.0; numel(s)];
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let len = out.shape()[*axis];
            for o in 0..outer {
                let src_base = (o * s[*axis] + start) * inner;
                let dst_base = o * len * inner;
                gi[src_base..src_base + len * inner].copy_from_slice(&g.data()[dst_base..dst_base + len * inner]);
            }
            vec![(*src, Tensor::new(s, gi))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let s = val(*a).shape();
            vec![(*a, Tensor::full(s, g.item() / numel(s) as f64))]
        }
        Op::SumLast(a) => {
            let s = val(*a).shape();
            let last = *s.last().unwrap();
            let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(last)).collect();
            vec![(*a, Tensor::new(s, data))]
        }
        Op::Softmax(a) => {
            let last = *out.shape().last().unwrap();
            let mut gi = vec![0.0; out.len()];
            for (r, (yo, go)) in out.data().chunks(last).zip(g.data().chunks(last)).enumerate() {
                let dot: f64 = yo.iter().zip(go).map(|(y, gg)| y * gg).sum();
                for j in 0..last {
                    gi[r * last + j] = yo[j] * (go[j] - dot);
                }
            }
            vec![(*a, Tensor::new(out.shape(), gi))]
        }
        Op::LayerNorm { src, eps } => {
            let x = val(*src);
            let last = *x.shape().last().unwrap();
            let n = last as f64;
            let mut gi = vec![0.0; x.len()];
            for (r, (xr, gr)) in x.data().chunks(last).zip(g.data().chunks(last)).enumerate() {
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                let gsum: f64 = gr.iter().sum();
                let gxs: f64 = gr.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for j in 0..last {
                    gi[r * last + j] = inv / n * (n * gr[j] - gsum - xhat[j] * gxs);
                }
            }
            vec![(*src, Tensor::new(x.shape(), gi))]
        }
        Op::BroadcastTo(a) => vec![(*a, accumulate_broadcast(g, val(*a).shape()))],
        Op::Custom(parents, f) => {
            let gs = f(g)?;
            if gs.len() != parents.len() {
                return Err(Error::Contract(format!(
                    "custom backward returned {} gradients for {} parents",
                    gs.len(),
                    parents.len()
                )));
            }
            parents.iter().copied().zip(gs).collect()
        }
    })
}

fn broadcast_value(v: &Tensor, shape: &[usize]) -> Tensor {
    if v.shape() == shape {
        return v.clone();
    }
    let map = broadcast_map(v.shape(), shape);
    Tensor::new(shape, map.iter().map(|&i| v.data()[i]).collect())
}

fn binary_value(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let ma = broadcast_map(a.shape(), &shape);
    let mb = broadcast_map(b.shape(), &shape);
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    Tensor::new(&shape, data)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value. Do not hold across further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.value());
        let rg = self.requires_grad();
        self.tape.push(v, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let v = binary_value(&self.value(), &other.value(), f);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(v, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |v| v.scale(s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v.map(|x| x + c))
    }

    /// `c - self`
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        self.neg().add_scalar(c)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |v| v.map(sigmoid))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |v| v.map(f64::tanh))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.map(|x| x.max(0.0)))
    }

    /// `max(x, 0) + slope * min(x, 0)`, composed from ReLU.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.scale(slope).add(self.relu().scale(1.0 - slope))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = {
            let (a, b) = (self.value(), other.value());
            assert!(
                a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.rows(),
                "matmul shapes {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; n * m];
            matmul_into(a.data(), b.data(), &mut out, n, k, m);
            Tensor::new(&[n, m], out)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(v, Op::MatMul(self.id, other.id), rg)
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::t)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |v| v.clone().reshaped(shape))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        self.unary(Op::BroadcastTo(self.id), |v| {
            let s = broadcast_shape(v.shape(), shape).expect("broadcast_to");
            assert_eq!(s, shape, "broadcast_to target is not a broadcast of the input");
            broadcast_value(v, shape)
        })
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let op = Op::Slice {
            src: self.id,
            axis,
            start,
        };
        self.unary(op, |v| {
            let s = v.shape();
            assert!(axis < s.len() && start + len <= s[axis], "slice out of range");
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut shape = s.to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                let base = (o * s[axis] + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            Tensor::new(&shape, data)
        })
    }

    /// Row `i` of a matrix as a 1×cols matrix.
    pub fn row(self, i: usize) -> Var<'t> {
        self.slice(0, i, 1)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |v| Tensor::scalar(v.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |v| Tensor::scalar(v.sum() / v.len() as f64))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        self.unary(Op::SumLast(self.id), |v| {
            let s = v.shape();
            let last = *s.last().expect("sum_last on scalar");
            let data = v.data().chunks(last).map(|c| c.iter().sum()).collect();
            Tensor::new(&s[..s.len() - 1], data)
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |v| {
            let last = *v.shape().last().expect("softmax on scalar");
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(last) {
                softmax_in_place(row);
            }
            Tensor::new(v.shape(), data)
        })
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        self.unary(Op::LayerNorm { src: self.id, eps }, |v| {
            let last = *v.shape().last().expect("layer_norm on scalar");
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(last) {
                let n = last as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
            }
            Tensor::new(v.shape(), data)
        })
    }

    /// Mean squared error against `target`.
    pub fn mse(self, target: Var<'t>) -> Var<'t> {
        self.sub(target).square().mean()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Gradients of a scalar `loss` with respect to each of `params`.
///
/// Fails if `loss` is not scalar or if some parameter does not influence
/// the loss through the tape.
pub fn grad<'t>(loss: Var<'t>, params: &[Var<'t>]) -> Result<Vec<Tensor>> {
    let g = loss.tape().backward(loss)?;
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            g.get(*p).cloned().ok_or_else(|| {
                Error::Contract(format!("parameter #{i} (node {}) is not reachable from the loss", p.id))
            })
        })
        .collect()
}
