//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends a node holding its value; inputs always precede their
//! consumers, so a single reverse sweep over node indices is a valid
//! topological traversal.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, ConvGeom};
use super::ops;
use super::Tensor;
use crate::error::{shape_err, FgstError, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the gradient of the op's output and returns one entry
/// per input, in the order the inputs were given to [`Graph::custom`]. An
/// entry may be `None` when `needs[i]` is false.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cout: usize,
    },
    Deconv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cin: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        channels: usize,
        tokens: usize,
        stats: ops::NormStats,
    },
    Linear {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    L1Loss {
        pred: usize,
        target: usize,
    },
    Sum(usize),
    Softmax(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    leaf: bool,
}

/// The operation tape.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf; `None` if the leaf does
    /// not influence the loss or was registered as a constant.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(FgstError::NotOnTape(format!("{v:?}")));
        }
        Ok(v.index)
    }

    /// Value of a node. Panics if `v` was produced by a different graph.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable from a different graph");
        &self.nodes[i].value
    }

    /// Which side of its kink every input of a piecewise-linear op (leaky
    /// ReLU inputs, L1 residuals) lies on, in recording order. Two recordings
    /// of the same computation have equal patterns exactly when no input
    /// crossed a kink between them.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu { x, .. } => out.extend(self.nodes[x].value.data().iter().map(|&v| v > 0.0)),
                Op::L1Loss { pred, target } => out.extend(
                    self.nodes[pred]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[target].value.data())
                        .map(|(p, t)| p > t),
                ),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let leaf = matches!(op, Op::Leaf);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            leaf,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (geom, cout) = conv::check_conv(
            self.nodes[xi].value.shape(),
            self.nodes[ki].value.shape(),
            bi.map(|b| self.nodes[b].value.shape()),
            stride,
            pad,
        )?;
        let out = conv::conv2d_forward(
            self.nodes[xi].value.data(),
            &geom,
            self.nodes[ki].value.data(),
            cout,
            bi.map(|b| self.nodes[b].value.data()),
        );
        let value = Tensor::new(vec![cout, geom.oh, geom.ow], out)?;
        let mut ins = vec![xi, ki];
        ins.extend(bi);
        let needs = self.needs(&ins);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: xi,
                kernel: ki,
                bias: bi,
                geom,
                cout,
            },
            needs,
        ))
    }

    pub fn deconv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (geom, cout) = conv::check_deconv(
            self.nodes[xi].value.shape(),
            self.nodes[ki].value.shape(),
            bi.map(|b| self.nodes[b].value.shape()),
            stride,
        )?;
        let cin = self.nodes[xi].value.shape()[0];
        let out = conv::deconv2d_forward(
            self.nodes[xi].value.data(),
            &geom,
            self.nodes[ki].value.data(),
            cin,
            bi.map(|b| self.nodes[b].value.data()),
        );
        let value = Tensor::new(vec![cout, geom.h, geom.w], out)?;
        let mut ins = vec![xi, ki];
        ins.extend(bi);
        let needs = self.needs(&ins);
        Ok(self.push(
            value,
            Op::Deconv2d {
                x: xi,
                kernel: ki,
                bias: bi,
                geom,
                cin,
            },
            needs,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (channels, tokens) = ops::check_layer_norm(
            self.nodes[xi].value.shape(),
            self.nodes[gi].value.shape(),
            self.nodes[bi].value.shape(),
        )?;
        let (out, stats) = ops::layer_norm_raw(
            self.nodes[xi].value.data(),
            channels,
            tokens,
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
            eps,
        );
        let value = Tensor::new(self.nodes[xi].value.shape().to_vec(), out)?;
        let needs = self.needs(&[xi, gi, bi]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                channels,
                tokens,
                stats,
            },
            needs,
        ))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (rows, in_dim, out_dim) = ops::check_linear(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            bi.map(|b| self.nodes[b].value.shape()),
        )?;
        let mut out = vec![0.0; rows * out_dim];
        conv::gemm(
            rows,
            in_dim,
            out_dim,
            self.nodes[xi].value.data(),
            false,
            self.nodes[wi].value.data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = bi {
            let bias = self.nodes[b].value.data();
            for row in out.chunks_exact_mut(out_dim) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = self.nodes[xi].value.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out_dim;
        let value = Tensor::new(shape, out)?;
        let mut ins = vec![xi, wi];
        ins.extend(bi);
        let needs = self.needs(&ins);
        Ok(self.push(
            value,
            Op::Linear {
                x: xi,
                weight: wi,
                bias: bi,
                rows,
                in_dim,
                out_dim,
            },
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = ops::leaky_relu(&self.nodes[xi].value, slope);
        let needs = self.needs(&[xi]);
        Ok(self.push(value, Op::LeakyRelu { x: xi, slope }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = ops::add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(value, Op::Add(ai, bi), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return shape_err(format!("sub of {:?} and {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(value, Op::Sub(ai, bi), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| v * s);
        let needs = self.needs(&[xi]);
        Ok(self.push(value, Op::Scale(xi, s), needs))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = ops::concat_channels(&refs)?;
        let needs = self.needs(&idx);
        Ok(self.push(value, Op::Concat(idx), needs))
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        let loss = ops::l1_loss(&self.nodes[pi].value, &self.nodes[ti].value)?;
        let needs = self.needs(&[pi, ti]);
        Ok(self.push(Tensor::scalar(loss), Op::L1Loss { pred: pi, target: ti }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.nodes[xi].value.data().iter().sum();
        let needs = self.needs(&[xi]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(xi), needs))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        if self.nodes[xi].value.rank() != 1 {
            return shape_err("softmax expects a vector");
        }
        let p = ops::softmax(self.nodes[xi].value.data())?;
        let value = Tensor::from_vec(p)?;
        let needs = self.needs(&[xi]);
        Ok(self.push(value, Op::Softmax(xi), needs))
    }

    /// Records an externally computed op. `value` must already hold the
    /// forward result; `op` supplies the vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let needs = self.needs(&idx);
        Ok(self.push(value, Op::Custom { inputs: idx, op }, needs))
    }

    /// Propagates d(loss)/d(node) back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(FgstError::NotOnTape(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.leaf {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !(n.leaf && n.needs_grad) {
                *g = None;
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |i: usize| self.nodes[i].needs_grad;
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                cout,
            } => {
                let cg = conv::conv2d_backward(val(*x), geom, val(*kernel), *cout, g, needs(*x));
                if let Some(dx) = cg.input {
                    accumulate_owned(&mut grads[*x], dx);
                }
                if needs(*kernel) {
                    accumulate_owned(&mut grads[*kernel], cg.kernel);
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    accumulate_owned(&mut grads[b], cg.bias);
                }
            }
            Op::Deconv2d {
                x,
                kernel,
                bias,
                geom,
                cin,
            } => {
                let cg = conv::deconv2d_backward(val(*x), geom, val(*kernel), *cin, g, needs(*x));
                if let Some(dx) = cg.input {
                    accumulate_owned(&mut grads[*x], dx);
                }
                if needs(*kernel) {
                    accumulate_owned(&mut grads[*kernel], cg.kernel);
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    accumulate_owned(&mut grads[b], cg.bias);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                channels,
                tokens,
                stats,
            } => {
                let (c, p) = (*channels, *tokens);
                let gv = val(*gain);
                if needs(*gain) {
                    let dg: Vec<f64> = (0..c)
                        .map(|ch| (0..p).map(|t| g[ch * p + t] * stats.xhat[ch * p + t]).sum())
                        .collect();
                    accumulate_owned(&mut grads[*gain], dg);
                }
                if needs(*bias) {
                    let db: Vec<f64> = (0..c).map(|ch| g[ch * p..(ch + 1) * p].iter().sum()).collect();
                    accumulate_owned(&mut grads[*bias], db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; c * p];
                    let inv_c = 1.0 / c as f64;
                    for t in 0..p {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ch in 0..c {
                            let d = g[ch * p + t] * gv[ch];
                            mean_d += d;
                            mean_dx += d * stats.xhat[ch * p + t];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        let r = stats.rstd[t];
                        for ch in 0..c {
                            let i = ch * p + t;
                            let d = g[i] * gv[ch];
                            dx[i] = r * (d - mean_d - stats.xhat[i] * mean_dx);
                        }
                    }
                    accumulate_owned(&mut grads[*x], dx);
                }
            }
            Op::Linear {
                x,
                weight,
                bias,
                rows,
                in_dim,
                out_dim,
            } => {
                if needs(*x) {
                    let mut dx = vec![0.0; rows * in_dim];
                    conv::gemm(*rows, *out_dim, *in_dim, g, false, val(*weight), false, 0.0, &mut dx);
                    accumulate_owned(&mut grads[*x], dx);
                }
                if needs(*weight) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    conv::gemm(*out_dim, *rows, *in_dim, g, true, val(*x), false, 0.0, &mut dw);
                    accumulate_owned(&mut grads[*weight], dw);
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    let mut db = vec![0.0; *out_dim];
                    for row in g.chunks_exact(*out_dim) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate_owned(&mut grads[b], db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx: Vec<f64> = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > 0.0 { d } else { d * slope })
                    .collect();
                accumulate_owned(&mut grads[*x], dx);
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if needs(i) {
                        accumulate(&mut grads[i], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[*a], g);
                }
                if needs(*b) {
                    accumulate_owned(&mut grads[*b], g.iter().map(|v| -v).collect());
                }
            }
            Op::Scale(x, s) => {
                accumulate_owned(&mut grads[*x], g.iter().map(|v| v * s).collect());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if needs(p) {
                        accumulate(&mut grads[p], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::L1Loss { pred, target } => {
                let n = self.nodes[*pred].value.len() as f64;
                let scale = g[0] / n;
                let signs: Vec<f64> = val(*pred)
                    .iter()
                    .zip(val(*target))
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if needs(*target) {
                    accumulate_owned(&mut grads[*target], signs.iter().map(|v| -v).collect());
                }
                if needs(*pred) {
                    accumulate_owned(&mut grads[*pred], signs);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.len();
                accumulate_owned(&mut grads[*x], vec![g[0]; n]);
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                let dx = p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)).collect();
                accumulate_owned(&mut grads[*x], dx);
            }
            Op::Custom { inputs, op } => {
                let flags: Vec<bool> = inputs.iter().map(|&i| needs(i)).collect();
                let parts = op.backward(g, &flags);
                debug_assert_eq!(parts.len(), inputs.len(), "{}", op.name());
                for ((&i, part), flag) in inputs.iter().zip(parts).zip(flags) {
                    if let (Some(d), true) = (part, flag) {
                        accumulate_owned(&mut grads[i], d);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn l1_of_positive_against_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.5, 2.0, 1.0, 3.0, 0.1]).unwrap());
        let z = g.constant(Tensor::zeros(&[5]));
        let l = g.l1_loss(x, z).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.2; 5]);
        assert!(grads.get(z).is_none());
    }

    #[test]
    fn foreign_or_nonscalar_loss_rejected() {
        let mut a = Graph::new();
        let mut b = Graph::new();
        let xa = a.param(Tensor::scalar(1.0));
        let _ = b.param(Tensor::scalar(1.0));
        assert!(matches!(b.backward(xa), Err(FgstError::NotOnTape(_))));
        let v = a.param(Tensor::zeros(&[3]));
        assert!(a.backward(v).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0]);
    }

    /// Central-difference check of every leaf of a small composed graph.
    #[test]
    fn composed_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![
            random(&[2, 5, 5], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[3], &mut rng).map(|v| v + 1.5),
            random(&[3], &mut rng),
            random(&[3, 2, 2, 2], &mut rng),
            random(&[2], &mut rng),
            random(&[5, 6], &mut rng),
            random(&[5], &mut rng),
            random(&[4], &mut rng),
        ];
        let target = random(&[4, 6, 5], &mut rng);
        let build = |vals: &[Tensor]| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let v: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let c = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            let n = g.layer_norm(c, v[3], v[4], 1e-5).unwrap();
            let a = g.leaky_relu(n, 0.1).unwrap();
            let d = g.deconv2d(a, v[5], Some(v[6]), 2).unwrap();
            let s = g.scale(d, 0.7).unwrap();
            let cat = g.concat_channels(&[d, s]).unwrap();
            let lin = g.linear(cat, v[7], Some(v[8])).unwrap();
            let t = g.constant(target.clone());
            let l1 = g.l1_loss(lin, t).unwrap();
            let sm = g.softmax(v[9]).unwrap();
            let one = g.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]).unwrap());
            let diff = g.sub(sm, one).unwrap();
            let sq = g.leaky_relu(diff, -1.0).unwrap();
            let extra = g.sum(sq).unwrap();
            let loss = g.add(l1, extra).unwrap();
            (g, v, loss)
        };
        let (g, vars, loss) = build(&leaves);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).unwrap();
            for e in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[e] -= h;
                let (gp, _, lp) = build(&plus);
                let (gm, _, lm) = build(&minus);
                let fd = (gp.value(lp).item().unwrap() - gm.value(lm).item().unwrap()) / (2.0 * h);
                let err = (fd - analytic[e]).abs() / fd.abs().max(analytic[e].abs()).max(1e-3);
                assert!(err < 1e-5, "leaf {li} elem {e}: fd {fd} analytic {}", analytic[e]);
            }
        }
    }

    #[test]
    fn linear_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[6, 4], &mut rng);
        let y = random(&[3, 6], &mut rng);
        let wx = ops::linear(&x, &w).unwrap();
        // Wᵀ y computed through the backward pass of linear.
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w);
        let lin = g.linear(xv, wv, None).unwrap();
        let yv = g.constant(y.clone());
        let prod = g.custom(&[lin, yv], Tensor::scalar(0.0), Box::new(DotWith(y.data().to_vec()))).unwrap();
        let grads = g.backward(prod).unwrap();
        let wty = Tensor::new(vec![3, 4], grads.get(xv).unwrap().to_vec()).unwrap();
        assert!((wx.dot(&y).unwrap() - x.dot(&wty).unwrap()).abs() < 1e-10);
    }

    struct DotWith(Vec<f64>);

    impl CustomOp for DotWith {
        fn name(&self) -> &'static str {
            "dot_with"
        }

        fn backward(&self, grad_out: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
            vec![Some(self.0.iter().map(|v| v * grad_out[0]).collect()), None]
        }
    }
}
