use std::collections::HashMap;

use super::kernels::{self, ConvGeom, LinearTaps};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Log,
    Exp,
    Relu,
    Sigmoid,
    Softplus,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Reduce {
        input: Var,
        keep_shape: Vec<usize>,
        divisor: f64,
    },
    Expand {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        ty: LinearTaps,
        tx: LinearTaps,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it and the backward sweep is a reverse scan.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn scalar_index(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// `f(a_i, b_i)` over `n` slots, either operand possibly a single element.
fn zip_with(a: &Tensor, b: &Tensor, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.numel() == n, b.numel() == n) {
        (true, true) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
        (false, true) => {
            let x = a.data()[0];
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        (false, false) => vec![f(a.data()[0], b.data()[0]); n],
    }
}

/// `f(g_i, a_i, b_i)` for an upstream gradient `g` of `n` slots.
fn zip3_with(g: &[f64], a: &Tensor, b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    let n = g.len();
    if a.numel() == n && b.numel() == n {
        g.iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&g, (&x, &y))| f(g, x, y))
            .collect()
    } else {
        (0..n)
            .map(|i| f(g[i], scalar_index(a, i), scalar_index(b, i)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let value = match op {
            UnaryOp::Neg => x.map(|x| -x),
            UnaryOp::Log => x.map(f64::ln),
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Relu => x.map(|x| if x > 0.0 { x } else { 0.0 }),
            UnaryOp::Sigmoid => x.map(kernels::stable_sigmoid),
            UnaryOp::Softplus => x.map(kernels::stable_softplus),
            UnaryOp::Sqrt => x.map(f64::sqrt),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary(op, a), rg)
    }

    /// Elementwise binary op. Operands must have equal shapes, or one of
    /// them must hold a single element.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let data = match op {
            BinaryOp::Add => zip_with(ta, tb, n, |x, y| x + y),
            BinaryOp::Sub => zip_with(ta, tb, n, |x, y| x - y),
            BinaryOp::Mul => zip_with(ta, tb, n, |x, y| x * y),
            BinaryOp::Div => zip_with(ta, tb, n, |x, y| x / y),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine { input: a, scale }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, 1.0, s)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rank = shape.len();
        let mut mask = [false; 4];
        for &ax in axes {
            if ax >= rank || mask[ax] {
                return Err(Error::invalid(format!(
                    "reduce axes {axes:?} invalid for rank {rank}"
                )));
            }
            mask[ax] = true;
        }
        let keep_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if mask[i] { 1 } else { d })
            .collect();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let divisor = match op {
            ReduceOp::Sum => 1.0,
            ReduceOp::Mean => count as f64,
        };
        let mut data = kernels::reduce_into(
            self.nodes[a.0].value.data(),
            &kernels::pad4(&shape),
            &kernels::pad4(&keep_shape),
        );
        if divisor != 1.0 {
            data.iter_mut().for_each(|x| *x /= divisor);
        }
        let out_shape: Vec<usize> = if keep {
            keep_shape.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !mask[*i])
                .map(|(_, &d)| d)
                .collect()
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Reduce {
                input: a,
                keep_shape,
                divisor,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axes, keep)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axes, keep)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes, false)
    }

    /// Explicit broadcast of extent-1 axes to `shape`. The input must have
    /// the same rank as `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.nodes[a.0].value.shape().to_vec();
        let ok = src.len() == shape.len()
            && src.iter().zip(shape).all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: src,
                rhs: shape.to_vec(),
            });
        }
        if src == shape {
            return Ok(a);
        }
        let data = kernels::expand_into(
            self.nodes[a.0].value.data(),
            &kernels::pad4(&src),
            &kernels::pad4(shape),
        );
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Expand { input: a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape { input: a }, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow(axis {axis}, {start}..{}) out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = kernels::split_axis(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `out[i] = a[indices[i]]` on a rank-1 input.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 1 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "gather expects rank 1".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::invalid(format!("gather index {bad} out of range")));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::vector(data)?,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sort a rank-1 value in decreasing order. The permutation is fixed for
    /// the backward pass: gradients flow through the gathered values only.
    /// Ties keep their original relative order.
    pub fn sort_desc_detached(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 1 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "sort expects rank 1".into(),
            });
        }
        let vals = t.data();
        let mut perm: Vec<usize> = (0..vals.len()).collect();
        perm.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
        let sorted = self.gather(a, &perm)?;
        Ok((sorted, perm))
    }

    /// Cross-correlation of `x (N, Cin, H, W)` with `weight (Cout, Cin, kh, kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if cin != wcin {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(weight).to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::invalid(format!(
                "conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, padding {padding}"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, p) = (geom.k(), geom.p());
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let mut out = vec![0.0; n * cout * p];
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { k * p }];
        for ni in 0..n {
            let xn = &xs[ni * cin * h * w..(ni + 1) * cin * h * w];
            let b_mat: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                kernels::im2col(xn, &geom, &mut col);
                &col
            };
            let on = &mut out[ni * cout * p..(ni + 1) * cout * p];
            kernels::gemm(cout, k, p, ws, (k, 1), b_mat, (p, 1), 0.0, on);
            if let Some(b) = bias {
                let bs = self.nodes[b.0].value.data();
                for (co, row) in on.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bs[co]);
                }
            }
        }
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&[n, cout, geom.ho, geom.wo], out)?,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Bilinear resize of an NCHW value to `(out_h, out_w)` using half-pixel
    /// sample centers.
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample to empty size"));
        }
        let ty = LinearTaps::new(h, out_h);
        let tx = LinearTaps::new(w, out_w);
        let data = kernels::upsample_forward(self.value(a).data(), n * c, (h, w), &ty, &tx);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[n, c, out_h, out_w], data)?,
            Op::Upsample { input: a, ty, tx },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`. Returns gradients for the
    /// parameter leaves that influence it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::InvalidShape {
                shape: root.shape().to_vec(),
                reason: "backward root must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0)?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.is_param {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter(|(_, n)| n.is_param)
            .filter_map(|(i, _)| grads[i].take().map(|g| (Var(i), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<f64>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(&contrib)
                .for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(Tensor::new(self.shape(v), contrib)?),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d: Vec<f64> = match op {
                    UnaryOp::Neg => gd.iter().map(|g| -g).collect(),
                    UnaryOp::Log => gd.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryOp::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryOp::Relu => gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    UnaryOp::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    UnaryOp::Softplus => gd
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| g * kernels::stable_sigmoid(x))
                        .collect(),
                    UnaryOp::Sqrt => gd.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect(),
                };
                self.accumulate(grads, *a, d)?;
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = gd.len();
                let fold = |t: &Tensor, d: Vec<f64>| {
                    if t.numel() == n {
                        d
                    } else {
                        vec![d.iter().sum()]
                    }
                };
                if self.requires_grad(*a) {
                    let da = match op {
                        BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                        BinaryOp::Mul => zip3_with(gd, ta, tb, |g, _, y| g * y),
                        BinaryOp::Div => zip3_with(gd, ta, tb, |g, _, y| g / y),
                    };
                    self.accumulate(grads, *a, fold(ta, da))?;
                }
                if self.requires_grad(*b) {
                    let db = match op {
                        BinaryOp::Add => gd.to_vec(),
                        BinaryOp::Sub => gd.iter().map(|g| -g).collect(),
                        BinaryOp::Mul => zip3_with(gd, ta, tb, |g, x, _| g * x),
                        BinaryOp::Div => zip3_with(gd, ta, tb, |g, x, y| -g * x / (y * y)),
                    };
                    self.accumulate(grads, *b, fold(tb, db))?;
                }
            }
            Op::Affine { input, scale } => {
                self.accumulate(grads, *input, gd.iter().map(|g| g * scale).collect())?;
            }
            Op::Reduce {
                input,
                keep_shape,
                divisor,
            } => {
                let in_shape = self.shape(*input);
                let mut d =
                    kernels::expand_into(gd, &kernels::pad4(keep_shape), &kernels::pad4(in_shape));
                if *divisor != 1.0 {
                    d.iter_mut().for_each(|x| *x /= divisor);
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::Expand { input } => {
                let d = kernels::reduce_into(
                    gd,
                    &kernels::pad4(node.value.shape()),
                    &kernels::pad4(self.shape(*input)),
                );
                self.accumulate(grads, *input, d)?;
            }
            Op::Reshape { input } => self.accumulate(grads, *input, gd.to_vec())?,
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, dim, inner) = kernels::split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let to = (o * dim + start) * inner;
                    d[to..to + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[from..from + len * inner]);
                    }
                    offset += len;
                    self.accumulate(grads, *v, d)?;
                }
            }
            Op::Gather { input, indices } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (g, &i) in gd.iter().zip(indices) {
                    d[i] += g;
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => self.conv_backward(*x, *weight, *bias, geom, gd, grads)?,
            Op::Upsample { input, ty, tx } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let d = kernels::upsample_backward(gd, n * c, (h, w), ty, tx);
                self.accumulate(grads, *input, d)?;
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let n = self.shape(x)[0];
        let cout = self.shape(weight)[0];
        let (k, p) = (geom.k(), geom.p());
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let in_plane = geom.cin * geom.h * geom.w;
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(weight);

        if let Some(b) = bias {
            let mut db = vec![0.0; cout];
            for ni in 0..n {
                for (co, row) in gd[ni * cout * p..(ni + 1) * cout * p].chunks(p).enumerate() {
                    db[co] += row.iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, db)?;
        }

        let mut dw = vec![0.0; if need_w { cout * k } else { 0 }];
        let mut dx = vec![0.0; if need_x { n * in_plane } else { 0 }];
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { k * p }];
        for ni in 0..n {
            let gn = &gd[ni * cout * p..(ni + 1) * cout * p];
            if need_w {
                let xn = &xs[ni * in_plane..(ni + 1) * in_plane];
                let b_mat: &[f64] = if geom.is_pointwise() {
                    xn
                } else {
                    kernels::im2col(xn, geom, &mut col);
                    &col
                };
                kernels::gemm(cout, p, k, gn, (p, 1), b_mat, (1, p), 1.0, &mut dw);
            }
            if need_x {
                let dxn = &mut dx[ni * in_plane..(ni + 1) * in_plane];
                if geom.is_pointwise() {
                    kernels::gemm(k, cout, p, ws, (1, k), gn, (p, 1), 1.0, dxn);
                } else {
                    kernels::gemm(k, cout, p, ws, (1, k), gn, (p, 1), 0.0, &mut col);
                    kernels::col2im_add(&col, geom, dxn);
                }
            }
        }
        if need_w {
            self.accumulate(grads, weight, dw)?;
        }
        if need_x {
            self.accumulate(grads, x, dx)?;
        }
        Ok(())
    }
}
