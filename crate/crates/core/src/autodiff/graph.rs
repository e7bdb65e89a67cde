use crate::tensor::{
    broadcast_map, broadcast_shape, numel, split_axis, strides, Result, Tensor, TensorError,
};

/// Floor applied to `log` arguments and divisors in [`NumericMode::Clamped`].
pub const CLAMP_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `log`, `div` and `sqrt` treat arguments outside their domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NumericMode {
    /// Out-of-domain arguments are errors.
    Strict,
    /// Arguments are floored at [`CLAMP_EPS`]; the clamped entries pass no gradient.
    #[default]
    Clamped,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Tanh,
    Relu,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map_a: Bcast,
        map_b: Bcast,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        /// (a batch offset, b batch offset) per output batch entry, in matrices.
        batches: Vec<(usize, usize)>,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedLogSumExp {
        x: Var,
        mask: Vec<bool>,
    },
    Gather {
        x: Var,
        /// Source flat index for each output position.
        map: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Stack {
        xs: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Values are immutable once recorded; `backward` visits
/// nodes in exact reverse recording order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mode: NumericMode,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: NumericMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn strict() -> Self {
        Self::with_mode(NumericMode::Strict)
    }

    pub fn mode(&self) -> NumericMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the current value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `x`; zeros when
    /// `x` is unreachable from the loss or no backward pass has run.
    pub fn grad(&self, x: Var) -> Tensor {
        let shape = self.shape(x).to_vec();
        match self.grads.get(x.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let map_a = Bcast::new(&sa, &out_shape);
        let map_b = Bcast::new(&sb, &out_shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = va[map_a.at(i)];
            let y = vb[map_b.at(i)];
            out.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => {
                    if self.mode == NumericMode::Strict && y == 0.0 {
                        return Err(TensorError::Domain {
                            op: "div",
                            value: y,
                            index: i,
                        });
                    }
                    x / divisor(self.mode, y)
                }
            });
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.numel());
        for (i, &v) in src.data().iter().enumerate() {
            out.push(match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => match self.mode {
                    NumericMode::Strict if v <= 0.0 => {
                        return Err(TensorError::Domain {
                            op: "log",
                            value: v,
                            index: i,
                        })
                    }
                    NumericMode::Clamped if v < CLAMP_EPS => CLAMP_EPS.ln(),
                    _ => v.ln(),
                },
                UnaryKind::Sqrt => {
                    if v < 0.0 {
                        if self.mode == NumericMode::Strict {
                            return Err(TensorError::Domain {
                                op: "sqrt",
                                value: v,
                                index: i,
                            });
                        }
                        0.0
                    } else {
                        v.sqrt()
                    }
                }
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Scale(c) => c * v,
                UnaryKind::AddScalar(c) => v + c,
            });
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Unary { kind, x }, rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    // ---- contractions and reductions -----------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcast leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
        let nb = numel(&batch_shape);
        let map_a = broadcast_map(ba, &batch_shape);
        let map_b = broadcast_map(bb, &batch_shape);
        let batches: Vec<(usize, usize)> = (0..nb)
            .map(|i| {
                (
                    map_a.as_ref().map_or(i, |m| m[i]),
                    map_b.as_ref().map_or(i, |m| m[i]),
                )
            })
            .collect();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; nb * m * n];
        for (bi, &(oa, ob)) in batches.iter().enumerate() {
            let am = &va[oa * m * k..(oa + 1) * m * k];
            let bm = &vb[ob * k * n..(ob + 1) * k * n];
            let cm = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let crow = &mut cm[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = am[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bm[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += aip * bv;
                    }
                }
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batches,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.requires_grad(x);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| TensorError::Axis {
            op: "mean_axis",
            axis,
            shape: self.shape(x).to_vec(),
        })?;
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(total), Op::SumAll { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        let rg = self.requires_grad(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise `log Σ exp` over the entries of a `[rows, cols]` tensor
    /// selected by `mask`. Rows with an empty mask yield 0 and pass no gradient.
    pub fn masked_logsumexp(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || mask.len() != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_logsumexp",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let sel = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(sel)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let z: f64 = row
                .iter()
                .zip(sel)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            out[r] = max + z.ln();
        }
        let rg = self.requires_grad(x);
        let value = Tensor::new([rows], out)?;
        Ok(self.push(value, Op::MaskedLogSumExp { x, mask }, rg))
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let out = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Gather { x, map }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid(format!(
                "permute: axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = numel(&shape);
        let rank = shape.len();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..n {
            map.push(pos);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                pos += eff[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                pos -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        self.gather(x, out_shape, map)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                shape: self.shape(x).to_vec(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Selects `rows` along the leading axis (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.is_empty() {
            return Err(TensorError::Invalid("gather_rows: empty input".into()));
        }
        let inner: usize = shape[1..].iter().product();
        let mut map = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= shape[0] {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    len: shape[0],
                });
            }
            map.extend(r * inner..(r + 1) * inner);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.gather(x, out_shape, map)
    }

    /// `x[index]` along the leading axis, dropping that axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let rows = self.gather_rows(x, &[index])?;
        let shape = self.shape(x)[1..].to_vec();
        self.reshape(rows, shape)
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("stack: no inputs".into()))?;
        let shape = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(numel(&shape) * xs.len());
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: shape,
                    rhs: self.shape(x).to_vec(),
                });
            }
            out.extend_from_slice(self.value(x).data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend(&shape);
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Stack { xs: xs.to_vec() }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                if let (Bcast::Same, Bcast::Same) = (map_a, map_b) {
                    if let Some(ga) = slot(nodes, grads, *a) {
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => {
                                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d)
                            }
                            BinaryKind::Mul => ga
                                .iter_mut()
                                .zip(g.iter().zip(vb))
                                .for_each(|(x, (&d, &y))| *x += d * y),
                            BinaryKind::Div => ga
                                .iter_mut()
                                .zip(g.iter().zip(vb))
                                .for_each(|(x, (&d, &y))| *x += d / divisor(self.mode, y)),
                        }
                    }
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for j in 0..g.len() {
                            gb[j] += match kind {
                                BinaryKind::Add => g[j],
                                BinaryKind::Sub => -g[j],
                                BinaryKind::Mul => g[j] * va[j],
                                BinaryKind::Div => div_rhs_grad(self.mode, g[j], va[j], vb[j]),
                            };
                        }
                    }
                    return;
                }
                let ia = |j: usize| map_a.at(j);
                let ib = |j: usize| map_b.at(j);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for j in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[j],
                            BinaryKind::Mul => g[j] * vb[ib(j)],
                            BinaryKind::Div => g[j] / divisor(self.mode, vb[ib(j)]),
                        };
                        ga[ia(j)] += d;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for j in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add => g[j],
                            BinaryKind::Sub => -g[j],
                            BinaryKind::Mul => g[j] * va[ia(j)],
                            BinaryKind::Div => div_rhs_grad(self.mode, g[j], va[ia(j)], vb[ib(j)]),
                        };
                        gb[ib(j)] += d;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let vx = self.nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += g[j]
                            * match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Exp => out[j],
                                UnaryKind::Log => {
                                    if self.mode == NumericMode::Clamped && vx[j] < CLAMP_EPS {
                                        0.0
                                    } else {
                                        1.0 / vx[j]
                                    }
                                }
                                UnaryKind::Sqrt => {
                                    if out[j] > 0.0 {
                                        0.5 / out[j]
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Sigmoid => out[j] * (1.0 - out[j]),
                                UnaryKind::Tanh => 1.0 - out[j] * out[j],
                                UnaryKind::Relu => {
                                    if vx[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Scale(c) => *c,
                                UnaryKind::AddScalar(_) => 1.0,
                            };
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batches,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (bi, &(oa, ob)) in batches.iter().enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &vb[ob * k * n..(ob + 1) * k * n];
                        let gam = &mut ga[oa * m * k..(oa + 1) * m * k];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bm[p * n..(p + 1) * n];
                                gam[i * k + p] += dot(grow, brow);
                            }
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (bi, &(oa, ob)) in batches.iter().enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &va[oa * m * k..(oa + 1) * m * k];
                        let gbm = &mut gb[ob * k * n..(ob + 1) * k * n];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = am[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (acc, &gv) in gbm[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *acc += aip * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                if let Some(gx) = slot(nodes, grads, *x) {
                    let (outer, len, inner) = split_axis(&shape, *axis);
                    for o in 0..outer {
                        for a in 0..len {
                            for j in 0..inner {
                                gx[(o * len + a) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape().to_vec();
                if let Some(gx) = slot(nodes, grads, *x) {
                    let (outer, len, inner) = split_axis(&shape, *axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + j;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += out[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedLogSumExp { x, mask } => {
                let vx = self.nodes[x.0].value.data();
                let cols = self.nodes[x.0].value.shape()[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..g.len() {
                        let sel = &mask[r * cols..(r + 1) * cols];
                        if !sel.iter().any(|&m| m) {
                            continue;
                        }
                        for c in 0..cols {
                            if sel[c] {
                                gx[r * cols + c] += g[r] * (vx[r * cols + c] - out[r]).exp();
                            }
                        }
                    }
                }
            }
            Op::Gather { x, map } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (j, &src) in map.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (acc, &v) in gx.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
            Op::Stack { xs } => {
                let inner = g.len() / xs.len();
                for (s, &x) in xs.iter().enumerate() {
                    if let Some(gx) = slot(nodes, grads, x) {
                        for (acc, &v) in gx.iter_mut().zip(&g[s * inner..(s + 1) * inner]) {
                            *acc += v;
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// `d(x / y) / dy`; zero where the divisor was clamped.
#[inline]
fn div_rhs_grad(mode: NumericMode, g: f64, x: f64, y: f64) -> f64 {
    if divisor(mode, y) != y {
        0.0
    } else {
        -g * x / (y * y)
    }
}

/// How a broadcast operand's flat index follows from the output's.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Operand is a trailing block of the output, repeated: `j % len`.
    Cycle(usize),
    /// Operand matches a leading block, each entry repeated: `j / reps`.
    Stretch(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return Bcast::Same;
        }
        let lead = src.iter().take_while(|&&d| d == 1).count();
        let core = &src[lead..];
        if out.ends_with(core) {
            return Bcast::Cycle(numel(core));
        }
        if src.len() == out.len() {
            let q = src.iter().zip(out).take_while(|(a, b)| a == b).count();
            if src[q..].iter().all(|&d| d == 1) {
                return Bcast::Stretch(numel(&out[q..]));
            }
        }
        Bcast::Map(broadcast_map(src, out).expect("shapes differ"))
    }

    #[inline]
    fn at(&self, j: usize) -> usize {
        match self {
            Bcast::Same => j,
            Bcast::Cycle(len) => j % len,
            Bcast::Stretch(reps) => j / reps,
            Bcast::Map(m) => m[j],
        }
    }
}

/// Dot product with four independent accumulators (fixed order, so results
/// are reproducible).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn divisor(mode: NumericMode, y: f64) -> f64 {
    if mode == NumericMode::Strict || y.abs() >= CLAMP_EPS {
        y
    } else if y < 0.0 {
        -CLAMP_EPS
    } else {
        CLAMP_EPS
    }
}
