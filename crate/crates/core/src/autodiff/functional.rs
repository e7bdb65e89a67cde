//! Composite differentiable building blocks expressed in terms of tape primitives.

use super::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Floor inside the vector norm so zero vectors normalize to zero.
pub const NORM_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x @ w + b` over the last axis; `w` is `[in, out]`, `b` is `[out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul_last(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

impl Graph {
    /// Matrix product over the last axis of `x` with a 2-d weight, for inputs of any rank.
    pub fn matmul_last(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() == 1 {
            let row = self.reshape(x, [1, shape[0]])?;
            let y = self.matmul(row, w)?;
            let out = self.shape(y)[1];
            return self.reshape(y, [out]);
        }
        self.matmul(x, w)
    }
}

/// Divides each vector along the last axis by `sqrt(|x|^2 + eps^2)`.
pub fn l2_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let last = g.shape(x).len().checked_sub(1).ok_or_else(|| {
        TensorError::Invalid("l2_normalize: rank-0 input".into())
    })?;
    let sq = g.mul(x, x)?;
    let ss = g.sum_axis(sq, last, true)?;
    let ss = g.add_scalar(ss, NORM_EPS * NORM_EPS)?;
    let norm = g.sqrt(ss)?;
    g.div(x, norm)
}

/// Cosine similarity along the last axis, with broadcasting over leading axes.
pub fn cosine_similarity(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.last() != sb.last() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: sa,
            rhs: sb,
        });
    }
    let na = l2_normalize(g, a)?;
    let nb = l2_normalize(g, b)?;
    let prod = g.mul(na, nb)?;
    let last = g.shape(prod).len() - 1;
    g.sum_axis(prod, last, false)
}

/// Pairwise cosine similarities between the rows of `a: [A, D]` and `b: [B, D]`.
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = l2_normalize(g, a)?;
    let nb = l2_normalize(g, b)?;
    let nbt = g.transpose(nb)?;
    g.matmul(na, nbt)
}

/// Normalizes each slice along `axis` to zero mean and unit variance, then
/// applies `gain` and `bias` (both shaped like the normalized axis).
pub fn layer_norm(g: &mut Graph, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op: "layer_norm",
            axis,
            shape,
        });
    }
    let d = shape[axis];
    for p in [gain, bias] {
        if g.shape(p) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: g.shape(p).to_vec(),
            });
        }
    }
    let mean = g.mean_axis(x, axis, true)?;
    let centered = g.sub(x, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_axis(sq, axis, true)?;
    let var = g.add_scalar(var, LAYER_NORM_EPS)?;
    let std = g.sqrt(var)?;
    let normed = g.div(centered, std)?;
    let trailing = shape.len() - 1 - axis;
    let (gain, bias) = if trailing == 0 {
        (gain, bias)
    } else {
        let mut s = vec![d];
        s.extend(std::iter::repeat_n(1, trailing));
        (g.reshape(gain, s.clone())?, g.reshape(bias, s)?)
    };
    let scaled = g.mul(normed, gain)?;
    g.add(scaled, bias)
}

/// Weights of a gated recurrent unit with input width `I` and hidden width `D`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    /// `[I, D]` input projections for the reset, update and candidate paths.
    pub w_ir: Var,
    pub w_iz: Var,
    pub w_in: Var,
    /// `[D, D]` hidden projections.
    pub w_hr: Var,
    pub w_hz: Var,
    pub w_hn: Var,
    /// `[D]` biases.
    pub b_r: Var,
    pub b_z: Var,
    pub b_in: Var,
    pub b_hn: Var,
}

/// One GRU update: `h' = z * n + (1 - z) * h`, where `z` is the update gate and
/// `n = tanh(x W_in + b_in + r * (h W_hn + b_hn))` the candidate.
pub fn gru_cell(g: &mut Graph, input: Var, hidden: Var, p: &GruParams) -> Result<Var> {
    let (si, sh) = (g.shape(input).to_vec(), g.shape(hidden).to_vec());
    if si.len() != 2 || sh.len() != 2 || si[0] != sh[0] {
        return Err(TensorError::ShapeMismatch {
            op: "gru_cell",
            lhs: si,
            rhs: sh,
        });
    }
    let gate = |g: &mut Graph, wi: Var, wh: Var, b: Var| -> Result<Var> {
        let xi = g.matmul(input, wi)?;
        let hh = g.matmul(hidden, wh)?;
        let s = g.add(xi, hh)?;
        let s = g.add(s, b)?;
        g.sigmoid(s)
    };
    let r = gate(g, p.w_ir, p.w_hr, p.b_r)?;
    let z = gate(g, p.w_iz, p.w_hz, p.b_z)?;
    let xn = linear(g, input, p.w_in, Some(p.b_in))?;
    let hn = linear(g, hidden, p.w_hn, Some(p.b_hn))?;
    let rhn = g.mul(r, hn)?;
    let pre = g.add(xn, rhn)?;
    let n = g.tanh(pre)?;
    let diff = g.sub(n, hidden)?;
    let step = g.mul(z, diff)?;
    g.add(hidden, step)
}

/// Central-difference gradient of `f` at `x`: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// `|a - b|_2 / max(|a|_2, |b|_2)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
