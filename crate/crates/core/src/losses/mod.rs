//! Training objectives and the staged schedule that combines them.

mod partition;

pub use partition::{anchor_similarities, build_dec_partition, build_enc_partition, Role, TernaryPartition};

use crate::autodiff::{cosine_matrix, Graph, Var};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use thiserror::Error;

pub const DEFAULT_TAU: f64 = 0.1;
/// Anchors per video beyond which the contrastive losses subsample.
pub const DEFAULT_MAX_ANCHORS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("K = {k} outside 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("M = {m} outside 1..={max}")]
    MOutOfRange { m: usize, max: usize },
    #[error("slot contrast needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("no penalized slots")]
    EmptyPenalized,
    #[error("eta = {0} outside [0, 1]")]
    Eta(f64),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("temperature must be positive, got {0}")]
    Tau(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Tau(tau))
    }
}

/// Seeded anchor subset: every index when `total <= max`, otherwise `max`
/// distinct indices in ascending order.
pub fn sample_anchors<R: Rng + ?Sized>(total: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if total <= max {
        return (0..total).collect();
    }
    let mut picked = rand::seq::index::sample(rng, total, max).into_vec();
    picked.sort_unstable();
    picked
}

/// Ranking contrastive loss for a batch of anchors against one bank.
///
/// Row `a` of `anchors` (`[A, C]`) is scored against every row of `bank`
/// (`[B, C]`) under `parts[a]`:
///
/// ```text
/// term1 = -mean_{p in P} x_p + log sum_{n in Q ∪ N} exp(x_n)
/// term2 = -mean_{q in Q} x_q + log sum_{n in N} exp(x_n)
/// ```
///
/// with `x = cos / tau`. `term2` is 0 when `Q` or `N` is empty; anchors with
/// `Q ∪ N` empty are skipped and do not count towards the mean.
pub fn ranking_contrastive(
    g: &mut Graph,
    anchors: Var,
    bank: Var,
    parts: &[TernaryPartition],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let (a, b) = (g.shape(anchors)[0], g.shape(bank)[0]);
    if parts.len() != a || g.shape(anchors).len() != 2 || g.shape(bank).len() != 2 {
        return Err(LossError::Shape(format!(
            "{} partitions for anchors {:?} and bank {:?}",
            parts.len(),
            g.shape(anchors),
            g.shape(bank)
        )));
    }
    let mut weights = vec![0.0; a * b];
    let mut mask1 = vec![false; a * b];
    let mut mask2 = vec![false; a * b];
    let mut active = 0usize;
    for (r, part) in parts.iter().enumerate() {
        if part.len() != b {
            return Err(LossError::Shape(format!(
                "partition covers {} indices, bank has {b} rows",
                part.len()
            )));
        }
        let row = r * b;
        if part.semi_positives.is_empty() && part.negatives.is_empty() {
            continue;
        }
        active += 1;
        for &p in &part.positives {
            weights[row + p] = -1.0 / part.positives.len() as f64;
        }
        for &i in part.semi_positives.iter().chain(&part.negatives) {
            mask1[row + i] = true;
        }
        if !part.semi_positives.is_empty() && !part.negatives.is_empty() {
            for &q in &part.semi_positives {
                weights[row + q] = -1.0 / part.semi_positives.len() as f64;
            }
            for &n in &part.negatives {
                mask2[row + n] = true;
            }
        }
    }
    let sims = cosine_matrix(g, anchors, bank)?;
    let x = g.scale(sims, 1.0 / tau)?;
    let w = g.constant(Tensor::new([a, b], weights)?);
    let linear = g.mul(x, w)?;
    let linear = g.sum(linear)?;
    let lse1 = g.masked_logsumexp(x, mask1)?;
    let lse1 = g.sum(lse1)?;
    let lse2 = g.masked_logsumexp(x, mask2)?;
    let lse2 = g.sum(lse2)?;
    let total = g.add(linear, lse1)?;
    let total = g.add(total, lse2)?;
    Ok(g.scale(total, 1.0 / active.max(1) as f64)?)
}

/// Flattens `[T, N, C]` to `[T*N, C]`.
fn rows(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(LossError::Shape(format!("expected [T, N, C], got {s:?}")));
    }
    Ok(g.reshape(x, [s[0] * s[1], s[2]])?)
}

/// Decoder-side loss: anchors from the decoded projection `z`, bank from the
/// frozen projection `y` (detached), partitions from the attention labels.
pub fn loss_cl_dec(
    g: &mut Graph,
    z: Var,
    y: Var,
    labels_attn: &[usize],
    anchors: &[usize],
    tau: f64,
) -> Result<Var> {
    if anchors.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let z = rows(g, z)?;
    let y = g.detach(y);
    let y = rows(g, y)?;
    let parts: Vec<_> = anchors.iter().map(|&i| build_dec_partition(i, labels_attn)).collect();
    let za = g.gather_rows(z, anchors)?;
    ranking_contrastive(g, za, y, &parts, tau)
}

/// Encoder-side loss: anchors and bank from the encoded projection `v`,
/// neighbours found in backbone space, partitions from the mask labels.
pub fn loss_cl_enc(
    g: &mut Graph,
    v: Var,
    backbone: &Tensor,
    labels_mask: &[usize],
    anchors: &[usize],
    k: usize,
    tau: f64,
) -> Result<Var> {
    let parts = anchors
        .iter()
        .map(|&i| build_enc_partition(i, labels_mask, backbone, k))
        .collect::<Result<Vec<_>>>()?;
    if anchors.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let v = rows(g, v)?;
    let va = g.gather_rows(v, anchors)?;
    ranking_contrastive(g, va, v, &parts, tau)
}

/// Mean squared error over every entry.
pub fn loss_recon(g: &mut Graph, decoded: Var, target: Var) -> Result<Var> {
    if g.shape(decoded) != g.shape(target) {
        return Err(LossError::Shape(format!(
            "decoded {:?} vs target {:?}",
            g.shape(decoded),
            g.shape(target)
        )));
    }
    let diff = g.sub(decoded, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq)?)
}

/// InfoNCE between consecutive frames' slots (`[T, S, D]`): slot `k` at `t`
/// must pick slot `k` at `t + 1` out of all slots of that frame.
pub fn loss_slot_contrast(g: &mut Graph, slots: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let shape = g.shape(slots).to_vec();
    if shape.len() != 3 {
        return Err(LossError::Shape(format!("expected [T, S, D], got {shape:?}")));
    }
    let (t, s) = (shape[0], shape[1]);
    if t < 2 {
        return Err(LossError::TooFewFrames(t));
    }
    if s == 1 {
        return Ok(g.scalar(0.0));
    }
    let prev: Vec<usize> = (0..t - 1).collect();
    let next: Vec<usize> = (1..t).collect();
    let a = g.gather_rows(slots, &prev)?;
    let b = g.gather_rows(slots, &next)?;
    let sims = cosine_matrix(g, a, b)?;
    let x = g.scale(sims, 1.0 / tau)?;
    let rows = (t - 1) * s;
    let x = g.reshape(x, [rows, s])?;
    let diag = Tensor::from_fn([rows, s], |i| if (i / s) % s == i % s { -1.0 } else { 0.0 });
    let diag = g.constant(diag);
    let pos = g.mul(x, diag)?;
    let pos = g.sum(pos)?;
    let lse = g.masked_logsumexp(x, vec![true; rows * s])?;
    let lse = g.sum(lse)?;
    let total = g.add(pos, lse)?;
    Ok(g.scale(total, 1.0 / rows as f64)?)
}

/// Mean over frames of `KL(p || U)` where `p` is slot `s`'s attention row
/// (`attn: [S, T, N]`) renormalized over patches.
pub fn attention_kl(attn: &Tensor, s: usize) -> f64 {
    let (t, n) = (attn.shape()[1], attn.shape()[2]);
    let mut total = 0.0;
    for ti in 0..t {
        let row = &attn.data()[(s * t + ti) * n..][..n];
        let mass: f64 = row.iter().sum::<f64>().max(crate::autodiff::CLAMP_EPS);
        total += row
            .iter()
            .map(|&a| {
                let p = a / mass;
                if p > 0.0 {
                    p * (p * n as f64).ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>();
    }
    total / t as f64
}

/// Picks `m` slots to push towards uniform attention: repeatedly take the
/// most cosine-similar pair among unpenalized final-frame slots and penalize
/// its member with the lower attention KL (the first one on ties).
///
/// `slots: [T, S, D]`, `attn: [S, T, N]`. Pair ties go to the
/// lexicographically smallest `(i, j)`.
pub fn select_penalized_slots(slots: &Tensor, attn: &Tensor, m: usize) -> Result<Vec<usize>> {
    let (t, s, d) = match slots.shape() {
        &[t, s, d] => (t, s, d),
        other => return Err(LossError::Shape(format!("expected [T, S, D], got {other:?}"))),
    };
    if attn.rank() != 3 || attn.shape()[0] != s || attn.shape()[1] != t {
        return Err(LossError::Shape(format!(
            "attention {:?} does not match slots {:?}",
            attn.shape(),
            slots.shape()
        )));
    }
    if m == 0 || m >= s {
        return Err(LossError::MOutOfRange { m, max: s.saturating_sub(1) });
    }
    let last = &slots.data()[(t - 1) * s * d..];
    let vecs: Vec<&[f64]> = last.chunks(d).collect();
    let cos = |i: usize, j: usize| {
        let dot: f64 = vecs[i].iter().zip(vecs[j]).map(|(a, b)| a * b).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(vecs[i]) * n(vecs[j])).max(crate::autodiff::CLAMP_EPS)
    };
    let kl: Vec<f64> = (0..s).map(|k| attention_kl(attn, k)).collect();
    let mut penalized = vec![false; s];
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..s {
            for j in i + 1..s {
                if penalized[i] || penalized[j] {
                    continue;
                }
                let c = cos(i, j);
                if best.is_none_or(|(b, _, _)| c > b) {
                    best = Some((c, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("m < s leaves an unpenalized pair");
        let pick = if kl[j] < kl[i] { j } else { i };
        penalized[pick] = true;
        out.push(pick);
    }
    Ok(out)
}

/// `(1 / (M T)) Σ_m Σ_t KL(p_{m,t} || U)` over the penalized slots of
/// `attn: [S, T, N]`, differentiable through `attn`.
pub fn loss_reg(g: &mut Graph, attn: Var, penalized: &[usize]) -> Result<Var> {
    if penalized.is_empty() {
        return Err(LossError::EmptyPenalized);
    }
    let shape = g.shape(attn).to_vec();
    if shape.len() != 3 {
        return Err(LossError::Shape(format!("expected [S, T, N], got {shape:?}")));
    }
    let n = shape[2];
    let rows = g.gather_rows(attn, penalized)?;
    let mass = g.sum_axis(rows, 2, true)?;
    let p = g.div(rows, mass)?;
    let logp = g.log(p)?;
    let plogp = g.mul(p, logp)?;
    let neg_entropy = g.mean_axis(plogp, 2, false)?;
    // mean over (m, t) of Σ_n p log p, plus log N
    let avg = g.mean(neg_entropy)?;
    let avg = g.scale(avg, n as f64)?;
    Ok(g.add_scalar(avg, (n as f64).ln())?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    pub reg_end: f64,
    pub cl_start: f64,
    pub lambda_reg: f64,
    pub lambda_cl: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            reg_end: 0.1,
            cl_start: 0.2,
            lambda_reg: 0.1,
            lambda_cl: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// `eta < reg_end`: base loss plus slot regularization.
    Regularize,
    /// `reg_end <= eta < cl_start`: base loss only.
    Base,
    /// `eta >= cl_start`: base loss plus both contrastive losses.
    Contrastive,
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.reg_end && self.reg_end <= self.cl_start && self.cl_start < 1.0) {
            return Err(LossError::Schedule(format!(
                "need 0 < reg_end ({}) <= cl_start ({}) < 1",
                self.reg_end, self.cl_start
            )));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_cl >= 0.0) {
            return Err(LossError::Schedule("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn stage(&self, eta: f64) -> Result<Stage> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(LossError::Eta(eta));
        }
        Ok(if eta < self.reg_end {
            Stage::Regularize
        } else if eta >= self.cl_start {
            Stage::Contrastive
        } else {
            Stage::Base
        })
    }
}

/// Per-term loss values for one step, plus their staged combination.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub slot_contrast: f64,
    pub cl_dec: f64,
    pub cl_enc: f64,
    pub reg: f64,
    pub total: f64,
}

/// Fills `total` from the other fields according to the stage at `eta`.
pub fn stage_total(parts: LossBreakdown, schedule: &StageSchedule, eta: f64) -> Result<LossBreakdown> {
    let base = parts.recon + parts.slot_contrast;
    let total = match schedule.stage(eta)? {
        Stage::Regularize => base + schedule.lambda_reg * parts.reg,
        Stage::Base => base,
        Stage::Contrastive => base + schedule.lambda_cl * (parts.cl_enc + parts.cl_dec),
    };
    Ok(LossBreakdown { total, ..parts })
}
