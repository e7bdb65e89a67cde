use super::params::Bound;
use crate::autodiff::{linear, Graph, Var};
use crate::tensor::Result;

/// Output of the spatial-broadcast decoder.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[T, N, D_b]` alpha-weighted mixture.
    pub features: Var,
    /// `[S, T, N, D_b]` per-slot predictions.
    pub per_slot: Var,
    /// `[S, T, N]` alpha masks, softmax over slots.
    pub mask: Var,
}

/// Broadcasts every slot of `slots: [T, S, D_s]` over the `N` positions,
/// pairs it with a learned positional embedding and maps each position to
/// feature channels plus an alpha logit.
///
/// The first layer acts on `[slot | position]`; it is evaluated as the sum of
/// separate slot and position projections so the concatenation is never built.
pub fn decode(g: &mut Graph, p: &Bound, slots: Var) -> Result<Decoded> {
    let shape = g.shape(slots).to_vec();
    let (t, s) = (shape[0], shape[1]);
    let by_slot = g.permute(slots, &[1, 0, 2])?;
    let hs = g.matmul_last(by_slot, p.get("dec.w1_slot"))?;
    let hidden = g.shape(hs)[2];
    let hs = g.reshape(hs, [s, t, 1, hidden])?;
    let hp = linear(g, p.get("dec.pos"), p.get("dec.w1_pos"), Some(p.get("dec.b1")))?;
    let h = g.add(hs, hp)?;
    let h = g.relu(h)?;
    let h = linear(g, h, p.get("dec.l2.w"), Some(p.get("dec.l2.b")))?;
    let h = g.relu(h)?;
    let per_slot = linear(g, h, p.get("dec.feat.w"), Some(p.get("dec.feat.b")))?;
    let alpha = linear(g, h, p.get("dec.alpha.w"), Some(p.get("dec.alpha.b")))?;
    let n = g.shape(alpha)[2];
    let alpha = g.reshape(alpha, [s, t, n])?;
    let mask = g.softmax(alpha, 0)?;
    let m4 = g.reshape(mask, [s, t, n, 1])?;
    let weighted = g.mul(m4, per_slot)?;
    let features = g.sum_axis(weighted, 0, false)?;
    Ok(Decoded {
        features,
        per_slot,
        mask,
    })
}
