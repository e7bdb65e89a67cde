use super::params::Bound;
use crate::autodiff::{gru_cell, layer_norm, linear, Graph, GruParams, Var};
use crate::tensor::Result;

/// Added to attention weights before the per-slot renormalization over patches.
pub const ATTN_RENORM_EPS: f64 = 1e-8;

pub(crate) fn gru_params(p: &Bound) -> GruParams {
    GruParams {
        w_ir: p.get("sa.gru.w_ir"),
        w_iz: p.get("sa.gru.w_iz"),
        w_in: p.get("sa.gru.w_in"),
        w_hr: p.get("sa.gru.w_hr"),
        w_hz: p.get("sa.gru.w_hz"),
        w_hn: p.get("sa.gru.w_hn"),
        b_r: p.get("sa.gru.b_r"),
        b_z: p.get("sa.gru.b_z"),
        b_in: p.get("sa.gru.b_in"),
        b_hn: p.get("sa.gru.b_hn"),
    }
}

fn mlp2(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, x, p.get(&format!("{prefix}.l1.w")), Some(p.get(&format!("{prefix}.l1.b"))))?;
    let h = g.relu(h)?;
    linear(g, h, p.get(&format!("{prefix}.l2.w")), Some(p.get(&format!("{prefix}.l2.b"))))
}

pub(crate) fn head(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    mlp2(g, p, prefix, x)
}

/// Refines `init_slots: [S, D_s]` against `feats: [N, D_e]` for `n_iters`
/// rounds. Returns the refined slots and the final round's attention
/// `[S, N]`, normalized over the slot axis.
pub fn slot_attention_frame(
    g: &mut Graph,
    p: &Bound,
    feats: Var,
    init_slots: Var,
    n_iters: usize,
) -> Result<(Var, Var)> {
    assert!(n_iters >= 1, "slot attention needs at least one iteration");
    let d = g.shape(init_slots)[1];
    let x = layer_norm(g, feats, 1, p.get("sa.ln_in.gain"), p.get("sa.ln_in.bias"))?;
    let k = g.matmul(x, p.get("sa.wk"))?;
    let v = g.matmul(x, p.get("sa.wv"))?;
    let kt = g.transpose(k)?;
    let scale = 1.0 / (d as f64).sqrt();
    let gru = gru_params(p);
    let mut slots = init_slots;
    let mut attn = None;
    for _ in 0..n_iters {
        let s = layer_norm(g, slots, 1, p.get("sa.ln_slot.gain"), p.get("sa.ln_slot.bias"))?;
        let q = g.matmul(s, p.get("sa.wq"))?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax(logits, 0)?;
        let shifted = g.add_scalar(a, ATTN_RENORM_EPS)?;
        let mass = g.sum_axis(shifted, 1, true)?;
        let weights = g.div(shifted, mass)?;
        let updates = g.matmul(weights, v)?;
        slots = gru_cell(g, updates, slots, &gru)?;
        let r = layer_norm(g, slots, 1, p.get("sa.ln_mlp.gain"), p.get("sa.ln_mlp.bias"))?;
        let r = mlp2(g, p, "sa.mlp", r)?;
        slots = g.add(slots, r)?;
        attn = Some(a);
    }
    Ok((slots, attn.expect("n_iters >= 1")))
}

/// Residual MLP transition from one frame's slots to the next frame's initialization.
pub fn propagate_slots(g: &mut Graph, p: &Bound, slots_prev: Var) -> Result<Var> {
    let delta = mlp2(g, p, "pred", slots_prev)?;
    g.add(slots_prev, delta)
}

/// First-frame slots: learned mean plus learned-scale Gaussian noise.
pub fn init_slots(g: &mut Graph, p: &Bound, noise: Var) -> Result<Var> {
    let sigma = g.exp(p.get("init.log_sigma"))?;
    let scaled = g.mul(noise, sigma)?;
    g.add(scaled, p.get("init.mu"))
}
