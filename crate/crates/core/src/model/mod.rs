//! Video object-centric network.
//!
//! Frozen patch features feed a two-layer MLP encoder. Slot attention runs
//! per frame, initialized on frame 1 from a learned Gaussian and afterwards
//! from the previous frame's slots through a residual predictor. A spatial
//! broadcast decoder reconstructs the frozen features, and three projection
//! heads map decoded, frozen and encoded features into a shared space.

mod backbone;
mod decoder;
mod labels;
mod params;
mod slot_attention;

pub use backbone::{BackboneError, PatchEmbedder, COLOR_GAIN, POS_GAIN};
pub use decoder::{decode, Decoded};
pub use labels::{argmax_slots, pseudo_labels, PseudoLabels};
pub use params::{Bound, Params};
pub use slot_attention::{init_slots, propagate_slots, slot_attention_frame, ATTN_RENORM_EPS};

use crate::autodiff::{linear, Graph, Var};
use crate::tensor::{Result, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    /// Patch grid `[rows, cols]`.
    pub grid: [usize; 2],
    pub backbone_dim: usize,
    pub pos_channels: usize,
    pub enc_dim: usize,
    pub slot_dim: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub slots: usize,
    pub iters_first: usize,
    pub iters: usize,
    pub embed_seed: u64,
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.grid[0] * self.grid[1]
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            grid: [7, 7],
            backbone_dim: 24,
            pos_channels: 0,
            enc_dim: 32,
            slot_dim: 32,
            proj_dim: 16,
            hidden_dim: 64,
            slots: 5,
            iters_first: 3,
            iters: 2,
            embed_seed: 17,
        }
    }
}

/// Encoder, slot and decoder outputs, without the projection heads.
#[derive(Clone, Copy, Debug)]
pub struct SlotOutput {
    pub backbone: Var,
    pub encoded: Var,
    pub slots: Var,
    pub attn: Var,
    pub mask: Var,
    pub decoded: Var,
    pub per_slot: Var,
}

/// All differentiable outputs of one video's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[T, N, D_b]`, a constant on the tape.
    pub backbone: Var,
    /// `[T, N, D_e]`
    pub encoded: Var,
    /// `[T, S, D_s]`
    pub slots: Var,
    /// `[S, T, N]`
    pub attn: Var,
    /// `[S, T, N]`
    pub mask: Var,
    /// `[T, N, D_b]`
    pub decoded: Var,
    /// `[S, T, N, D_b]`
    pub per_slot: Var,
    /// `[T, N, C]` projections of decoded, frozen and encoded features.
    pub z: Var,
    pub y: Var,
    pub v: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embedder: PatchEmbedder,
    /// `[N, 4]` patch-centre coordinates `(x, y, 1 - x, 1 - y)` in `[0, 1]`.
    pub grid: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> std::result::Result<Self, BackboneError> {
        let embedder = PatchEmbedder::new(
            config.patch,
            config.backbone_dim,
            config.pos_channels,
            config.embed_seed,
        )?;
        let grid = position_grid(config.grid[0], config.grid[1]);
        Ok(Self {
            config,
            embedder,
            grid,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        let c = &self.config;
        let (db, de, ds, dc, h) = (c.backbone_dim, c.enc_dim, c.slot_dim, c.proj_dim, c.hidden_dim);
        let mut p = Params::new();
        p.linear("enc.l1", db, h, rng);
        p.xavier("enc.pos", 4, h, rng);
        p.linear("enc.l2", h, de, rng);

        p.xavier("init.mu", 1, ds, rng);
        let mu = p.get("init.mu").unwrap().clone().reshape([ds]).unwrap();
        p.insert("init.mu", mu);
        p.insert("init.log_sigma", Tensor::zeros([ds]));

        p.layer_norm("sa.ln_in", de);
        p.xavier("sa.wk", de, ds, rng);
        p.xavier("sa.wv", de, ds, rng);
        p.layer_norm("sa.ln_slot", ds);
        p.xavier("sa.wq", ds, ds, rng);
        for gate in ["r", "z", "n"] {
            p.xavier(&format!("sa.gru.w_i{gate}"), ds, ds, rng);
            p.xavier(&format!("sa.gru.w_h{gate}"), ds, ds, rng);
        }
        for b in ["b_r", "b_z", "b_in", "b_hn"] {
            p.insert(format!("sa.gru.{b}"), Tensor::zeros([ds]));
        }
        p.layer_norm("sa.ln_mlp", ds);
        p.linear("sa.mlp.l1", ds, h, rng);
        p.linear("sa.mlp.l2", h, ds, rng);

        p.linear("pred.l1", ds, h, rng);
        p.linear("pred.l2", h, ds, rng);

        p.insert(
            "dec.pos",
            Tensor::randn([c.num_patches(), ds], 1.0, rng),
        );
        p.xavier("dec.w1_slot", ds, h, rng);
        p.xavier("dec.w1_pos", ds, h, rng);
        p.insert("dec.b1", Tensor::zeros([h]));
        p.linear("dec.l2", h, h, rng);
        p.linear("dec.feat", h, db, rng);
        p.linear("dec.alpha", h, 1, rng);

        for (name, input) in [("head.z", db), ("head.y", db), ("head.v", de)] {
            p.linear(&format!("{name}.l1"), input, h, rng);
            p.linear(&format!("{name}.l2"), h, dc, rng);
        }
        p
    }

    /// Gaussian noise for the first-frame slot initialization.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        Tensor::from_fn([self.config.slots, self.config.slot_dim], |_| {
            rng.sample::<f64, _>(StandardNormal)
        })
    }

    /// Full forward pass over one video's frozen features `[T, N, D_b]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: &Tensor, noise: &Tensor) -> Result<ForwardOutput> {
        let o = self.forward_slots(g, p, features, noise)?;
        let (z, y, v) = project(g, p, o.decoded, o.backbone, o.encoded)?;
        Ok(ForwardOutput {
            backbone: o.backbone,
            encoded: o.encoded,
            slots: o.slots,
            attn: o.attn,
            mask: o.mask,
            decoded: o.decoded,
            per_slot: o.per_slot,
            z,
            y,
            v,
        })
    }

    /// Forward pass up to the decoder; the heads are only needed by the
    /// contrastive losses.
    pub fn forward_slots(&self, g: &mut Graph, p: &Bound, features: &Tensor, noise: &Tensor) -> Result<SlotOutput> {
        let backbone = g.constant(features.clone());
        let grid = g.constant(self.grid.clone());
        let encoded = encode(g, p, backbone, grid)?;
        let t = features.shape()[0];
        let noise = g.constant(noise.clone());
        let mut slots_per_frame = Vec::with_capacity(t);
        let mut attn_per_frame = Vec::with_capacity(t);
        let mut prev: Option<Var> = None;
        for f in 0..t {
            let (init, iters) = match prev {
                None => (init_slots(g, p, noise)?, self.config.iters_first),
                Some(s) => (propagate_slots(g, p, s)?, self.config.iters),
            };
            let frame = g.select(encoded, f)?;
            let (slots, attn) = slot_attention_frame(g, p, frame, init, iters)?;
            slots_per_frame.push(slots);
            attn_per_frame.push(attn);
            prev = Some(slots);
        }
        let slots = g.stack(&slots_per_frame)?;
        let attn = g.stack(&attn_per_frame)?;
        let attn = g.permute(attn, &[1, 0, 2])?;
        let dec = decode(g, p, slots)?;
        Ok(SlotOutput {
            backbone,
            encoded,
            slots,
            attn,
            mask: dec.mask,
            decoded: dec.features,
            per_slot: dec.per_slot,
        })
    }
}

pub fn position_grid(rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn([rows * cols, 4], |i| {
        let (patch, c) = (i / 4, i % 4);
        let x = (patch % cols) as f64 / (cols.max(2) - 1) as f64;
        let y = (patch / cols) as f64 / (rows.max(2) - 1) as f64;
        [x, y, 1.0 - x, 1.0 - y][c]
    })
}

/// Two-layer MLP from `[T, N, D_b]` to `[T, N, D_e]`. A learned projection of
/// the patch grid (`[N, 4]`) enters the hidden layer, so slots can carry
/// location while the reconstruction target stays position-free.
pub fn encode(g: &mut Graph, p: &Bound, backbone: Var, grid: Var) -> Result<Var> {
    let h = linear(g, backbone, p.get("enc.l1.w"), Some(p.get("enc.l1.b")))?;
    let pos = g.matmul(grid, p.get("enc.pos"))?;
    let h = g.add(h, pos)?;
    let h = g.relu(h)?;
    linear(g, h, p.get("enc.l2.w"), Some(p.get("enc.l2.b")))
}

/// Projection heads `(z, y, v)`; `y` is computed from a detached copy of the
/// backbone features.
pub fn project(g: &mut Graph, p: &Bound, decoded: Var, backbone: Var, encoded: Var) -> Result<(Var, Var, Var)> {
    let z = slot_attention::head(g, p, "head.z", decoded)?;
    let frozen = g.detach(backbone);
    let y = slot_attention::head(g, p, "head.y", frozen)?;
    let v = slot_attention::head(g, p, "head.v", encoded)?;
    Ok((z, y, v))
}
