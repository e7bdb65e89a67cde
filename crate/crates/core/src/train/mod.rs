//! Training loop, optimizer, checkpoints, evaluation and mask export.

mod adam;
mod checkpoint;
mod config;
mod evaluate;
mod export;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Entry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Objective, TrainConfig};
pub use evaluate::{
    eval_noise, evaluate, evaluate_labels, gt_field, model_from_checkpoint, predict_mask_labels, score_video,
};
pub use export::{export_masks, read_manifest, read_pgm, write_pgm, MANIFEST_NAME};

use crate::autodiff::Graph;
use crate::losses::{
    loss_cl_dec, loss_cl_enc, loss_recon, loss_reg, loss_slot_contrast, sample_anchors,
    select_penalized_slots, stage_total, LossBreakdown, LossError, Stage,
};
use crate::metrics::MetricError;
use crate::model::{project, pseudo_labels, BackboneError, Model, Params};
use crate::synthdata::{DatasetError, VideoSample};
use crate::tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("dataset {path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(
        "non-finite loss at step {step}: recon={} slot_contrast={} cl_dec={} cl_enc={} reg={} total={}",
        .breakdown.recon, .breakdown.slot_contrast, .breakdown.cl_dec, .breakdown.cl_enc, .breakdown.reg, .breakdown.total
    )]
    NonFinite { step: usize, breakdown: LossBreakdown },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub const LOSS_LOG_HEADER: &str = "step,eta,recon,slot_contrast,cl_dec,cl_enc,reg,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub eta: f64,
    pub loss: LossBreakdown,
}

impl LossRecord {
    fn values(&self) -> [f64; 8] {
        let l = &self.loss;
        [self.step as f64, self.eta, l.recon, l.slot_contrast, l.cl_dec, l.cl_enc, l.reg, l.total]
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            step: v[0] as usize,
            eta: v[1],
            loss: LossBreakdown {
                recon: v[2],
                slot_contrast: v[3],
                cl_dec: v[4],
                cl_enc: v[5],
                reg: v[6],
                total: v[7],
            },
        }
    }
}

pub fn write_loss_log<W: Write>(history: &[LossRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    for r in history {
        let l = &r.loss;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.eta, l.recon, l.slot_contrast, l.cl_dec, l.cl_enc, l.reg, l.total
        )?;
    }
    Ok(())
}

pub fn read_videos(path: &Path) -> Result<Vec<VideoSample>, TrainError> {
    crate::synthdata::read_dataset(path).map_err(|source| TrainError::Dataset {
        path: path.to_path_buf(),
        source,
    })
}

/// Frozen backbone features for every video; all videos must share a shape.
pub fn extract_all(model: &Model, videos: &[VideoSample]) -> Result<Vec<Tensor>, TrainError> {
    let first = videos
        .first()
        .ok_or_else(|| TrainError::Mismatch("dataset contains no videos".into()))?;
    let mut out = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        if (v.t, v.h, v.w) != (first.t, first.h, first.w) {
            return Err(TrainError::Mismatch(format!(
                "video {i} is {}x{}x{}, video 0 is {}x{}x{}",
                v.t, v.h, v.w, first.t, first.h, first.w
            )));
        }
        out.push(model.embedder.extract(v)?);
    }
    Ok(out)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub params: Params,
    pub adam: AdamState,
    /// Steps completed so far.
    pub step: usize,
    pub history: Vec<LossRecord>,
    features: Vec<Tensor>,
}

impl Trainer {
    pub fn new(config: TrainConfig, videos: &[VideoSample]) -> Result<Self, TrainError> {
        config.validate()?;
        let (t, h, w) = videos
            .first()
            .map(|v| (v.t, v.h, v.w))
            .ok_or_else(|| TrainError::Mismatch("dataset contains no videos".into()))?;
        if t < 2 {
            return Err(TrainError::Mismatch(format!("videos need at least 2 frames, got {t}")));
        }
        if config.patch == 0 || h % config.patch != 0 || w % config.patch != 0 {
            return Err(BackboneError::NotDivisible { h, w, patch: config.patch }.into());
        }
        let model = Model::new(config.model_config([h / config.patch, w / config.patch]))?;
        let features = extract_all(&model, videos)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = model.init_params(&mut rng);
        let adam = AdamState::zeros_like(&params);
        Ok(Self {
            config,
            model,
            params,
            adam,
            step: 0,
            history: Vec::new(),
            features,
        })
    }

    /// Randomness for step `step`: a dedicated ChaCha stream of the run seed,
    /// so any step can be replayed without stored generator state.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    pub fn eta(&self, step: usize) -> f64 {
        step as f64 / self.config.total_steps as f64
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let warm = (self.config.warmup * self.config.total_steps as f64).ceil() as usize;
        if warm == 0 {
            self.config.lr
        } else {
            self.config.lr * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Runs one optimization step and returns its loss record.
    pub fn step(&mut self) -> Result<LossRecord, TrainError> {
        let step = self.step;
        let eta = self.eta(step);
        let cfg = &self.config;
        let schedule = cfg.schedule();
        let stage = match cfg.objective {
            Objective::Srl => schedule.stage(eta)?,
            Objective::Base => Stage::Base,
        };
        let mut rng = self.step_rng(step);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let batch = cfg.batch_size;
        let mut sum = LossBreakdown::default();
        let mut total_vars = Vec::with_capacity(batch);
        for _ in 0..batch {
            let video = rand::Rng::random_range(&mut rng, 0..self.features.len());
            let feats = &self.features[video];
            let noise = self.model.sample_noise(&mut rng);
            let out = self.model.forward_slots(&mut g, &p, feats, &noise)?;
            let recon = loss_recon(&mut g, out.decoded, out.backbone)?;
            let sc = loss_slot_contrast(&mut g, out.slots, cfg.tau)?;
            let mut total = g.add(recon, sc)?;
            sum.recon += g.value(recon).item();
            sum.slot_contrast += g.value(sc).item();
            match stage {
                Stage::Regularize => {
                    let pen = select_penalized_slots(
                        g.value(out.slots),
                        g.value(out.attn),
                        cfg.penalized_slots(),
                    )?;
                    let reg = loss_reg(&mut g, out.attn, &pen)?;
                    sum.reg += g.value(reg).item();
                    let weighted = g.scale(reg, schedule.lambda_reg)?;
                    total = g.add(total, weighted)?;
                }
                Stage::Base => {}
                Stage::Contrastive => {
                    let labels = pseudo_labels(g.value(out.attn), g.value(out.mask));
                    let anchors = sample_anchors(labels.attn.len(), cfg.max_anchors, &mut rng);
                    let (z, y, v) = project(&mut g, &p, out.decoded, out.backbone, out.encoded)?;
                    let dec = loss_cl_dec(&mut g, z, y, &labels.attn, &anchors, cfg.tau)?;
                    let enc = loss_cl_enc(&mut g, v, feats, &labels.mask, &anchors, cfg.k, cfg.tau)?;
                    sum.cl_dec += g.value(dec).item();
                    sum.cl_enc += g.value(enc).item();
                    let cl = g.add(dec, enc)?;
                    let weighted = g.scale(cl, schedule.lambda_cl)?;
                    total = g.add(total, weighted)?;
                }
            }
            total_vars.push(total);
        }
        let inv = 1.0 / batch as f64;
        let parts = LossBreakdown {
            recon: sum.recon * inv,
            slot_contrast: sum.slot_contrast * inv,
            cl_dec: sum.cl_dec * inv,
            cl_enc: sum.cl_enc * inv,
            reg: sum.reg * inv,
            total: 0.0,
        };
        let breakdown = if cfg.objective == Objective::Base {
            LossBreakdown {
                total: parts.recon + parts.slot_contrast,
                ..parts
            }
        } else {
            stage_total(parts, &schedule, eta)?
        };
        let stacked = g.stack(&total_vars)?;
        let loss = g.mean(stacked)?;
        let value = g.value(loss).item();
        let fields = [
            breakdown.recon,
            breakdown.slot_contrast,
            breakdown.cl_dec,
            breakdown.cl_enc,
            breakdown.reg,
            value,
        ];
        if fields.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite { step, breakdown });
        }
        g.backward(loss)?;
        let grads = p.grads(&g);
        let adam = AdamConfig {
            lr: self.learning_rate(step),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        adam_step(&mut self.params, &grads, &mut self.adam, &adam);
        let record = LossRecord {
            step,
            eta,
            loss: breakdown,
        };
        self.history.push(record);
        self.step += 1;
        Ok(record)
    }

    /// Steps until `step == min(until, total_steps)`.
    pub fn run_until(&mut self, until: usize) -> Result<(), TrainError> {
        while self.step < until.min(self.config.total_steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_until(self.config.total_steps)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("state/config", Entry::Text(self.config.to_text()));
        ck.push("state/step", Entry::U64(vec![self.step as u64]));
        ck.push("state/adam_t", Entry::U64(vec![self.adam.t]));
        let history = self.history.iter().flat_map(|r| r.values()).map(f64::to_bits).collect();
        ck.push("state/loss_history", Entry::U64(history));
        ck.push("embedder/projection", Entry::F64(self.model.embedder.projection.clone()));
        for (name, t) in self.params.iter() {
            ck.push(format!("param/{name}"), Entry::F64(t.clone()));
        }
        for (name, t) in self.adam.m.iter() {
            ck.push(format!("adam.m/{name}"), Entry::F64(t.clone()));
        }
        for (name, t) in self.adam.v.iter() {
            ck.push(format!("adam.v/{name}"), Entry::F64(t.clone()));
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a trainer from a checkpoint; subsequent steps reproduce the
    /// uninterrupted run exactly.
    pub fn resume(ck: &Checkpoint, videos: &[VideoSample]) -> Result<Self, TrainError> {
        let config = TrainConfig::from_text(ck.text("state/config")?)?;
        let mut trainer = Self::new(config, videos)?;
        trainer.params = load_params(ck, &trainer.params, "param/")?;
        trainer.adam.m = load_params(ck, &trainer.adam.m, "adam.m/")?;
        trainer.adam.v = load_params(ck, &trainer.adam.v, "adam.v/")?;
        trainer.adam.t = single_u64(ck, "state/adam_t")?;
        trainer.step = single_u64(ck, "state/step")? as usize;
        let bits = ck.u64s("state/loss_history")?;
        if bits.len() % 8 != 0 {
            return Err(TrainError::Checkpoint("loss history length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        trainer.history = values.chunks(8).map(LossRecord::from_values).collect();
        if ck.tensor("embedder/projection")? != &trainer.model.embedder.projection {
            return Err(TrainError::Checkpoint("embedder projection does not match embed_seed".into()));
        }
        Ok(trainer)
    }

    pub fn write_loss_log(&self, path: &Path) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        write_loss_log(&self.history, &mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }
}

fn single_u64(ck: &Checkpoint, name: &str) -> Result<u64, TrainError> {
    match ck.u64s(name)? {
        [v] => Ok(*v),
        _ => Err(TrainError::Checkpoint(format!("{name} must hold one value"))),
    }
}

/// Reads `prefix + name` for every tensor in `like`, checking shapes.
pub fn load_params(ck: &Checkpoint, like: &Params, prefix: &str) -> Result<Params, TrainError> {
    let mut out = Params::new();
    for (name, t) in like.iter() {
        let key = format!("{prefix}{name}");
        let loaded = ck.tensor(&key)?;
        if loaded.shape() != t.shape() {
            return Err(TrainError::Mismatch(format!(
                "{key}: checkpoint shape {:?}, model expects {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        out.insert(name, loaded.clone());
    }
    Ok(out)
}
