use super::TrainError;
use crate::losses::{StageSchedule, DEFAULT_MAX_ANCHORS, DEFAULT_TAU};
use crate::model::ModelConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Which terms the training loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Staged: regularization, then base only, then contrastive refinement.
    Srl,
    /// Reconstruction plus slot contrast for the whole run.
    Base,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Srl => "srl",
            Objective::Base => "base",
        }
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "srl" => Ok(Objective::Srl),
            "base" => Ok(Objective::Base),
            other => Err(format!("unknown objective {other:?} (expected srl or base)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of `total_steps` spent in linear learning-rate warm-up.
    pub warmup: f64,
    pub patch: usize,
    pub slots: usize,
    pub slot_dim: usize,
    pub enc_dim: usize,
    pub proj_dim: usize,
    pub backbone_dim: usize,
    pub hidden_dim: usize,
    pub pos_channels: usize,
    pub iters: usize,
    pub iters_first: usize,
    /// Nearest-neighbour positives per anchor in the encoder loss.
    pub k: usize,
    /// Penalized slots; `None` means half the slot count.
    pub m: Option<usize>,
    pub tau: f64,
    pub lambda_reg: f64,
    pub lambda_cl: f64,
    pub reg_end: f64,
    pub cl_start: f64,
    pub max_anchors: usize,
    pub seed: u64,
    pub embed_seed: u64,
    pub objective: Objective,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data.bin"),
            total_steps: 3000,
            batch_size: 1,
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 0.05,
            patch: 8,
            slots: 5,
            slot_dim: 32,
            enc_dim: 32,
            proj_dim: 16,
            backbone_dim: 24,
            hidden_dim: 64,
            pos_channels: 0,
            iters: 2,
            iters_first: 3,
            k: 8,
            m: None,
            tau: DEFAULT_TAU,
            lambda_reg: 0.1,
            lambda_cl: 0.1,
            reg_end: 0.1,
            cl_start: 0.2,
            max_anchors: DEFAULT_MAX_ANCHORS,
            seed: 0,
            embed_seed: 17,
            objective: Objective::Srl,
            checkpoint: PathBuf::from("model.ckpt"),
            loss_log: PathBuf::from("loss.csv"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| TrainError::Config(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "total_steps" => self.total_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "slots" => self.slots = parse(key, v)?,
            "slot_dim" => self.slot_dim = parse(key, v)?,
            "enc_dim" => self.enc_dim = parse(key, v)?,
            "proj_dim" => self.proj_dim = parse(key, v)?,
            "backbone_dim" => self.backbone_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "pos_channels" => self.pos_channels = parse(key, v)?,
            "iters" => self.iters = parse(key, v)?,
            "iters_first" => self.iters_first = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "m" => {
                self.m = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "tau" => self.tau = parse(key, v)?,
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "lambda_cl" => self.lambda_cl = parse(key, v)?,
            "reg_end" => self.reg_end = parse(key, v)?,
            "cl_start" => self.cl_start = parse(key, v)?,
            "max_anchors" => self.max_anchors = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "embed_seed" => self.embed_seed = parse(key, v)?,
            "objective" => self.objective = parse(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "loss_log" => self.loss_log = PathBuf::from(v),
            other => return Err(TrainError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every field as `key = value`, readable by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", &self.dataset.display());
        kv("total_steps", &self.total_steps);
        kv("batch_size", &self.batch_size);
        kv("lr", &self.lr);
        kv("beta1", &self.beta1);
        kv("beta2", &self.beta2);
        kv("eps", &self.eps);
        kv("warmup", &self.warmup);
        kv("patch", &self.patch);
        kv("slots", &self.slots);
        kv("slot_dim", &self.slot_dim);
        kv("enc_dim", &self.enc_dim);
        kv("proj_dim", &self.proj_dim);
        kv("backbone_dim", &self.backbone_dim);
        kv("hidden_dim", &self.hidden_dim);
        kv("pos_channels", &self.pos_channels);
        kv("iters", &self.iters);
        kv("iters_first", &self.iters_first);
        kv("k", &self.k);
        match self.m {
            Some(m) => kv("m", &m),
            None => kv("m", &"auto"),
        }
        kv("tau", &self.tau);
        kv("lambda_reg", &self.lambda_reg);
        kv("lambda_cl", &self.lambda_cl);
        kv("reg_end", &self.reg_end);
        kv("cl_start", &self.cl_start);
        kv("max_anchors", &self.max_anchors);
        kv("seed", &self.seed);
        kv("embed_seed", &self.embed_seed);
        kv("objective", &self.objective.name());
        kv("checkpoint", &self.checkpoint.display());
        kv("loss_log", &self.loss_log.display());
        s
    }

    pub fn penalized_slots(&self) -> usize {
        self.m.unwrap_or(self.slots / 2)
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            reg_end: self.reg_end,
            cl_start: self.cl_start,
            lambda_reg: self.lambda_reg,
            lambda_cl: self.lambda_cl,
        }
    }

    pub fn model_config(&self, grid: [usize; 2]) -> ModelConfig {
        ModelConfig {
            patch: self.patch,
            grid,
            backbone_dim: self.backbone_dim,
            pos_channels: self.pos_channels,
            enc_dim: self.enc_dim,
            slot_dim: self.slot_dim,
            proj_dim: self.proj_dim,
            hidden_dim: self.hidden_dim,
            slots: self.slots,
            iters_first: self.iters_first,
            iters: self.iters,
            embed_seed: self.embed_seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive".into());
        }
        if self.slots == 0 || self.iters == 0 || self.iters_first == 0 {
            return bad("slots and iteration counts must be positive".into());
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.tau > 0.0) {
            return bad("lr, eps and tau must be positive".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return bad("warmup must lie in [0, 1]".into());
        }
        if self.max_anchors == 0 || self.k == 0 {
            return bad("max_anchors and k must be positive".into());
        }
        let m = self.penalized_slots();
        if self.objective == Objective::Srl && (m == 0 || m >= self.slots) {
            return bad(format!("m = {m} must lie in 1..{}", self.slots));
        }
        self.schedule()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}
