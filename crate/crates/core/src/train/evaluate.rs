use super::{extract_all, load_params, Checkpoint, TrainConfig, TrainError};
use crate::autodiff::Graph;
use crate::metrics::{fg_ari, mbo_from_labels, upsample_labels, LabelField, Level, MetricsRow};
use crate::model::{argmax_slots, Model, Params};
use crate::synthdata::VideoSample;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Slot-initialization noise for evaluating `video`, fixed by the video's seed.
pub fn eval_noise(model: &Model, video: &VideoSample) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(video.seed);
    model.sample_noise(&mut rng)
}

/// Decoder-mask argmax labels, `[T * N]`.
pub fn predict_mask_labels(
    model: &Model,
    params: &Params,
    features: &Tensor,
    noise: &Tensor,
) -> Result<Vec<usize>, TrainError> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| false);
    let out = model.forward_slots(&mut g, &p, features, noise)?;
    Ok(argmax_slots(g.value(out.mask)))
}

pub fn gt_field(video: &VideoSample) -> LabelField {
    LabelField::new(
        video.t,
        video.h,
        video.w,
        video.masks.iter().map(|&m| m as u32).collect(),
    )
}

pub fn score_video(video_id: usize, pred: &LabelField, gt: &LabelField) -> Result<MetricsRow, TrainError> {
    Ok(MetricsRow {
        video_id,
        fg_ari_video: fg_ari(pred, gt, Level::Video)?,
        fg_ari_image: fg_ari(pred, gt, Level::Image)?,
        mbo_video: mbo_from_labels(pred, gt, Level::Video)?,
        mbo_image: mbo_from_labels(pred, gt, Level::Image)?,
    })
}

/// Scores precomputed pixel-level predictions, one per video.
pub fn evaluate_labels(videos: &[VideoSample], preds: &[LabelField]) -> Result<Vec<MetricsRow>, TrainError> {
    if videos.len() != preds.len() {
        return Err(TrainError::Mismatch(format!(
            "{} videos but {} predictions",
            videos.len(),
            preds.len()
        )));
    }
    videos
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (v, p))| score_video(i, p, &gt_field(v)))
        .collect()
}

/// Forward pass, mask labels, nearest-neighbour upsampling and scoring for
/// every video. Returns the metric rows and the pixel-level predictions.
pub fn evaluate(
    model: &Model,
    params: &Params,
    videos: &[VideoSample],
) -> Result<(Vec<MetricsRow>, Vec<LabelField>), TrainError> {
    let features = extract_all(model, videos)?;
    let mut preds = Vec::with_capacity(videos.len());
    for (v, f) in videos.iter().zip(&features) {
        let labels = predict_mask_labels(model, params, f, &eval_noise(model, v))?;
        preds.push(upsample_labels(&labels, v.t, v.h, v.w, model.config.patch)?);
    }
    let rows = evaluate_labels(videos, &preds)?;
    Ok((rows, preds))
}

/// Restores the model stored in `ck` for frames of size `h x w`. When
/// `requested` is given, its slot count must match the checkpoint's.
pub fn model_from_checkpoint(
    ck: &Checkpoint,
    requested: Option<&TrainConfig>,
    h: usize,
    w: usize,
) -> Result<(TrainConfig, Model, Params), TrainError> {
    let stored = TrainConfig::from_text(ck.text("state/config")?)?;
    if let Some(req) = requested {
        if req.slots != stored.slots {
            return Err(TrainError::Mismatch(format!(
                "slot count mismatch: checkpoint has {} slots, config requests {}",
                stored.slots, req.slots
            )));
        }
    }
    if stored.patch == 0 || h % stored.patch != 0 || w % stored.patch != 0 {
        return Err(crate::model::BackboneError::NotDivisible { h, w, patch: stored.patch }.into());
    }
    let model = Model::new(stored.model_config([h / stored.patch, w / stored.patch]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let like = model.init_params(&mut rng);
    let params = load_params(ck, &like, "param/")?;
    Ok((stored, model, params))
}
