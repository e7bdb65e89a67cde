//! Frozen patch embedder standing in for a pretrained vision backbone.
//!
//! Each `p x p` patch maps to `[random projection of raw pixels | gained mean
//! color | optional (x, y) position]`. The projection is seeded and never
//! trained, and its output enters the tape as a constant.

use crate::synthdata::VideoSample;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BackboneError {
    #[error("frame {h}x{w} is not divisible by patch size {patch}")]
    NotDivisible { h: usize, w: usize, patch: usize },
    #[error("backbone dim {dim} too small for 3 color + {pos} position channels")]
    TooNarrow { dim: usize, pos: usize },
    #[error("position channels must be 0 or 2, got {0}")]
    PosChannels(usize),
}

pub const COLOR_GAIN: f64 = 2.0;
pub const POS_GAIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedder {
    pub patch: usize,
    pub pos_channels: usize,
    /// `[patch * patch * 3, dim - 3 - pos_channels]`.
    pub projection: Tensor,
}

impl PatchEmbedder {
    pub fn new(patch: usize, dim: usize, pos_channels: usize, seed: u64) -> Result<Self, BackboneError> {
        if pos_channels != 0 && pos_channels != 2 {
            return Err(BackboneError::PosChannels(pos_channels));
        }
        if dim < 4 + pos_channels {
            return Err(BackboneError::TooNarrow {
                dim,
                pos: pos_channels,
            });
        }
        let fan_in = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Tensor::randn(
            [fan_in, dim - 3 - pos_channels],
            1.0 / (fan_in as f64).sqrt(),
            &mut rng,
        );
        Ok(Self {
            patch,
            pos_channels,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[1] + 3 + self.pos_channels
    }

    pub fn num_patches(&self, h: usize, w: usize) -> usize {
        (h / self.patch) * (w / self.patch)
    }

    /// `[T, N, D_b]` features, patches in row-major grid order.
    pub fn extract(&self, video: &VideoSample) -> Result<Tensor, BackboneError> {
        let p = self.patch;
        if p == 0 || video.h % p != 0 || video.w % p != 0 {
            return Err(BackboneError::NotDivisible {
                h: video.h,
                w: video.w,
                patch: p,
            });
        }
        let (gh, gw) = (video.h / p, video.w / p);
        let n = gh * gw;
        let dim = self.dim();
        let n_rand = self.projection.shape()[1];
        let proj = self.projection.data();
        let mut out = vec![0.0; video.t * n * dim];
        let mut pix = vec![0.0; p * p * 3];
        for t in 0..video.t {
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut mean = [0.0; 3];
                    for dy in 0..p {
                        for dx in 0..p {
                            let rgb = video.pixel(t, gy * p + dy, gx * p + dx);
                            for c in 0..3 {
                                let v = rgb[c] as f64;
                                pix[(dy * p + dx) * 3 + c] = v - 0.5;
                                mean[c] += v;
                            }
                        }
                    }
                    let row = &mut out[((t * n) + gy * gw + gx) * dim..][..dim];
                    for (i, &x) in pix.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &w) in row[..n_rand].iter_mut().zip(&proj[i * n_rand..(i + 1) * n_rand]) {
                            *o += x * w;
                        }
                    }
                    for c in 0..3 {
                        row[n_rand + c] = COLOR_GAIN * (mean[c] / (p * p) as f64 - 0.5);
                    }
                    if self.pos_channels == 2 {
                        let coord = |i: usize, len: usize| POS_GAIN * ((2 * i + 1) as f64 / len as f64 - 1.0);
                        row[n_rand + 3] = coord(gx, gw);
                        row[n_rand + 4] = coord(gy, gh);
                    }
                }
            }
        }
        Ok(Tensor::new([video.t, n, dim], out).expect("backbone shape"))
    }
}
