//! Seeded moving-shape videos with per-pixel instance masks.
//!
//! Objects are flat-colored disks, squares and triangles moving at constant
//! integer velocity and bouncing off the frame border. Later objects are
//! drawn over earlier ones. The background is a static value-noise texture.

mod format;

pub use format::{read_dataset, write_dataset, DatasetError, DATASET_MAGIC, DATASET_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("object of size {size} does not fit in a {h}x{w} frame")]
    ObjectTooLarge { size: usize, h: usize, w: usize },
    #[error("could not place {0} non-overlapping objects")]
    Placement(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the pixel whose center is offset `(dx, dy)` from the shape center
    /// lies inside a shape of half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Backbone patch size; `h` and `w` must be multiples of it.
    pub patch: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Half-extent range in pixels (inclusive).
    pub min_size: usize,
    pub max_size: usize,
    /// Per-axis speed range in pixels per frame (inclusive).
    pub min_speed: i64,
    pub max_speed: i64,
    pub palette_size: usize,
    pub texture_amplitude: f64,
    pub background_level: f64,
    pub allow_occlusion: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            t: 4,
            h: 56,
            w: 56,
            patch: 8,
            min_objects: 2,
            max_objects: 4,
            shapes: ShapeKind::ALL.to_vec(),
            min_size: 7,
            max_size: 11,
            min_speed: 0,
            max_speed: 3,
            palette_size: 8,
            texture_amplitude: 0.08,
            background_level: 0.3,
            allow_occlusion: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: &str| Err(GenerateError::Config(m.to_string()));
        if self.t == 0 || self.h == 0 || self.w == 0 || self.patch == 0 {
            return bad("t, h, w and patch must be positive");
        }
        if self.h % self.patch != 0 || self.w % self.patch != 0 {
            return Err(GenerateError::Config(format!(
                "frame {}x{} not divisible by patch {}",
                self.h, self.w, self.patch
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if self.max_objects > u16::MAX as usize {
            return bad("too many objects for 16-bit mask ids");
        }
        if self.shapes.is_empty() {
            return bad("shape family set is empty");
        }
        if self.min_size > self.max_size || self.min_speed > self.max_speed || self.min_speed < 0 {
            return bad("size and speed ranges must be ordered and non-negative");
        }
        if self.palette_size == 0 {
            return bad("palette must hold at least one color");
        }
        if 2 * self.max_size > self.h.min(self.w) {
            return Err(GenerateError::ObjectTooLarge {
                size: self.max_size,
                h: self.h,
                w: self.w,
            });
        }
        Ok(())
    }

    /// Sets one field from its text form; `shapes` takes a comma-separated list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), GenerateError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, GenerateError> {
            v.parse()
                .map_err(|_| GenerateError::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool, GenerateError> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(GenerateError::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        let v = value.trim();
        match key.trim() {
            "t" => self.t = num(key, v)?,
            "h" => self.h = num(key, v)?,
            "w" => self.w = num(key, v)?,
            "patch" => self.patch = num(key, v)?,
            "min_objects" => self.min_objects = num(key, v)?,
            "max_objects" => self.max_objects = num(key, v)?,
            "shapes" => {
                self.shapes = v
                    .split(',')
                    .map(|s| {
                        ShapeKind::parse(s.trim())
                            .ok_or_else(|| GenerateError::Config(format!("unknown shape {s:?}")))
                    })
                    .collect::<Result<_, _>>()?
            }
            "min_size" => self.min_size = num(key, v)?,
            "max_size" => self.max_size = num(key, v)?,
            "min_speed" => self.min_speed = num(key, v)?,
            "max_speed" => self.max_speed = num(key, v)?,
            "palette_size" => self.palette_size = num(key, v)?,
            "texture_amplitude" => self.texture_amplitude = num(key, v)?,
            "background_level" => self.background_level = num(key, v)?,
            "allow_occlusion" => self.allow_occlusion = flag(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(GenerateError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), GenerateError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GenerateError::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Config for the `index`-th video of a dataset seeded with `self.seed`.
    pub fn for_video(&self, index: usize) -> Self {
        Self {
            seed: video_seed(self.seed, index),
            ..self.clone()
        }
    }
}

/// Per-video seed derived from a dataset seed (splitmix64 finalizer).
pub fn video_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Geometry and trajectory of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrack {
    pub shape: ShapeKind,
    pub size: usize,
    pub color: [f32; 3],
    /// Integer centers `(x, y)` per frame.
    pub centers: Vec<(i64, i64)>,
    pub velocity: (i64, i64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Number of objects; mask ids are `1..=num_objects`, 0 is background.
    pub num_objects: usize,
    pub seed: u64,
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub frames: Vec<f32>,
    /// `[T, H, W]`.
    pub masks: Vec<u16>,
}

impl VideoSample {
    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let o = ((t * self.h + y) * self.w + x) * 3;
        [self.frames[o], self.frames[o + 1], self.frames[o + 2]]
    }

    pub fn mask(&self, t: usize, y: usize, x: usize) -> u16 {
        self.masks[(t * self.h + y) * self.w + x]
    }

    pub fn frame_masks(&self, t: usize) -> &[u16] {
        &self.masks[t * self.h * self.w..(t + 1) * self.h * self.w]
    }
}

fn palette_color(index: usize, size: usize) -> [f32; 3] {
    let hue = index as f64 / size as f64;
    let (s, v) = (0.85, 0.95);
    let h6 = hue * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let (p, q, tt) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, tt, p),
        1 => (q, v, p),
        2 => (p, v, tt),
        3 => (p, q, v),
        4 => (tt, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn bounce(pos: i64, vel: i64, lo: i64, hi: i64) -> (i64, i64) {
    if lo >= hi {
        return (lo, 0);
    }
    let (mut p, mut v) = (pos + vel, vel);
    while p < lo || p > hi {
        if p < lo {
            p = 2 * lo - p;
        } else {
            p = 2 * hi - p;
        }
        v = -v;
    }
    (p, v)
}

/// Samples object shapes, colors and trajectories.
pub fn plan_scene(config: &GeneratorConfig) -> Result<Vec<ObjectTrack>, GenerateError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut palette: Vec<usize> = (0..config.palette_size).collect();
    palette.shuffle(&mut rng);
    for _ in 0..200 {
        let tracks: Vec<ObjectTrack> = (0..count)
            .map(|k| {
                let shape = config.shapes[rng.random_range(0..config.shapes.len())];
                let size = rng.random_range(config.min_size..=config.max_size);
                let r = size as i64;
                let (xlo, xhi) = (r, config.w as i64 - r);
                let (ylo, yhi) = (r, config.h as i64 - r);
                let mut c = (rng.random_range(xlo..=xhi), rng.random_range(ylo..=yhi));
                let mut speed = || {
                    let s = rng.random_range(config.min_speed..=config.max_speed);
                    if s != 0 && rng.random_bool(0.5) {
                        -s
                    } else {
                        s
                    }
                };
                let velocity = (speed(), speed());
                let mut v = velocity;
                let mut centers = vec![c];
                for _ in 1..config.t {
                    let (x, vx) = bounce(c.0, v.0, xlo, xhi);
                    let (y, vy) = bounce(c.1, v.1, ylo, yhi);
                    c = (x, y);
                    v = (vx, vy);
                    centers.push(c);
                }
                ObjectTrack {
                    shape,
                    size,
                    color: palette_color(palette[k % palette.len()], config.palette_size),
                    centers,
                    velocity,
                }
            })
            .collect();
        if config.allow_occlusion || !tracks_overlap(config, &tracks) {
            return Ok(tracks);
        }
    }
    Err(GenerateError::Placement(count))
}

fn rasterize(config: &GeneratorConfig, tracks: &[ObjectTrack], t: usize, out: &mut [u16]) {
    for (k, obj) in tracks.iter().enumerate() {
        let (cx, cy) = obj.centers[t];
        let r = obj.size as i64;
        for y in (cy - r).max(0)..(cy + r).min(config.h as i64) {
            for x in (cx - r).max(0)..(cx + r).min(config.w as i64) {
                let dx = x as f64 + 0.5 - cx as f64;
                let dy = y as f64 + 0.5 - cy as f64;
                if obj.shape.contains(dx, dy, obj.size as f64) {
                    out[y as usize * config.w + x as usize] = k as u16 + 1;
                }
            }
        }
    }
}

fn tracks_overlap(config: &GeneratorConfig, tracks: &[ObjectTrack]) -> bool {
    (0..config.t).any(|t| {
        let mut seen = vec![0u16; config.h * config.w];
        tracks.iter().enumerate().any(|(k, obj)| {
            let mut own = vec![0u16; config.h * config.w];
            rasterize(config, std::slice::from_ref(obj), t, &mut own);
            let clash = own.iter().zip(&seen).any(|(&a, &b)| a != 0 && b != 0);
            for (s, &o) in seen.iter_mut().zip(&own) {
                if o != 0 {
                    *s = k as u16 + 1;
                }
            }
            clash
        })
    })
}

/// Static background: `background_level` plus per-channel bilinear value noise.
fn background(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const CELL: usize = 8;
    let (gh, gw) = (config.h / CELL + 2, config.w / CELL + 2);
    let lattice: Vec<f64> = (0..gh * gw * 3).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut out = vec![0f32; config.h * config.w * 3];
    for y in 0..config.h {
        let fy = y as f64 / CELL as f64;
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        for x in 0..config.w {
            let fx = x as f64 / CELL as f64;
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            for c in 0..3 {
                let l = |yy: usize, xx: usize| lattice[(yy * gw + xx) * 3 + c];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                let n = top * (1.0 - ty) + bot * ty;
                let v = config.background_level + config.texture_amplitude * n;
                out[(y * config.w + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Renders a planned scene.
pub fn render(config: &GeneratorConfig, tracks: &[ObjectTrack]) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xB5C0_FBCF_EC4D_3B2F);
    let bg = background(config, &mut rng);
    let plane = config.h * config.w;
    let mut frames = Vec::with_capacity(config.t * plane * 3);
    let mut masks = vec![0u16; config.t * plane];
    for t in 0..config.t {
        let m = &mut masks[t * plane..(t + 1) * plane];
        rasterize(config, tracks, t, m);
        for (p, &id) in m.iter().enumerate() {
            if id == 0 {
                frames.extend_from_slice(&bg[p * 3..p * 3 + 3]);
            } else {
                frames.extend_from_slice(&tracks[id as usize - 1].color);
            }
        }
    }
    VideoSample {
        t: config.t,
        h: config.h,
        w: config.w,
        num_objects: tracks.len(),
        seed: config.seed,
        frames,
        masks,
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<VideoSample, GenerateError> {
    let tracks = plan_scene(config)?;
    Ok(render(config, &tracks))
}

/// `count` videos whose seeds derive from `config.seed`.
pub fn generate_dataset(
    config: &GeneratorConfig,
    count: usize,
) -> Result<Vec<VideoSample>, GenerateError> {
    (0..count).map(|i| generate(&config.for_video(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_config_sets_fields() {
        let mut c = GeneratorConfig::default();
        c.apply_text("# small\nt = 2\nshapes = disk, square\nallow_occlusion = false\nseed = 9\n")
            .unwrap();
        assert_eq!((c.t, c.seed, c.allow_occlusion), (2, 9, false));
        assert_eq!(c.shapes, vec![ShapeKind::Disk, ShapeKind::Square]);
        assert!(c.set("shapes", "hexagon").is_err());
        assert!(c.set("colour", "1").is_err());
        assert!(c.set("t", "-1").is_err());
    }

    fn plain(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            texture_amplitude: 0.0,
            background_level: 0.0,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn static_scene_repeats_frames() {
        let cfg = GeneratorConfig {
            min_speed: 0,
            max_speed: 0,
            seed: 3,
            ..GeneratorConfig::default()
        };
        let v = generate(&cfg).unwrap();
        let plane = v.h * v.w;
        for t in 1..v.t {
            assert_eq!(v.frame_masks(t), v.frame_masks(0));
            assert_eq!(
                &v.frames[t * plane * 3..(t + 1) * plane * 3],
                &v.frames[..plane * 3]
            );
        }
    }

    #[test]
    fn single_disk_area_matches_raster_count() {
        for seed in 0..10 {
            let cfg = GeneratorConfig {
                min_objects: 1,
                max_objects: 1,
                shapes: vec![ShapeKind::Disk],
                ..plain(seed)
            };
            let tracks = plan_scene(&cfg).unwrap();
            let v = render(&cfg, &tracks);
            // Independent count of integer lattice points (x+0.5, y+0.5) in the disk.
            let r = tracks[0].size as f64;
            let mut area = 0;
            for y in -40i64..40 {
                for x in -40i64..40 {
                    let (dx, dy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if dx * dx + dy * dy <= r * r {
                        area += 1;
                    }
                }
            }
            for t in 0..v.t {
                let count = v.frame_masks(t).iter().filter(|&&m| m == 1).count();
                assert_eq!(count, area, "seed {seed} frame {t}");
                // Black background, flat object color.
                for y in 0..v.h {
                    for x in 0..v.w {
                        if v.mask(t, y, x) == 0 {
                            assert_eq!(v.pixel(t, y, x), [0.0; 3]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = GeneratorConfig {
            seed: 42,
            ..GeneratorConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_ne!(
            generate(&cfg).unwrap(),
            generate(&cfg.for_video(1)).unwrap()
        );
    }

    #[test]
    fn ids_stable_and_colors_consistent() {
        for seed in 0..20 {
            let cfg = GeneratorConfig {
                allow_occlusion: seed % 2 == 0,
                ..plain(seed)
            };
            let tracks = plan_scene(&cfg).unwrap();
            let v = render(&cfg, &tracks);
            for t in 0..v.t {
                for y in 0..v.h {
                    for x in 0..v.w {
                        let id = v.mask(t, y, x) as usize;
                        assert!(id <= v.num_objects);
                        if id > 0 {
                            assert_eq!(v.pixel(t, y, x), tracks[id - 1].color);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_count_conserved_without_contact() {
        // Without occlusion every object keeps its full raster in every frame,
        // since bouncing keeps the bounding box inside the frame.
        for seed in 0..10 {
            let cfg = GeneratorConfig {
                allow_occlusion: false,
                max_objects: 2,
                ..plain(seed)
            };
            let v = generate(&cfg).unwrap();
            for k in 1..=v.num_objects as u16 {
                let counts: Vec<usize> = (0..v.t)
                    .map(|t| v.frame_masks(t).iter().filter(|&&m| m == k).count())
                    .collect();
                assert!(counts.iter().all(|&c| c == counts[0] && c > 0), "{counts:?}");
            }
        }
    }

    #[test]
    fn rejects_oversized_objects_and_bad_patch() {
        let cfg = GeneratorConfig {
            min_size: 30,
            max_size: 30,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(GenerateError::ObjectTooLarge { .. })));
        let cfg = GeneratorConfig {
            h: 50,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(GenerateError::Config(_))));
    }

    #[test]
    fn bounce_stays_in_range() {
        let mut p = (5, 3);
        for _ in 0..100 {
            p = bounce(p.0, p.1, 2, 9);
            assert!((2..=9).contains(&p.0));
        }
        assert_eq!(bounce(4, 2, 4, 4), (4, 0));
    }
}
