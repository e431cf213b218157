//! Deterministic synthetic moving-pattern clips.
//!
//! A clip is a textured background and a few textured shapes, each moving at
//! its own integer velocity, under a slow global brightness drift. Frames are
//! on the 8-bit lattice. Clip `i` of a corpus is regenerated on demand from
//! its index, so corpora never need to be stored.

use ivc_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Largest per-frame displacement along either axis.
    pub max_speed: i32,
    pub max_shapes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 64, height: 64, frames: 13, max_speed: 3, max_shapes: 3 }
    }
}

const TILE: usize = 64;

/// Periodic smoothed-noise texture, values in `[0, 1]`.
struct Texture {
    v: Vec<f32>,
    color: [f32; 3],
    tint: [f32; 3],
}

impl Texture {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let mut v: Vec<f32> = (0..TILE * TILE).map(|_| rng.gen::<f32>()).collect();
        let radius = rng.gen_range(1..=3usize);
        for _ in 0..2 {
            v = box_blur(&v, radius);
        }
        let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let span = (hi - lo).max(1e-6);
        for x in &mut v {
            *x = (*x - lo) / span;
        }
        let color = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
        let amp = rng.gen_range(0.1..0.35f32);
        let tint = [amp * rng.gen_range(0.5..1.0), amp * rng.gen_range(0.5..1.0), amp * rng.gen_range(0.5..1.0)];
        Self { v, color, tint }
    }

    fn at(&self, c: usize, x: i64, y: i64) -> f32 {
        let (tx, ty) = (x.rem_euclid(TILE as i64) as usize, y.rem_euclid(TILE as i64) as usize);
        self.color[c] + self.tint[c] * (self.v[ty * TILE + tx] - 0.5)
    }
}

fn box_blur(v: &[f32], r: usize) -> Vec<f32> {
    let n = TILE as i64;
    let norm = (2 * r + 1) as f32;
    let mut h = vec![0.0; v.len()];
    for y in 0..TILE {
        for x in 0..TILE {
            let s: f32 = (-(r as i64)..=r as i64).map(|d| v[y * TILE + (x as i64 + d).rem_euclid(n) as usize]).sum();
            h[y * TILE + x] = s / norm;
        }
    }
    let mut out = vec![0.0; v.len()];
    for y in 0..TILE {
        for x in 0..TILE {
            let s: f32 = (-(r as i64)..=r as i64).map(|d| h[(y as i64 + d).rem_euclid(n) as usize * TILE + x]).sum();
            out[y * TILE + x] = s / norm;
        }
    }
    out
}

struct Shape {
    texture: Texture,
    disc: bool,
    x: i64,
    y: i64,
    half_w: i64,
    half_h: i64,
    vx: i64,
    vy: i64,
}

impl Shape {
    fn covers(&self, x: i64, y: i64, t: i64) -> bool {
        let (dx, dy) = (x - (self.x + self.vx * t), y - (self.y + self.vy * t));
        if self.disc {
            dx * dx * self.half_h * self.half_h + dy * dy * self.half_w * self.half_w
                <= self.half_w * self.half_w * self.half_h * self.half_h
        } else {
            dx.abs() <= self.half_w && dy.abs() <= self.half_h
        }
    }
}

fn velocity<R: Rng>(rng: &mut R, max: i32) -> (i64, i64) {
    (rng.gen_range(-max..=max) as i64, rng.gen_range(-max..=max) as i64)
}

/// Clip number `index` of the corpus identified by `seed`.
pub fn clip(seed: u64, index: u64, cfg: &SynthConfig) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let background = Texture::new(&mut rng);
    let (bvx, bvy) = velocity(&mut rng, cfg.max_speed);
    let n_shapes = rng.gen_range(0..=cfg.max_shapes);
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let (vx, vy) = velocity(&mut rng, cfg.max_speed);
            Shape {
                texture: Texture::new(&mut rng),
                disc: rng.gen(),
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                half_w: rng.gen_range(4..=(w / 4).max(5)),
                half_h: rng.gen_range(4..=(h / 4).max(5)),
                vx,
                vy,
            }
        })
        .collect();
    let drift = rng.gen_range(-0.01..0.01f32);
    (0..cfg.frames as i64)
        .map(|t| {
            Tensor::from_fn(&[3, cfg.height, cfg.width], |i| {
                let c = i / (cfg.width * cfg.height);
                let (y, x) = (((i / cfg.width) % cfg.height) as i64, (i % cfg.width) as i64);
                let mut v = background.at(c, x - bvx * t, y - bvy * t);
                for s in &shapes {
                    if s.covers(x, y, t) {
                        v = s.texture.at(c, x - s.vx * t, y - s.vy * t);
                    }
                }
                ((v + drift * t as f32).clamp(0.0, 1.0) * 255.0).round() / 255.0
            })
        })
        .collect()
}

/// A clip with no motion and no drift: every frame identical.
pub fn static_clip(seed: u64, cfg: &SynthConfig) -> Vec<Tensor> {
    let frozen = SynthConfig { max_speed: 0, frames: 1, ..*cfg };
    let first = clip(seed, 0, &frozen).remove(0);
    vec![first; cfg.frames]
}

/// Corpus view: `len` clips regenerated from `seed` on demand.
#[derive(Clone, Copy, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub len: u64,
    pub config: SynthConfig,
}

impl Corpus {
    pub fn clip(&self, index: u64) -> Vec<Tensor> {
        clip(self.seed, index % self.len, &self.config)
    }
}
