#![allow(dead_code)]

use ivc_core::hierarchy::{average_bitrate, EnvelopePoint, RateCombo};
use ivc_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `tf.image.ssim_multiscale` on [`ms_ssim_pair`]`(k)`, from
/// `data/ms_ssim_reference.py`.
pub const TF_MS_SSIM: [f64; 20] = [
    0.9997644424, // 176x176
    0.9986734986, // 183x189
    0.9967080951, // 190x202
    0.9940405488, // 197x215
    0.9906940460, // 204x188
    0.9868428707, // 181x201
    0.9815025330, // 188x214
    0.9776651859, // 195x187
    0.9719803929, // 202x200
    0.9668115973, // 179x213
    0.9619266391, // 186x186
    0.9573939443, // 193x199
    0.9483925700, // 200x212
    0.9438085556, // 177x185
    0.9350513816, // 184x198
    0.9234337807, // 191x211
    0.9169118404, // 198x184
    0.8991863132, // 205x197
    0.8907254338, // 182x210
    0.8760318756, // 189x183
];

pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }
}

/// Test image pair `k`: a structured 8-bit pattern and a noisier copy.
pub fn ms_ssim_pair(k: usize) -> (Tensor, Tensor) {
    let (h, w) = (176 + (k * 7) % 30, 176 + (k * 13) % 40);
    let mut rng = XorShift::new(1000 + k as u64);
    let amp = 4 + 6 * k as i64;
    let (mut a, mut b) = (vec![0.0f32; 3 * h * w], vec![0.0f32; 3 * h * w]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let base = ((x * (3 + k) + y * 5 + c * 40 + (x * y) / (7 + k)) % 256) as i64;
                let n1 = (rng.next() % 33) as i64;
                let n2 = (rng.next() % (2 * amp as u64 + 1)) as i64;
                let va = (base + n1 - 16).clamp(0, 255);
                let vb = (va + n2 - amp).clamp(0, 255);
                let i = (c * h + y) * w + x;
                a[i] = va as f32 / 255.0;
                b[i] = vb as f32 / 255.0;
            }
        }
    }
    (Tensor::new(&[3, h, w], a).unwrap(), Tensor::new(&[3, h, w], b).unwrap())
}

// ---- planner oracle ---------------------------------------------------------

pub fn all_combos(options: &[Vec<usize>; 4]) -> Vec<RateCombo> {
    let mut out = Vec::new();
    for &a in &options[0] {
        for &b in &options[1] {
            for &c in &options[2] {
                for &d in &options[3] {
                    out.push(RateCombo([a, b, c, d]));
                }
            }
        }
    }
    out
}

/// Quality is a weighted sum of saturating per-slot gains, rate is
/// `average_bitrate`; both increase strictly with every K.
pub fn monotone_model(gains: [f64; 4], scales: [f64; 4]) -> impl Fn(RateCombo) -> (f64, f64) {
    move |c: RateCombo| {
        let q: f64 = (0..4).map(|s| gains[s] * (1.0 - (-(c.0[s] as f64) / scales[s]).exp())).sum();
        (average_bitrate(c, 0.0), q)
    }
}

pub fn brute_force(options: &[Vec<usize>; 4], model: &impl Fn(RateCombo) -> (f64, f64)) -> Vec<EnvelopePoint> {
    let points: Vec<EnvelopePoint> = all_combos(options)
        .into_iter()
        .map(|combo| {
            let (bpp, ms_ssim) = model(combo);
            EnvelopePoint { combo, bpp, ms_ssim }
        })
        .collect();
    // Independent O(n²) filter.
    let mut front: Vec<EnvelopePoint> = points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| q.bpp <= p.bpp && q.ms_ssim >= p.ms_ssim && (q.bpp < p.bpp || q.ms_ssim > p.ms_ssim))
        })
        .copied()
        .collect();
    front.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(a.combo.cmp(&b.combo)));
    front
}

// ---- motion oracle ----------------------------------------------------------

pub const N: usize = 64;

pub fn noise(rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..3 * N * N).map(|_| rng.gen()).collect()
}

pub fn to_frame(px: &[u8]) -> Tensor {
    Tensor::new(&[3, N, N], px.iter().map(|&v| v as f32 / 255.0).collect()).unwrap()
}

/// `out(x, y) = src(x - dx, y - dy)` with clamped reads.
pub fn shift(src: &[u8], dx: i64, dy: i64) -> Vec<u8> {
    let at = |c: usize, x: i64, y: i64| {
        src[(c * N + y.clamp(0, N as i64 - 1) as usize) * N + x.clamp(0, N as i64 - 1) as usize]
    };
    let mut out = vec![0; src.len()];
    for c in 0..3 {
        for y in 0..N {
            for x in 0..N {
                out[(c * N + y) * N + x] = at(c, x as i64 - dx, y as i64 - dy);
            }
        }
    }
    out
}

/// Exhaustive search written independently of the library: every candidate
/// is scored, the list is shuffled, then sorted by the documented key.
pub fn sad_oracle(reference: &[u8], target: &[u8], bs: usize, sr: i64, rng: &mut ChaCha8Rng) -> Vec<(i32, i32)> {
    let grid = N.div_ceil(bs);
    let mut out = Vec::new();
    for by in 0..grid {
        for bx in 0..grid {
            let mut scored = Vec::new();
            for dy in -sr..=sr {
                for dx in -sr..=sr {
                    let moved = |c: usize, x: usize, y: usize| {
                        let rx = (x as i64 - dx).clamp(0, N as i64 - 1) as usize;
                        let ry = (y as i64 - dy).clamp(0, N as i64 - 1) as usize;
                        reference[(c * N + ry) * N + rx] as i64
                    };
                    let mut sad = 0i64;
                    for y in by * bs..((by + 1) * bs).min(N) {
                        for x in bx * bs..((bx + 1) * bs).min(N) {
                            for c in 0..3 {
                                sad += (target[(c * N + y) * N + x] as i64 - moved(c, x, y)).abs();
                            }
                        }
                    }
                    scored.push((sad, dx.abs() + dy.abs(), dy, dx));
                }
            }
            scored.shuffle(rng);
            scored.sort();
            let (_, _, dy, dx) = scored[0];
            out.push((dx as i32, dy as i32));
        }
    }
    out
}
