//! Image quality metrics.

use ivc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{CodecError, Result};

/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(CodecError::invalid(format!("images differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    match *a.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(CodecError::invalid(format!("images must be (C, H, W), got {:?}", a.shape()))),
    }
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Number of scales used for an `h`×`w` image: `s` scales need a shorter
/// side of at least `11 · 2^(s-1)` pixels (five scales from 176).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let side = h.min(w);
    (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&s| side >= WINDOW << (s - 1)).unwrap_or(1)
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    /// 2×2 average pooling; odd sizes first repeat their last row/column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let at = |y: usize, x: usize| self.v[y.min(self.h - 1) * self.w + x.min(self.w - 1)];
        let v = (0..h * w)
            .map(|i| {
                let (y, x) = (2 * (i / w), 2 * (i % w));
                (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1)) / 4.0
            })
            .collect();
        Plane { h, w, v }
    }
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' Gaussian filtering.
fn filter(p: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean `(ssim, cs)` of one channel at one scale.
fn ssim_cs(a: &Plane, b: &Plane) -> (f64, f64) {
    let g = gaussian(WINDOW.min(a.h).min(a.w));
    let f = |v: &[f64]| filter(v, a.h, a.w, &g).0;
    let mu_a = f(&a.v);
    let mu_b = f(&b.v);
    let ab: Vec<f64> = a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect();
    let sq: Vec<f64> = a.v.iter().zip(&b.v).map(|(x, y)| x * x + y * y).collect();
    let e_ab = f(&ab);
    let e_sq = f(&sq);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let num0 = 2.0 * mu_a[i] * mu_b[i];
        let den0 = mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i];
        let lum = (num0 + c1) / (den0 + c1);
        let c = (2.0 * e_ab[i] - num0 + c2) / (e_sq[i] - den0 + c2);
        ssim += lum * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// Multi-scale structural similarity of two `(C, H, W)` images in `[0, 1]`.
///
/// Gaussian window 11×11, σ = 1.5, 'valid' filtering, per-channel scores
/// averaged. Below 176 pixels fewer scales are used and the remaining weights
/// are renormalized to sum to one.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (c, h, w) = check_pair(a, b)?;
    let scales = ms_ssim_scales(h, w);
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|v| v / total).collect();
    let mut score = 0.0;
    for ch in 0..c {
        let plane =
            |t: &Tensor| Plane { h, w, v: t.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect() };
        let (mut pa, mut pb) = (plane(a), plane(b));
        let mut prod = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            if s > 0 {
                pa = pa.downsample();
                pb = pb.downsample();
            }
            let (ssim, cs) = ssim_cs(&pa, &pb);
            let term = if s + 1 == scales { ssim } else { cs };
            prod *= term.max(0.0).powf(wt);
        }
        score += prod;
    }
    Ok(score / c as f64)
}

/// Per-video quality and rate summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr: f64,
    pub ms_ssim: f64,
    /// All container payload bits, motion included, per pixel.
    pub bpp: f64,
    pub bpp_without_motion: f64,
    pub frames: usize,
}

/// Mean PSNR and MS-SSIM over the frames of one video.
pub fn video_quality(reference: &[Tensor], decoded: &[Tensor]) -> Result<(f64, f64)> {
    if reference.len() != decoded.len() || reference.is_empty() {
        return Err(CodecError::invalid(format!(
            "cannot compare {} decoded frames against {} reference frames",
            decoded.len(),
            reference.len()
        )));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (r, d) in reference.iter().zip(decoded) {
        p += psnr(r, d)?;
        s += ms_ssim(r, d)?;
    }
    let n = reference.len() as f64;
    Ok((p / n, s / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut x = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        Tensor::from_fn(shape, |_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 1000) as f32 / 999.0
        })
    }

    #[test]
    fn psnr_conventions() {
        let a = noise(&[3, 8, 8], 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let zeros = Tensor::zeros(&[3, 8, 8]);
        let b = Tensor::full(&[3, 8, 8], 16.0f32 / 255.0);
        let want = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&zeros, &b).unwrap() - want).abs() < 1e-4);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ms_ssim_identity_is_exactly_one() {
        let a = noise(&[3, 190, 181], 4);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        let small = noise(&[3, 32, 32], 5);
        assert_eq!(ms_ssim(&small, &small).unwrap(), 1.0);
    }

    #[test]
    fn scale_count_follows_size() {
        assert_eq!(ms_ssim_scales(288, 352), 5);
        assert_eq!(ms_ssim_scales(176, 176), 5);
        assert_eq!(ms_ssim_scales(175, 400), 4);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(8, 8), 1);
    }
}
