//! Training loops and their schedules.

use std::sync::Arc;

use ivc_tensor::{AdamConfig, AdamState, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hierarchy::{RateCombo, Role};
use crate::image_codec::ImageCodec;
use crate::interp::{InterpCodec, InterpModelSpec, InterpolationNet, Triplet};
use crate::metrics::ms_ssim;
use crate::models::ModelSet;
use crate::motion::{estimate_pair, MotionField, MotionPair};
use crate::synth::Corpus;
use crate::{CodecError, Result};

/// Optimizer schedule shared by every trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { steps: 200_000, batch: 16, lr: 5e-4, seed: 0 }
    }
}

/// `size`×`size` window of a `(C, H, W)` frame at `(top, left)`.
pub fn crop(frame: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let s = frame.shape();
    let (c, w) = (s[0], s[2]);
    Tensor::from_fn(&[c, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        frame.data()[(ch * s[1] + top + y) * w + left + x]
    })
}

/// Mirror image along the horizontal axis.
pub fn hflip(frame: &Tensor) -> Tensor {
    let s = frame.shape();
    let w = s[s.len() - 1];
    Tensor::from_fn(s, |i| frame.data()[i - i % w + (w - 1 - i % w)])
}

/// Same random crop (and optional flip) applied to several aligned frames.
pub fn augment<R: Rng>(frames: &[&Tensor], size: usize, flip: bool, rng: &mut R) -> Vec<Tensor> {
    let s = frames[0].shape();
    let top = rng.gen_range(0..=s[1] - size);
    let left = rng.gen_range(0..=s[2] - size);
    let mirror = flip && rng.gen::<bool>();
    frames
        .iter()
        .map(|f| {
            let c = crop(f, top, left, size);
            if mirror {
                hflip(&c)
            } else {
                c
            }
        })
        .collect()
}

/// Clips to train or validate on.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;
    fn clip(&self, index: usize) -> Result<Vec<Tensor>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ClipSource for Corpus {
    fn len(&self) -> usize {
        self.len as usize
    }

    fn clip(&self, index: usize) -> Result<Vec<Tensor>> {
        Ok(Corpus::clip(self, index as u64))
    }
}

impl ClipSource for Vec<Vec<Tensor>> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn clip(&self, index: usize) -> Result<Vec<Tensor>> {
        Ok(self[index].clone())
    }
}

/// Halves the learning rate once the validation score has not improved for
/// `patience` consecutive checks.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, bad: 0 }
    }

    /// Records a score (higher is better); returns true when the rate
    /// should be halved.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub schedule: Schedule,
    /// Iterations `K` unrolled per training example.
    pub iterations: usize,
    /// Square crop side; a multiple of 16.
    pub crop: usize,
    /// Steps between validation checks; 0 disables them.
    pub validate_every: usize,
    pub patience: usize,
}

impl TrainOptions {
    pub fn toy(steps: usize, iterations: usize) -> Self {
        Self {
            schedule: Schedule { steps, batch: 8, lr: 1e-3, seed: 0 },
            iterations,
            crop: 32,
            validate_every: 0,
            patience: 3,
        }
    }
}

/// Progress reported after every step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub per_iteration: Vec<f64>,
    pub lr: f64,
    /// Set on validation steps.
    pub validation: Option<f64>,
}

fn check_crop(crop: usize, frame: &Tensor) -> Result<()> {
    let s = frame.shape();
    if crop == 0 || !crop.is_multiple_of(16) || crop > s[1] || crop > s[2] {
        return Err(CodecError::invalid(format!(
            "crop {crop} must be a multiple of 16 within the {}x{} frames",
            s[2], s[1]
        )));
    }
    Ok(())
}

fn adam_for(params: &ParamStore, lr: f64) -> AdamState<f32> {
    AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, params)
}

/// Runs the shared loop: sample, step, validate, adjust the rate.
fn run<R: Rng>(
    opts: &TrainOptions,
    adam: &mut AdamState<f32>,
    rng: &mut R,
    mut step: impl FnMut(&mut AdamState<f32>, &mut R) -> Result<(f64, Vec<f64>)>,
    mut validate: impl FnMut() -> Result<f64>,
    log: &mut dyn FnMut(&StepReport),
) -> Result<Vec<f64>> {
    let mut plateau = Plateau::new(opts.patience);
    let mut losses = Vec::with_capacity(opts.schedule.steps);
    for s in 0..opts.schedule.steps {
        let (loss, per_iteration) = step(adam, rng)?;
        losses.push(loss);
        let validation = if opts.validate_every > 0 && (s + 1) % opts.validate_every == 0 {
            let score = validate()?;
            if plateau.observe(score) {
                let lr = adam.config.lr / 2.0;
                adam.set_lr(lr);
            }
            Some(score)
        } else {
            None
        };
        log(&StepReport { step: s, loss, per_iteration, lr: adam.config.lr, validation });
    }
    Ok(losses)
}

/// Mean MS-SSIM of the first frame of each validation clip at `k`
/// iterations.
pub fn validate_image(codec: &ImageCodec, val: &dyn ClipSource, k: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..val.len() {
        let f = &val.clip(i)?[0];
        let (_, recon) = codec.encode_image(f, k)?;
        total += ms_ssim(f, &recon)?;
    }
    Ok(total / val.len().max(1) as f64)
}

/// Trains the key-frame codec on random frames of random clips.
pub fn train_image(
    codec: &mut ImageCodec,
    clips: &dyn ClipSource,
    val: &dyn ClipSource,
    opts: &TrainOptions,
    log: &mut dyn FnMut(&StepReport),
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(CodecError::invalid("no training clips"));
    }
    check_crop(opts.crop, &clips.clip(0)?[0])?;
    let mut adam = adam_for(codec.params(), opts.schedule.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.schedule.seed);
    let k = opts.iterations;
    let cell = std::cell::RefCell::new(codec);
    run(
        opts,
        &mut adam,
        &mut rng,
        |adam, rng| {
            let mut frames = Vec::with_capacity(opts.schedule.batch);
            for _ in 0..opts.schedule.batch {
                let clip = clips.clip(rng.gen_range(0..clips.len()))?;
                let f = &clip[rng.gen_range(0..clip.len())];
                frames.push(augment(&[f], opts.crop, true, rng).remove(0));
            }
            let batch = Arc::new(Tensor::stack(&frames)?);
            cell.borrow_mut().train_step(adam, batch, k, rng)
        },
        || validate_image(&cell.borrow(), val, k),
        log,
    )
}

/// A training example at the offsets of `spec`: block-aligned crop, random
/// horizontal flip, motion estimated on the uncropped originals.
pub fn sample_triplet<R: Rng>(
    clip: &[Tensor],
    spec: &InterpModelSpec,
    motion: bool,
    crop_size: usize,
    rng: &mut R,
) -> Result<Triplet> {
    let span = spec.distance();
    if clip.len() <= span {
        return Err(CodecError::invalid(format!("clips of {} frames are too short for distance {span}", clip.len())));
    }
    let start = rng.gen_range(0..clip.len() - span);
    let (a, t, b) = (&clip[start], &clip[start + spec.past], &clip[start + span]);
    let pair = if motion { estimate_pair(a, t, b)? } else { MotionPair::zero(a.shape()[2], a.shape()[1]) };
    let s = a.shape();
    let (by, bx) = (rng.gen_range(0..=(s[1] - crop_size) / 16), rng.gen_range(0..=(s[2] - crop_size) / 16));
    let g = crop_size / 16;
    let mirror = rng.gen::<bool>();
    let prep = |f: &Tensor| {
        let c = crop(f, by * 16, bx * 16, crop_size);
        if mirror {
            hflip(&c)
        } else {
            c
        }
    };
    let field = |f: &MotionField| {
        let c = f.crop(bx, by, g, g);
        if mirror {
            c.hflip()
        } else {
            c
        }
    };
    Ok(Triplet {
        past: prep(a),
        target: prep(t),
        future: prep(b),
        motion: MotionPair { past: field(&pair.past), future: field(&pair.future) },
    })
}

/// Mean MS-SSIM of interpolated frames at `k` iterations, references taken
/// from the originals.
pub fn validate_interp(codec: &InterpCodec, val: &dyn ClipSource, motion: bool, k: usize) -> Result<f64> {
    let spec = codec.spec().clone();
    let mut total = 0.0;
    for i in 0..val.len() {
        let clip = val.clip(i)?;
        let (a, t, b) = (&clip[0], &clip[spec.past], &clip[spec.distance()]);
        let pair = if motion { estimate_pair(a, t, b)? } else { MotionPair::zero(a.shape()[2], a.shape()[1]) };
        let (_, recon) = codec.encode_interp(t, a, b, &pair, &spec, k)?;
        total += ms_ssim(t, &recon)?;
    }
    Ok(total / val.len().max(1) as f64)
}

pub fn train_interp(
    codec: &mut InterpCodec,
    clips: &dyn ClipSource,
    val: &dyn ClipSource,
    motion: bool,
    opts: &TrainOptions,
    log: &mut dyn FnMut(&StepReport),
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(CodecError::invalid("no training clips"));
    }
    check_crop(opts.crop, &clips.clip(0)?[0])?;
    let mut adam = adam_for(codec.params(), opts.schedule.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.schedule.seed);
    let spec = codec.spec().clone();
    let k = opts.iterations;
    let cell = std::cell::RefCell::new(codec);
    run(
        opts,
        &mut adam,
        &mut rng,
        |adam, rng| {
            let mut batch = Vec::with_capacity(opts.schedule.batch);
            for _ in 0..opts.schedule.batch {
                let clip = clips.clip(rng.gen_range(0..clips.len()))?;
                batch.push(sample_triplet(&clip, &spec, motion, opts.crop, rng)?);
            }
            cell.borrow_mut().train_step(adam, &batch, k, rng)
        },
        || validate_interp(&cell.borrow(), val, motion, k),
        log,
    )
}

/// Trains a zero-bit interpolation baseline at the offsets of `spec`.
pub fn train_interpolation_net(
    net: &mut InterpolationNet,
    clips: &dyn ClipSource,
    spec: &InterpModelSpec,
    opts: &TrainOptions,
    log: &mut dyn FnMut(&StepReport),
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(CodecError::invalid("no training clips"));
    }
    check_crop(opts.crop, &clips.clip(0)?[0])?;
    let mut adam = adam_for(net.params(), opts.schedule.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.schedule.seed);
    let motion = net.config().motion;
    let cell = std::cell::RefCell::new(net);
    run(
        opts,
        &mut adam,
        &mut rng,
        |adam, rng| {
            let mut batch = Vec::with_capacity(opts.schedule.batch);
            for _ in 0..opts.schedule.batch {
                let clip = clips.clip(rng.gen_range(0..clips.len()))?;
                batch.push(sample_triplet(&clip, spec, motion, opts.crop, rng)?);
            }
            Ok((cell.borrow_mut().train_step(adam, &batch)?, Vec::new()))
        },
        || Ok(0.0),
        log,
    )
}

/// Code grids produced by a frozen model set for the frames of `clips`,
/// per slot, for context-model training. Interpolated frames use original
/// references.
pub fn collect_codes(models: &ModelSet, clips: &dyn ClipSource, combo: RateCombo) -> Result<[Vec<Vec<i8>>; 4]> {
    let mut out: [Vec<Vec<i8>>; 4] = Default::default();
    let roles = [Role::I, Role::M66, Role::M33, Role::M12];
    for i in 0..clips.len() {
        let clip = clips.clip(i)?;
        let (code, _) = models.image().encode_image(&clip[0], combo.get(Role::I))?;
        out[0].extend(code.grids().iter().cloned());
        for &role in &roles[1..] {
            let spec = role.spec().expect("interpolated role");
            if clip.len() <= spec.distance() {
                continue;
            }
            let (a, t, b) = (&clip[0], &clip[spec.past], &clip[spec.distance()]);
            let pair = if models.config().motion {
                estimate_pair(a, t, b)?
            } else {
                MotionPair::zero(a.shape()[2], a.shape()[1])
            };
            let (code, _) = models.interp(role)?.encode_interp(t, a, b, &pair, &spec, combo.get(role))?;
            out[role.slot()].extend(code.grids().iter().cloned());
        }
    }
    Ok(out)
}
