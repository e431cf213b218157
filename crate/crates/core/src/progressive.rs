//! Progressive residual autoencoder: the recurrent encoder/decoder pair shared
//! by the key-frame codec and the interpolation codecs.
//!
//! Iteration `k` encodes the residual `r_{k-1}` into `L` bits per location of
//! a grid 16× smaller than the frame; the decoder's output is subtracted to
//! form `r_k`. The reconstruction is `base + Σ_k D(b_k)`, where the base is
//! mid-grey for key frames and a motion-compensated prediction otherwise.

use std::sync::Arc;

use ivc_tensor::{Bound, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binarizer::{binarize_infer, binarize_train};
use crate::code::{BinaryCode, GridShape};
use crate::nn::{fuse, Conv, Lstm, Up};
use crate::{CodecError, Result};

/// Downsampling factor between a frame and its code grid.
pub const GRID_FACTOR: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreConfig {
    /// `L`, bits per code-grid location.
    pub bits: usize,
    pub input_channels: usize,
    /// Hidden widths of the encoder cells, finest first.
    pub enc_widths: [usize; 4],
    /// Hidden widths of the decoder cells, coarsest first.
    pub dec_widths: [usize; 4],
    /// Extra channels concatenated to the input of each encoder cell (inputs
    /// at full, 1/2, 1/4 and 1/8 resolution).
    pub enc_fusion: [usize; 4],
    /// Extra channels concatenated to the input of each decoder cell (cells
    /// at 1/16, 1/8, 1/4 and 1/2 resolution).
    pub dec_fusion: [usize; 4],
}

pub struct ProgressiveCore {
    config: CoreConfig,
    enc: Vec<Lstm>,
    to_bits: Conv,
    from_bits: Conv,
    dec: Vec<Lstm>,
    ups: Vec<Up>,
    to_image: Conv,
}

/// Extra inputs, per encoder and decoder cell, on the current tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct Fusion {
    pub enc: [Option<Var>; 4],
    pub dec: [Option<Var>; 4],
}

pub type States = Vec<(Var, Var)>;

/// Recurrent state carried between tapes.
pub type Carried = Vec<(Arc<Tensor>, Arc<Tensor>)>;

pub fn export(tape: &Tape, states: &[(Var, Var)]) -> Carried {
    states.iter().map(|&(h, c)| (tape.value_arc(h), tape.value_arc(c))).collect()
}

pub fn import(tape: &mut Tape, carried: &Carried) -> States {
    carried.iter().map(|(h, c)| (tape.leaf(Arc::clone(h), false), tape.leaf(Arc::clone(c), false))).collect()
}

impl ProgressiveCore {
    pub fn new<R: Rng>(ps: &mut ParamStore, prefix: &str, config: CoreConfig, rng: &mut R) -> Self {
        let c = &config;
        let mut enc = Vec::new();
        let mut cin = c.input_channels;
        for s in 0..4 {
            enc.push(Lstm::new(ps, &format!("{prefix}enc{s}"), cin + c.enc_fusion[s], c.enc_widths[s], 2, rng));
            cin = c.enc_widths[s];
        }
        let to_bits = Conv::new(ps, &format!("{prefix}to_bits"), cin, c.bits, 1, 1, 1.0, rng);
        let from_bits = Conv::new(ps, &format!("{prefix}from_bits"), c.bits, c.dec_widths[0], 1, 1, 1.0, rng);
        let mut dec = Vec::new();
        let mut ups = Vec::new();
        for s in 0..4 {
            let width = c.dec_widths[s];
            dec.push(Lstm::new(ps, &format!("{prefix}dec{s}"), width + c.dec_fusion[s], width, 1, rng));
            let next = if s < 3 { c.dec_widths[s + 1] } else { width };
            ups.push(Up::new(ps, &format!("{prefix}up{s}"), width, next, rng));
        }
        let to_image = Conv::new(ps, &format!("{prefix}to_image"), c.dec_widths[3], 3, 1, 1, 0.5, rng);
        Self { config, enc, to_bits, from_bits, dec, ups, to_image }
    }

    pub fn config(&self) -> &CoreConfig {
        &self.config
    }

    /// Zero states for a batch of `n` frames of `h`×`w` pixels.
    pub fn zero_states(&self, tape: &mut Tape, n: usize, h: usize, w: usize) -> (States, States) {
        let enc = (0..4).map(|s| self.enc[s].zero_state(tape, n, h >> (s + 1), w >> (s + 1))).collect();
        let dec = (0..4).map(|s| self.dec[s].zero_state(tape, n, h >> (4 - s), w >> (4 - s))).collect();
        (enc, dec)
    }

    /// One encoder iteration; returns `tanh` activations `(N, L, h/16, w/16)`.
    pub fn encode_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: Var,
        fusion: &Fusion,
        states: &mut States,
    ) -> Result<Var> {
        let mut x = input;
        for s in 0..4 {
            x = fuse(tape, x, fusion.enc[s])?;
            states[s] = self.enc[s].step(tape, p, x, states[s])?;
            x = states[s].0;
        }
        let z = self.to_bits.forward(tape, p, x)?;
        Ok(tape.tanh(z))
    }

    /// One decoder iteration from bits `(N, L, h/16, w/16)` to an image
    /// increment `(N, 3, h, w)`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        bits: Var,
        fusion: &Fusion,
        states: &mut States,
    ) -> Result<Var> {
        let mut x = self.from_bits.forward(tape, p, bits)?;
        for s in 0..4 {
            x = fuse(tape, x, fusion.dec[s])?;
            states[s] = self.dec[s].step(tape, p, x, states[s])?;
            x = self.ups[s].forward(tape, p, states[s].0)?;
        }
        self.to_image.forward(tape, p, x)
    }
}

/// Sum of per-iteration mean absolute residuals.
///
/// `step(tape, r_{k-1}, k)` returns the decoder output for iteration `k`;
/// `r_k = r_{k-1} - output`. Returns the loss and each iteration's mean |r_k|.
pub fn progressive_loss(
    tape: &mut Tape,
    residual: Var,
    iterations: usize,
    mut step: impl FnMut(&mut Tape, Var, usize) -> Result<Var>,
) -> Result<(Var, Vec<f64>)> {
    if iterations == 0 {
        return Err(CodecError::invalid("at least one iteration is required"));
    }
    let mut r = residual;
    let mut loss = None;
    let mut per_iter = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let out = step(tape, r, k)?;
        r = tape.sub(r, out)?;
        let l = tape.l1_mean(r);
        per_iter.push(tape.value(l).item() as f64);
        loss = Some(match loss {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok((loss.unwrap(), per_iter))
}

/// Inputs that stay fixed across iterations when coding one frame.
#[derive(Clone, Default)]
pub struct Conditioning {
    /// Channels placed before and after the residual in the encoder input.
    pub around: Option<(Arc<Tensor>, Arc<Tensor>)>,
    /// Starting reconstruction `(1, 3, H, W)`; mid-grey when absent.
    pub base: Option<Arc<Tensor>>,
    pub enc: [Option<Arc<Tensor>>; 4],
    pub dec: [Option<Arc<Tensor>>; 4],
}

impl Conditioning {
    fn bind(&self, tape: &mut Tape, encoder: bool) -> Fusion {
        let mut leaf = |t: &Option<Arc<Tensor>>| t.as_ref().map(|t| tape.leaf(Arc::clone(t), false));
        let dec = [leaf(&self.dec[0]), leaf(&self.dec[1]), leaf(&self.dec[2]), leaf(&self.dec[3])];
        let enc = if encoder {
            [leaf(&self.enc[0]), leaf(&self.enc[1]), leaf(&self.enc[2]), leaf(&self.enc[3])]
        } else {
            [None; 4]
        };
        Fusion { enc, dec }
    }
}

/// Running reconstruction `base + Σ D(b_k)`, accumulated identically by the
/// encoder and the decoder.
pub struct Accumulator(Tensor);

impl Accumulator {
    pub fn new(shape: &[usize]) -> Self {
        Self(Tensor::full(shape, 0.5))
    }

    fn start(shape: &[usize], base: &Option<Arc<Tensor>>) -> Result<Self> {
        match base {
            Some(b) if b.shape() == shape => Ok(Self(Tensor::clone(b))),
            Some(b) => Err(CodecError::invalid(format!("base {:?} does not match frame {shape:?}", b.shape()))),
            None => Ok(Self::new(shape)),
        }
    }

    pub fn add(&mut self, out: &Tensor) {
        for (a, &o) in self.0.data_mut().iter_mut().zip(out.data()) {
            *a += o;
        }
    }

    pub fn raw(&self) -> &Tensor {
        &self.0
    }

    /// The displayed frame: clamped to `[0, 1]` and rounded to the 8-bit
    /// lattice, as `(3, H, W)`.
    pub fn finish(&self) -> Tensor {
        let s = self.0.shape();
        let data = self.0.data().iter().map(|&v| quantize8(v)).collect();
        Tensor::new(&s[1..], data).expect("single-frame accumulator")
    }
}

pub fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn check_frame(frame: &Tensor) -> Result<(usize, usize)> {
    match *frame.shape() {
        [3, h, w] if h % GRID_FACTOR == 0 && w % GRID_FACTOR == 0 => Ok((h, w)),
        [3, h, w] => Err(CodecError::invalid(format!(
            "frame is {w}x{h}; width and height must be multiples of {GRID_FACTOR} (pad the input first)"
        ))),
        ref s => Err(CodecError::invalid(format!("frames must have shape (3, H, W), got {s:?}"))),
    }
}

fn batch1(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape).expect("adding a unit batch axis")
}

impl ProgressiveCore {
    /// Encodes `target` with `k` iterations. Returns the code and the
    /// reconstruction the decoder will produce.
    pub fn encode(
        &self,
        params: &ParamStore,
        target: &Tensor,
        cond: &Conditioning,
        k: usize,
    ) -> Result<(BinaryCode, Tensor)> {
        let (h, w) = check_frame(target)?;
        if k == 0 {
            return Err(CodecError::invalid("iteration count must be at least 1"));
        }
        let target = batch1(target);
        let mut code = BinaryCode::new(GridShape::for_frame(self.config.bits, h, w));
        let mut acc = Accumulator::start(target.shape(), &cond.base)?;
        let (mut enc_c, mut dec_c) = {
            let mut tape = Tape::new();
            let (e, d) = self.zero_states(&mut tape, 1, h, w);
            (export(&tape, &e), export(&tape, &d))
        };
        for _ in 0..k {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let fusion = cond.bind(&mut tape, true);
            let mut enc_s = import(&mut tape, &enc_c);
            let mut dec_s = import(&mut tape, &dec_c);
            let r = Tensor::from_fn(target.shape(), |i| target.data()[i] - acc.raw().data()[i]);
            let r = tape.constant(r);
            let input = match &cond.around {
                Some((a, b)) => {
                    let (a, b) = (tape.leaf(Arc::clone(a), false), tape.leaf(Arc::clone(b), false));
                    tape.concat(&[a, r, b])?
                }
                None => r,
            };
            let act = self.encode_step(&mut tape, &p, input, &fusion, &mut enc_s)?;
            let bits = binarize_infer(tape.value(act));
            code.push_tensor(&bits)?;
            let bits = tape.constant(bits);
            let out = self.decode_step(&mut tape, &p, bits, &fusion, &mut dec_s)?;
            acc.add(tape.value(out));
            enc_c = export(&tape, &enc_s);
            dec_c = export(&tape, &dec_s);
        }
        Ok((code, acc.finish()))
    }

    /// Reconstructions after each decoded iteration.
    pub fn decode_progressive(
        &self,
        params: &ParamStore,
        code: &BinaryCode,
        cond: &Conditioning,
    ) -> Result<Vec<Tensor>> {
        let shape = code.shape();
        if shape.l != self.config.bits {
            return Err(CodecError::invalid(format!(
                "code has {} bits per location but the model uses {}",
                shape.l, self.config.bits
            )));
        }
        if code.iterations() == 0 {
            return Err(CodecError::invalid("cannot decode an empty code"));
        }
        let (h, w) = (shape.h * GRID_FACTOR, shape.w * GRID_FACTOR);
        let mut acc = Accumulator::start(&[1, 3, h, w], &cond.base)?;
        let mut dec_c = {
            let mut tape = Tape::new();
            let (_, d) = self.zero_states(&mut tape, 1, h, w);
            export(&tape, &d)
        };
        let mut out_frames = Vec::with_capacity(code.iterations());
        for k in 0..code.iterations() {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let fusion = cond.bind(&mut tape, false);
            let mut dec_s = import(&mut tape, &dec_c);
            let bits = tape.constant(code.grid_tensor(k));
            let out = self.decode_step(&mut tape, &p, bits, &fusion, &mut dec_s)?;
            acc.add(tape.value(out));
            dec_c = export(&tape, &dec_s);
            out_frames.push(acc.finish());
        }
        Ok(out_frames)
    }

    pub fn decode(&self, params: &ParamStore, code: &BinaryCode, cond: &Conditioning) -> Result<Tensor> {
        Ok(self.decode_progressive(params, code, cond)?.pop().expect("non-empty code"))
    }

    /// Training loss for a batch `(N, 3, H, W)` with stochastic binarization.
    /// `around`, `base` and `fusion` must already be on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        target: Var,
        around: Option<(Var, Var)>,
        base: Option<Var>,
        fusion: &Fusion,
        iterations: usize,
        rng: &mut R,
    ) -> Result<(Var, Vec<f64>)> {
        let s = tape.shape(target).to_vec();
        let (mut enc_s, mut dec_s) = self.zero_states(tape, s[0], s[2], s[3]);
        let residual = match base {
            Some(b) => tape.sub(target, b)?,
            None => tape.add_scalar(target, -0.5),
        };
        progressive_loss(tape, residual, iterations, |tape, r, _| {
            let input = match around {
                Some((a, b)) => tape.concat(&[a, r, b])?,
                None => r,
            };
            let act = self.encode_step(tape, p, input, fusion, &mut enc_s)?;
            let bits = binarize_train(tape, act, rng)?;
            self.decode_step(tape, p, bits, fusion, &mut dec_s)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_stub_has_zero_loss() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| i as f32 / 48.0 - 0.5));
        let (loss, per) = progressive_loss(&mut tape, r, 3, |tape, r, _| Ok(tape.scale(r, 1.0))).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert_eq!(per, vec![0.0; 3]);
    }

    #[test]
    fn accumulator_finishes_on_the_lattice() {
        let mut acc = Accumulator::new(&[1, 3, 1, 1]);
        acc.add(&Tensor::new(&[1, 3, 1, 1], vec![0.7, -0.9, 0.001]).unwrap());
        assert_eq!(acc.finish().data(), &[1.0, 0.0, 128.0 / 255.0]);
    }
}
