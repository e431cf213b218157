//! Interpolation codecs: the conditional residual codec `(E_R, C, D_R)` and
//! the zero-bit blind / motion-compensated interpolation baselines.

use std::sync::Arc;

use ivc_tensor::{AdamState, Bound, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::code::BinaryCode;
use crate::context::{ContextNet, ContextNetConfig, Level};
use crate::motion::{warp_features, MotionField, MotionPair};
use crate::nn::{Conv, Up};
use crate::progressive::{Conditioning, CoreConfig, Fusion, ProgressiveCore};
use crate::{CodecError, Result};

/// Temporal offsets, bottleneck width and fusion points of an interpolation
/// model `M_{a,b}`: the target sits `past` frames after one reference and
/// `future` frames before the other.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterpModelSpec {
    pub past: usize,
    pub future: usize,
    pub bits: usize,
    pub enc_fusion: Vec<Level>,
    pub dec_fusion: Vec<Level>,
}

impl InterpModelSpec {
    pub fn m66() -> Self {
        Self { past: 6, future: 6, bits: 16, enc_fusion: vec![Level::Half], dec_fusion: vec![Level::Half] }
    }

    pub fn m33() -> Self {
        Self {
            past: 3,
            future: 3,
            bits: 16,
            enc_fusion: vec![Level::Half, Level::Quarter],
            dec_fusion: vec![Level::Half, Level::Quarter, Level::Eighth],
        }
    }

    pub fn m12() -> Self {
        Self {
            past: 1,
            future: 2,
            bits: 8,
            enc_fusion: vec![Level::Half, Level::Quarter],
            dec_fusion: vec![Level::Half],
        }
    }

    /// `M_{a,b} -> M_{b,a}`: same weights, references exchanged.
    pub fn flip(&self) -> Self {
        Self { past: self.future, future: self.past, ..self.clone() }
    }

    pub fn distance(&self) -> usize {
        self.past + self.future
    }

    pub fn validate(&self) -> Result<()> {
        if self.past == 0 || self.future == 0 {
            return Err(CodecError::invalid("interpolation offsets must be at least 1"));
        }
        if ![8, 16].contains(&self.bits) {
            return Err(CodecError::invalid(format!("interpolation models use L = 8 or 16, not {}", self.bits)));
        }
        if ![3, 6, 12].contains(&self.distance()) {
            return Err(CodecError::invalid(format!("reference distance {} is not 3, 6 or 12", self.distance())));
        }
        if self.dec_fusion.contains(&Level::Full) {
            return Err(CodecError::invalid("the decoder has no full-resolution cell to fuse into"));
        }
        Ok(())
    }

    pub fn bpp_per_iteration(&self) -> f64 {
        self.bits as f64 / 256.0
    }
}

fn enc_slot(level: Level) -> usize {
    match level {
        Level::Full => 0,
        Level::Half => 1,
        Level::Quarter => 2,
        Level::Eighth => 3,
    }
}

fn dec_slot(level: Level) -> usize {
    match level {
        Level::Eighth => 1,
        Level::Quarter => 2,
        Level::Half => 3,
        Level::Full => unreachable!("rejected by validate"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpCodecConfig {
    pub spec: InterpModelSpec,
    pub k_max: usize,
    pub enc_widths: [usize; 4],
    pub dec_widths: [usize; 4],
    pub context: ContextNetConfig,
}

impl InterpCodecConfig {
    pub fn reference(spec: InterpModelSpec) -> Self {
        Self {
            spec,
            k_max: 16,
            enc_widths: [64, 128, 128, 128],
            dec_widths: [128, 128, 128, 64],
            context: ContextNetConfig::reference(),
        }
    }

    pub fn toy(spec: InterpModelSpec) -> Self {
        Self {
            spec,
            k_max: 16,
            enc_widths: [16, 24, 32, 32],
            dec_widths: [32, 32, 24, 16],
            context: ContextNetConfig::toy(),
        }
    }

    fn core(&self) -> CoreConfig {
        let mut enc_fusion = [0; 4];
        let mut dec_fusion = [0; 4];
        for &l in &self.spec.enc_fusion {
            enc_fusion[enc_slot(l)] = 2 * self.context.channels(l);
        }
        for &l in &self.spec.dec_fusion {
            dec_fusion[dec_slot(l)] = 2 * self.context.channels(l);
        }
        CoreConfig {
            bits: self.spec.bits,
            input_channels: 9,
            enc_widths: self.enc_widths,
            dec_widths: self.dec_widths,
            enc_fusion,
            dec_fusion,
        }
    }
}

/// One training example: a target with its two references and motion.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub past: Tensor,
    pub target: Tensor,
    pub future: Tensor,
    pub motion: MotionPair,
}

fn unsqueeze(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape).expect("adding a unit batch axis")
}

/// Batched `(past, target, future)` tensors and per-item fields.
fn stack_triplets(batch: &[Triplet]) -> Result<(Tensor, Tensor, Tensor, Vec<&MotionField>, Vec<&MotionField>)> {
    let pick = |f: fn(&Triplet) -> &Tensor| Tensor::stack(&batch.iter().map(|t| f(t).clone()).collect::<Vec<_>>());
    Ok((
        pick(|t| &t.past)?,
        pick(|t| &t.target)?,
        pick(|t| &t.future)?,
        batch.iter().map(|t| &t.motion.past).collect(),
        batch.iter().map(|t| &t.motion.future).collect(),
    ))
}

/// Context pyramid of a batch, warped level by level.
fn warped_context(
    tape: &mut Tape,
    p: &Bound,
    net: &ContextNet,
    image: Var,
    fields: &[&MotionField],
) -> Result<[Var; 4]> {
    let feats = net.forward(tape, p, image)?;
    let mut out = feats;
    for level in Level::ALL {
        out[level.index()] = warp_features(tape, feats[level.index()], level.factor(), fields)?;
    }
    Ok(out)
}

/// Per-frame conditioning on a tape: encoder-side neighbours, the
/// motion-compensated starting point and the fusion inputs.
struct Conditioned {
    around: (Var, Var),
    base: Var,
    fusion: Fusion,
}

pub struct InterpCodec {
    config: InterpCodecConfig,
    params: ParamStore,
    context: ContextNet,
    core: ProgressiveCore,
}

impl InterpCodec {
    pub fn new(config: InterpCodecConfig, seed: u64) -> Result<Self> {
        config.spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let context = ContextNet::new(&mut params, "", config.context, &mut rng);
        let core = ProgressiveCore::new(&mut params, "", config.core(), &mut rng);
        Ok(Self { config, params, context, core })
    }

    pub fn config(&self) -> &InterpCodecConfig {
        &self.config
    }

    pub fn spec(&self) -> &InterpModelSpec {
        &self.config.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Whether `orientation` asks for the references to be exchanged.
    fn flipped(&self, orientation: &InterpModelSpec) -> Result<bool> {
        if *orientation == self.config.spec {
            Ok(false)
        } else if *orientation == self.config.spec.flip() {
            Ok(true)
        } else {
            Err(CodecError::invalid(format!(
                "model M{},{} cannot serve spec M{},{}",
                self.config.spec.past, self.config.spec.future, orientation.past, orientation.future
            )))
        }
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.config.k_max {
            return Err(CodecError::invalid(format!("iteration count {k} outside 1..={}", self.config.k_max)));
        }
        Ok(())
    }

    /// Encoder-input neighbours and fusion inputs, on `tape`.
    fn condition_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        first: Var,
        second: Var,
        first_fields: &[&MotionField],
        second_fields: &[&MotionField],
    ) -> Result<Conditioned> {
        let ca = warped_context(tape, p, &self.context, first, first_fields)?;
        let cb = warped_context(tape, p, &self.context, second, second_fields)?;
        let mut fusion = Fusion::default();
        for &l in &self.config.spec.enc_fusion {
            fusion.enc[enc_slot(l)] = Some(tape.concat(&[ca[l.index()], cb[l.index()]])?);
        }
        for &l in &self.config.spec.dec_fusion {
            fusion.dec[dec_slot(l)] = Some(tape.concat(&[ca[l.index()], cb[l.index()]])?);
        }
        let wa = warp_features(tape, first, 1, first_fields)?;
        let wb = warp_features(tape, second, 1, second_fields)?;
        let sum = tape.add(wa, wb)?;
        let base = tape.scale(sum, 0.5);
        let a = tape.add_scalar(first, -0.5);
        let b = tape.add_scalar(second, -0.5);
        Ok(Conditioned { around: (a, b), base, fusion })
    }

    /// Fixed inputs for coding one frame between decoded references.
    fn conditioning(
        &self,
        past: &Tensor,
        future: &Tensor,
        motion: &MotionPair,
        orientation: &InterpModelSpec,
    ) -> Result<Conditioning> {
        if past.shape() != future.shape() {
            return Err(CodecError::invalid("reference frames differ in size"));
        }
        let (first, second, motion) =
            if self.flipped(orientation)? { (future, past, motion.swapped()) } else { (past, future, motion.clone()) };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let a = tape.constant(unsqueeze(first));
        let b = tape.constant(unsqueeze(second));
        let c = self.condition_vars(&mut tape, &p, a, b, &[&motion.past], &[&motion.future])?;
        let (a, b) = c.around;
        let fusion = c.fusion;
        let arc = |v: Option<Var>| v.map(|v| tape.value_arc(v));
        Ok(Conditioning {
            around: Some((tape.value_arc(a), tape.value_arc(b))),
            base: Some(tape.value_arc(c.base)),
            enc: fusion.enc.map(arc),
            dec: fusion.dec.map(arc),
        })
    }

    /// Codes `target` given decoded references and the transmitted motion.
    /// `orientation` is the model's spec or its flip.
    pub fn encode_interp(
        &self,
        target: &Tensor,
        past: &Tensor,
        future: &Tensor,
        motion: &MotionPair,
        orientation: &InterpModelSpec,
        k: usize,
    ) -> Result<(BinaryCode, Tensor)> {
        self.check_k(k)?;
        if target.shape() != past.shape() {
            return Err(CodecError::invalid("target and references differ in size"));
        }
        let cond = self.conditioning(past, future, motion, orientation)?;
        self.core.encode(&self.params, target, &cond, k)
    }

    pub fn decode_progressive(
        &self,
        code: &BinaryCode,
        past: &Tensor,
        future: &Tensor,
        motion: &MotionPair,
        orientation: &InterpModelSpec,
    ) -> Result<Vec<Tensor>> {
        self.check_k(code.iterations())?;
        let cond = self.conditioning(past, future, motion, orientation)?;
        self.core.decode_progressive(&self.params, code, &cond)
    }

    pub fn decode_interp(
        &self,
        code: &BinaryCode,
        past: &Tensor,
        future: &Tensor,
        motion: &MotionPair,
        orientation: &InterpModelSpec,
    ) -> Result<Tensor> {
        Ok(self.decode_progressive(code, past, future, motion, orientation)?.pop().expect("non-empty code"))
    }

    fn batch_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[Triplet],
        k: usize,
        rng: &mut R,
    ) -> Result<(Var, Vec<f64>)> {
        let (a, t, b, fa, fb) = stack_triplets(batch)?;
        let (a, t, b) = (tape.constant(a), tape.constant(t), tape.constant(b));
        let c = self.condition_vars(tape, p, a, b, &fa, &fb)?;
        self.core.training_loss(tape, p, t, Some(c.around), Some(c.base), &c.fusion, k, rng)
    }

    pub fn train_step<R: Rng>(
        &mut self,
        adam: &mut AdamState<f32>,
        batch: &[Triplet],
        k: usize,
        rng: &mut R,
    ) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let (loss, per) = self.batch_loss(&mut tape, &p, batch, k, rng)?;
        let value = tape.value(loss).item() as f64;
        let mut grads = tape.backward(loss)?;
        adam.step(&mut self.params, &p.grads(&mut grads));
        Ok((value, per))
    }

    pub fn loss<R: Rng>(&self, batch: &[Triplet], k: usize, rng: &mut R) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (loss, per) = self.batch_loss(&mut tape, &p, batch, k, rng)?;
        Ok((tape.value(loss).item() as f64, per))
    }
}

// ---- zero-bit baselines -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpolationNetConfig {
    pub context: ContextNetConfig,
    /// Whether reference features are warped by motion before fusion.
    pub motion: bool,
}

/// Predicts a frame from two references alone: `D(f_1, f_2)`.
///
/// The output is the mean of the (warped) references plus a learned
/// correction decoded from both context pyramids.
pub struct InterpolationNet {
    config: InterpolationNetConfig,
    params: ParamStore,
    context: ContextNet,
    merge: Vec<Conv>,
    ups: Vec<Up>,
    out: Conv,
}

impl InterpolationNet {
    pub fn new(config: InterpolationNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let context = ContextNet::new(&mut params, "", config.context, &mut rng);
        let ch = |l: Level| config.context.channels(l);
        let mut merge =
            vec![Conv::new(&mut params, "d.merge0", 2 * ch(Level::Eighth), ch(Level::Eighth), 3, 1, 1.0, &mut rng)];
        let mut ups = Vec::new();
        let mut prev = ch(Level::Eighth);
        for (i, l) in [Level::Quarter, Level::Half, Level::Full].into_iter().enumerate() {
            ups.push(Up::new(&mut params, &format!("d.up{i}"), prev, ch(l), &mut rng));
            merge.push(Conv::new(&mut params, &format!("d.merge{}", i + 1), 3 * ch(l), ch(l), 3, 1, 1.0, &mut rng));
            prev = ch(l);
        }
        let out = Conv::new(&mut params, "d.out", prev, 3, 1, 1, 0.1, &mut rng);
        Self { config, params, context, merge, ups, out }
    }

    pub fn config(&self) -> &InterpolationNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        a: Var,
        b: Var,
        fa: &[&MotionField],
        fb: &[&MotionField],
    ) -> Result<Var> {
        let (fa, fb): (Vec<&MotionField>, Vec<&MotionField>) =
            if self.config.motion { (fa.to_vec(), fb.to_vec()) } else { (Vec::new(), Vec::new()) };
        let warp_or_keep = |tape: &mut Tape, v: Var, factor: usize, f: &[&MotionField]| -> Result<Var> {
            if f.is_empty() {
                Ok(v)
            } else {
                warp_features(tape, v, factor, f)
            }
        };
        let ca = self.context.forward(tape, p, a)?;
        let cb = self.context.forward(tape, p, b)?;
        let mut la = [ca[0]; 4];
        let mut lb = [cb[0]; 4];
        for level in Level::ALL {
            la[level.index()] = warp_or_keep(tape, ca[level.index()], level.factor(), &fa)?;
            lb[level.index()] = warp_or_keep(tape, cb[level.index()], level.factor(), &fb)?;
        }
        let x = tape.concat(&[la[0], lb[0]])?;
        let x = self.merge[0].forward(tape, p, x)?;
        let mut x = tape.relu(x);
        for (i, l) in [Level::Quarter, Level::Half, Level::Full].into_iter().enumerate() {
            let u = self.ups[i].forward(tape, p, x)?;
            let u = tape.relu(u);
            let cat = tape.concat(&[u, la[l.index()], lb[l.index()]])?;
            let y = self.merge[i + 1].forward(tape, p, cat)?;
            x = tape.relu(y);
        }
        let delta = self.out.forward(tape, p, x)?;
        let wa = warp_or_keep(tape, a, 1, &fa)?;
        let wb = warp_or_keep(tape, b, 1, &fb)?;
        let sum = tape.add(wa, wb)?;
        let mean = tape.scale(sum, 0.5);
        Ok(tape.add(mean, delta)?)
    }

    /// Interpolated frame between two references. Costs no bits beyond the
    /// motion, which the blind variant ignores.
    pub fn interpolate(&self, past: &Tensor, future: &Tensor, motion: &MotionPair) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let a = tape.constant(unsqueeze(past));
        let b = tape.constant(unsqueeze(future));
        let out = self.forward(&mut tape, &p, a, b, &[&motion.past], &[&motion.future])?;
        let v = tape.value(out);
        let data = v.data().iter().map(|&x| crate::progressive::quantize8(x)).collect();
        Ok(Tensor::new(past.shape(), data)?)
    }

    /// One optimizer step on the mean absolute interpolation error.
    pub fn train_step(&mut self, adam: &mut AdamState<f32>, batch: &[Triplet]) -> Result<f64> {
        let (a, t, b, fa, fb) = stack_triplets(batch)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let (a, t, b) = (tape.constant(a), tape.leaf(Arc::new(t), false), tape.constant(b));
        let out = self.forward(&mut tape, &p, a, b, &fa, &fb)?;
        let err = tape.sub(out, t)?;
        let loss = tape.l1_mean(err);
        let value = tape.value(loss).item() as f64;
        let mut grads = tape.backward(loss)?;
        adam.step(&mut self.params, &p.grads(&mut grads));
        Ok(value)
    }
}
