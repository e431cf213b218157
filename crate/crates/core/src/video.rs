//! Whole-video encoding and decoding: GOP coding on top of the model set and
//! the container, plus bit accounting.

use ivc_tensor::Tensor;

use crate::code::GridShape;
use crate::container::{Container, ContainerHeader, GopRecord, RFrameBlobs, RoleParams, HEADER_LEN};
use crate::entropy::{compress_code, decompress_code, CodeBlob, ContextModel};
use crate::frames::{crop_frame, pad_frame, padded};
use crate::hierarchy::{build_gop_plan, GopPlan, RateCombo, Role};
use crate::models::ModelSet;
use crate::motion::{compress_motion, decompress_motion, estimate_pair, MotionPair};
use crate::{CodecError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub gop: usize,
    pub combo: RateCombo,
    pub entropy: bool,
}

/// Where the bits of a container went. The parts sum to `total_bits`, which
/// is the container's size in bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitStats {
    pub header_bits: u64,
    /// Code payload bits of every frame, frame 0 included.
    pub code_bits: u64,
    /// Code payload bits of frame 0 alone.
    pub first_code_bits: u64,
    /// Whole motion blobs.
    pub motion_bits: u64,
    /// Length prefixes and per-blob flags, lengths and CRCs.
    pub framing_bits: u64,
    pub total_bits: u64,
    pub frames: usize,
    /// Pixels per frame, before padding.
    pub pixels: usize,
}

impl BitStats {
    pub fn from_container(c: &Container, size_bytes: usize) -> Result<Self> {
        let code_bits = |blob: &[u8]| -> Result<u64> { Ok(CodeBlob::parse(blob)?.bit_len) };
        let first_code_bits = code_bits(&c.first)?;
        let mut total_code = first_code_bits;
        let mut motion = 0;
        for r in &c.records {
            total_code += code_bits(&r.key)?;
            for f in &r.interior {
                total_code += code_bits(&f.code)?;
                motion += 8 * f.motion.len() as u64;
            }
        }
        let total_bits = 8 * size_bytes as u64;
        let header_bits = 8 * HEADER_LEN as u64;
        Ok(Self {
            header_bits,
            code_bits: total_code,
            first_code_bits,
            motion_bits: motion,
            framing_bits: total_bits - header_bits - total_code - motion,
            total_bits,
            frames: c.header.frames as usize,
            pixels: c.header.orig_width as usize * c.header.orig_height as usize,
        })
    }

    /// Frames that carry the amortized cost: the leading I-frame is shared
    /// with a (virtual) previous GOP, so it is left out once there is more
    /// than one frame.
    fn charged(&self) -> (u64, usize) {
        if self.frames > 1 {
            (self.code_bits - self.first_code_bits, self.frames - 1)
        } else {
            (self.code_bits, 1)
        }
    }

    /// Code bits per pixel with one I-frame charged per GOP; for whole GOPs
    /// this is the planner's average bitrate.
    pub fn code_bpp(&self) -> f64 {
        let (bits, frames) = self.charged();
        bits as f64 / (frames * self.pixels) as f64
    }

    pub fn motion_bpp(&self) -> f64 {
        self.motion_bits as f64 / (self.charged().1 * self.pixels) as f64
    }

    pub fn bpp(&self) -> f64 {
        self.code_bpp() + self.motion_bpp()
    }

    /// Every container bit over every frame.
    pub fn total_bpp(&self) -> f64 {
        self.total_bits as f64 / (self.frames * self.pixels) as f64
    }
}

pub struct Encoded {
    pub bytes: Vec<u8>,
    pub container: Container,
    /// Encoder-side reconstructions at the original size.
    pub frames: Vec<Tensor>,
    pub stats: BitStats,
}

struct Coder<'a> {
    models: &'a ModelSet,
    combo: RateCombo,
    entropy: bool,
    h: usize,
    w: usize,
}

impl Coder<'_> {
    fn context(&self, slot: usize) -> Option<&ContextModel> {
        if self.entropy {
            self.models.context(slot)
        } else {
            None
        }
    }

    fn shape(&self, slot: usize) -> GridShape {
        GridShape::for_frame(self.models.slot_limits()[slot].0, self.h, self.w)
    }

    fn encode_key(&self, frame: &Tensor) -> Result<(Vec<u8>, Tensor)> {
        let (code, recon) = self.models.image().encode_image(frame, self.combo.get(Role::I))?;
        Ok((compress_code(&code, self.context(0)), recon))
    }

    fn decode_key(&self, blob: &[u8]) -> Result<Tensor> {
        let code = decompress_code(blob, self.context(0), self.shape(0), self.combo.get(Role::I))?;
        self.models.image().decode_image(&code)
    }

    fn motion(&self, past: &Tensor, target: &Tensor, future: &Tensor) -> Result<MotionPair> {
        if self.models.config().motion {
            estimate_pair(past, target, future)
        } else {
            Ok(MotionPair::zero(self.w, self.h))
        }
    }

    /// Codes frames `1..=n` of a GOP whose frame 0 is already decoded as
    /// `opening`. Returns the record and decoded frames `0..=n`.
    fn encode_gop(&self, plan: &GopPlan, originals: &[Tensor], opening: &Tensor) -> Result<(GopRecord, Vec<Tensor>)> {
        let n = plan.n();
        let mut decoded: Vec<Option<Tensor>> = vec![None; n + 1];
        decoded[0] = Some(opening.clone());
        let (key, recon) = self.encode_key(&originals[n])?;
        decoded[n] = Some(recon);
        let mut interior = Vec::with_capacity(n - 1);
        for t in plan.interior_order() {
            let e = plan.entry(t);
            let (a, b) = e.refs.expect("interior frames have references");
            let motion = self.motion(&originals[a], &originals[t], &originals[b])?;
            let model = self.models.interp(e.role)?;
            let spec = e.role.spec().expect("interior frames are interpolated");
            let (pa, pb) = (decoded[a].as_ref().expect("lower level"), decoded[b].as_ref().expect("lower level"));
            let (code, recon) = model.encode_interp(&originals[t], pa, pb, &motion, &spec, self.combo.get(e.role))?;
            interior.push(RFrameBlobs {
                motion: compress_motion(&motion)?,
                code: compress_code(&code, self.context(e.role.slot())),
            });
            decoded[t] = Some(recon);
        }
        Ok((GopRecord { key, interior }, decoded.into_iter().map(|f| f.expect("all frames coded")).collect()))
    }

    fn decode_gop(&self, plan: &GopPlan, record: &GopRecord, opening: &Tensor) -> Result<Vec<Tensor>> {
        let n = plan.n();
        let mut decoded: Vec<Option<Tensor>> = vec![None; n + 1];
        decoded[0] = Some(opening.clone());
        decoded[n] = Some(self.decode_key(&record.key)?);
        for (t, blobs) in plan.interior_order().into_iter().zip(&record.interior) {
            let e = plan.entry(t);
            let (a, b) = e.refs.expect("interior frames have references");
            let motion = decompress_motion(&blobs.motion)?;
            if motion.past.grid() != (self.w / 16, self.h / 16) {
                return Err(CodecError::invalid(format!("motion blob for frame {t} does not match the frame size")));
            }
            let slot = e.role.slot();
            let code = decompress_code(&blobs.code, self.context(slot), self.shape(slot), self.combo.get(e.role))?;
            let spec = e.role.spec().expect("interior frames are interpolated");
            let (pa, pb) = (decoded[a].as_ref().expect("lower level"), decoded[b].as_ref().expect("lower level"));
            decoded[t] = Some(self.models.interp(e.role)?.decode_interp(&code, pa, pb, &motion, &spec)?);
        }
        Ok(decoded.into_iter().map(|f| f.expect("all frames decoded")).collect())
    }
}

/// Codes one GOP `originals[0..=n]` given the decoded opening frame.
pub fn encode_gop(
    models: &ModelSet,
    plan: &GopPlan,
    combo: RateCombo,
    entropy: bool,
    originals: &[Tensor],
    opening: &Tensor,
) -> Result<(GopRecord, Vec<Tensor>)> {
    if originals.len() != plan.n() + 1 {
        return Err(CodecError::invalid(format!(
            "a GOP of {} needs {} frames, got {}",
            plan.n(),
            plan.n() + 1,
            originals.len()
        )));
    }
    let (_, h, w) = frame_dims(opening)?;
    Coder { models, combo, entropy, h, w }.encode_gop(plan, originals, opening)
}

pub fn decode_gop(
    models: &ModelSet,
    plan: &GopPlan,
    combo: RateCombo,
    entropy: bool,
    record: &GopRecord,
    opening: &Tensor,
) -> Result<Vec<Tensor>> {
    if record.interior.len() != plan.n() - 1 {
        return Err(CodecError::invalid("GOP record does not match the plan"));
    }
    let (_, h, w) = frame_dims(opening)?;
    Coder { models, combo, entropy, h, w }.decode_gop(plan, record, opening)
}

fn frame_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [3, h, w] => Ok((3, h, w)),
        ref s => Err(CodecError::invalid(format!("frames must have shape (3, H, W), got {s:?}"))),
    }
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| CodecError::Unsupported(format!("{what} {v} exceeds 65535")))
}

pub fn encode_video(models: &ModelSet, frames: &[Tensor], opts: &EncodeOptions) -> Result<Encoded> {
    let first = frames.first().ok_or_else(|| CodecError::invalid("no frames to encode"))?;
    let (_, oh, ow) = frame_dims(first)?;
    if frames.iter().any(|f| f.shape() != first.shape()) {
        return Err(CodecError::invalid("input frames have mixed dimensions"));
    }
    let plan = build_gop_plan(opts.gop)?;
    let limits = models.slot_limits();
    opts.combo.validate(limits.map(|l| l.1))?;
    if opts.entropy {
        let needed = if plan.n() == 1 { 1 } else { 4 };
        if let Some(slot) = (0..needed).find(|&s| models.context(s).is_none()) {
            return Err(CodecError::invalid(format!(
                "entropy coding needs a trained context model for slot {slot}; train one or pass --entropy off"
            )));
        }
    }
    let (h, w) = (padded(oh, 16), padded(ow, 16));
    let padded_frames = frames.iter().map(|f| pad_frame(f, h, w)).collect::<Result<Vec<_>>>()?;
    let header = ContainerHeader {
        width: to_u16(w, "width")?,
        height: to_u16(h, "height")?,
        orig_width: to_u16(ow, "width")?,
        orig_height: to_u16(oh, "height")?,
        frames: u32::try_from(frames.len()).map_err(|_| CodecError::Unsupported("too many frames".into()))?,
        gop: to_u16(plan.n(), "GOP size")?,
        entropy: opts.entropy,
        per_role_context: true,
        roles: std::array::from_fn(|s| RoleParams { bits: limits[s].0 as u8, iterations: opts.combo.0[s] as u8 }),
        digest: models.digest()?,
    };
    let (full, tail) = header.layout()?;
    let coder = Coder { models, combo: opts.combo, entropy: opts.entropy, h, w };
    let (first_blob, mut last) = coder.encode_key(&padded_frames[0])?;
    let mut recons = vec![last.clone()];
    let mut records = Vec::with_capacity(full + tail);
    let n = plan.n();
    for g in 0..full {
        let (record, decoded) = coder.encode_gop(&plan, &padded_frames[g * n..=(g + 1) * n], &last)?;
        records.push(record);
        recons.extend_from_slice(&decoded[1..]);
        last = decoded[n].clone();
    }
    for f in &padded_frames[full * n + 1..] {
        let (key, recon) = coder.encode_key(f)?;
        records.push(GopRecord { key, interior: Vec::new() });
        recons.push(recon);
    }
    let container = Container { header, first: first_blob, records };
    let bytes = container.to_bytes()?;
    let stats = BitStats::from_container(&container, bytes.len())?;
    let frames = recons.iter().map(|f| crop_frame(f, oh, ow)).collect::<Result<Vec<_>>>()?;
    Ok(Encoded { bytes, container, frames, stats })
}

/// Decodes every frame at the original size. Fails fast when `models` is not
/// the checkpoint the stream was coded with.
pub fn decode_video(models: &ModelSet, container: &Container) -> Result<Vec<Tensor>> {
    let hd = &container.header;
    let digest = models.digest()?;
    if digest != hd.digest {
        return Err(CodecError::CheckpointMismatch { expected: hd.digest, found: digest });
    }
    container.validate()?;
    let limits = models.slot_limits();
    for (s, r) in hd.roles.iter().enumerate() {
        if r.bits as usize != limits[s].0 {
            return Err(CodecError::invalid(format!(
                "slot {s} uses {} bits in the stream but {} in the model",
                r.bits, limits[s].0
            )));
        }
    }
    let combo = RateCombo(hd.roles.map(|r| r.iterations as usize));
    let plan = hd.plan()?;
    let (h, w) = (hd.height as usize, hd.width as usize);
    let coder = Coder { models, combo, entropy: hd.entropy, h, w };
    let mut last = coder.decode_key(&container.first)?;
    let mut out = vec![last.clone()];
    for r in &container.records {
        if r.interior.is_empty() {
            last = coder.decode_key(&r.key)?;
            out.push(last.clone());
        } else {
            let decoded = coder.decode_gop(&plan, r, &last)?;
            out.extend_from_slice(&decoded[1..]);
            last = decoded[plan.n()].clone();
        }
    }
    let (oh, ow) = (hd.orig_height as usize, hd.orig_width as usize);
    out.iter().map(|f| crop_frame(f, oh, ow)).collect()
}
