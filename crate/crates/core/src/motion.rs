//! Block motion estimation, warping, and lossless motion-field storage.

use ivc_tensor::{Tape, Tensor, Var};

use crate::entropy::arith::{Decoder, Encoder};
use crate::entropy::AdaptiveModel;
use crate::{CodecError, Result};

pub const BLOCK_SIZE: usize = 16;
pub const SEARCH_RANGE: usize = 16;

/// One integer displacement `(dx, dy)` per block.
///
/// A displacement `T` at a target pixel `i` means the pixel is predicted from
/// reference position `i - T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionField {
    block_size: usize,
    search_range: usize,
    grid_w: usize,
    grid_h: usize,
    vectors: Vec<(i32, i32)>,
}

/// Displacements from the past and from the future reference to one target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionPair {
    pub past: MotionField,
    pub future: MotionField,
}

impl MotionPair {
    pub fn zero(width: usize, height: usize) -> Self {
        let f = MotionField::zero(width, height, BLOCK_SIZE, SEARCH_RANGE);
        Self { past: f.clone(), future: f }
    }

    /// The same pair seen with the references exchanged.
    pub fn swapped(&self) -> Self {
        Self { past: self.future.clone(), future: self.past.clone() }
    }
}

impl MotionField {
    pub fn zero(width: usize, height: usize, block_size: usize, search_range: usize) -> Self {
        let (grid_w, grid_h) = (width.div_ceil(block_size), height.div_ceil(block_size));
        Self { block_size, search_range, grid_w, grid_h, vectors: vec![(0, 0); grid_w * grid_h] }
    }

    pub fn uniform(width: usize, height: usize, dx: i32, dy: i32) -> Result<Self> {
        let mut f = Self::zero(width, height, BLOCK_SIZE, SEARCH_RANGE);
        for by in 0..f.grid_h {
            for bx in 0..f.grid_w {
                f.set(bx, by, dx, dy)?;
            }
        }
        Ok(f)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn search_range(&self) -> usize {
        self.search_range
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_w, self.grid_h)
    }

    pub fn vectors(&self) -> &[(i32, i32)] {
        &self.vectors
    }

    pub fn get(&self, bx: usize, by: usize) -> (i32, i32) {
        self.vectors[by * self.grid_w + bx]
    }

    pub fn set(&mut self, bx: usize, by: usize, dx: i32, dy: i32) -> Result<()> {
        let r = self.search_range as i32;
        if dx.abs() > r || dy.abs() > r {
            return Err(CodecError::invalid(format!("displacement ({dx},{dy}) exceeds search range {r}")));
        }
        self.vectors[by * self.grid_w + bx] = (dx, dy);
        Ok(())
    }

    /// Displacement applying at full-resolution pixel `(x, y)`.
    pub fn at_pixel(&self, x: usize, y: usize) -> (i32, i32) {
        self.get(x / self.block_size, y / self.block_size)
    }

    /// The `grid_w`×`grid_h` block window starting at block `(bx, by)`.
    pub fn crop(&self, bx: usize, by: usize, grid_w: usize, grid_h: usize) -> Self {
        let vectors =
            (0..grid_h).flat_map(|y| (0..grid_w).map(move |x| (x, y))).map(|(x, y)| self.get(bx + x, by + y)).collect();
        Self { grid_w, grid_h, vectors, ..*self }
    }

    /// The field of horizontally mirrored frames whose width is a multiple of
    /// the block size.
    pub fn hflip(&self) -> Self {
        let vectors = (0..self.grid_h)
            .flat_map(|y| (0..self.grid_w).map(move |x| (x, y)))
            .map(|(x, y)| {
                let (dx, dy) = self.get(self.grid_w - 1 - x, y);
                (-dx, dy)
            })
            .collect();
        Self { vectors, ..*self }
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.iter().all(|&v| v == (0, 0))
    }
}

/// Frame quantized to the 8-bit lattice, planar `(3, h, w)`.
pub struct Plane8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Plane8 {
    pub fn from_frame(frame: &Tensor) -> Result<Self> {
        let (height, width) = frame_dims(frame)?;
        let data = frame.data().iter().map(|&v| to_u8(v)).collect();
        Ok(Self { width, height, data })
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn frame_dims(frame: &Tensor) -> Result<(usize, usize)> {
    match frame.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(CodecError::invalid(format!("frames must have shape (3, H, W), got {s:?}"))),
    }
}

fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Exhaustive integer search: for every block of `target`, the displacement
/// within `±search_range` with the least sum of absolute differences against
/// `reference` (8-bit, all channels, border reads clamped). Ties go to the
/// smallest `|dx| + |dy|`, then the smallest `dy`, then the smallest `dx`.
pub fn estimate_block_motion(
    reference: &Tensor,
    target: &Tensor,
    block_size: usize,
    search_range: usize,
) -> Result<MotionField> {
    if reference.shape() != target.shape() {
        return Err(CodecError::invalid(format!(
            "reference {:?} and target {:?} differ in size",
            reference.shape(),
            target.shape()
        )));
    }
    let (r, t) = (Plane8::from_frame(reference)?, Plane8::from_frame(target)?);
    let (w, h) = (t.width, t.height);
    let mut field = MotionField::zero(w, h, block_size, search_range);
    let sr = search_range as i32;
    let plane = w * h;
    for by in 0..field.grid_h {
        for bx in 0..field.grid_w {
            let (x0, y0) = (bx * block_size, by * block_size);
            let (x1, y1) = ((x0 + block_size).min(w), (y0 + block_size).min(h));
            let mut best: Option<(u32, i32, i32, i32)> = None;
            for dy in -sr..=sr {
                for dx in -sr..=sr {
                    let mut sad = 0u32;
                    for y in y0..y1 {
                        let ry = clampi(y as isize - dy as isize, h);
                        for x in x0..x1 {
                            let rx = clampi(x as isize - dx as isize, w);
                            for c in 0..3 {
                                let a = t.data[c * plane + y * w + x];
                                let b = r.data[c * plane + ry * w + rx];
                                sad += a.abs_diff(b) as u32;
                            }
                        }
                    }
                    let key = (sad, dx.abs() + dy.abs(), dy, dx);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let (_, _, dy, dx) = best.expect("search window is never empty");
            field.set(bx, by, dx, dy)?;
        }
    }
    Ok(field)
}

/// Forward and backward motion for a target between two references.
pub fn estimate_pair(past: &Tensor, target: &Tensor, future: &Tensor) -> Result<MotionPair> {
    Ok(MotionPair {
        past: estimate_block_motion(past, target, BLOCK_SIZE, SEARCH_RANGE)?,
        future: estimate_block_motion(future, target, BLOCK_SIZE, SEARCH_RANGE)?,
    })
}

/// `out(i) = source(i - T_i)`, reads clamped to the border.
pub fn warp_image(source: &Tensor, field: &MotionField) -> Result<Tensor> {
    let (h, w) = frame_dims(source)?;
    let s = source.data();
    let mut out = vec![0.0; s.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = field.at_pixel(x, y);
            let sy = clampi(y as isize - dy as isize, h);
            let sx = clampi(x as isize - dx as isize, w);
            for c in 0..3 {
                out[(c * h + y) * w + x] = s[(c * h + sy) * w + sx];
            }
        }
    }
    Ok(Tensor::new(source.shape(), out)?)
}

/// Sample positions `(x, y)` for warping a map downsampled by `factor`, one
/// set per batch item. Displacements are divided by the factor.
pub fn warp_coords(fields: &[&MotionField], factor: usize, h: usize, w: usize) -> Tensor {
    let mut coords = Vec::with_capacity(fields.len() * h * w * 2);
    for field in fields {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = field.at_pixel(x * factor, y * factor);
                coords.push(x as f32 - dx as f32 / factor as f32);
                coords.push(y as f32 - dy as f32 / factor as f32);
            }
        }
    }
    Tensor::new(&[fields.len(), h, w, 2], coords).expect("coordinate grid shape")
}

/// Warps a feature map `(N, C, h, w)` that is `factor` times smaller than the
/// frame, one field per batch item, with bilinear sampling.
pub fn warp_features(tape: &mut Tape, features: Var, factor: usize, fields: &[&MotionField]) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 || s[0] != fields.len() {
        return Err(CodecError::invalid(format!(
            "feature map {s:?} needs one motion field per batch item, got {}",
            fields.len()
        )));
    }
    if fields.iter().all(|f| f.is_zero()) {
        return Ok(features);
    }
    let coords = tape.constant(warp_coords(fields, factor, s[2], s[3]));
    Ok(tape.bilinear_sample(features, coords)?)
}

// ---- storage --------------------------------------------------------------

const MOTION_HEADER: usize = 1 + 1 + 2 + 2 + 4;

fn planes(pair: &MotionPair) -> [Vec<i32>; 4] {
    let comp = |f: &MotionField, dy: bool| f.vectors.iter().map(|&(x, y)| if dy { y } else { x }).collect();
    [comp(&pair.past, false), comp(&pair.past, true), comp(&pair.future, false), comp(&pair.future, true)]
}

/// Prediction for cell `i`: the left neighbour, or the cell above in the
/// first column.
fn predict(plane: &[i32], i: usize, grid_w: usize) -> i32 {
    if !i.is_multiple_of(grid_w) {
        plane[i - 1]
    } else if i >= grid_w {
        plane[i - grid_w]
    } else {
        0
    }
}

/// Lossless blob for both directions. Layout: `u8` block size, `u8` search
/// range, `u16` grid width, `u16` grid height, `u32` payload byte length,
/// payload, `u32` CRC32 of everything before it.
pub fn compress_motion(pair: &MotionPair) -> Result<Vec<u8>> {
    let f = &pair.past;
    if (f.block_size, f.search_range, f.grid_w, f.grid_h)
        != (pair.future.block_size, pair.future.search_range, pair.future.grid_w, pair.future.grid_h)
    {
        return Err(CodecError::invalid("motion fields of a pair must share their geometry"));
    }
    if f.block_size > 255 || f.search_range > 255 || f.grid_w > 65535 || f.grid_h > 65535 {
        return Err(CodecError::invalid("motion field geometry does not fit the blob header"));
    }
    let sr = f.search_range as i32;
    let mut enc = Encoder::new();
    for plane in planes(pair) {
        let mut model = AdaptiveModel::new(4 * f.search_range + 1);
        for i in 0..plane.len() {
            let delta = plane[i] - predict(&plane, i, f.grid_w);
            model.encode(&mut enc, (delta + 2 * sr) as usize);
        }
    }
    let (payload, _) = enc.finish();
    let mut out = Vec::with_capacity(MOTION_HEADER + payload.len() + 4);
    out.push(f.block_size as u8);
    out.push(f.search_range as u8);
    out.extend_from_slice(&(f.grid_w as u16).to_le_bytes());
    out.extend_from_slice(&(f.grid_h as u16).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decompress_motion(bytes: &[u8]) -> Result<MotionPair> {
    if bytes.len() < MOTION_HEADER + 4 {
        return Err(CodecError::Truncated("motion blob"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(CodecError::Crc("motion blob"));
    }
    let block_size = body[0] as usize;
    let search_range = body[1] as usize;
    let grid_w = u16::from_le_bytes([body[2], body[3]]) as usize;
    let grid_h = u16::from_le_bytes([body[4], body[5]]) as usize;
    let len = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
    let payload = &body[MOTION_HEADER..];
    if payload.len() != len {
        return Err(CodecError::Truncated("motion blob payload"));
    }
    if block_size == 0 || grid_w == 0 || grid_h == 0 {
        return Err(CodecError::invalid("motion blob has an empty geometry"));
    }
    let sr = search_range as i32;
    let mut dec = Decoder::new(payload, len as u64 * 8)?;
    let mut comps = Vec::with_capacity(4);
    for _ in 0..4 {
        let mut model = AdaptiveModel::new(4 * search_range + 1);
        let mut plane = vec![0i32; grid_w * grid_h];
        for i in 0..plane.len() {
            let delta = model.decode(&mut dec)? as i32 - 2 * sr;
            plane[i] = predict(&plane, i, grid_w) + delta;
        }
        comps.push(plane);
    }
    let field = |x: &[i32], y: &[i32]| -> Result<MotionField> {
        let mut f = MotionField { block_size, search_range, grid_w, grid_h, vectors: vec![(0, 0); grid_w * grid_h] };
        for i in 0..x.len() {
            f.set(i % grid_w, i / grid_w, x[i], y[i])?;
        }
        Ok(f)
    };
    Ok(MotionPair { past: field(&comps[0], &comps[1])?, future: field(&comps[2], &comps[3])? })
}

/// Size of the compressed motion payload in bytes, excluding framing.
pub fn motion_payload_len(blob: &[u8]) -> usize {
    blob.len().saturating_sub(MOTION_HEADER + 4)
}
