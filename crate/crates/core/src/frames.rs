//! Raw frame ingestion and emission: binary PPM directories and 4:4:4 Y4M.
//!
//! Frames are `(3, H, W)` tensors in `[0, 1]`; byte `v` maps to `v / 255`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ivc_tensor::Tensor;

use crate::{CodecError, Result};

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar `(3, h, w)` frame from interleaved RGB bytes.
pub fn from_interleaved(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor> {
    if rgb.len() != 3 * w * h {
        return Err(CodecError::invalid("pixel buffer does not match the frame size"));
    }
    let plane = w * h;
    Ok(Tensor::from_fn(&[3, h, w], |i| rgb[(i % plane) * 3 + i / plane] as f32 / 255.0))
}

pub fn to_interleaved(frame: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = dims(frame)?;
    let d = frame.data();
    let plane = w * h;
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + p]));
        }
    }
    Ok((w, h, out))
}

fn dims(frame: &Tensor) -> Result<(usize, usize)> {
    match *frame.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(CodecError::invalid(format!("frames must have shape (3, H, W), got {s:?}"))),
    }
}

// ---- PPM ------------------------------------------------------------------

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(CodecError::Truncated("PPM header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != "P6" {
        return Err(CodecError::Unsupported("only binary PPM (P6) is read".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = ppm_token(bytes, &mut pos)?;
        t.parse().map_err(|_| CodecError::invalid(format!("bad PPM {what} {t:?}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(CodecError::Unsupported(format!("PPM maxval {maxval}; only 8-bit (255) input is supported")));
    }
    if w == 0 || h == 0 {
        return Err(CodecError::invalid("PPM has zero size"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let end = start + 3 * w * h;
    if end > bytes.len() {
        return Err(CodecError::Truncated("PPM raster"));
    }
    from_interleaved(w, h, &bytes[start..end])
}

pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_interleaved(frame)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

// ---- Y4M ------------------------------------------------------------------

/// Reads a 4:4:4 8-bit Y4M stream. The three planes become the three
/// channels as stored; no colour conversion is applied.
pub fn decode_y4m(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let line_end = |from: usize| bytes[from..].iter().position(|&b| b == b'\n').map(|p| from + p);
    let header_end = line_end(0).ok_or(CodecError::Truncated("Y4M header"))?;
    let header = String::from_utf8_lossy(&bytes[..header_end]);
    let mut fields = header.split(' ');
    if fields.next() != Some("YUV4MPEG2") {
        return Err(CodecError::BadMagic);
    }
    let (mut w, mut h, mut chroma) = (0usize, 0usize, "420jpeg".to_string());
    for f in fields {
        let (tag, val) = f.split_at(1.min(f.len()));
        match tag {
            "W" => w = val.parse().map_err(|_| CodecError::invalid("bad Y4M width"))?,
            "H" => h = val.parse().map_err(|_| CodecError::invalid("bad Y4M height"))?,
            "C" => chroma = val.to_string(),
            _ => {}
        }
    }
    if chroma != "444" {
        return Err(CodecError::Unsupported(format!(
            "Y4M chroma {chroma}; convert to 4:4:4 first, e.g. `ffmpeg -i in.y4m -pix_fmt yuv444p out.y4m`"
        )));
    }
    if w == 0 || h == 0 {
        return Err(CodecError::invalid("Y4M header lacks a frame size"));
    }
    let plane = w * h;
    let mut frames = Vec::new();
    let mut pos = header_end + 1;
    while pos < bytes.len() {
        let end = line_end(pos).ok_or(CodecError::Truncated("Y4M frame header"))?;
        if !bytes[pos..end].starts_with(b"FRAME") {
            return Err(CodecError::invalid("Y4M frame does not start with FRAME"));
        }
        let start = end + 1;
        if start + 3 * plane > bytes.len() {
            return Err(CodecError::Truncated("Y4M frame"));
        }
        let data = &bytes[start..start + 3 * plane];
        frames.push(Tensor::from_fn(&[3, h, w], |i| data[i] as f32 / 255.0));
        pos = start + 3 * plane;
    }
    Ok(frames)
}

pub fn encode_y4m(frames: &[Tensor]) -> Result<Vec<u8>> {
    let (h, w) = dims(frames.first().ok_or_else(|| CodecError::invalid("no frames to write"))?)?;
    let mut out = format!("YUV4MPEG2 W{w} H{h} F25:1 Ip A1:1 C444\n").into_bytes();
    for f in frames {
        if dims(f)? != (h, w) {
            return Err(CodecError::invalid("frames differ in size"));
        }
        out.extend_from_slice(b"FRAME\n");
        out.extend(f.data().iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

// ---- files ----------------------------------------------------------------

fn is_y4m(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m"))
}

/// Loads a directory of `.ppm` files in name order, or one `.y4m` file.
pub fn load_frames(path: &Path) -> Result<Vec<Tensor>> {
    let frames = if path.is_dir() {
        let mut files: Vec<PathBuf> =
            fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
        files.sort();
        files.iter().map(|f| decode_ppm(&fs::read(f)?)).collect::<Result<Vec<_>>>()?
    } else if is_y4m(path) {
        decode_y4m(&fs::read(path)?)?
    } else {
        vec![decode_ppm(&fs::read(path)?)?]
    };
    let first = frames.first().ok_or_else(|| CodecError::invalid(format!("no frames found in {}", path.display())))?;
    if frames.iter().any(|f| f.shape() != first.shape()) {
        return Err(CodecError::invalid("input frames have mixed dimensions"));
    }
    Ok(frames)
}

/// Writes `frame_00000.ppm`, .. into a directory, or one `.y4m` file.
pub fn save_frames(frames: &[Tensor], path: &Path) -> Result<()> {
    if is_y4m(path) {
        fs::write(path, encode_y4m(frames)?)?;
        return Ok(());
    }
    fs::create_dir_all(path)?;
    for (i, f) in frames.iter().enumerate() {
        let mut file = fs::File::create(path.join(format!("frame_{i:05}.ppm")))?;
        file.write_all(&encode_ppm(f)?)?;
    }
    Ok(())
}

// ---- padding ----------------------------------------------------------------

/// Smallest multiple of `m` that is at least `v`.
pub fn padded(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Extends a frame to `(h, w)` by replicating its last row and column.
pub fn pad_frame(frame: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (fh, fw) = dims(frame)?;
    if h < fh || w < fw {
        return Err(CodecError::invalid("padding cannot shrink a frame"));
    }
    let d = frame.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(c * fh + y.min(fh - 1)) * fw + x.min(fw - 1)]
    }))
}

/// Top-left `(h, w)` window.
pub fn crop_frame(frame: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (fh, fw) = dims(frame)?;
    if h > fh || w > fw {
        return Err(CodecError::invalid("crop window exceeds the frame"));
    }
    let d = frame.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(c * fh + y) * fw + x]
    }))
}

/// A set of clips: `synthetic:N` or `synthetic:N:SEED` for generated 64×64
/// clips, a directory of `.y4m` files or PPM directories (one clip each), or
/// a single clip (one `.y4m` file or a directory of `.ppm` files).
pub fn load_clips(spec: &str) -> Result<ClipSet> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let len = parts.next().and_then(|n| n.parse().ok()).ok_or_else(|| {
            CodecError::invalid(format!("{spec:?}: expected synthetic:COUNT or synthetic:COUNT:SEED"))
        })?;
        let seed = match parts.next() {
            Some(s) => s.parse().map_err(|_| CodecError::invalid(format!("{spec:?}: bad seed")))?,
            None => 0,
        };
        return Ok(ClipSet::Synthetic(crate::synth::Corpus { seed, len, config: Default::default() }));
    }
    let path = Path::new(spec);
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        let members: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir() || is_y4m(p)).collect();
        if !members.is_empty() {
            return Ok(ClipSet::Loaded(members.iter().map(|p| load_frames(p)).collect::<Result<_>>()?));
        }
    }
    Ok(ClipSet::Loaded(vec![load_frames(path)?]))
}

pub enum ClipSet {
    Synthetic(crate::synth::Corpus),
    Loaded(Vec<Vec<Tensor>>),
}

impl crate::train::ClipSource for ClipSet {
    fn len(&self) -> usize {
        match self {
            ClipSet::Synthetic(c) => c.len as usize,
            ClipSet::Loaded(v) => v.len(),
        }
    }

    fn clip(&self, index: usize) -> Result<Vec<Tensor>> {
        match self {
            ClipSet::Synthetic(c) => Ok(c.clip(index as u64)),
            ClipSet::Loaded(v) => Ok(v[index].clone()),
        }
    }
}
