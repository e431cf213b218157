//! The `.ivc` stream: a fixed header followed by length-prefixed blobs.
//!
//! All integers are little-endian. See FORMAT.md for the full layout.

use std::io::{Read, Write};

use crate::hierarchy::{build_gop_plan, GopPlan};
use crate::{CodecError, Result};

pub const MAGIC: [u8; 4] = *b"IVCV";
pub const VERSION: u16 = 1;
/// Header bytes including its trailing CRC.
pub const HEADER_LEN: usize = 4 + 2 + 2 * 4 + 4 + 2 + 1 + 8 + 4 + 4;

const FLAG_ENTROPY: u8 = 1;
const FLAG_PER_ROLE_CONTEXT: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoleParams {
    /// Bits per code-grid location.
    pub bits: u8,
    pub iterations: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    /// Coded (padded) frame size.
    pub width: u16,
    pub height: u16,
    /// Size before edge padding.
    pub orig_width: u16,
    pub orig_height: u16,
    pub frames: u32,
    pub gop: u16,
    pub entropy: bool,
    /// One context model per role rather than a shared one.
    pub per_role_context: bool,
    /// Indexed by model slot: I, M6,6, M3,3, M1,2.
    pub roles: [RoleParams; 4],
    /// CRC32 of the checkpoint the stream was coded with.
    pub digest: u32,
}

impl ContainerHeader {
    pub fn plan(&self) -> Result<GopPlan> {
        build_gop_plan(self.gop as usize)
    }

    /// `(full GOPs, trailing I-only frames)` after the leading I-frame.
    pub fn layout(&self) -> Result<(usize, usize)> {
        if self.frames == 0 {
            return Err(CodecError::invalid("a stream holds at least one frame"));
        }
        let rest = self.frames as usize - 1;
        let n = self.plan()?.n();
        Ok((rest / n, rest % n))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.width, self.height, self.orig_width, self.orig_height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.frames.to_le_bytes());
        out.extend_from_slice(&self.gop.to_le_bytes());
        let mut flags = 0;
        if self.entropy {
            flags |= FLAG_ENTROPY;
        }
        if self.per_role_context {
            flags |= FLAG_PER_ROLE_CONTEXT;
        }
        out.push(flags);
        for r in &self.roles {
            out.push(r.bits);
            out.push(r.iterations);
        }
        out.extend_from_slice(&self.digest.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CodecError::Truncated("header"));
        }
        if bytes[..4] != MAGIC {
            return Err(CodecError::BadMagic);
        }
        if bytes.len() < 6 {
            return Err(CodecError::Truncated("header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CodecError::UnsupportedVersion { found: version, supported: VERSION });
        }
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated("header"));
        }
        let (body, crc) = bytes[..HEADER_LEN].split_at(HEADER_LEN - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(CodecError::Crc("header"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
        let flags = body[20];
        if flags & !(FLAG_ENTROPY | FLAG_PER_ROLE_CONTEXT) != 0 {
            return Err(CodecError::invalid(format!("unknown header flags {flags:#04x}")));
        }
        let roles = std::array::from_fn(|i| RoleParams { bits: body[21 + 2 * i], iterations: body[22 + 2 * i] });
        let header = Self {
            width: u16_at(6),
            height: u16_at(8),
            orig_width: u16_at(10),
            orig_height: u16_at(12),
            frames: u32::from_le_bytes(body[14..18].try_into().unwrap()),
            gop: u16_at(18),
            entropy: flags & FLAG_ENTROPY != 0,
            per_role_context: flags & FLAG_PER_ROLE_CONTEXT != 0,
            roles,
            digest: u32::from_le_bytes(body[29..33].try_into().unwrap()),
        };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(16) || !self.height.is_multiple_of(16) {
            return Err(CodecError::invalid(format!(
                "coded size {}x{} is not a positive multiple of 16",
                self.width, self.height
            )));
        }
        if self.orig_width > self.width
            || self.orig_height > self.height
            || self.orig_width == 0
            || self.orig_height == 0
        {
            return Err(CodecError::invalid("original size exceeds the coded size"));
        }
        self.layout()?;
        Ok(())
    }
}

/// An interpolated frame's two blobs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RFrameBlobs {
    pub motion: Vec<u8>,
    pub code: Vec<u8>,
}

/// One GOP after the shared opening I-frame: its closing I-frame and the
/// interior frames in coding order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GopRecord {
    pub key: Vec<u8>,
    pub interior: Vec<RFrameBlobs>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    /// Code blob of frame 0.
    pub first: Vec<u8>,
    /// Full GOPs, then one interior-free record per trailing frame.
    pub records: Vec<GopRecord>,
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn blob(&mut self) -> Result<&'a [u8]> {
        let len_end = self.pos + 4;
        if len_end > self.bytes.len() {
            return Err(CodecError::Truncated("blob length"));
        }
        let len = u32::from_le_bytes(self.bytes[self.pos..len_end].try_into().unwrap()) as usize;
        let end = len_end.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or(CodecError::Truncated("blob"))?;
        self.pos = end;
        Ok(&self.bytes[len_end..end])
    }
}

impl Container {
    /// Checks that the record structure matches what the header implies.
    pub fn validate(&self) -> Result<()> {
        let (full, tail) = self.header.layout()?;
        let interior = self.header.plan()?.n() - 1;
        if self.records.len() != full + tail {
            return Err(CodecError::invalid(format!(
                "{} GOP records, header implies {}",
                self.records.len(),
                full + tail
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            let want = if i < full { interior } else { 0 };
            if r.interior.len() != want {
                return Err(CodecError::invalid(format!(
                    "GOP record {i} holds {} frames, expected {want}",
                    r.interior.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = self.header.to_bytes();
        put_blob(&mut out, &self.first);
        for r in &self.records {
            put_blob(&mut out, &r.key);
            for f in &r.interior {
                put_blob(&mut out, &f.motion);
                put_blob(&mut out, &f.code);
            }
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let header = ContainerHeader::parse(bytes)?;
        let (full, tail) = header.layout()?;
        let interior = header.plan()?.n() - 1;
        let mut cur = Cursor { bytes, pos: HEADER_LEN };
        let first = cur.blob()?.to_vec();
        let mut records = Vec::with_capacity(full + tail);
        for i in 0..full + tail {
            let key = cur.blob()?.to_vec();
            let count = if i < full { interior } else { 0 };
            let mut frames = Vec::with_capacity(count);
            for _ in 0..count {
                let motion = cur.blob()?.to_vec();
                let code = cur.blob()?.to_vec();
                frames.push(RFrameBlobs { motion, code });
            }
            records.push(GopRecord { key, interior: frames });
        }
        if cur.pos != bytes.len() {
            return Err(CodecError::invalid(format!("{} trailing bytes after the last GOP", bytes.len() - cur.pos)));
        }
        Ok(Self { header, first, records })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::parse(&bytes)
    }
}
