//! Code blobs: one frame's K iteration grids, context-coded or raw.
//!
//! Layout: `u8` flags (bit 0 = raw), `u32` payload length in bits, payload
//! bytes, `u32` CRC32 of everything before it. Integers are little-endian.

use super::arith::{quantize_prob, Decoder, Encoder};
use super::context_model::ContextModel;
use crate::code::{BinaryCode, GridShape};
use crate::{CodecError, Result};

const FLAG_RAW: u8 = 1;
const HEADER_LEN: usize = 5;

/// A parsed, checksum-verified code blob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeBlob {
    pub raw: bool,
    pub bit_len: u64,
    pub payload: Vec<u8>,
}

impl CodeBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + 4);
        out.push(if self.raw { FLAG_RAW } else { 0 });
        out.extend_from_slice(&(self.bit_len as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(CodecError::Truncated("code blob"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(CodecError::Crc("code blob"));
        }
        let flags = body[0];
        if flags & !FLAG_RAW != 0 {
            return Err(CodecError::invalid(format!("unknown code blob flags {flags:#04x}")));
        }
        let bit_len = u32::from_le_bytes(body[1..5].try_into().unwrap()) as u64;
        let payload = body[HEADER_LEN..].to_vec();
        if payload.len() as u64 != bit_len.div_ceil(8) {
            return Err(CodecError::Truncated("code blob payload"));
        }
        Ok(Self { raw: flags & FLAG_RAW != 0, bit_len, payload })
    }
}

/// Codes every grid of `code` in iteration order. Without a model, or when
/// the model would expand the payload, the packed bits are stored raw.
pub fn compress_code(code: &BinaryCode, model: Option<&ContextModel>) -> Vec<u8> {
    let raw_bits = code.bit_count() as u64;
    let coded = model.map(|m| {
        let mut enc = Encoder::new();
        for grid in code.grids() {
            let mut pred = m.predictor(code.shape());
            for (p, &b) in grid.iter().enumerate() {
                let q = quantize_prob(pred.predict(p));
                enc.encode_bit(b > 0, q);
                pred.set_bit(p, b > 0);
            }
        }
        enc.finish()
    });
    let blob = match coded {
        Some((payload, bit_len)) if bit_len <= raw_bits => CodeBlob { raw: false, bit_len, payload },
        _ => CodeBlob { raw: true, bit_len: raw_bits, payload: code.pack() },
    };
    blob.to_bytes()
}

pub fn decompress_code(
    bytes: &[u8],
    model: Option<&ContextModel>,
    shape: GridShape,
    iterations: usize,
) -> Result<BinaryCode> {
    let blob = CodeBlob::parse(bytes)?;
    if blob.raw {
        if blob.bit_len != (shape.len() * iterations) as u64 {
            return Err(CodecError::invalid(format!(
                "raw code blob holds {} bits, expected {iterations} grids of {shape:?}",
                blob.bit_len
            )));
        }
        return BinaryCode::unpack(shape, iterations, &blob.payload);
    }
    let model =
        model.ok_or_else(|| CodecError::invalid("code blob is context-coded but no context model is loaded"))?;
    let mut dec = Decoder::new(&blob.payload, blob.bit_len)?;
    let mut code = BinaryCode::new(shape);
    for _ in 0..iterations {
        let mut pred = model.predictor(shape);
        let mut grid = Vec::with_capacity(shape.len());
        for p in 0..shape.len() {
            let bit = dec.decode_bit(quantize_prob(pred.predict(p)))?;
            pred.set_bit(p, bit);
            grid.push(if bit { 1 } else { -1 });
        }
        code.push(grid)?;
    }
    Ok(code)
}
