//! Binary-interval arithmetic coder with 32-bit registers.
//!
//! Carries are resolved with pending (outstanding) bits. All interval
//! arithmetic is integer; probabilities are quantized to 16 bits before they
//! reach the coder, so both sides see identical state trajectories.

use crate::{CodecError, Result};

const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;
const TOP: u64 = (1 << 32) - 1;

pub const PROB_BITS: u32 = 16;
pub const PROB_ONE: u32 = 1 << PROB_BITS;

/// Smallest probability handed to the coder.
pub const EPSILON: f64 = 1.0 / PROB_ONE as f64;

/// Bits a decoder reads beyond the encoder's output before it has
/// necessarily left the payload: its 32-bit window minus the 2-bit terminator.
const LOOKAHEAD: u64 = 30;

/// `P(bit = 1)` in units of `2^-16`, clamped to `[1, 2^16 - 1]`.
pub fn quantize_prob(p1: f64) -> u32 {
    let q = (p1 * PROB_ONE as f64).round();
    if q.is_nan() {
        return PROB_ONE / 2;
    }
    q.clamp(1.0, (PROB_ONE - 1) as f64) as u32
}

#[derive(Default)]
struct BitSink {
    bytes: Vec<u8>,
    len: u64,
}

impl BitSink {
    fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    fn push_run(&mut self, bit: bool, n: u64) {
        for _ in 0..n {
            self.push(bit);
        }
    }
}

pub struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitSink,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self { low: 0, high: TOP, pending: 0, out: BitSink::default() }
    }

    /// Narrows to `[cum_lo, cum_hi)` out of `total` (at most `2^16`).
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32, total: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= total && total <= PROB_ONE);
        let range = self.high - self.low + 1;
        self.high = self.low + range * cum_hi as u64 / total as u64 - 1;
        self.low += range * cum_lo as u64 / total as u64;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    /// Codes one bit given `P(bit = 1)` from [`quantize_prob`].
    pub fn encode_bit(&mut self, bit: bool, p1: u32) {
        let split = PROB_ONE - p1;
        if bit {
            self.encode(split, PROB_ONE, PROB_ONE);
        } else {
            self.encode(0, split, PROB_ONE);
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        self.out.push_run(!bit, self.pending);
        self.pending = 0;
    }

    /// Flushes the terminator and returns the payload with its exact length
    /// in bits.
    pub fn finish(mut self) -> (Vec<u8>, u64) {
        self.pending += 1;
        self.emit(self.low >= QUARTER);
        (self.out.bytes, self.out.len)
    }
}

pub struct Decoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    src: &'a [u8],
    bit_len: u64,
    pos: u64,
}

impl<'a> Decoder<'a> {
    /// `bit_len` is the payload length recorded by the encoder; bits past it
    /// read as zero.
    pub fn new(src: &'a [u8], bit_len: u64) -> Result<Self> {
        if bit_len > src.len() as u64 * 8 {
            return Err(CodecError::Truncated("arithmetic-coded payload"));
        }
        let mut d = Self { low: 0, high: TOP, value: 0, src, bit_len, pos: 0 };
        for _ in 0..32 {
            d.value = (d.value << 1) | d.next_bit()?;
        }
        Ok(d)
    }

    fn next_bit(&mut self) -> Result<u64> {
        if self.pos >= self.bit_len + LOOKAHEAD {
            return Err(CodecError::Underflow);
        }
        let bit =
            if self.pos < self.bit_len { (self.src[(self.pos / 8) as usize] >> (7 - self.pos % 8)) & 1 } else { 0 };
        self.pos += 1;
        Ok(bit as u64)
    }

    /// Cumulative count that the next symbol's interval must contain.
    pub fn target(&self, total: u32) -> u32 {
        let range = self.high - self.low + 1;
        (((self.value - self.low + 1) * total as u64 - 1) / range) as u32
    }

    /// Mirrors [`Encoder::encode`] once the symbol is known.
    pub fn consume(&mut self, cum_lo: u32, cum_hi: u32, total: u32) -> Result<()> {
        let range = self.high - self.low + 1;
        self.high = self.low + range * cum_hi as u64 / total as u64 - 1;
        self.low += range * cum_lo as u64 / total as u64;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.next_bit()?;
        }
        Ok(())
    }

    pub fn decode_bit(&mut self, p1: u32) -> Result<bool> {
        let split = PROB_ONE - p1;
        let bit = self.target(PROB_ONE) >= split;
        if bit {
            self.consume(split, PROB_ONE, PROB_ONE)?;
        } else {
            self.consume(0, split, PROB_ONE)?;
        }
        Ok(bit)
    }
}

/// Codes `bits` where `probs[i]` is `P(bits[i] = 1)`. Returns the payload
/// and its length in bits.
pub fn ac_encode(bits: &[bool], probs: &[f64]) -> (Vec<u8>, u64) {
    assert_eq!(bits.len(), probs.len(), "one probability per bit");
    let mut enc = Encoder::new();
    for (&b, &p) in bits.iter().zip(probs) {
        enc.encode_bit(b, quantize_prob(p));
    }
    enc.finish()
}

/// Decodes `count` bits. `prob(i, decoded)` must return the probability the
/// encoder used for bit `i`; it sees only the bits decoded so far.
pub fn ac_decode(
    payload: &[u8],
    bit_len: u64,
    count: usize,
    mut prob: impl FnMut(usize, &[bool]) -> f64,
) -> Result<Vec<bool>> {
    let mut dec = Decoder::new(payload, bit_len)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let p = quantize_prob(prob(i, &out));
        out.push(dec.decode_bit(p)?);
    }
    Ok(out)
}

/// Ideal code length `Σ -log2 p(bit)` in bits.
pub fn information_content(bits: &[bool], probs: &[f64]) -> f64 {
    bits.iter().zip(probs).map(|(&b, &p)| -(if b { p } else { 1.0 - p }).log2()).sum()
}
