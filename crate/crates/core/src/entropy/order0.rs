//! Adaptive frequency model over a small alphabet.

use super::arith::{Decoder, Encoder, PROB_ONE};
use crate::{CodecError, Result};

const INCREMENT: u32 = 32;

/// Counts start at one (Laplace) and are halved when the total would exceed
/// the coder's 16-bit frequency budget.
#[derive(Clone, Debug)]
pub struct AdaptiveModel {
    freq: Vec<u32>,
    total: u32,
}

impl AdaptiveModel {
    pub fn new(alphabet: usize) -> Self {
        assert!((1..=(PROB_ONE / 2) as usize).contains(&alphabet), "alphabet size {alphabet}");
        Self { freq: vec![1; alphabet], total: alphabet as u32 }
    }

    pub fn alphabet(&self) -> usize {
        self.freq.len()
    }

    pub fn frequency(&self, symbol: usize) -> u32 {
        self.freq[symbol]
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    fn interval(&self, symbol: usize) -> (u32, u32) {
        let lo: u32 = self.freq[..symbol].iter().sum();
        (lo, lo + self.freq[symbol])
    }

    fn update(&mut self, symbol: usize) {
        if self.total + INCREMENT > PROB_ONE {
            for f in &mut self.freq {
                *f = (*f).div_ceil(2);
            }
            self.total = self.freq.iter().sum();
        }
        self.freq[symbol] += INCREMENT;
        self.total += INCREMENT;
    }

    pub fn encode(&mut self, enc: &mut Encoder, symbol: usize) {
        let (lo, hi) = self.interval(symbol);
        enc.encode(lo, hi, self.total);
        self.update(symbol);
    }

    pub fn decode(&mut self, dec: &mut Decoder<'_>) -> Result<usize> {
        let target = dec.target(self.total);
        let mut lo = 0;
        for (s, &f) in self.freq.iter().enumerate() {
            if target < lo + f {
                dec.consume(lo, lo + f, self.total)?;
                self.update(s);
                return Ok(s);
            }
            lo += f;
        }
        Err(CodecError::invalid("corrupt stream: decoded count outside the model"))
    }
}
