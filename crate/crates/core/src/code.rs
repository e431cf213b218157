//! The transmitted payload of one frame: K grids of `{-1, +1}` bits.

use ivc_tensor::Tensor;

use crate::{CodecError, Result};

/// Shape of one iteration grid: `l` bits per location on an `h`×`w` lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub l: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.l * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid for a frame of `height`×`width` pixels (both multiples of 16).
    pub fn for_frame(l: usize, height: usize, width: usize) -> Self {
        Self { l, h: height / 16, w: width / 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryCode {
    shape: GridShape,
    grids: Vec<Vec<i8>>,
}

impl BinaryCode {
    pub fn new(shape: GridShape) -> Self {
        Self { shape, grids: Vec::new() }
    }

    pub fn from_grids(shape: GridShape, grids: Vec<Vec<i8>>) -> Result<Self> {
        let mut code = Self::new(shape);
        for g in grids {
            code.push(g)?;
        }
        Ok(code)
    }

    pub fn push(&mut self, grid: Vec<i8>) -> Result<()> {
        if grid.len() != self.shape.len() {
            return Err(CodecError::invalid(format!(
                "grid holds {} bits, shape {:?} needs {}",
                grid.len(),
                self.shape,
                self.shape.len()
            )));
        }
        if grid.iter().any(|&b| b != 1 && b != -1) {
            return Err(CodecError::invalid("code bits must be -1 or +1"));
        }
        self.grids.push(grid);
        Ok(())
    }

    /// Appends a binarized tensor of shape `(1, L, h, w)`.
    pub fn push_tensor(&mut self, t: &Tensor) -> Result<()> {
        self.push(t.data().iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect())
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn iterations(&self) -> usize {
        self.grids.len()
    }

    pub fn grid(&self, k: usize) -> &[i8] {
        &self.grids[k]
    }

    pub fn grids(&self) -> &[Vec<i8>] {
        &self.grids
    }

    /// Iteration `k` as a `(1, L, h, w)` tensor.
    pub fn grid_tensor(&self, k: usize) -> Tensor {
        let s = self.shape;
        Tensor::from_fn(&[1, s.l, s.h, s.w], |i| self.grids[k][i] as f32)
    }

    /// The first `k` iterations.
    pub fn prefix(&self, k: usize) -> Self {
        Self { shape: self.shape, grids: self.grids[..k.min(self.grids.len())].to_vec() }
    }

    pub fn bit_count(&self) -> usize {
        self.grids.len() * self.shape.len()
    }

    /// Bits per pixel of a `height`×`width` frame.
    pub fn bpp(&self, height: usize, width: usize) -> f64 {
        self.bit_count() as f64 / (height * width) as f64
    }

    /// Wire packing: `-1 -> 0`, `+1 -> 1`, iteration-major, then `L`, rows,
    /// columns; MSB first, zero-padded to a byte boundary.
    pub fn pack(&self) -> Vec<u8> {
        pack_bits(self.grids.iter().flatten().map(|&b| b > 0))
    }

    pub fn unpack(shape: GridShape, iterations: usize, bytes: &[u8]) -> Result<Self> {
        let n = shape.len() * iterations;
        if bytes.len() * 8 < n {
            return Err(CodecError::Truncated("packed code"));
        }
        let grids = (0..iterations)
            .map(|k| (0..shape.len()).map(|i| if bit_at(bytes, k * shape.len() + i) { 1 } else { -1 }).collect())
            .collect();
        Ok(Self { shape, grids })
    }
}

pub(crate) fn pack_bits(bits: impl Iterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().unwrap() |= 0x80 >> (i % 8);
        }
    }
    out
}

pub(crate) fn bit_at(bytes: &[u8], i: usize) -> bool {
    bytes[i / 8] & (0x80 >> (i % 8)) != 0
}
