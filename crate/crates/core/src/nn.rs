//! Parameterized layers shared by the codec networks.

use ivc_tensor::{conv_lstm_cell, Bound, ConvLstmWeights, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::Result;

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// 2D convolution with bias and symmetric padding `k / 2`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain * he_bound(cin * k * k);
        let w = ps.add(format!("{name}.w"), Tensor::uniform(&[cout, cin, k, k], bound, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)?)
    }
}

/// Kernel-2, stride-2 transposed convolution (exact 2× upsampling).
#[derive(Clone, Copy, Debug)]
pub struct Up {
    w: ParamId,
    b: ParamId,
}

impl Up {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::uniform(&[cin, cout, 2, 2], he_bound(cin), rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv_transpose2d(x, p.var(self.w), Some(p.var(self.b)), 2, 0)?)
    }
}

/// Convolutional LSTM with a 3×3 input kernel (carrying the stride) and a
/// 1×1 hidden kernel.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    input: ParamId,
    hidden_w: ParamId,
    bias: ParamId,
    stride: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, cin: usize, hidden: usize, stride: usize, rng: &mut R) -> Self {
        let gates = 4 * hidden;
        let input = ps.add(format!("{name}.wx"), Tensor::uniform(&[gates, cin, 3, 3], 2.0 * he_bound(cin * 9), rng));
        let hidden_w =
            ps.add(format!("{name}.wh"), Tensor::uniform(&[gates, hidden, 1, 1], he_bound(hidden) / 2.0, rng));
        // Input, forget and output gates start mostly open.
        let bias = ps.add(format!("{name}.b"), Tensor::from_fn(&[gates], |i| if i < 3 * hidden { 1.0 } else { 0.0 }));
        Self { input, hidden_w, bias, stride, hidden }
    }

    /// Zero `(h, c)` for a batch of `n` at the cell's output resolution.
    pub fn zero_state(&self, tape: &mut Tape, n: usize, h: usize, w: usize) -> (Var, Var) {
        let z = || Tensor::zeros(&[n, self.hidden, h, w]);
        (tape.constant(z()), tape.constant(z()))
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        let wts = ConvLstmWeights {
            input: p.var(self.input),
            hidden: p.var(self.hidden_w),
            bias: p.var(self.bias),
            stride: self.stride,
        };
        Ok(conv_lstm_cell(tape, x, state, &wts)?)
    }
}

/// Concatenates `x` with an optional extra input along channels.
pub fn fuse(tape: &mut Tape, x: Var, extra: Option<Var>) -> Result<Var> {
    Ok(match extra {
        Some(e) => tape.concat(&[x, e])?,
        None => x,
    })
}
