//! Context network: a U-net whose decoder features, at 1/8, 1/4, 1/2 and
//! full resolution, condition the interpolation codecs.

use ivc_tensor::{Bound, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv, Up};
use crate::Result;

/// A resolution of the feature pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Eighth,
    Quarter,
    Half,
    Full,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Eighth, Level::Quarter, Level::Half, Level::Full];

    pub fn factor(self) -> usize {
        match self {
            Level::Eighth => 8,
            Level::Quarter => 4,
            Level::Half => 2,
            Level::Full => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextNetConfig {
    /// Channels at full, 1/2, 1/4, 1/8 and 1/16 resolution.
    pub widths: [usize; 5],
}

impl ContextNetConfig {
    /// The classic U-net widths halved.
    pub fn reference() -> Self {
        Self { widths: [32, 64, 128, 256, 512] }
    }

    pub fn toy() -> Self {
        Self { widths: [8, 12, 16, 16, 16] }
    }

    pub fn channels(&self, level: Level) -> usize {
        match level {
            Level::Full => self.widths[0],
            Level::Half => self.widths[1],
            Level::Quarter => self.widths[2],
            Level::Eighth => self.widths[3],
        }
    }
}

pub struct ContextNet {
    config: ContextNetConfig,
    down: Vec<Conv>,
    ups: Vec<Up>,
    merge: Vec<Conv>,
}

impl ContextNet {
    pub fn new<R: Rng>(ps: &mut ParamStore, prefix: &str, config: ContextNetConfig, rng: &mut R) -> Self {
        let w = config.widths;
        let mut down = vec![Conv::new(ps, &format!("{prefix}ctx.in"), 3, w[0], 3, 1, 1.0, rng)];
        for s in 1..5 {
            down.push(Conv::new(ps, &format!("{prefix}ctx.down{s}"), w[s - 1], w[s], 3, 2, 1.0, rng));
        }
        let mut ups = Vec::new();
        let mut merge = Vec::new();
        for s in (0..4).rev() {
            ups.push(Up::new(ps, &format!("{prefix}ctx.up{s}"), w[s + 1], w[s], rng));
            merge.push(Conv::new(ps, &format!("{prefix}ctx.merge{s}"), 2 * w[s], w[s], 3, 1, 1.0, rng));
        }
        Self { config, down, ups, merge }
    }

    pub fn config(&self) -> &ContextNetConfig {
        &self.config
    }

    /// Features of images `(N, 3, H, W)` in `[0, 1]`, indexed by
    /// [`Level::index`].
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<[Var; 4]> {
        let mut x = tape.add_scalar(image, -0.5);
        let mut skips = Vec::with_capacity(5);
        for conv in &self.down {
            let y = conv.forward(tape, p, x)?;
            x = tape.relu(y);
            skips.push(x);
        }
        let mut out = Vec::with_capacity(4);
        for (i, s) in (0..4).rev().enumerate() {
            let u = self.ups[i].forward(tape, p, x)?;
            let u = tape.relu(u);
            let cat = tape.concat(&[u, skips[s]])?;
            let y = self.merge[i].forward(tape, p, cat)?;
            x = tape.relu(y);
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// Context features of one image, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    pub image: Tensor,
    /// `(1, C_l, H / f_l, W / f_l)` per [`Level`].
    pub levels: [Tensor; 4],
}

/// Runs `net` (whose weights live in `params`) on one `(3, H, W)` image.
pub fn extract_context(net: &ContextNet, params: &ParamStore, image: &Tensor) -> Result<ContextFeatures> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = tape.constant(image.clone().reshape(&shape)?);
    let levels = net.forward(&mut tape, &p, x)?;
    Ok(ContextFeatures { image: image.clone(), levels: levels.map(|v| tape.value(v).clone()) })
}
