//! Masked 3D convolutional context model over binary code grids.
//!
//! A grid of shape `(L, h, w)` is treated as a volume scanned channel-major,
//! then by row, then by column. Every layer is a 3×3×3 convolution whose
//! kernel is masked so that the prediction for position `p` sees only
//! positions strictly before `p`: the first layer excludes the centre tap,
//! later layers include it.

use std::sync::Arc;

use ivc_tensor::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arith::EPSILON;
use crate::code::GridShape;
use crate::train::Schedule;
use crate::{CodecError, Result};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextModelConfig {
    pub layers: usize,
    pub channels: usize,
}

impl Default for ContextModelConfig {
    fn default() -> Self {
        Self { layers: 11, channels: 128 }
    }
}

struct Layer {
    w: ParamId,
    b: ParamId,
    /// `(gamma, beta, running mean, running var)`; absent on the output layer.
    norm: Option<[ParamId; 4]>,
    cin: usize,
    cout: usize,
}

pub struct ContextModel {
    config: ContextModelConfig,
    params: ParamStore,
    layers: Vec<Layer>,
    masks: [Arc<Tensor>; 2],
}

/// Kernel taps `(dz, dy, dx)` visible to a layer, in kernel order.
fn visible_taps(include_centre: bool) -> Vec<(isize, isize, isize)> {
    let mut taps = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if (dz, dy, dx) < (0, 0, 0) || (include_centre && (dz, dy, dx) == (0, 0, 0)) {
                    taps.push((dz, dy, dx));
                }
            }
        }
    }
    taps
}

fn mask(cout: usize, cin: usize, include_centre: bool) -> Tensor {
    let taps = visible_taps(include_centre);
    Tensor::from_fn(&[cout, cin, 3, 3, 3], |i| {
        let k = i % 27;
        let tap = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
        if taps.contains(&tap) {
            1.0
        } else {
            0.0
        }
    })
}

impl ContextModel {
    pub fn new(config: ContextModelConfig, seed: u64) -> Result<Self> {
        if config.layers < 2 || config.channels == 0 {
            return Err(CodecError::invalid("context model needs at least 2 layers and 1 channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let c = config.channels;
        for l in 0..config.layers {
            let cin = if l == 0 { 1 } else { c };
            let last = l + 1 == config.layers;
            let cout = if last { 1 } else { c };
            let fan_in = (cin * visible_taps(l > 0).len()) as f64;
            let bound = if last { (1.0 / fan_in).sqrt() } else { (6.0 / fan_in).sqrt() };
            let w = params.add(format!("layer{l}.w"), Tensor::uniform(&[cout, cin, 3, 3, 3], bound, &mut rng));
            let b = params.add(format!("layer{l}.b"), Tensor::zeros(&[cout]));
            let norm = (!last).then(|| {
                [
                    params.add(format!("layer{l}.gamma"), Tensor::ones(&[cout])),
                    params.add(format!("layer{l}.beta"), Tensor::zeros(&[cout])),
                    params.add(format!("layer{l}.mean"), Tensor::zeros(&[cout])),
                    params.add(format!("layer{l}.var"), Tensor::ones(&[cout])),
                ]
            });
            layers.push(Layer { w, b, norm, cin, cout });
        }
        let masks = [Arc::new(mask(c, 1, false)), Arc::new(mask(c, c, true))];
        Ok(Self { config, params, layers, masks })
    }

    pub fn config(&self) -> ContextModelConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn layer_mask(&self, l: usize) -> Arc<Tensor> {
        let layer = &self.layers[l];
        if l == 0 {
            if layer.cout == self.masks[0].shape()[0] {
                return Arc::clone(&self.masks[0]);
            }
            return Arc::new(mask(layer.cout, 1, false));
        }
        if layer.cout == self.masks[1].shape()[0] {
            Arc::clone(&self.masks[1])
        } else {
            Arc::new(mask(layer.cout, layer.cin, true))
        }
    }

    /// Per-layer inference-mode normalization folded into `(scale, shift)`.
    fn folded_norm(&self, l: usize) -> Option<(Vec<f32>, Vec<f32>)> {
        let [g, b, m, v] = self.layers[l].norm?;
        let (g, b, m, v) = (self.params.get(g), self.params.get(b), self.params.get(m), self.params.get(v));
        let scale: Vec<f32> = g.data().iter().zip(v.data()).map(|(&g, &v)| g / (v + BN_EPS).sqrt()).collect();
        let shift = b.data().iter().zip(m.data()).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
        Some((scale, shift))
    }

    /// Logits for a batch of grids `(N, 1, L, h, w)` holding `±1`.
    ///
    /// In training mode batch statistics normalize each hidden layer and are
    /// returned so the caller can update running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &ivc_tensor::Bound,
        input: Var,
        train: bool,
    ) -> Result<(Var, Vec<ivc_tensor::BatchStats<f32>>)> {
        let mut x = input;
        let mut stats = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.mul_const(bound.var(layer.w), self.layer_mask(l))?;
            x = tape.conv3d_same(x, w, Some(bound.var(layer.b)))?;
            if let Some([g, b, ..]) = layer.norm {
                x = if train {
                    let (y, s) = tape.batch_norm_train(x, bound.var(g), bound.var(b), BN_EPS)?;
                    stats.push(s);
                    y
                } else {
                    let (scale, shift) = self.folded_norm(l).expect("hidden layer has norm");
                    tape.channel_affine(x, scale, &shift)?
                };
                x = tape.relu(x);
            }
        }
        Ok((x, stats))
    }

    fn update_running(&mut self, stats: &[ivc_tensor::BatchStats<f32>], momentum: f32) {
        for (layer, s) in self.layers.iter().filter(|l| l.norm.is_some()).zip(stats) {
            let [_, _, m, v] = layer.norm.unwrap();
            let blend = |old: &Tensor, new: &[f32]| {
                Tensor::from_fn(old.shape(), |i| (1.0 - momentum) * old.data()[i] + momentum * new[i])
            };
            let nm = blend(self.params.get(m), &s.mean);
            let nv = blend(self.params.get(v), &s.var);
            self.params.set(m, nm);
            self.params.set(v, nv);
        }
    }

    /// Probabilities `P(bit = 1)` for every position of `grid`, computed
    /// through the position-by-position path used for coding.
    pub fn probabilities(&self, shape: GridShape, grid: &[i8]) -> Vec<f64> {
        let mut coder = GridPredictor::new(self, shape);
        (0..shape.len())
            .map(|p| {
                let q = coder.predict(p);
                coder.set_bit(p, grid[p] > 0);
                q
            })
            .collect()
    }

    /// Ideal code length of `grid` in bits under this model.
    pub fn code_length(&self, shape: GridShape, grid: &[i8]) -> f64 {
        let probs = self.probabilities(shape, grid);
        grid.iter().zip(probs).map(|(&b, p)| -(if b > 0 { p } else { 1.0 - p }).log2()).sum()
    }

    pub(crate) fn predictor(&self, shape: GridShape) -> GridPredictor {
        GridPredictor::new(self, shape)
    }
}

/// Incremental evaluation of the masked network in scan order.
///
/// Encoder and decoder both drive this type, so the arithmetic behind every
/// probability is identical on the two sides.
pub(crate) struct GridPredictor {
    shape: GridShape,
    layers: Vec<PreparedLayer>,
    /// Layer inputs, position-major: `acts[l][p * cin + c]`. `acts[0]` holds
    /// the bits seen so far.
    acts: Vec<Vec<f32>>,
    out: Vec<f32>,
}

struct PreparedLayer {
    cin: usize,
    cout: usize,
    /// Per visible tap: linear offset and a `cin × cout` weight block.
    taps: Vec<((isize, isize, isize), Vec<f32>)>,
    bias: Vec<f32>,
    norm: Option<(Vec<f32>, Vec<f32>)>,
}

impl GridPredictor {
    fn new(model: &ContextModel, shape: GridShape) -> Self {
        let mut layers = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            let w = model.params.get(layer.w).data();
            let taps = visible_taps(l > 0)
                .into_iter()
                .map(|(dz, dy, dx)| {
                    let k = ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize;
                    let mut block = vec![0.0; layer.cin * layer.cout];
                    for co in 0..layer.cout {
                        for ci in 0..layer.cin {
                            block[ci * layer.cout + co] = w[(co * layer.cin + ci) * 27 + k];
                        }
                    }
                    ((dz, dy, dx), block)
                })
                .collect();
            layers.push(PreparedLayer {
                cin: layer.cin,
                cout: layer.cout,
                taps,
                bias: model.params.get(layer.b).data().to_vec(),
                norm: model.folded_norm(l),
            });
        }
        let acts = layers.iter().map(|l| vec![0.0; shape.len() * l.cin]).collect();
        let out = vec![0.0; model.config.channels.max(1)];
        Self { shape, layers, acts, out }
    }

    /// `P(bit = 1)` at position `p`; every position before `p` must already
    /// have been set.
    pub(crate) fn predict(&mut self, p: usize) -> f64 {
        let GridShape { l: depth, h, w } = self.shape;
        let (z, y, x) = ((p / (h * w)) as isize, ((p / w) % h) as isize, (p % w) as isize);
        let n_layers = self.layers.len();
        let mut logit = 0.0f32;
        for li in 0..n_layers {
            let layer = &self.layers[li];
            let out = &mut self.out[..layer.cout];
            out.copy_from_slice(&layer.bias);
            let input = &self.acts[li];
            for ((dz, dy, dx), block) in &layer.taps {
                let (qz, qy, qx) = (z + dz, y + dy, x + dx);
                if qz < 0 || qy < 0 || qx < 0 || qz >= depth as isize || qy >= h as isize || qx >= w as isize {
                    continue;
                }
                let q = (qz as usize * h + qy as usize) * w + qx as usize;
                let src = &input[q * layer.cin..(q + 1) * layer.cin];
                for (ci, &v) in src.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    for (o, &wv) in out.iter_mut().zip(&block[ci * layer.cout..(ci + 1) * layer.cout]) {
                        *o += v * wv;
                    }
                }
            }
            match &layer.norm {
                Some((scale, shift)) => {
                    let dst = &mut self.acts[li + 1][p * layer.cout..(p + 1) * layer.cout];
                    for (((d, &o), &s), &t) in dst.iter_mut().zip(out.iter()).zip(scale).zip(shift) {
                        *d = (o * s + t).max(0.0);
                    }
                }
                None => logit = out[0],
            }
        }
        let p1 = 1.0 / (1.0 + (-(logit as f64)).exp());
        p1.clamp(EPSILON, 1.0 - EPSILON)
    }

    pub(crate) fn set_bit(&mut self, p: usize, bit: bool) {
        self.acts[0][p] = if bit { 1.0 } else { -1.0 };
    }
}

/// Trains a context model on `grids` (all of `shape`) by minimizing the
/// binary cross-entropy of each bit given its causal neighbourhood.
///
/// Returns the model and the per-step training loss in bits per bit.
pub fn train_context_model(
    grids: &[Vec<i8>],
    shape: GridShape,
    config: ContextModelConfig,
    schedule: &Schedule,
) -> Result<(ContextModel, Vec<f64>)> {
    if grids.is_empty() {
        return Err(CodecError::invalid("no code grids to train on"));
    }
    let mut model = ContextModel::new(config, schedule.seed)?;
    let mut adam = AdamState::new(AdamConfig { lr: schedule.lr, ..AdamConfig::default() }, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut losses = Vec::with_capacity(schedule.steps);
    let mut cursor = order.len();
    for _ in 0..schedule.steps {
        let batch: Vec<usize> = (0..schedule.batch.min(grids.len()))
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();
        let loss = model.train_step(&mut adam, grids, &batch, shape)?;
        losses.push(loss);
    }
    model.calibrate(grids, shape, &mut rng)?;
    Ok((model, losses))
}

fn batch_tensors(grids: &[Vec<i8>], idx: &[usize], shape: GridShape) -> Result<(Tensor, Tensor)> {
    let dims = [idx.len(), 1, shape.l, shape.h, shape.w];
    let mut input = Vec::with_capacity(idx.len() * shape.len());
    for &i in idx {
        if grids[i].len() != shape.len() {
            return Err(CodecError::invalid(format!("grid {i} does not match shape {shape:?}")));
        }
        input.extend(grids[i].iter().map(|&b| b as f32));
    }
    let targets = input.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok((Tensor::new(&dims, input)?, Tensor::new(&dims, targets)?))
}

impl ContextModel {
    fn train_step(
        &mut self,
        adam: &mut AdamState<f32>,
        grids: &[Vec<i8>],
        batch: &[usize],
        shape: GridShape,
    ) -> Result<f64> {
        let (input, targets) = batch_tensors(grids, batch, shape)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(input);
        let (logits, stats) = self.forward(&mut tape, &bound, x, true)?;
        let loss = tape.bce_with_logits(logits, Arc::new(targets))?;
        let nats = tape.value(loss).item() as f64;
        let mut grads = tape.backward(loss)?;
        let grads = bound.grads(&mut grads);
        adam.step(&mut self.params, &grads);
        self.update_running(&stats, BN_MOMENTUM);
        Ok(nats / std::f64::consts::LN_2)
    }

    /// Resets running statistics to the average batch statistics of a pass
    /// over (a sample of) the training grids under the final weights.
    fn calibrate<R: Rng>(&mut self, grids: &[Vec<i8>], shape: GridShape, rng: &mut R) -> Result<()> {
        const PASSES: usize = 8;
        let n = grids.len().min(16);
        for pass in 0..PASSES {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..grids.len())).collect();
            let (input, _) = batch_tensors(grids, &idx, shape)?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = tape.constant(input);
            let (_, stats) = self.forward(&mut tape, &bound, x, true)?;
            self.update_running(&stats, 1.0 / (pass + 1) as f32);
        }
        Ok(())
    }
}
