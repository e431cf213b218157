//! Key-frame (I-frame) codec.

use std::sync::Arc;

use ivc_tensor::{AdamState, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::code::BinaryCode;
use crate::progressive::{Conditioning, CoreConfig, Fusion, ProgressiveCore};
use crate::{CodecError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCodecConfig {
    pub bits: usize,
    pub k_max: usize,
    pub enc_widths: [usize; 4],
    pub dec_widths: [usize; 4],
}

impl ImageCodecConfig {
    /// Full-size layout: `L = 32`, encoder cells 64/128/128/128.
    pub fn reference() -> Self {
        Self { bits: 32, k_max: 16, enc_widths: [64, 128, 128, 128], dec_widths: [128, 128, 128, 64] }
    }

    /// Narrow layout for desk-scale experiments and tests.
    pub fn toy() -> Self {
        Self { bits: 32, k_max: 16, enc_widths: [16, 24, 32, 32], dec_widths: [32, 32, 24, 16] }
    }

    /// Bits per pixel contributed by each iteration.
    pub fn bpp_per_iteration(&self) -> f64 {
        self.bits as f64 / 256.0
    }

    fn core(&self) -> CoreConfig {
        CoreConfig {
            bits: self.bits,
            input_channels: 3,
            enc_widths: self.enc_widths,
            dec_widths: self.dec_widths,
            enc_fusion: [0; 4],
            dec_fusion: [0; 4],
        }
    }
}

pub struct ImageCodec {
    config: ImageCodecConfig,
    params: ParamStore,
    core: ProgressiveCore,
}

impl ImageCodec {
    pub fn new(config: ImageCodecConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let core = ProgressiveCore::new(&mut params, "", config.core(), &mut rng);
        Self { config, params, core }
    }

    pub fn config(&self) -> &ImageCodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.config.k_max {
            return Err(CodecError::invalid(format!("iteration count {k} outside 1..={}", self.config.k_max)));
        }
        Ok(())
    }

    /// Encodes `(3, H, W)` with `k` iterations; returns the code and the
    /// decoder-side reconstruction.
    pub fn encode_image(&self, image: &Tensor, k: usize) -> Result<(BinaryCode, Tensor)> {
        self.check_k(k)?;
        self.core.encode(&self.params, image, &Conditioning::default(), k)
    }

    pub fn decode_image(&self, code: &BinaryCode) -> Result<Tensor> {
        self.check_k(code.iterations())?;
        self.core.decode(&self.params, code, &Conditioning::default())
    }

    /// Reconstruction after each prefix of the code.
    pub fn decode_progressive(&self, code: &BinaryCode) -> Result<Vec<Tensor>> {
        self.check_k(code.iterations())?;
        self.core.decode_progressive(&self.params, code, &Conditioning::default())
    }

    /// One optimizer step on a batch `(N, 3, H, W)`; returns the loss
    /// `Σ_k mean |r_k|` and its per-iteration terms.
    pub fn train_step<R: Rng>(
        &mut self,
        adam: &mut AdamState<f32>,
        batch: Arc<Tensor>,
        k: usize,
        rng: &mut R,
    ) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let x = tape.leaf(batch, false);
        let (loss, per) = self.core.training_loss(&mut tape, &p, x, None, None, &Fusion::default(), k, rng)?;
        let value = tape.value(loss).item() as f64;
        let mut grads = tape.backward(loss)?;
        adam.step(&mut self.params, &p.grads(&mut grads));
        Ok((value, per))
    }

    /// Loss of a batch without updating weights.
    pub fn loss<R: Rng>(&self, batch: Arc<Tensor>, k: usize, rng: &mut R) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.leaf(batch, false);
        let (loss, per) = self.core.training_loss(&mut tape, &p, x, None, None, &Fusion::default(), k, rng)?;
        Ok((tape.value(loss).item() as f64, per))
    }
}
