//! The full set of weights a stream is coded with, stored as a checkpoint
//! directory: `config.json` plus one array file per model.

use std::fs;
use std::path::Path;

use ivc_tensor::{read_arrays, ParamStore};
use serde::{Deserialize, Serialize};

use crate::entropy::{ContextModel, ContextModelConfig};
use crate::hierarchy::Role;
use crate::image_codec::{ImageCodec, ImageCodecConfig};
use crate::interp::{InterpCodec, InterpCodecConfig, InterpModelSpec};
use crate::{CodecError, Result};

const CONFIG_FILE: &str = "config.json";
const MODEL_FILES: [&str; 4] = ["image.ckpt", "m66.ckpt", "m33.ckpt", "m12.ckpt"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSetConfig {
    pub image: ImageCodecConfig,
    /// Interpolation models for slots 1..=3: M6,6, M3,3, M1,2.
    pub interp: [InterpCodecConfig; 3],
    /// Per-slot context models; `None` until one is trained.
    pub context: [Option<ContextModelConfig>; 4],
    /// Whether the encoder transmits block motion. Without it every field is
    /// zero and the interpolation models see unwarped context.
    pub motion: bool,
    pub seed: u64,
}

impl ModelSetConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            image: ImageCodecConfig::toy(),
            interp: [
                InterpCodecConfig::toy(InterpModelSpec::m66()),
                InterpCodecConfig::toy(InterpModelSpec::m33()),
                InterpCodecConfig::toy(InterpModelSpec::m12()),
            ],
            context: [None; 4],
            motion: true,
            seed,
        }
    }

    pub fn reference(seed: u64) -> Self {
        Self {
            image: ImageCodecConfig::reference(),
            interp: [
                InterpCodecConfig::reference(InterpModelSpec::m66()),
                InterpCodecConfig::reference(InterpModelSpec::m33()),
                InterpCodecConfig::reference(InterpModelSpec::m12()),
            ],
            context: [None; 4],
            motion: true,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(seed)),
            "reference" => Ok(Self::reference(seed)),
            _ => Err(CodecError::invalid(format!("unknown preset {name:?}; use toy or reference"))),
        }
    }
}

pub struct ModelSet {
    config: ModelSetConfig,
    image: ImageCodec,
    interp: Vec<InterpCodec>,
    context: [Option<ContextModel>; 4],
}

impl ModelSet {
    /// Freshly initialized weights.
    pub fn new(config: ModelSetConfig) -> Result<Self> {
        let s = config.seed;
        let image = ImageCodec::new(config.image, s);
        let interp = config
            .interp
            .iter()
            .enumerate()
            .map(|(i, c)| InterpCodec::new(c.clone(), s.wrapping_add(1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut context: [Option<ContextModel>; 4] = Default::default();
        for (slot, c) in config.context.iter().enumerate() {
            if let Some(c) = c {
                context[slot] = Some(ContextModel::new(*c, s.wrapping_add(10 + slot as u64))?);
            }
        }
        Ok(Self { config, image, interp, context })
    }

    pub fn config(&self) -> &ModelSetConfig {
        &self.config
    }

    pub fn image(&self) -> &ImageCodec {
        &self.image
    }

    pub fn image_mut(&mut self) -> &mut ImageCodec {
        &mut self.image
    }

    /// Interpolation model serving `role`.
    pub fn interp(&self, role: Role) -> Result<&InterpCodec> {
        match role.slot() {
            0 => Err(CodecError::invalid("I-frames have no interpolation model")),
            s => Ok(&self.interp[s - 1]),
        }
    }

    pub fn interp_mut(&mut self, role: Role) -> Result<&mut InterpCodec> {
        match role.slot() {
            0 => Err(CodecError::invalid("I-frames have no interpolation model")),
            s => Ok(&mut self.interp[s - 1]),
        }
    }

    pub fn context(&self, slot: usize) -> Option<&ContextModel> {
        self.context[slot].as_ref()
    }

    pub fn has_all_context_models(&self) -> bool {
        self.context.iter().all(Option::is_some)
    }

    pub fn set_context(&mut self, slot: usize, model: ContextModel) {
        self.config.context[slot] = Some(model.config());
        self.context[slot] = Some(model);
    }

    pub fn set_motion(&mut self, motion: bool) {
        self.config.motion = motion;
    }

    /// Bits per grid location and iteration limit per slot.
    pub fn slot_limits(&self) -> [(usize, usize); 4] {
        let i = &self.config.image;
        let mut out = [(i.bits, i.k_max); 4];
        for (s, c) in self.config.interp.iter().enumerate() {
            out[s + 1] = (c.spec.bits, c.k_max);
        }
        out
    }

    fn stores(&self) -> Vec<(String, &ParamStore)> {
        let mut out = vec![(MODEL_FILES[0].to_string(), self.image.params())];
        for (i, m) in self.interp.iter().enumerate() {
            out.push((MODEL_FILES[i + 1].to_string(), m.params()));
        }
        for (slot, c) in self.context.iter().enumerate() {
            if let Some(c) = c {
                out.push((format!("ctx{slot}.ckpt"), c.params()));
            }
        }
        out
    }

    /// Every checkpoint file, in digest order.
    pub fn to_files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let config = serde_json::to_vec_pretty(&self.config).map_err(|e| CodecError::invalid(e.to_string()))?;
        let mut files = vec![(CONFIG_FILE.to_string(), config)];
        for (name, ps) in self.stores() {
            let mut bytes = Vec::new();
            ps.write_checkpoint(&mut bytes)?;
            files.push((name, bytes));
        }
        Ok(files)
    }

    /// CRC32 over every checkpoint file's name and bytes.
    pub fn digest(&self) -> Result<u32> {
        let mut h = crc32fast::Hasher::new();
        for (name, bytes) in self.to_files()? {
            h.update(name.as_bytes());
            h.update(&(bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in self.to_files()? {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelSetConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)
            .map_err(|e| CodecError::invalid(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
        let mut set = Self::new(config)?;
        let names: Vec<String> = set.stores().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let arrays = read_arrays(fs::File::open(dir.join(&name))?)?;
            set.store_mut(&name).load_from(arrays)?;
        }
        Ok(set)
    }

    fn store_mut(&mut self, name: &str) -> &mut ParamStore {
        match name {
            "image.ckpt" => self.image.params_mut(),
            "m66.ckpt" => self.interp[0].params_mut(),
            "m33.ckpt" => self.interp[1].params_mut(),
            "m12.ckpt" => self.interp[2].params_mut(),
            _ => {
                let slot: usize = name[3..4].parse().expect("ctx file names carry their slot");
                self.context[slot].as_mut().expect("listed context models exist").params_mut()
            }
        }
    }
}
