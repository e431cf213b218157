//! GOP structure, frame ordering and bitrate planning.
//!
//! A GOP of `n = 12` frames is closed by I-frames at 0 and 12 and filled in
//! three levels: frame 6 from (0, 12), frames 3 and 9 from their enclosing
//! pair, then every remaining frame from its nearest references one and two
//! frames away.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::interp::InterpModelSpec;
use crate::{CodecError, Result};

/// GOP sizes with a defined schedule.
pub const SUPPORTED_GOPS: [usize; 2] = [1, 12];

/// Model slot of a frame. `M21` is served by the `M12` weights with the
/// references exchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    I,
    M66,
    M33,
    M12,
    M21,
}

impl Role {
    /// Index into a [`RateCombo`] and the model table.
    pub fn slot(self) -> usize {
        match self {
            Role::I => 0,
            Role::M66 => 1,
            Role::M33 => 2,
            Role::M12 | Role::M21 => 3,
        }
    }

    /// The orientation this frame is coded with.
    pub fn spec(self) -> Option<InterpModelSpec> {
        match self {
            Role::I => None,
            Role::M66 => Some(InterpModelSpec::m66()),
            Role::M33 => Some(InterpModelSpec::m33()),
            Role::M12 => Some(InterpModelSpec::m12()),
            Role::M21 => Some(InterpModelSpec::m12().flip()),
        }
    }

    /// Code bits per pixel per iteration.
    pub fn bpp_per_iteration(self) -> f64 {
        match self {
            Role::I => 32.0 / 256.0,
            Role::M66 | Role::M33 => 16.0 / 256.0,
            Role::M12 | Role::M21 => 8.0 / 256.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub role: Role,
    /// `(past, future)` frame indices within the GOP.
    pub refs: Option<(usize, usize)>,
    pub level: usize,
}

/// Roles and references for frames `0..=n` of one GOP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GopPlan {
    n: usize,
    frames: Vec<PlanEntry>,
}

fn entry(role: Role, refs: (usize, usize), level: usize) -> PlanEntry {
    PlanEntry { role, refs: Some(refs), level }
}

pub fn build_gop_plan(n: usize) -> Result<GopPlan> {
    let key = PlanEntry { role: Role::I, refs: None, level: 0 };
    let frames = match n {
        1 => vec![key; 2],
        12 => {
            let mut f = vec![key; 13];
            f[6] = entry(Role::M66, (0, 12), 1);
            f[3] = entry(Role::M33, (0, 6), 2);
            f[9] = entry(Role::M33, (6, 12), 2);
            for base in [0, 3, 6, 9] {
                f[base + 1] = entry(Role::M12, (base, base + 3), 3);
                f[base + 2] = entry(Role::M21, (base, base + 3), 3);
            }
            f
        }
        _ => return Err(CodecError::Unsupported(format!("GOP size {n}; supported sizes are {SUPPORTED_GOPS:?}"))),
    };
    Ok(GopPlan { n, frames })
}

impl GopPlan {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Entries for frames `0..=n`; both boundaries are I-frames.
    pub fn frames(&self) -> &[PlanEntry] {
        &self.frames
    }

    pub fn entry(&self, index: usize) -> &PlanEntry {
        &self.frames[index]
    }

    pub fn depth(&self) -> usize {
        self.frames.iter().map(|e| e.level).max().unwrap_or(0)
    }

    /// Non-boundary frames in coding order: by level, then by index.
    pub fn interior_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (1..self.n).collect();
        order.sort_by_key(|&i| (self.frames[i].level, i));
        order
    }

    /// Number of frames per model slot in one GOP, not counting the
    /// shared opening I-frame.
    pub fn slot_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for e in &self.frames[1..] {
            counts[e.role.slot()] += 1;
        }
        counts
    }
}

/// Iteration counts `(K0, K1, K2, K3)` for the I, M6,6, M3,3 and
/// M1,2 / M2,1 models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RateCombo(pub [usize; 4]);

impl RateCombo {
    pub fn get(&self, role: Role) -> usize {
        self.0[role.slot()]
    }

    pub fn validate(&self, k_max: [usize; 4]) -> Result<()> {
        for (slot, (&k, &max)) in self.0.iter().zip(&k_max).enumerate() {
            if k == 0 || k > max {
                return Err(CodecError::invalid(format!("K{slot} = {k} outside 1..={max}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RateCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a},{b},{c},{d}")
    }
}

impl FromStr for RateCombo {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CodecError::invalid(format!("combo {s:?} is not four comma-separated integers")))?;
        let k: [usize; 4] =
            parts.try_into().map_err(|_| CodecError::invalid(format!("combo {s:?} needs exactly four values")))?;
        Ok(Self(k))
    }
}

/// Code bits per pixel of a 12-frame GOP at `combo`, one I-frame charged
/// per GOP, plus `motion_bpp`.
pub fn average_bitrate(combo: RateCombo, motion_bpp: f64) -> f64 {
    let plan = build_gop_plan(12).expect("n = 12 is supported");
    let roles = [Role::I, Role::M66, Role::M33, Role::M12];
    let counts = plan.slot_counts();
    let bits: f64 = roles.iter().map(|&r| counts[r.slot()] as f64 * combo.get(r) as f64 * r.bpp_per_iteration()).sum();
    bits / plan.n() as f64 + motion_bpp
}

// ---- planner ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub combo: RateCombo,
    pub bpp: f64,
    pub ms_ssim: f64,
}

impl EnvelopePoint {
    /// At most the rate and at least the quality, strictly better in one.
    pub fn dominates(&self, other: &Self) -> bool {
        self.bpp <= other.bpp && self.ms_ssim >= other.ms_ssim && (self.bpp < other.bpp || self.ms_ssim > other.ms_ssim)
    }
}

/// The non-dominated points, ordered by rate then combo.
pub fn pareto_envelope(points: &[EnvelopePoint]) -> Vec<EnvelopePoint> {
    let mut out: Vec<EnvelopePoint> =
        points.iter().filter(|p| !points.iter().any(|q| q.dominates(p))).copied().collect();
    out.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(a.combo.cmp(&b.combo)));
    out.dedup_by(|a, b| a.combo == b.combo);
    out
}

/// Measures a combo on validation data.
pub trait Evaluator {
    /// Returns `(bpp, ms_ssim)`.
    fn evaluate(&mut self, combo: RateCombo) -> Result<(f64, f64)>;
}

impl<F: FnMut(RateCombo) -> Result<(f64, f64)>> Evaluator for F {
    fn evaluate(&mut self, combo: RateCombo) -> Result<(f64, f64)> {
        self(combo)
    }
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub envelope: Vec<EnvelopePoint>,
    /// Distinct combos evaluated.
    pub evaluations: usize,
}

/// Level-by-level beam search over `options[slot]`, starting at the I-frame
/// model. Slots not chosen yet are held at their smallest option; after each
/// level only the envelope survives.
pub fn beam_search_rates<E: Evaluator>(evaluator: &mut E, options: &[Vec<usize>; 4]) -> Result<BeamResult> {
    if options.iter().any(|o| o.is_empty()) {
        return Err(CodecError::invalid("every level needs at least one rate option"));
    }
    let floor: [usize; 4] = std::array::from_fn(|s| *options[s].iter().min().expect("non-empty"));
    let mut cache: HashMap<RateCombo, (f64, f64)> = HashMap::new();
    let mut measure = |combo: RateCombo| -> Result<EnvelopePoint> {
        let (bpp, ms_ssim) = match cache.get(&combo) {
            Some(&v) => v,
            None => {
                let v = evaluator.evaluate(combo)?;
                cache.insert(combo, v);
                v
            }
        };
        Ok(EnvelopePoint { combo, bpp, ms_ssim })
    };
    let mut beam = vec![RateCombo(floor)];
    for slot in 0..4 {
        let mut candidates = Vec::new();
        for base in &beam {
            for &k in &options[slot] {
                let mut c = *base;
                c.0[slot] = k;
                if !candidates.iter().any(|p: &EnvelopePoint| p.combo == c) {
                    candidates.push(measure(c)?);
                }
            }
        }
        let env = pareto_envelope(&candidates);
        beam = env.iter().map(|p| p.combo).collect();
        if slot == 3 {
            return Ok(BeamResult { envelope: env, evaluations: cache.len() });
        }
    }
    unreachable!("the loop returns at the last level")
}

/// Tab-separated report, one envelope point per row.
pub fn write_plan_tsv<W: Write>(out: &mut W, points: &[EnvelopePoint]) -> std::io::Result<()> {
    writeln!(out, "K0\tK1\tK2\tK3\tbpp\tms_ssim")?;
    for p in points {
        let [a, b, c, d] = p.combo.0;
        writeln!(out, "{a}\t{b}\t{c}\t{d}\t{:.6}\t{:.6}", p.bpp, p.ms_ssim)?;
    }
    Ok(())
}

/// Size of one binary planner record: four `u32` iteration counts, then
/// `f64` bpp and `f64` MS-SSIM, little-endian.
pub const PLAN_RECORD_LEN: usize = 32;

pub fn plan_to_bytes(points: &[EnvelopePoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * PLAN_RECORD_LEN);
    for p in points {
        for k in p.combo.0 {
            out.extend_from_slice(&(k as u32).to_le_bytes());
        }
        out.extend_from_slice(&p.bpp.to_le_bytes());
        out.extend_from_slice(&p.ms_ssim.to_le_bytes());
    }
    out
}

pub fn plan_from_bytes(bytes: &[u8]) -> Result<Vec<EnvelopePoint>> {
    if !bytes.len().is_multiple_of(PLAN_RECORD_LEN) {
        return Err(CodecError::Truncated("planner records"));
    }
    Ok(bytes
        .chunks_exact(PLAN_RECORD_LEN)
        .map(|r| {
            let u = |i: usize| u32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap()) as usize;
            let f = |o: usize| f64::from_le_bytes(r[o..o + 8].try_into().unwrap());
            EnvelopePoint { combo: RateCombo([u(0), u(1), u(2), u(3)]), bpp: f(16), ms_ssim: f(24) }
        })
        .collect())
}
