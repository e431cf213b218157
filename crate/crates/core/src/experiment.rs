//! Rate-distortion sweeps and planner evaluation over sets of clips.

use std::thread;

use ivc_tensor::Tensor;

use crate::hierarchy::{beam_search_rates, BeamResult, RateCombo};
use crate::metrics::{video_quality, MetricsRecord};
use crate::models::ModelSet;
use crate::train::ClipSource;
use crate::video::{encode_video, EncodeOptions};
use crate::Result;

/// The final rate combinations listed for the reference models.
pub const TABLE_COMBOS: [[usize; 4]; 6] =
    [[5, 3, 2, 1], [7, 3, 2, 2], [10, 4, 2, 2], [10, 10, 2, 2], [10, 10, 6, 2], [10, 10, 10, 2]];

/// Encodes one video and scores the encoder-side reconstruction, which the
/// decoder reproduces exactly.
pub fn evaluate_video(models: &ModelSet, frames: &[Tensor], opts: &EncodeOptions) -> Result<MetricsRecord> {
    let enc = encode_video(models, frames, opts)?;
    let (psnr, ms_ssim) = video_quality(frames, &enc.frames)?;
    Ok(MetricsRecord {
        psnr,
        ms_ssim,
        bpp: enc.stats.bpp(),
        bpp_without_motion: enc.stats.code_bpp(),
        frames: frames.len(),
    })
}

/// Per-video records averaged over videos (not frames).
pub fn mean_record(records: &[MetricsRecord]) -> MetricsRecord {
    let n = records.len().max(1) as f64;
    let sum = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    MetricsRecord {
        psnr: sum(|r| r.psnr),
        ms_ssim: sum(|r| r.ms_ssim),
        bpp: sum(|r| r.bpp),
        bpp_without_motion: sum(|r| r.bpp_without_motion),
        frames: records.iter().map(|r| r.frames).sum(),
    }
}

/// Evaluates every clip with `threads` workers; results are in clip order
/// whatever the thread count.
pub fn evaluate_clips(
    models: &ModelSet,
    clips: &dyn ClipSource,
    opts: &EncodeOptions,
    threads: usize,
) -> Result<Vec<MetricsRecord>> {
    let n = clips.len();
    let threads = threads.clamp(1, n.max(1));
    let mut slots: Vec<Option<Result<MetricsRecord>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let chunk = n.div_ceil(threads).max(1);
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    let i = w * chunk + j;
                    *slot = Some(clips.clip(i).and_then(|c| evaluate_video(models, &c, opts)));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every clip evaluated")).collect()
}

pub fn evaluate_combo(
    models: &ModelSet,
    clips: &dyn ClipSource,
    gop: usize,
    combo: RateCombo,
    entropy: bool,
    threads: usize,
) -> Result<MetricsRecord> {
    let opts = EncodeOptions { gop, combo, entropy };
    Ok(mean_record(&evaluate_clips(models, clips, &opts, threads)?))
}

/// Beam search where each combo is scored by encoding the validation clips.
/// Rate includes motion bits; quality is mean MS-SSIM over all frames.
pub fn plan_rates(
    models: &ModelSet,
    clips: &dyn ClipSource,
    options: &[Vec<usize>; 4],
    entropy: bool,
    threads: usize,
) -> Result<BeamResult> {
    if clips.is_empty() {
        return Err(crate::CodecError::invalid("the planner needs at least one validation clip"));
    }
    let mut eval = |combo: RateCombo| -> Result<(f64, f64)> {
        let r = evaluate_combo(models, clips, 12, combo, entropy, threads)?;
        Ok((r.bpp, r.ms_ssim))
    };
    beam_search_rates(&mut eval, options)
}
