//! Model evaluation on clips with known alpha.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::losses::{affinity_target, area_downsample, AffinityTargetConfig};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{network_input, Model};
use crate::synth::SyntheticClip;
use crate::tam::downsample_trimap;
use crate::tensor::{Mask, Tensor};
use crate::trimap::{dilate_trimap, Trimap};

/// Trimaps used for evaluation: the ground-truth trimap dilated by `kernel`.
pub fn eval_trimaps(clip: &SyntheticClip, kernel: usize) -> Result<Vec<Trimap>> {
    clip.trimaps
        .iter()
        .map(|t| dilate_trimap(t, kernel))
        .collect()
}

/// Predicts `clip` with the `kernel` trimaps and scores it against ground truth.
pub fn evaluate_clip(
    model: &Model,
    clip: &SyntheticClip,
    kernel: usize,
) -> Result<(Vec<Tensor>, MetricsReport)> {
    let trimaps = eval_trimaps(clip, kernel)?;
    let pred = model.infer_clip(&clip.frames, &trimaps)?;
    let masks: Vec<Mask> = trimaps.iter().map(Trimap::unknown_mask).collect();
    let report = evaluate(&pred, &clip.alphas, &masks, Some(&clip.flows))?;
    Ok((pred, report))
}

/// Unweighted mean of per-clip metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub clips: usize,
    pub ssda: f64,
    pub dtssd: f64,
    pub messdt: f64,
    pub mse: f64,
    pub sad: f64,
}

impl MeanMetrics {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        let mut m = Self::default();
        for r in reports {
            m.clips += 1;
            m.ssda += r.ssda;
            m.dtssd += r.dtssd;
            m.messdt += r.messdt.unwrap_or(0.0);
            m.mse += r.mse;
            m.sad += r.sad;
        }
        if m.clips > 0 {
            let n = m.clips as f64;
            m.ssda /= n;
            m.dtssd /= n;
            m.messdt /= n;
            m.mse /= n;
            m.sad /= n;
        }
        m
    }
}

/// Mean BCE between the module's affinity logits and their targets over all
/// frames of `clip`, evaluated with the `kernel` trimaps. `None` when the
/// module is disabled or no unknown cell exists.
pub fn affinity_bce(
    model: &Model,
    clip: &SyntheticClip,
    kernel: usize,
    config: &AffinityTargetConfig,
) -> Result<Option<f64>> {
    if !model.config.tam.enabled() {
        return Ok(None);
    }
    let trimaps = eval_trimaps(clip, kernel)?;
    let os = model.output_stride();
    let small: Vec<Tensor> = clip
        .alphas
        .iter()
        .map(|a| area_downsample(a, os))
        .collect::<Result<_>>()?;
    let last = clip.len() as i64 - 1;
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..clip.len() {
        let lo = (c as i64 - 3).max(0) as usize;
        let hi = (c + 3).min(clip.len() - 1);
        let inputs = (lo..=hi)
            .map(|t| network_input(&clip.frames[t], &trimaps[t]))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let bound = model.store.bind_frozen(&mut g);
        let out = model.forward_window(&mut g, &bound, &inputs, &trimaps[lo..=hi], &[c - lo])?;
        let mask = downsample_trimap(&trimaps[c], os)?;
        for ol in &out[0].tam {
            let n = (c as i64 + ol.offset as i64).clamp(0, last) as usize;
            // Neighbors outside the local window are clamped inside it as well.
            let n = n.clamp(lo, hi);
            let target = affinity_target(
                &small[c],
                &small[n],
                mask.centers(),
                model.config.tam.window,
                config,
            )?;
            if ol.valid.count() == 0 {
                continue;
            }
            let bce = g.bce_with_logits(ol.logits, &target, &ol.valid)?;
            sum += g.value(bce).item();
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}
