//! Alpha-sequence evaluation over the unknown region: SSDA, dtSSD, MESSDdt, MSE, SAD.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Mask, Tensor};

/// Display multipliers applied to the raw metric values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScales {
    pub ssda: f64,
    pub dtssd: f64,
    pub messdt: f64,
    pub mse: f64,
    pub sad: f64,
}

pub const SCALES: MetricScales = MetricScales {
    ssda: 1e-1,
    dtssd: 1e-1,
    messdt: 1e3,
    mse: 1e3,
    sad: 1e-3,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub ur_pixels: usize,
    pub ssda: f64,
    pub mse: f64,
    pub sad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    /// Index of the later frame of the pair.
    pub frame: usize,
    pub ur_pixels: usize,
    pub dtssd: f64,
    pub messdt: Option<f64>,
}

/// Scaled metrics averaged over frames (or frame pairs) with a nonempty unknown region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scales: MetricScales,
    pub ssda: f64,
    pub dtssd: f64,
    pub messdt: Option<f64>,
    pub mse: f64,
    pub sad: f64,
    pub per_frame: Vec<FrameMetrics>,
    pub per_pair: Vec<PairMetrics>,
    pub ur_pixel_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Per-pixel displacement `(dy, dx)` from frame `t` into frame `t-1`, stored `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(pub Tensor);

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[2, h, w]))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let (h, w) = self.dims();
        let d = self.0.data();
        (d[y * w + x], d[h * w + y * w + x])
    }

    /// Nearest source pixel of `(y, x)` in the previous frame, clamped to the grid.
    pub fn nearest_source(&self, y: usize, x: usize) -> (usize, usize) {
        let (h, w) = self.dims();
        let (dy, dx) = self.at(y, x);
        let sy = (y as f64 + dy).round().clamp(0.0, (h - 1) as f64) as usize;
        let sx = (x as f64 + dx).round().clamp(0.0, (w - 1) as f64) as usize;
        (sy, sx)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates `pred` against `gt` (each `[1, H, W]` per frame) over per-frame masks.
///
/// The temporal pair `(t-1, t)` uses the mask of frame `t`. MESSDdt needs
/// `flow[t]` for every `t ≥ 1`; without flow it is omitted with a warning.
pub fn evaluate(
    pred: &[Tensor],
    gt: &[Tensor],
    ur: &[Mask],
    flow: Option<&[FlowField]>,
) -> Result<MetricsReport> {
    if pred.len() != gt.len() || pred.len() != ur.len() {
        return Err(invalid(
            "evaluate",
            format!(
                "clip lengths differ: pred {}, gt {}, masks {}",
                pred.len(),
                gt.len(),
                ur.len()
            ),
        ));
    }
    if let Some(f) = flow {
        if f.len() != pred.len() {
            return Err(invalid(
                "evaluate",
                format!("expected {} flow fields, got {}", pred.len(), f.len()),
            ));
        }
    }
    for t in 0..pred.len() {
        let (_, h, w) = gt[t].dims3()?;
        if pred[t].shape() != gt[t].shape() || ur[t].shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                left: pred[t].shape().to_vec(),
                right: gt[t].shape().to_vec(),
            });
        }
    }

    let mut warnings = Vec::new();
    let per_frame: Vec<FrameMetrics> = (0..pred.len())
        .map(|t| {
            let m = ur[t].data();
            let diffs = pred[t]
                .data()
                .iter()
                .zip(gt[t].data())
                .zip(m)
                .filter(|(_, &u)| u)
                .map(|((p, g), _)| p - g);
            let (n, sq, ab) = diffs.fold((0usize, 0.0, 0.0), |(n, sq, ab), d| {
                (n + 1, sq + d * d, ab + d.abs())
            });
            FrameMetrics {
                frame: t,
                ur_pixels: n,
                ssda: sq.sqrt() * SCALES.ssda,
                mse: if n > 0 {
                    sq / n as f64 * SCALES.mse
                } else {
                    0.0
                },
                sad: ab * SCALES.sad,
            }
        })
        .collect();
    if per_frame.iter().any(|f| f.ur_pixels == 0) {
        warnings.push("frames with an empty unknown region were skipped".to_string());
    }
    if flow.is_none() {
        warnings.push("no flow supplied; MESSDdt omitted".to_string());
    }

    let mut per_pair = Vec::with_capacity(pred.len().saturating_sub(1));
    for t in 1..pred.len() {
        let (_, _, w) = gt[t].dims3()?;
        let (p, pp, g, gp) = (
            pred[t].data(),
            pred[t - 1].data(),
            gt[t].data(),
            gt[t - 1].data(),
        );
        let mut n = 0usize;
        let mut dt = 0.0;
        let mut me = 0.0;
        for (i, &u) in ur[t].data().iter().enumerate() {
            if !u {
                continue;
            }
            n += 1;
            let d = (p[i] - pp[i]) - (g[i] - gp[i]);
            dt += d * d;
            if let Some(f) = flow {
                let (sy, sx) = f[t].nearest_source(i / w, i % w);
                let j = sy * w + sx;
                let d = (p[i] - pp[j]) - (g[i] - gp[j]);
                me += d * d;
            }
        }
        per_pair.push(PairMetrics {
            frame: t,
            ur_pixels: n,
            dtssd: dt.sqrt() * SCALES.dtssd,
            messdt: flow.map(|_| {
                if n > 0 {
                    me / n as f64 * SCALES.messdt
                } else {
                    0.0
                }
            }),
        });
    }

    let frames = || per_frame.iter().filter(|f| f.ur_pixels > 0);
    let pairs = || per_pair.iter().filter(|p| p.ur_pixels > 0);
    Ok(MetricsReport {
        scales: SCALES,
        ssda: mean(frames().map(|f| f.ssda)),
        dtssd: mean(pairs().map(|p| p.dtssd)),
        messdt: flow.map(|_| mean(pairs().filter_map(|p| p.messdt))),
        mse: mean(frames().map(|f| f.mse)),
        sad: mean(frames().map(|f| f.sad)),
        ur_pixel_counts: per_frame.iter().map(|f| f.ur_pixels).collect(),
        per_frame,
        per_pair,
        warnings,
    })
}

impl MetricsReport {
    /// Per-frame CSV: `frame,ur_pixels,ssda,mse,sad,dtssd,messdt` (temporal columns empty on frame 0).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,ur_pixels,ssda,mse,sad,dtssd,messdt\n");
        for f in &self.per_frame {
            let pair = self.per_pair.iter().find(|p| p.frame == f.frame);
            let dt = pair.map(|p| p.dtssd.to_string()).unwrap_or_default();
            let me = pair
                .and_then(|p| p.messdt)
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.frame, f.ur_pixels, f.ssda, f.mse, f.sad, dt, me
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let clip: Vec<Tensor> = (0..3)
            .map(|t| Tensor::from_fn(&[1, 4, 4], |i| ((i + t) % 5) as f64 / 4.0))
            .collect();
        let masks = vec![Mask::full(&[4, 4], true); 3];
        let flows = vec![FlowField::zeros(4, 4); 3];
        let r = evaluate(&clip, &clip, &masks, Some(&flows)).unwrap();
        assert_eq!((r.ssda, r.dtssd, r.mse, r.sad), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.messdt, Some(0.0));
        assert_eq!(r.per_frame.len(), 3);
        assert_eq!(r.per_pair.len(), 2);
    }

    #[test]
    fn missing_flow_omits_messdt() {
        let clip = vec![Tensor::zeros(&[1, 2, 2]); 2];
        let r = evaluate(&clip, &clip, &vec![Mask::full(&[2, 2], true); 2], None).unwrap();
        assert!(r.messdt.is_none());
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn empty_frames_are_skipped() {
        let gt = vec![Tensor::zeros(&[1, 2, 2]); 2];
        let pred = vec![Tensor::full(&[1, 2, 2], 0.5); 2];
        let masks = vec![Mask::full(&[2, 2], false), Mask::full(&[2, 2], true)];
        let r = evaluate(&pred, &gt, &masks, None).unwrap();
        // Only frame 1 counts: SAD = 4 * 0.5 scaled.
        assert!((r.sad - 2.0 * SCALES.sad).abs() < 1e-15);
        assert!((r.mse - 0.25 * SCALES.mse).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = vec![Tensor::zeros(&[1, 2, 2]); 2];
        let b = vec![Tensor::zeros(&[1, 2, 2]); 3];
        assert!(evaluate(&a, &b, &vec![Mask::full(&[2, 2], true); 2], None).is_err());
    }
}
