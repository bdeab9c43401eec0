//! Training objective: image matting, temporal coherence and target affinity terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_im: f64,
    pub w_tg: f64,
    pub w_af: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_im: 0.1,
            w_tg: 0.5,
            w_af: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_im", self.w_im),
            ("w_tg", self.w_tg),
            ("w_af", self.w_af),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `w_im·L_im + w_tg·L_tc + w_af·L_af` on plain numbers.
    pub fn combine(&self, l_im: f64, l_tc: f64, l_af: f64) -> f64 {
        self.w_im * l_im + self.w_tg * l_tc + self.w_af * l_af
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityTargetConfig {
    pub theta: f64,
    pub smoothing: f64,
}

impl Default for AffinityTargetConfig {
    fn default() -> Self {
        Self {
            theta: 0.3,
            smoothing: 0.2,
        }
    }
}

impl AffinityTargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "smoothing must lie in [0, 0.5), got {}",
                self.smoothing
            )));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!(
                "theta must lie in (0, 1], got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLossVariant {
    /// L1 alpha error.
    #[default]
    AlphaOnly,
    /// L1 alpha + L1 alpha gradient + L1 composition error.
    DimStyle,
    /// L1 alpha + 3-level Laplacian pyramid L1.
    WithLaplacian,
}

/// A scalar loss node; `empty` flags that its region had no pixels (value 0).
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    pub empty: bool,
}

impl LossValue {
    fn zero(g: &mut Graph) -> Self {
        Self {
            var: g.constant(Tensor::scalar(0.0)),
            empty: true,
        }
    }
}

/// Ground-truth side of the image matting term.
#[derive(Clone, Copy, Debug)]
pub struct MattingTarget<'a> {
    /// `[1, H, W]`
    pub alpha: &'a Tensor,
    /// `[3, H, W]` composite frame
    pub image: &'a Tensor,
    pub fg: &'a Tensor,
    pub bg: &'a Tensor,
    /// `[H, W]` unknown region
    pub ur: &'a Mask,
}

/// `Σ_UR |x| / |UR|` for a `[C, H, W]` var and an `[H, W]` mask applied per channel.
fn masked_l1(g: &mut Graph, diff: Var, mask: &Mask) -> Result<Var> {
    let (c, h, w) = g.value(diff).dims3()?;
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "masked_l1",
            left: g.shape(diff).to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let plane = mask.to_tensor();
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(plane.data());
    }
    let weight = g.constant(Tensor::new(vec![c, h, w], data)?);
    let a = g.abs(diff)?;
    let masked = g.mul(a, weight)?;
    let s = g.sum(masked)?;
    g.scale(s, 1.0 / (c * mask.count()) as f64)
}

/// Any-pooling of a mask by 2 (dims must be even).
fn pool_mask(mask: &Mask) -> Mask {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (oh, ow) = (h / 2, w / 2);
    let d = mask.data();
    let data = (0..oh * ow)
        .map(|i| {
            let (y, x) = (2 * (i / ow), 2 * (i % ow));
            d[y * w + x] || d[y * w + x + 1] || d[(y + 1) * w + x] || d[(y + 1) * w + x + 1]
        })
        .collect();
    Mask::new(vec![oh, ow], data).expect("dims")
}

/// Laplacian pyramid of a `[1, H, W]` var: `L_k = G_k - up(G_{k+1})`, last level `G_2`.
pub(crate) fn laplacian_pyramid(g: &mut Graph, x: Var) -> Result<[Var; 3]> {
    let g1 = g.avg_pool2(x)?;
    let g2 = g.avg_pool2(g1)?;
    let u1 = g.upsample2x(g1)?;
    let u2 = g.upsample2x(g2)?;
    let l0 = g.sub(x, u1)?;
    let l1 = g.sub(g1, u2)?;
    Ok([l0, l1, g2])
}

/// Single-frame matting loss restricted to the unknown region.
pub fn image_matting_loss(
    g: &mut Graph,
    pred: Var,
    target: &MattingTarget<'_>,
    variant: ImageLossVariant,
) -> Result<LossValue> {
    let shape = g.shape(pred).to_vec();
    if target.alpha.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "image_matting_loss",
            left: shape,
            right: target.alpha.shape().to_vec(),
        });
    }
    if target.ur.count() == 0 {
        return Ok(LossValue::zero(g));
    }
    let gt = g.constant(target.alpha.clone());
    let diff = g.sub(pred, gt)?;
    let mut terms = vec![masked_l1(g, diff, target.ur)?];
    match variant {
        ImageLossVariant::AlphaOnly => {}
        ImageLossVariant::DimStyle => {
            for along_y in [false, true] {
                let (dp, dg) = if along_y {
                    (g.diff_y(pred)?, g.diff_y(gt)?)
                } else {
                    (g.diff_x(pred)?, g.diff_x(gt)?)
                };
                let d = g.sub(dp, dg)?;
                terms.push(masked_l1(g, d, target.ur)?);
            }
            // C - (B + α(F - B)) per channel.
            let (_, h, w) = target.image.dims3()?;
            let fb: Vec<f64> = target
                .fg
                .data()
                .iter()
                .zip(target.bg.data())
                .map(|(f, b)| f - b)
                .collect();
            let fb = g.constant(Tensor::new(vec![3, h, w], fb)?);
            let residual = g.constant(Tensor::new(
                vec![3, h, w],
                target
                    .image
                    .data()
                    .iter()
                    .zip(target.bg.data())
                    .map(|(c, b)| c - b)
                    .collect(),
            )?);
            let a3 = g.concat(&[pred, pred, pred])?;
            let comp = g.mul(a3, fb)?;
            let d = g.sub(residual, comp)?;
            terms.push(masked_l1(g, d, target.ur)?);
        }
        ImageLossVariant::WithLaplacian => {
            let lp = laplacian_pyramid(g, pred)?;
            let lg = laplacian_pyramid(g, gt)?;
            let mut mask = target.ur.clone();
            for level in 0..3 {
                if level > 0 {
                    mask = pool_mask(&mask);
                }
                let d = g.sub(lp[level], lg[level])?;
                terms.push(masked_l1(g, d, &mask)?);
            }
        }
    }
    Ok(LossValue {
        var: g.add_all(&terms)?,
        empty: false,
    })
}

/// Mean over unknown pixels of all pairs of `|(p_prev - p_cur) - (g_prev - g_cur)|`.
///
/// `masks[k]` selects the pixels of pair `k`.
pub fn temporal_coherence_loss(
    g: &mut Graph,
    pred_pairs: &[(Var, Var)],
    gt_pairs: &[(&Tensor, &Tensor)],
    masks: &[&Mask],
) -> Result<LossValue> {
    if pred_pairs.len() != gt_pairs.len() || pred_pairs.len() != masks.len() {
        return Err(invalid(
            "temporal_coherence_loss",
            "pairs, ground truth and masks must align",
        ));
    }
    let total: usize = masks.iter().map(|m| m.count()).sum();
    if total == 0 {
        return Ok(LossValue::zero(g));
    }
    let mut sums = Vec::with_capacity(pred_pairs.len());
    for ((&(prev, cur), &(gprev, gcur)), mask) in pred_pairs.iter().zip(gt_pairs).zip(masks) {
        let dp = g.sub(prev, cur)?;
        let gt_delta: Vec<f64> = gprev
            .data()
            .iter()
            .zip(gcur.data())
            .map(|(a, b)| a - b)
            .collect();
        let gd = g.constant(Tensor::new(gprev.shape().to_vec(), gt_delta)?);
        let d = g.sub(dp, gd)?;
        let weight = g.constant(mask.to_tensor().reshape(g.shape(d).to_vec())?);
        let a = g.abs(d)?;
        let m = g.mul(a, weight)?;
        sums.push(g.sum(m)?);
    }
    let s = g.add_all(&sums)?;
    Ok(LossValue {
        var: g.scale(s, 1.0 / total as f64)?,
        empty: false,
    })
}

/// Area-average of a `[1, H, W]` alpha over `os x os` blocks (edge-replicated).
pub fn area_downsample(alpha: &Tensor, os: usize) -> Result<Tensor> {
    let (c, h, w) = alpha.dims3()?;
    if c != 1 || os == 0 {
        return Err(invalid(
            "area_downsample",
            format!("expected [1,H,W] and os > 0, got {:?}", alpha.shape()),
        ));
    }
    let (fh, fw) = (h.div_ceil(os), w.div_ceil(os));
    let d = alpha.data();
    let mut out = Vec::with_capacity(fh * fw);
    for cy in 0..fh {
        for cx in 0..fw {
            let mut acc = 0.0;
            for dy in 0..os {
                for dx in 0..os {
                    acc += d[(cy * os + dy).min(h - 1) * w + (cx * os + dx).min(w - 1)];
                }
            }
            out.push(acc / (os * os) as f64);
        }
    }
    Tensor::new(vec![1, fh, fw], out)
}

/// Target affinities `[M, W²]`: `1 - s` where `|α_c(i) - α_f(j)| < θ`, else 0.
///
/// Both alphas are `[1, h, w]` at feature resolution; out-of-grid slots are 0.
pub fn affinity_target(
    center_alpha: &Tensor,
    neighbor_alpha: &Tensor,
    centers: &[(usize, usize)],
    window: usize,
    config: &AffinityTargetConfig,
) -> Result<Tensor> {
    if center_alpha.shape() != neighbor_alpha.shape() {
        return Err(Error::ShapeMismatch {
            op: "affinity_target",
            left: center_alpha.shape().to_vec(),
            right: neighbor_alpha.shape().to_vec(),
        });
    }
    if window.is_multiple_of(2) {
        return Err(invalid(
            "affinity_target",
            format!("window must be odd, got {window}"),
        ));
    }
    let (_, h, w) = center_alpha.dims3()?;
    let r = (window / 2) as isize;
    let (ca, na) = (center_alpha.data(), neighbor_alpha.data());
    let mut out = Vec::with_capacity(centers.len() * window * window);
    for &(cy, cx) in centers {
        if cy >= h || cx >= w {
            return Err(invalid(
                "affinity_target",
                format!("center ({cy}, {cx}) outside {h}x{w}"),
            ));
        }
        let ac = ca[cy * w + cx];
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                let inside = y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                let t = if inside && (ac - na[y as usize * w + x as usize]).abs() < config.theta {
                    1.0 - config.smoothing
                } else {
                    0.0
                };
                out.push(t);
            }
        }
    }
    Tensor::new(vec![centers.len(), window * window], out)
}

/// Uniform average over offsets of the per-offset mean BCE on valid entries.
///
/// With two offsets this is `½(L^{t-1} + L^{t+1})`. Offsets without valid
/// entries are skipped; if none remain the loss is 0 and flagged empty.
pub fn affinity_loss(
    g: &mut Graph,
    logits: &[Var],
    targets: &[Tensor],
    valid: &[Mask],
) -> Result<LossValue> {
    if logits.len() != targets.len() || logits.len() != valid.len() {
        return Err(invalid(
            "affinity_loss",
            "logits, targets and masks must align",
        ));
    }
    let mut terms = Vec::new();
    for ((&l, t), v) in logits.iter().zip(targets).zip(valid) {
        if v.count() > 0 {
            terms.push(g.bce_with_logits(l, t, v)?);
        }
    }
    if terms.is_empty() {
        return Ok(LossValue::zero(g));
    }
    let n = terms.len();
    let s = g.add_all(&terms)?;
    Ok(LossValue {
        var: g.scale(s, 1.0 / n as f64)?,
        empty: false,
    })
}

/// `w_im·L_im + w_tg·L_tc + w_af·L_af`.
pub fn total_loss(
    g: &mut Graph,
    l_im: Var,
    l_tc: Var,
    l_af: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let a = g.scale(l_im, weights.w_im)?;
    let b = g.scale(l_tc, weights.w_tg)?;
    let c = g.scale(l_af, weights.w_af)?;
    g.add_all(&[a, b, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_constants() {
        let w = LossWeights::default();
        assert_eq!((w.w_im, w.w_tg, w.w_af), (0.1, 0.5, 0.25));
        let a = AffinityTargetConfig::default();
        assert_eq!((a.theta, a.smoothing), (0.3, 0.2));
    }

    #[test]
    fn total_loss_hand_evaluation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(4.0));
        let t = total_loss(&mut g, a, b, c, &LossWeights::default()).unwrap();
        assert!((g.value(t).item() - 2.1).abs() < 1e-12);
        assert_eq!(LossWeights::default().combine(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn affinity_target_thresholds() {
        let cfg = AffinityTargetConfig::default();
        let run = |a: f64, b: f64| {
            let c = Tensor::full(&[1, 1, 1], a);
            let n = Tensor::full(&[1, 1, 1], b);
            // Window 3 on a 1x1 grid: only the middle slot is in bounds.
            affinity_target(&c, &n, &[(0, 0)], 3, &cfg).unwrap().data()[4]
        };
        assert!((run(0.5, 0.6) - 0.8).abs() < 1e-15);
        assert!((run(0.4, 0.4) - 0.8).abs() < 1e-15);
        assert_eq!(run(0.25, 0.75), 0.0);
        // |Δα| = 0.3 exactly fails the strict inequality.
        assert_eq!(run(0.0, 0.3), 0.0);
    }

    #[test]
    fn validation_of_configs() {
        assert!(AffinityTargetConfig {
            theta: 0.3,
            smoothing: 0.5
        }
        .validate()
        .is_err());
        assert!(AffinityTargetConfig {
            theta: 0.0,
            smoothing: 0.2
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            w_im: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn temporal_single_pixel() {
        let mut g = Graph::new();
        let p0 = g.constant(Tensor::full(&[1, 1, 1], 0.5));
        let p1 = g.constant(Tensor::full(&[1, 1, 1], 0.2));
        let (g0, g1) = (Tensor::full(&[1, 1, 1], 0.6), Tensor::full(&[1, 1, 1], 0.4));
        let m = Mask::full(&[1, 1], true);
        let l = temporal_coherence_loss(&mut g, &[(p0, p1)], &[(&g0, &g1)], &[&m]).unwrap();
        assert!((g.value(l.var).item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_regions_are_flagged() {
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(&[1, 2, 2]));
        let z = Tensor::zeros(&[1, 2, 2]);
        let img = Tensor::zeros(&[3, 2, 2]);
        let m = Mask::full(&[2, 2], false);
        let target = MattingTarget {
            alpha: &z,
            image: &img,
            fg: &img,
            bg: &img,
            ur: &m,
        };
        let l = image_matting_loss(&mut g, p, &target, ImageLossVariant::DimStyle).unwrap();
        assert!(l.empty);
        assert_eq!(g.value(l.var).item(), 0.0);
        let tl = temporal_coherence_loss(&mut g, &[(p, p)], &[(&z, &z)], &[&m]).unwrap();
        assert!(tl.empty);
        let logits = g.param(Tensor::zeros(&[0, 9]));
        let al = affinity_loss(
            &mut g,
            &[logits],
            &[Tensor::zeros(&[0, 9])],
            &[Mask::full(&[0, 9], false)],
        )
        .unwrap();
        assert!(al.empty);
    }
}
