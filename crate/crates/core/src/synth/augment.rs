//! Photometric and geometric augmentation applied consistently across a clip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{composite, quantize, SyntheticClip};
use crate::error::{invalid, Result};
use crate::metrics::FlowField;
use crate::tensor::Tensor;
use crate::trimap::Trimap;

/// Ranges from which [`AugmentParams`] are sampled. All-zero means identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentStrengths {
    /// Max hue rotation, in turns.
    pub hue: f64,
    /// Max |ln| of the saturation multiplier.
    pub saturation: f64,
    /// Max |ln| of the gamma exponent.
    pub gamma: f64,
    pub jpeg_prob: f64,
    /// Inclusive quality range for the block-DCT degradation.
    pub jpeg_quality: [u8; 2],
    /// `(height, width)` of a random crop.
    pub crop: Option<[usize; 2]>,
    pub flip_prob: f64,
}

/// Concrete augmentation for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hue_shift: f64,
    pub saturation_scale: f64,
    pub gamma: f64,
    pub jpeg_quality: Option<u8>,
    /// `(top, left, height, width)`.
    pub crop: Option<[usize; 4]>,
    pub flip: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            hue_shift: 0.0,
            saturation_scale: 1.0,
            gamma: 1.0,
            jpeg_quality: None,
            crop: None,
            flip: false,
        }
    }
}

impl AugmentStrengths {
    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> AugmentParams {
        let sym =
            |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let hue_shift = sym(rng, self.hue);
        let saturation_scale = sym(rng, self.saturation).exp();
        let gamma = sym(rng, self.gamma).exp();
        let jpeg_quality =
            (self.jpeg_prob > 0.0 && rng.gen_bool(self.jpeg_prob.min(1.0))).then(|| {
                let [lo, hi] = self.jpeg_quality;
                rng.gen_range(lo.clamp(1, 100)..=hi.clamp(lo.max(1), 100))
            });
        let crop = self.crop.map(|[ch, cw]| {
            let (ch, cw) = (ch.min(height), cw.min(width));
            [
                rng.gen_range(0..=height - ch),
                rng.gen_range(0..=width - cw),
                ch,
                cw,
            ]
        });
        let flip = self.flip_prob > 0.0 && rng.gen_bool(self.flip_prob.min(1.0));
        AugmentParams {
            hue_shift,
            saturation_scale,
            gamma,
            jpeg_quality,
            crop,
            flip,
        }
    }
}

/// Samples parameters from `seed` and applies them.
pub fn augment(
    clip: &SyntheticClip,
    strengths: &AugmentStrengths,
    seed: u64,
) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = strengths.sample(clip.height(), clip.width(), &mut rng);
    apply_augment(clip, &params)
}

/// Crops and flips every plane, jitters foreground and background colors,
/// recomposites the frames, then optionally degrades them.
pub fn apply_augment(clip: &SyntheticClip, p: &AugmentParams) -> Result<SyntheticClip> {
    let (h, w) = (clip.height(), clip.width());
    let [top, left, ch, cw] = p.crop.unwrap_or([0, 0, h, w]);
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(invalid(
            "augment",
            format!("crop {:?} does not fit {h}x{w}", p.crop),
        ));
    }
    let src = |y: usize, x: usize| (top + y, left + if p.flip { cw - 1 - x } else { x });
    let geo = |t: &Tensor| remap_tensor(t, ch, cw, src);
    let jitter = |t: &Tensor| color_jitter(t, p);

    let alphas: Vec<Tensor> = clip.alphas.iter().map(geo).collect();
    let fg: Vec<Tensor> = clip.fg.iter().map(|t| jitter(&geo(t))).collect();
    let bg: Vec<Tensor> = clip.bg.iter().map(|t| jitter(&geo(t))).collect();
    let photometric = p.hue_shift != 0.0 || p.saturation_scale != 1.0 || p.gamma != 1.0;
    let mut frames = Vec::with_capacity(clip.len());
    for t in 0..clip.len() {
        let mut f = if photometric {
            composite(&fg[t], &bg[t], &alphas[t])?.map(|v| quantize(v, 256))
        } else {
            geo(&clip.frames[t])
        };
        if let Some(q) = p.jpeg_quality {
            f = jpeg_like(&f, q)?;
        }
        frames.push(f);
    }
    let flows = clip
        .flows
        .iter()
        .map(|f| {
            let mut g = geo(&f.0);
            if p.flip {
                let n = ch * cw;
                g.data_mut()[n..].iter_mut().for_each(|v| *v = -*v);
            }
            FlowField(g)
        })
        .collect();
    let retrimap = |t: &Trimap| t.remap(ch, cw, src);
    Ok(SyntheticClip {
        spec: clip.spec.clone(),
        frames,
        alphas,
        fg,
        bg,
        flows,
        trimaps: clip.trimaps.iter().map(retrimap).collect(),
        region_labels: clip.region_labels.iter().map(retrimap).collect(),
        warnings: clip.warnings.clone(),
    })
}

fn remap_tensor(
    t: &Tensor,
    h: usize,
    w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Tensor {
    let (c, _, sw) = t.dims3().expect("clip planes are rank 3");
    let sn = t.shape()[1] * sw;
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                out.push(d[ci * sn + sy * sw + sx]);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("remap dims")
}

fn color_jitter(t: &Tensor, p: &AugmentParams) -> Tensor {
    let mut out = t.clone();
    if p.hue_shift != 0.0 || p.saturation_scale != 1.0 {
        let n = t.shape()[1] * t.shape()[2];
        let d = out.data_mut();
        for i in 0..n {
            let (hh, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
            let hh = (hh + p.hue_shift).rem_euclid(1.0);
            let s = (s * p.saturation_scale).clamp(0.0, 1.0);
            let (r, g, b) = hsv_to_rgb(hh, s, v);
            d[i] = r;
            d[n + i] = g;
            d[2 * n + i] = b;
        }
    }
    if p.gamma != 1.0 {
        out = gamma_correct(&out, p.gamma);
    }
    out
}

/// Elementwise `v^gamma` on values clamped to `[0, 1]`.
pub fn gamma_correct(t: &Tensor, gamma: f64) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0).powf(gamma))
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

const LUMA_Q: [u8; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113,
    92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_Q: [u8; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
];

fn scaled_table(base: &[u8; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let s = if q < 50.0 {
        5000.0 / q
    } else {
        200.0 - 2.0 * q
    };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as f64 * s + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// JPEG-style degradation: YCbCr, 8x8 block DCT, table quantization, inverse.
///
/// Partial edge blocks are padded by edge replication. Output is 8-bit quantized.
pub fn jpeg_like(frame: &Tensor, quality: u8) -> Result<Tensor> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(invalid(
            "jpeg_like",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let n = h * w;
    let d = frame.data();
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let (r, g, b) = (d[i] * 255.0, d[n + i] * 255.0, d[2 * n + i] * 255.0);
        planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
        planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
        planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    let tables = [
        scaled_table(&LUMA_Q, quality),
        scaled_table(&CHROMA_Q, quality),
    ];
    let mut cos = [[0.0; 8]; 8];
    for (k, row) in cos.iter_mut().enumerate() {
        let ck = if k == 0 { (0.125f64).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = ck * ((2 * x + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    for (pi, plane) in planes.iter_mut().enumerate() {
        let table = &tables[pi.min(1)];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + y).min(h - 1) * w + (bx + x).min(w - 1)];
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for (y, row) in block.iter().enumerate() {
                            for (x, val) in row.iter().enumerate() {
                                s += cos[u][y] * cos[v][x] * val;
                            }
                        }
                        let q = table[u * 8 + v];
                        coef[u][v] = (s / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for (u, row) in coef.iter().enumerate() {
                            for (v, cf) in row.iter().enumerate() {
                                s += cos[u][y] * cos[v][x] * cf;
                            }
                        }
                        plane[(by + y) * w + bx + x] = s;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let (yy, cb, cr) = (planes[0][i] + 128.0, planes[1][i], planes[2][i]);
        out[i] = yy + 1.402 * cr;
        out[n + i] = yy - 0.344_136 * cb - 0.714_136 * cr;
        out[2 * n + i] = yy + 1.772 * cb;
    }
    Tensor::new(
        vec![3, h, w],
        out.into_iter().map(|v| quantize(v / 255.0, 256)).collect(),
    )
}
