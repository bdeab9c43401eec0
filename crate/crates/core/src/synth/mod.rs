//! Deterministic synthetic video clips with exact alpha, colors and motion.
//!
//! Sprites with analytic alpha profiles move along affine trajectories over a
//! translating procedural background. Every frame satisfies the compositing
//! equation with the emitted foreground, background and alpha, and the flow
//! field is the exact displacement of the visible layer into the previous
//! frame.

mod augment;
pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FlowField;
use crate::tensor::Tensor;
use crate::trimap::{trimap_from_alpha, Label, Trimap};

pub use augment::{
    apply_augment, augment, gamma_correct, jpeg_like, AugmentParams, AugmentStrengths,
};

/// Minimum frame count: a training sample spans five consecutive frames.
pub const MIN_FRAMES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    SoftDisk,
    GradientRect,
    HairStrokes,
}

/// Position, rotation and scale, each linear in the frame index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineTrajectory {
    /// `(y, x)` of the sprite origin at frame 0.
    pub start: [f64; 2],
    /// `(dy, dx)` per frame.
    pub velocity: [f64; 2],
    pub rotation: f64,
    /// Radians per frame.
    pub angular_velocity: f64,
    pub scale: f64,
    /// Added to the scale every frame.
    pub scale_rate: f64,
}

impl AffineTrajectory {
    pub fn fixed(y: f64, x: f64) -> Self {
        Self {
            start: [y, x],
            velocity: [0.0, 0.0],
            rotation: 0.0,
            angular_velocity: 0.0,
            scale: 1.0,
            scale_rate: 0.0,
        }
    }

    fn pose(&self, t: usize) -> Pose {
        let t = t as f64;
        Pose {
            cy: self.start[0] + self.velocity[0] * t,
            cx: self.start[1] + self.velocity[1] * t,
            angle: self.rotation + self.angular_velocity * t,
            scale: self.scale + self.scale_rate * t,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    cy: f64,
    cx: f64,
    angle: f64,
    scale: f64,
}

impl Pose {
    /// Image `(y, x)` to sprite-local `(v, u)`.
    fn to_local(self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        (
            (c * dy - s * dx) / self.scale,
            (s * dy + c * dx) / self.scale,
        )
    }

    fn to_image(self, v: f64, u: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (v, u) = (v * self.scale, u * self.scale);
        (self.cy + c * v + s * u, self.cx - s * v + c * u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSpec {
    pub kind: SpriteKind,
    /// Outer radius (disk, hair core) or half-width (rect), in pixels at scale 1.
    pub size: f64,
    /// Width of the fractional-alpha edge band.
    pub falloff: f64,
    pub color: [f64; 3],
    pub texture: f64,
    pub trajectory: AffineTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub base: [f64; 3],
    /// Amplitude of the sinusoidal texture.
    pub contrast: f64,
    /// `(dy, dx)` translation per frame.
    pub velocity: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// Per-frame Gaussian noise on foreground and background colors.
    pub noise_sigma: f64,
    /// Number of color levels (2..=256) applied to foreground and background.
    pub quant_levels: u32,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            quant_levels: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Back to front.
    pub sprites: Vec<SpriteSpec>,
    pub background: BackgroundSpec,
    pub degradation: DegradationSpec,
    pub seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_FRAMES {
            return Err(Error::Config(format!(
                "clips need at least {MIN_FRAMES} frames, got {}",
                self.frames
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("clip resolution must be positive".into()));
        }
        if !(2..=256).contains(&self.degradation.quant_levels) {
            return Err(Error::Config("quant_levels must lie in 2..=256".into()));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if !(s.size > 0.0 && s.falloff > 0.0 && s.falloff <= s.size) {
                return Err(Error::Config(format!(
                    "sprite {i}: need 0 < falloff <= size"
                )));
            }
            for t in 0..self.frames {
                if s.trajectory.pose(t).scale <= 0.0 {
                    return Err(Error::Config(format!(
                        "sprite {i}: scale reaches zero at frame {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// A random clip with one or two sprites and moderate motion.
    pub fn random(
        height: usize,
        width: usize,
        frames: usize,
        noise_sigma: f64,
        max_speed: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = height.min(width) as f64;
        let background = BackgroundSpec {
            base: [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
            ],
            contrast: rng.gen_range(0.05..0.2),
            velocity: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
        };
        let n_sprites = rng.gen_range(1..=2);
        let kinds = [
            SpriteKind::SoftDisk,
            SpriteKind::GradientRect,
            SpriteKind::HairStrokes,
        ];
        let sprites = (0..n_sprites)
            .map(|_| {
                let size = rng.gen_range(0.14..0.24) * dim;
                let falloff = rng.gen_range(0.2..0.4) * size;
                // Keep sprites distinguishable from the background base color.
                let color = loop {
                    let c = [
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                    ];
                    if c.iter()
                        .zip(&background.base)
                        .any(|(a, b)| (a - b).abs() >= 0.35)
                    {
                        break c;
                    }
                };
                let margin = size + 2.0;
                let start = [
                    rng.gen_range(margin..(height as f64 - margin).max(margin + 1.0)),
                    rng.gen_range(margin..(width as f64 - margin).max(margin + 1.0)),
                ];
                // Keep the sprite roughly on screen over the clip.
                let span = frames.max(1) as f64;
                let clamp_v = |p: f64, extent: f64, v: f64| {
                    let end = p + v * span;
                    if end < margin || end > extent - margin {
                        -v
                    } else {
                        v
                    }
                };
                let vy = rng.gen_range(-max_speed..=max_speed);
                let vx = rng.gen_range(-max_speed..=max_speed);
                SpriteSpec {
                    kind: kinds[rng.gen_range(0..kinds.len())],
                    size,
                    falloff,
                    color,
                    texture: rng.gen_range(0.0..0.15),
                    trajectory: AffineTrajectory {
                        start,
                        velocity: [
                            clamp_v(start[0], height as f64, vy),
                            clamp_v(start[1], width as f64, vx),
                        ],
                        rotation: rng.gen_range(0.0..std::f64::consts::TAU),
                        angular_velocity: rng.gen_range(-0.05..0.05),
                        scale: 1.0,
                        scale_rate: rng.gen_range(-0.005..0.005),
                    },
                }
            })
            .collect();
        Self {
            height,
            width,
            frames,
            sprites,
            background,
            degradation: DegradationSpec {
                noise_sigma,
                quant_levels: 256,
            },
            seed,
        }
    }
}

/// Dataset-level generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_clips: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    /// Largest sprite speed in pixels per frame.
    pub max_speed: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_clips: 20,
            val_clips: 6,
            frames: 16,
            height: 64,
            width: 64,
            noise_sigma: 0.03,
            max_speed: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_FRAMES {
            return Err(Error::Config(format!(
                "synth.frames must be at least {MIN_FRAMES} (training uses five-frame windows), got {}",
                self.frames
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(
                "synth resolution must be at least 8x8".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.max_speed >= 0.0) {
            return Err(Error::Config(
                "synth.noise_sigma and synth.max_speed must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Specs of every clip, train first. Clip seeds derive from `seed` and the index.
    pub fn specs(&self, seed: u64) -> Result<Vec<(Split, ClipSpec)>> {
        self.validate()?;
        let splits = std::iter::repeat_n(Split::Train, self.train_clips)
            .chain(std::iter::repeat_n(Split::Val, self.val_clips));
        Ok(splits
            .enumerate()
            .map(|(i, split)| {
                let clip_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                (
                    split,
                    ClipSpec::random(
                        self.height,
                        self.width,
                        self.frames,
                        self.noise_sigma,
                        self.max_speed,
                        clip_seed,
                    ),
                )
            })
            .collect())
    }

    /// Generates every clip in parallel; output order matches [`SynthConfig::specs`].
    pub fn generate(&self, seed: u64) -> Result<Vec<(Split, SyntheticClip)>> {
        use rayon::prelude::*;
        self.specs(seed)?
            .into_par_iter()
            .map(|(split, spec)| gen_clip(&spec).map(|c| (split, c)))
            .collect()
    }
}

/// A generated clip with all of its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub spec: ClipSpec,
    /// `[3, H, W]` in `[0, 1]`, 8-bit quantized.
    pub frames: Vec<Tensor>,
    /// `[1, H, W]`, 16-bit quantized.
    pub alphas: Vec<Tensor>,
    pub fg: Vec<Tensor>,
    pub bg: Vec<Tensor>,
    /// `flows[t]` maps frame `t` into `t-1`; `flows[0]` is zero.
    pub flows: Vec<FlowField>,
    /// Undilated trimaps derived from the alphas.
    pub trimaps: Vec<Trimap>,
    /// Labels from the generator's analytic alpha.
    pub region_labels: Vec<Trimap>,
    pub warnings: Vec<String>,
}

impl SyntheticClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.shape()[1])
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.shape()[2])
    }
}

/// Per-pixel `α F + (1 - α) B` for `[3,H,W]` colors and a `[1,H,W]` alpha.
pub fn composite(fg: &Tensor, bg: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (c, h, w) = fg.dims3()?;
    if bg.shape() != fg.shape() || alpha.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "composite",
            left: fg.shape().to_vec(),
            right: alpha.shape().to_vec(),
        });
    }
    let n = h * w;
    let a = alpha.data();
    let data = (0..c * n)
        .map(|i| {
            let ai = a[i % n];
            ai * fg.data()[i] + (1.0 - ai) * bg.data()[i]
        })
        .collect();
    Tensor::new(fg.shape().to_vec(), data)
}

pub(crate) fn quantize(v: f64, levels: u32) -> f64 {
    let l = (levels - 1) as f64;
    (v.clamp(0.0, 1.0) * l).round() / l
}

struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
    opacity: f64,
}

fn segment_distance(p: (f64, f64), s: &Stroke) -> f64 {
    let (dy, dx) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dy * dy + dx * dx;
    let t = (((p.0 - s.a.0) * dy + (p.1 - s.a.1) * dx) / len2).clamp(0.0, 1.0);
    let (qy, qx) = (s.a.0 + t * dy, s.a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

/// Disk profile: 1 inside `r - w`, 0 beyond `r`, linear between.
pub fn soft_disk_alpha(distance: f64, radius: f64, falloff: f64) -> f64 {
    ((radius - distance) / falloff).clamp(0.0, 1.0)
}

struct SpriteModel {
    spec: SpriteSpec,
    strokes: Vec<Stroke>,
}

impl SpriteModel {
    fn new(spec: &SpriteSpec, rng: &mut ChaCha8Rng) -> Self {
        let strokes = if spec.kind == SpriteKind::HairStrokes {
            let core = 0.6 * spec.size;
            (0..12)
                .map(|_| {
                    let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let len = rng.gen_range(0.4..1.0) * spec.size;
                    let bend: f64 = rng.gen_range(-0.4..0.4);
                    let (s0, c0) = ang.sin_cos();
                    let (s1, c1) = (ang + bend).sin_cos();
                    Stroke {
                        a: (core * 0.8 * s0, core * 0.8 * c0),
                        b: ((core + len) * s1, (core + len) * c1),
                        width: rng.gen_range(0.7..1.5),
                        opacity: rng.gen_range(0.5..0.9),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            spec: spec.clone(),
            strokes,
        }
    }

    fn alpha(&self, v: f64, u: f64) -> f64 {
        let s = &self.spec;
        match s.kind {
            SpriteKind::SoftDisk => soft_disk_alpha((v * v + u * u).sqrt(), s.size, s.falloff),
            SpriteKind::GradientRect => {
                let (hx, hy) = (s.size, 0.7 * s.size);
                let edge = ((hx - u.abs()).min(hy - v.abs()) / s.falloff).clamp(0.0, 1.0);
                let ramp = 0.35 + 0.65 * ((u + hx) / (2.0 * hx)).clamp(0.0, 1.0);
                edge * ramp
            }
            SpriteKind::HairStrokes => {
                let core = soft_disk_alpha(
                    (v * v + u * u).sqrt(),
                    0.6 * s.size,
                    s.falloff.min(0.6 * s.size),
                );
                self.strokes.iter().fold(core, |acc, st| {
                    let d = segment_distance((v, u), st);
                    acc.max(st.opacity * (1.0 - d / st.width).clamp(0.0, 1.0))
                })
            }
        }
    }

    fn color(&self, v: f64, u: f64, ch: usize) -> f64 {
        let s = &self.spec;
        let tex =
            s.texture * ((0.45 * u + 1.3 * ch as f64).sin() * (0.37 * v - 0.7 * ch as f64).cos());
        (s.color[ch] + tex).clamp(0.0, 1.0)
    }
}

struct BackgroundModel {
    spec: BackgroundSpec,
    /// `(fy, fx, phase)` per channel and component.
    waves: Vec<[(f64, f64, f64); 3]>,
}

impl BackgroundModel {
    fn new(spec: &BackgroundSpec, rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                let mut w = [(0.0, 0.0, 0.0); 3];
                for c in &mut w {
                    *c = (
                        rng.gen_range(-0.35..0.35),
                        rng.gen_range(-0.35..0.35),
                        rng.gen_range(0.0..6.3),
                    );
                }
                w
            })
            .collect();
        Self {
            spec: spec.clone(),
            waves,
        }
    }

    fn color(&self, y: f64, x: f64, t: usize, ch: usize) -> f64 {
        let (qy, qx) = (
            y - self.spec.velocity[0] * t as f64,
            x - self.spec.velocity[1] * t as f64,
        );
        let tex: f64 = self
            .waves
            .iter()
            .map(|w| (w[ch].0 * qy + w[ch].1 * qx + w[ch].2).sin())
            .sum::<f64>()
            / 3.0;
        (self.spec.base[ch] + self.spec.contrast * tex).clamp(0.0, 1.0)
    }
}

/// Renders `spec` into a clip; fully determined by the spec and its seed.
pub fn gen_clip(spec: &ClipSpec) -> Result<SyntheticClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sprites: Vec<SpriteModel> = spec
        .sprites
        .iter()
        .map(|s| SpriteModel::new(s, &mut rng))
        .collect();
    let background = BackgroundModel::new(&spec.background, &mut rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (h, w, n) = (spec.height, spec.width, spec.height * spec.width);
    let levels = spec.degradation.quant_levels;
    let sigma = spec.degradation.noise_sigma;

    let mut clip = SyntheticClip {
        spec: spec.clone(),
        frames: Vec::with_capacity(spec.frames),
        alphas: Vec::with_capacity(spec.frames),
        fg: Vec::with_capacity(spec.frames),
        bg: Vec::with_capacity(spec.frames),
        flows: Vec::with_capacity(spec.frames),
        trimaps: Vec::with_capacity(spec.frames),
        region_labels: Vec::with_capacity(spec.frames),
        warnings: Vec::new(),
    };
    for t in 0..spec.frames {
        let poses: Vec<Pose> = spec.sprites.iter().map(|s| s.trajectory.pose(t)).collect();
        let prev_poses: Vec<Pose> = spec
            .sprites
            .iter()
            .map(|s| s.trajectory.pose(t.saturating_sub(1)))
            .collect();
        let mut alpha = vec![0.0; n];
        let mut labels = Vec::with_capacity(n);
        let mut fg = vec![0.0; 3 * n];
        let mut bg = vec![0.0; 3 * n];
        let mut flow = vec![0.0; 2 * n];
        let mut visible = vec![false; sprites.len()];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (yf, xf) = (y as f64, x as f64);
                // Back-to-front over: premultiplied color and coverage.
                let mut premult = [0.0; 3];
                let mut cover = 0.0;
                let mut top: Option<usize> = None;
                for (k, (sprite, pose)) in sprites.iter().zip(&poses).enumerate() {
                    let (v, u) = pose.to_local(yf, xf);
                    let a = sprite.alpha(v, u);
                    if a > 0.0 {
                        visible[k] = true;
                        top = Some(k);
                        for (ch, p) in premult.iter_mut().enumerate() {
                            *p = a * sprite.color(v, u, ch) + (1.0 - a) * *p;
                        }
                        cover = a + (1.0 - a) * cover;
                    }
                }
                labels.push(Label::of_alpha(cover));
                alpha[i] = (cover * 65535.0).round() / 65535.0;
                for ch in 0..3 {
                    let f = if cover > 0.0 {
                        premult[ch] / cover
                    } else {
                        0.0
                    };
                    let b = background.color(yf, xf, t, ch);
                    let (nf, nb): (f64, f64) = if sigma > 0.0 {
                        {
                            let nf: f64 = StandardNormal.sample(&mut noise_rng);
                            let nb: f64 = StandardNormal.sample(&mut noise_rng);
                            (nf * sigma, nb * sigma)
                        }
                    } else {
                        (0.0, 0.0)
                    };
                    fg[ch * n + i] = quantize(quantize(f + nf, levels), 256);
                    bg[ch * n + i] = quantize(quantize(b + nb, levels), 256);
                }
                let (dy, dx) = match top {
                    _ if t == 0 => (0.0, 0.0),
                    Some(k) => {
                        let (v, u) = poses[k].to_local(yf, xf);
                        let (py, px) = prev_poses[k].to_image(v, u);
                        (py - yf, px - xf)
                    }
                    None => (-spec.background.velocity[0], -spec.background.velocity[1]),
                };
                flow[i] = dy;
                flow[n + i] = dx;
            }
        }
        for (k, seen) in visible.iter().enumerate() {
            if !seen {
                clip.warnings
                    .push(format!("sprite {k} is entirely outside frame {t}"));
            }
        }
        let alpha = Tensor::new(vec![1, h, w], alpha)?;
        let fg = Tensor::new(vec![3, h, w], fg)?;
        let bg = Tensor::new(vec![3, h, w], bg)?;
        let frame = composite(&fg, &bg, &alpha)?.map(|v| quantize(v, 256));
        clip.trimaps.push(trimap_from_alpha(&alpha)?);
        clip.region_labels.push(Trimap::new(h, w, labels)?);
        clip.frames.push(frame);
        clip.alphas.push(alpha);
        clip.fg.push(fg);
        clip.bg.push(bg);
        clip.flows
            .push(FlowField(Tensor::new(vec![2, h, w], flow)?));
    }
    Ok(clip)
}
