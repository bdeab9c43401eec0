//! Training loop: five-frame windows, three supervised centers, Adam with a poly schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{
    affinity_loss, affinity_target, area_downsample, image_matting_loss, temporal_coherence_loss,
    total_loss, AffinityTargetConfig, LossWeights, MattingTarget,
};
use crate::model::{network_input, Model};
use crate::optim::{adam_step, poly_lr, AdamConfig, AdamState};
use crate::synth::{apply_augment, AugmentStrengths, SyntheticClip};
use crate::tensor::{Mask, Tensor};
use crate::trimap::{dilate_trimap, Label, Trimap};

/// Frames per training sample and the supervised centers within it.
pub const WINDOW: usize = 5;
pub const CENTERS: [usize; 3] = [1, 2, 3];

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "TAM_MATTE_THREADS";

const WARMUP: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_power: f64,
    /// Steps of linear learning-rate ramp from lr/warmup_steps up to lr. 0 disables it.
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm cap applied before each optimizer step. `None` disables it.
    pub grad_clip: Option<f64>,
    /// Square crop side; must be a multiple of the model's output stride.
    pub crop: usize,
    /// Largest odd dilation kernel sampled for training trimaps.
    pub max_dilation: usize,
    /// Probability that a crop is centered on an unknown pixel.
    pub focus_prob: f64,
    pub flip_prob: f64,
    pub augment: AugmentStrengths,
    pub weights: LossWeights,
    pub affinity: AffinityTargetConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 4,
            lr: 3e-3,
            lr_power: 0.9,
            warmup_steps: WARMUP,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
            crop: 48,
            max_dilation: 15,
            focus_prob: 0.8,
            flip_prob: 0.5,
            augment: AugmentStrengths {
                hue: 0.5,
                saturation: 0.3,
                gamma: 0.3,
                ..AugmentStrengths::default()
            },
            weights: LossWeights::default(),
            affinity: AffinityTargetConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, output_stride: usize) -> Result<()> {
        self.weights.validate()?;
        self.affinity.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(output_stride) {
            return Err(Error::Config(format!(
                "train.crop must be a positive multiple of {output_stride}, got {}",
                self.crop
            )));
        }
        if self.max_dilation.is_multiple_of(2) || self.max_dilation > crate::trimap::MAX_KERNEL {
            return Err(Error::Config(format!(
                "train.max_dilation must be odd and <= 51, got {}",
                self.max_dilation
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `cap`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], cap: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > cap {
        let s = cap / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_im")]
    pub l_im: f64,
    #[serde(rename = "L_tc")]
    pub l_tc: f64,
    #[serde(rename = "L_af")]
    pub l_af: f64,
    pub total: f64,
    pub w_im: f64,
    pub w_tg: f64,
    pub w_af: f64,
}

/// Worker count from `TAM_MATTE_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// A preprocessed training window.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub clip: SyntheticClip,
    /// Dilated trimaps fed to the network and used as loss masks.
    pub trimaps: Vec<Trimap>,
}

/// Draws the window, crop, flip, color jitter and dilation for one batch item.
pub fn sample_window(
    clips: &[SyntheticClip],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    let usable: Vec<usize> = (0..clips.len())
        .filter(|&i| clips[i].len() >= WINDOW)
        .collect();
    if usable.is_empty() {
        return Err(Error::Config(format!(
            "training needs clips with at least {WINDOW} frames"
        )));
    }
    let src = &clips[usable[rng.gen_range(0..usable.len())]];
    let start = rng.gen_range(0..=src.len() - WINDOW);
    let window = slice_clip(src, start, WINDOW);
    let (h, w) = (window.height(), window.width());
    let crop = config.crop;
    if crop > h || crop > w {
        return Err(Error::Config(format!(
            "clips of {h}x{w} are smaller than train.crop = {crop}"
        )));
    }
    let mid = &window.trimaps[WINDOW / 2];
    let unknown: Vec<usize> = (0..h * w)
        .filter(|&i| mid.labels()[i] == Label::Unknown)
        .collect();
    let (cy, cx) = if !unknown.is_empty() && rng.gen_bool(config.focus_prob.clamp(0.0, 1.0)) {
        let i = unknown[rng.gen_range(0..unknown.len())];
        (i / w, i % w)
    } else {
        (rng.gen_range(0..h), rng.gen_range(0..w))
    };
    let top = cy.saturating_sub(crop / 2).min(h - crop);
    let left = cx.saturating_sub(crop / 2).min(w - crop);
    let mut params = config.augment.sample(h, w, rng);
    params.crop = Some([top, left, crop, crop]);
    params.flip = rng.gen_bool(config.flip_prob.clamp(0.0, 1.0));
    let clip = apply_augment(&window, &params)?;
    let k = 2 * rng.gen_range(0..=config.max_dilation / 2) + 1;
    let trimaps = clip
        .trimaps
        .iter()
        .map(|t| dilate_trimap(t, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSample { clip, trimaps })
}

/// Frames `start .. start + len` of a clip.
pub fn slice_clip(clip: &SyntheticClip, start: usize, len: usize) -> SyntheticClip {
    let r = start..start + len;
    SyntheticClip {
        spec: clip.spec.clone(),
        frames: clip.frames[r.clone()].to_vec(),
        alphas: clip.alphas[r.clone()].to_vec(),
        fg: clip.fg[r.clone()].to_vec(),
        bg: clip.bg[r.clone()].to_vec(),
        flows: clip.flows[r.clone()].to_vec(),
        trimaps: clip.trimaps[r.clone()].to_vec(),
        region_labels: clip.region_labels[r].to_vec(),
        warnings: clip.warnings.clone(),
    }
}

/// Loss components of one sample and the objective node.
pub struct SampleLoss {
    pub l_im: Var,
    pub l_tc: Var,
    pub l_af: Var,
    pub total: Var,
}

/// Builds the full objective for one window on graph `g`.
pub fn sample_loss(
    g: &mut Graph,
    model: &Model,
    bound: &crate::params::Bound,
    sample: &TrainSample,
    config: &TrainConfig,
) -> Result<SampleLoss> {
    let clip = &sample.clip;
    let inputs = clip
        .frames
        .iter()
        .zip(&sample.trimaps)
        .map(|(f, t)| network_input(f, t))
        .collect::<Result<Vec<_>>>()?;
    let outs = model.forward_window(g, bound, &inputs, &sample.trimaps, &CENTERS)?;
    let masks: Vec<Mask> = sample.trimaps.iter().map(Trimap::unknown_mask).collect();

    let mut im_terms = Vec::new();
    for (out, &c) in outs.iter().zip(&CENTERS) {
        let target = MattingTarget {
            alpha: &clip.alphas[c],
            image: &clip.frames[c],
            fg: &clip.fg[c],
            bg: &clip.bg[c],
            ur: &masks[c],
        };
        let l = image_matting_loss(g, out.raw, &target, model.config.image_loss)?;
        if !l.empty {
            im_terms.push(l.var);
        }
    }
    let l_im = if im_terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let s = g.add_all(&im_terms)?;
        g.scale(s, 1.0 / im_terms.len() as f64)?
    };

    let pred_pairs: Vec<(Var, Var)> = outs.windows(2).map(|p| (p[0].raw, p[1].raw)).collect();
    let gt_pairs: Vec<(&Tensor, &Tensor)> = CENTERS
        .windows(2)
        .map(|p| (&clip.alphas[p[0]], &clip.alphas[p[1]]))
        .collect();
    let pair_masks: Vec<&Mask> = CENTERS[1..].iter().map(|&c| &masks[c]).collect();
    let l_tc = temporal_coherence_loss(g, &pred_pairs, &gt_pairs, &pair_masks)?.var;

    let os = model.output_stride();
    let small: Vec<Tensor> = clip
        .alphas
        .iter()
        .map(|a| area_downsample(a, os))
        .collect::<Result<_>>()?;
    let last = WINDOW as i64 - 1;
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut valid = Vec::new();
    for (out, &c) in outs.iter().zip(&CENTERS) {
        let mask = crate::tam::downsample_trimap(&sample.trimaps[c], os)?;
        for ol in &out.tam {
            let n = (c as i64 + ol.offset as i64).clamp(0, last) as usize;
            targets.push(affinity_target(
                &small[c],
                &small[n],
                mask.centers(),
                model.config.tam.window,
                &config.affinity,
            )?);
            logits.push(ol.logits);
            valid.push(ol.valid.clone());
        }
    }
    let l_af = affinity_loss(g, &logits, &targets, &valid)?.var;
    let total = total_loss(g, l_im, l_tc, l_af, &config.weights)?;
    for (name, v) in [
        ("L_im", l_im),
        ("L_tc", l_tc),
        ("L_af", l_af),
        ("total", total),
    ] {
        if !g.value(v).item().is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(SampleLoss {
        l_im,
        l_tc,
        l_af,
        total,
    })
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: usize,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate(model.output_stride())?;
        let adam = AdamState::new(&model.store, config.lr, config.adam);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
            pool,
        })
    }

    /// One optimizer step on a freshly sampled batch. Samples depend only on
    /// the seed, the step index and the item index, so results are independent
    /// of the thread count.
    pub fn train_step(&mut self, clips: &[SyntheticClip]) -> Result<LossRecord> {
        let samples = self.sample_batch(clips)?;
        self.step_on(&samples)
    }

    /// The batch drawn at the current step.
    pub fn sample_batch(&self, clips: &[SyntheticClip]) -> Result<Vec<TrainSample>> {
        (0..self.config.batch_size)
            .map(|item| {
                let seed = self.config.seed
                    ^ ((self.step as u64) << 20)
                    ^ (item as u64).wrapping_mul(0x9e37_79b9);
                sample_window(clips, &self.config, &mut ChaCha8Rng::seed_from_u64(seed))
            })
            .collect()
    }

    /// One optimizer update on the given samples.
    pub fn step_on(&mut self, samples: &[TrainSample]) -> Result<LossRecord> {
        let model = &self.model;
        let config = &self.config;
        let results: Vec<Result<([f64; 4], Vec<Tensor>)>> = self.pool.install(|| {
            samples
                .par_iter()
                .map(|s| {
                    let mut g = Graph::new();
                    let bound = model.store.bind(&mut g);
                    let loss = sample_loss(&mut g, model, &bound, s, config)?;
                    let values =
                        [loss.l_im, loss.l_tc, loss.l_af, loss.total].map(|v| g.value(v).item());
                    g.backward(loss.total)?;
                    Ok((values, model.store.grads(&g, &bound)))
                })
                .collect()
        });
        let n = results.len() as f64;
        let mut sums = [0.0; 4];
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (values, gs) = r?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v / n;
            }
            match &mut grads {
                None => grads = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gs) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads: Vec<Tensor> = grads
            .unwrap_or_default()
            .into_iter()
            .map(|g| g.map(|v| v / n))
            .collect();
        if let Some(cap) = self.config.grad_clip {
            clip_grad_norm(&mut grads, cap);
        }
        let ramp = ((self.step + 1) as f64 / self.config.warmup_steps.max(1) as f64).min(1.0);
        let lr = ramp
            * poly_lr(
                self.config.lr,
                self.step,
                self.config.steps.max(1),
                self.config.lr_power,
            );
        self.adam.lr = lr;
        adam_step(&mut self.model.store, &grads, &mut self.adam)?;
        let w = self.config.weights;
        let record = LossRecord {
            step: self.step,
            lr,
            l_im: sums[0],
            l_tc: sums[1],
            l_af: sums[2],
            total: sums[3],
            w_im: w.w_im,
            w_tg: w.w_tg,
            w_af: w.w_af,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs the remaining steps, reporting each record to `on_step`.
    pub fn run(
        &mut self,
        clips: &[SyntheticClip],
        mut on_step: impl FnMut(&LossRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.steps {
            let r = self.train_step(clips)?;
            on_step(&r)?;
        }
        Ok(())
    }
}
