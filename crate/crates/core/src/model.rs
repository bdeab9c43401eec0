//! Desk-scale matting network with the temporal aggregation block at its deepest stage.
//!
//! Per frame the input is the RGB image (shifted to zero mean) stacked with the
//! one-hot trimap. A stride-2 convolutional encoder reaches the aggregation
//! stride, a projection produces the features the module consumes, and a
//! skip-connected decoder upsamples back to full resolution.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{load_store, save_store};
use crate::error::{invalid, Error, Result};
use crate::losses::ImageLossVariant;
use crate::params::{Bound, ConvParams, ConvSlot, ParamStore};
use crate::tam::{downsample_trimap, tam_forward, OffsetLogits, TamConfig, TamParams, UrMask};
use crate::tensor::{DType, Tensor};
use crate::trimap::{Label, Trimap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Base channel width: the OS=8 decoder width and the aggregation channel count.
    pub width: usize,
    pub tam: TamConfig,
    pub image_loss: ImageLossVariant,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            tam: TamConfig::default(),
            image_loss: ImageLossVariant::AlphaOnly,
            seed: 0,
        }
    }
}

/// Stride-2 encoder stages; the aggregation runs at stride `2^STAGES`.
pub const STAGES: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tam.validate()?;
        if self.width < 2 {
            return Err(Error::Config(format!(
                "model.width must be at least 2, got {}",
                self.width
            )));
        }
        if self.tam.channels != self.width {
            return Err(Error::Config(format!(
                "tam.channels ({}) must equal model.width ({})",
                self.tam.channels, self.width
            )));
        }
        Ok(())
    }

    pub fn output_stride(&self) -> usize {
        1 << STAGES
    }

    /// Encoder stage widths, finest first.
    pub fn encoder_channels(&self) -> [usize; STAGES] {
        [self.width / 2, self.width, 2 * self.width]
    }

    /// Decoder stage widths, finest first; the coarsest equals `width`.
    pub fn decoder_channels(&self) -> [usize; STAGES] {
        [self.width / 2, self.width / 2, self.width]
    }
}

/// Negative-side slope of every backbone activation. Plain relu let whole
/// decoder layers die, leaving a constant output.
pub const LEAK: f64 = 0.1;

/// Channels of the network input: RGB plus three trimap planes.
pub const INPUT_CHANNELS: usize = 6;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: Vec<ConvSlot>,
    proj: ConvSlot,
    pub tam: TamParams,
    decoder: Vec<ConvSlot>,
    head: ConvSlot,
}

/// Encoder outputs of one frame.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Full-resolution input followed by each encoder stage except the last.
    pub skips: Vec<Var>,
    /// Features at the aggregation stride, `[tam.channels, h, w]`.
    pub features: Var,
}

/// Network output for one center frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// Prediction `[1, H, W]` clamped to `[0, 1]`, before trimap overwrite.
    pub alpha: Var,
    /// The same prediction before clamping. Losses use it so that outputs past
    /// either bound still receive gradient.
    pub raw: Var,
    pub tam: Vec<OffsetLogits>,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let mut encoder = Vec::new();
    let mut c_prev = INPUT_CHANNELS;
    for (i, &c) in config.encoder_channels().iter().enumerate() {
        encoder.push(ConvSlot::register(
            &mut store,
            &format!("enc.{i}"),
            ConvParams::init(c, c_prev, 3, 2, &mut rng)?,
        )?);
        c_prev = c;
    }
    let ct = config.tam.channels;
    let proj = ConvSlot::register(
        &mut store,
        "proj",
        ConvParams::init(ct, c_prev, 3, 1, &mut rng)?,
    )?;
    let tam = TamParams::register(&mut store, "tam", &config.tam, &mut rng)?;
    // Skip channel counts per level: level 0 is the raw input.
    let dec_ch = config.decoder_channels();
    let skip_ch: Vec<usize> = std::iter::once(INPUT_CHANNELS)
        .chain(config.encoder_channels())
        .collect();
    let mut decoder = vec![None; STAGES];
    let mut c_up = ct;
    for level in (0..STAGES).rev() {
        let c = dec_ch[level];
        let slot = ConvSlot::register(
            &mut store,
            &format!("dec.{level}"),
            ConvParams::init(c, c_up + skip_ch[level], 3, 1, &mut rng)?,
        )?;
        decoder[level] = Some(slot);
        c_up = c;
    }
    let head = ConvSlot::register(
        &mut store,
        "head",
        ConvParams::init(1, dec_ch[0], 3, 1, &mut rng)?,
    )?;
    Ok(Model {
        config: config.clone(),
        store,
        encoder,
        proj,
        tam,
        decoder: decoder
            .into_iter()
            .map(|s| s.expect("every level registered"))
            .collect(),
        head,
    })
}

/// `[6, H, W]`: `rgb - 0.5` followed by the one-hot trimap.
pub fn network_input(frame: &Tensor, trimap: &Trimap) -> Result<Tensor> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 || (trimap.height(), trimap.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "network_input",
            left: frame.shape().to_vec(),
            right: vec![trimap.height(), trimap.width()],
        });
    }
    let mut data: Vec<f64> = frame.data().iter().map(|v| v - 0.5).collect();
    data.extend_from_slice(trimap.one_hot().data());
    Tensor::new(vec![INPUT_CHANNELS, h, w], data)
}

/// FR pixels become 1 and BR pixels 0; unknown pixels keep the prediction.
pub fn apply_trimap(pred: &Tensor, trimap: &Trimap) -> Tensor {
    let mut out = pred.clone();
    for (v, l) in out.data_mut().iter_mut().zip(trimap.labels()) {
        match l {
            Label::Foreground => *v = 1.0,
            Label::Background => *v = 0.0,
            Label::Unknown => {}
        }
    }
    out
}

impl Model {
    pub fn output_stride(&self) -> usize {
        self.config.output_stride()
    }

    pub fn encode(&self, g: &mut Graph, bound: &Bound, input: Var) -> Result<Encoded> {
        let (_, h, w) = g.value(input).dims3()?;
        let os = self.output_stride();
        if h % os != 0 || w % os != 0 {
            return Err(invalid(
                "encode",
                format!("input {h}x{w} is not a multiple of the output stride {os}"),
            ));
        }
        let mut skips = vec![input];
        let mut x = input;
        for slot in &self.encoder {
            let c = slot.apply(g, bound, x)?;
            x = g.leaky_relu(c, LEAK)?;
            skips.push(x);
        }
        skips.pop();
        let p = self.proj.apply(g, bound, x)?;
        let features = g.leaky_relu(p, LEAK)?;
        Ok(Encoded { skips, features })
    }

    /// Returns the unclamped alpha `head + 0.5`; zero-initialized biases start it at one half.
    pub fn decode(&self, g: &mut Graph, bound: &Bound, fused: Var, skips: &[Var]) -> Result<Var> {
        let mut x = g.leaky_relu(fused, LEAK)?;
        for level in (0..self.decoder.len()).rev() {
            let up = g.upsample2x(x)?;
            let cat = g.concat(&[up, skips[level]])?;
            let c = self.decoder[level].apply(g, bound, cat)?;
            x = g.leaky_relu(c, LEAK)?;
        }
        let logits = self.head.apply(g, bound, x)?;
        let half = g.constant(Tensor::full(g.shape(logits), 0.5));
        g.add(logits, half)
    }

    /// Aggregates and decodes frame `center` of an already encoded window.
    ///
    /// Neighbor indices beyond the window are clamped to its ends.
    pub fn decode_center(
        &self,
        g: &mut Graph,
        bound: &Bound,
        encoded: &[Encoded],
        center: usize,
        mask: &UrMask,
    ) -> Result<FrameOutput> {
        let last = encoded.len() as i64 - 1;
        let neighbors: Vec<(i32, Var)> = self
            .config
            .tam
            .offsets
            .iter()
            .map(|&o| {
                (
                    o,
                    encoded[(center as i64 + o as i64).clamp(0, last) as usize].features,
                )
            })
            .collect();
        let out = tam_forward(
            g,
            bound,
            &self.tam,
            &self.config.tam,
            encoded[center].features,
            &neighbors,
            mask,
        )?;
        let raw = self.decode(g, bound, out.fused, &encoded[center].skips)?;
        let alpha = g.clamp01(raw)?;
        Ok(FrameOutput {
            alpha,
            raw,
            tam: out.per_offset,
        })
    }

    /// Runs the network on a window of frames and returns outputs for `centers`.
    ///
    /// `inputs` are `[6, H, W]` network inputs, `trimaps` the matching trimaps.
    /// Only frames reachable from a center are encoded.
    pub fn forward_window(
        &self,
        g: &mut Graph,
        bound: &Bound,
        inputs: &[Tensor],
        trimaps: &[Trimap],
        centers: &[usize],
    ) -> Result<Vec<FrameOutput>> {
        if inputs.len() != trimaps.len() || inputs.is_empty() {
            return Err(invalid("forward_window", "need one trimap per input frame"));
        }
        let last = inputs.len() as i64 - 1;
        let mut needed = vec![false; inputs.len()];
        for &c in centers {
            if c >= inputs.len() {
                return Err(invalid(
                    "forward_window",
                    format!("center {c} outside a {}-frame window", inputs.len()),
                ));
            }
            needed[c] = true;
            for &o in &self.config.tam.offsets {
                needed[(c as i64 + o as i64).clamp(0, last) as usize] = true;
            }
        }
        // Unused frames get a cheap placeholder, never read.
        let mut encoded = Vec::with_capacity(inputs.len());
        for (t, input) in inputs.iter().enumerate() {
            if needed[t] {
                let x = g.constant(input.clone());
                encoded.push(self.encode(g, bound, x)?);
            } else {
                let x = g.constant(Tensor::scalar(0.0));
                encoded.push(Encoded {
                    skips: Vec::new(),
                    features: x,
                });
            }
        }
        let os = self.output_stride();
        centers
            .iter()
            .map(|&c| {
                let mask = downsample_trimap(&trimaps[c], os)?;
                self.decode_center(g, bound, &encoded, c, &mask)
            })
            .collect()
    }

    /// Predicts every frame of a clip. Inputs are padded to the output stride by
    /// edge replication; outputs are cropped back and overwritten outside UR.
    pub fn infer_clip(&self, frames: &[Tensor], trimaps: &[Trimap]) -> Result<Vec<Tensor>> {
        if frames.len() != trimaps.len() {
            return Err(invalid("infer_clip", "need one trimap per frame"));
        }
        let os = self.output_stride();
        let mut encoded_values: Vec<(Vec<Tensor>, Tensor)> = Vec::with_capacity(frames.len());
        let mut padded_trimaps = Vec::with_capacity(frames.len());
        for (f, t) in frames.iter().zip(trimaps) {
            let (pf, pt) = pad_to_multiple(f, t, os)?;
            let mut g = Graph::new();
            let bound = self.store.bind_frozen(&mut g);
            let x = g.constant(network_input(&pf, &pt)?);
            let e = self.encode(&mut g, &bound, x)?;
            encoded_values.push((
                e.skips.iter().map(|&s| g.value(s).clone()).collect(),
                g.value(e.features).clone(),
            ));
            padded_trimaps.push(pt);
        }
        let mut out = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let mut g = Graph::new();
            let bound = self.store.bind_frozen(&mut g);
            let encoded: Vec<Encoded> = encoded_values
                .iter()
                .map(|(skips, feat)| Encoded {
                    skips: skips.iter().map(|s| g.constant(s.clone())).collect(),
                    features: g.constant(feat.clone()),
                })
                .collect();
            let mask = downsample_trimap(&padded_trimaps[t], os)?;
            let y = self.decode_center(&mut g, &bound, &encoded, t, &mask)?;
            let pred = crop(g.value(y.alpha), frames[t].shape()[1], frames[t].shape()[2]);
            out.push(apply_trimap(&pred, &trimaps[t]));
        }
        Ok(out)
    }
}

fn pad_to_multiple(frame: &Tensor, trimap: &Trimap, os: usize) -> Result<(Tensor, Trimap)> {
    let (c, h, w) = frame.dims3()?;
    let (ph, pw) = (h.div_ceil(os) * os, w.div_ceil(os) * os);
    if (ph, pw) == (h, w) {
        return Ok((frame.clone(), trimap.clone()));
    }
    let d = frame.data();
    let mut data = Vec::with_capacity(c * ph * pw);
    for ci in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                data.push(d[ci * h * w + y.min(h - 1) * w + x.min(w - 1)]);
            }
        }
    }
    let t = trimap.remap(ph, pw, |y, x| (y.min(h - 1), x.min(w - 1)));
    Ok((Tensor::new(vec![c, ph, pw], data)?, t))
}

fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = t.dims3().expect("rank 3");
    if (th, tw) == (h, w) {
        return t.clone();
    }
    let d = t.data();
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            data.extend_from_slice(&d[ci * th * tw + y * tw..ci * th * tw + y * tw + w]);
        }
    }
    Tensor::new(vec![c, h, w], data).expect("crop dims")
}

/// Sidecar written next to a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// TAM role -> stored parameter prefix (roles may share one prefix).
    pub tam_roles: Vec<(String, String)>,
    pub num_parameters: usize,
    pub step: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, model: &Model, step: usize) -> Result<()> {
    save_store(path, &model.store, DType::F64)?;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        tam_roles: model.tam.aliases(&model.store),
        num_parameters: model.store.num_scalars(),
        step,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut model = build_model(&meta.model)?;
    let stored = load_store(path)?;
    if stored.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            stored.len(),
            model.store.len()
        )));
    }
    model.store.load_from(&stored)?;
    Ok((model, meta))
}
