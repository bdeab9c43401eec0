//! Temporal aggregation module.
//!
//! For every unknown-region cell `i` of the center frame, the key feature
//! `K(i)` is matched against a `W x W` window of query features from each
//! neighbor frame. The window affinities are a softmax of the plain dot
//! products, and the affinity-weighted neighbor features are added to the
//! center frame's self-convolution output `S(i)`. Cells outside the unknown
//! region pass `S` through untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, ConvParams, ConvSlot, ParamStore};
use crate::tensor::Mask;
use crate::trimap::{Label, Trimap};

/// Which of the module's convolutions share weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Query features double as values; key, query and self convolutions are distinct.
    #[default]
    SharedQv,
    /// One convolution serves as key, query and self.
    AllShared,
    /// Independent key, query, value and self convolutions.
    AllSeparate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TamConfig {
    pub window: usize,
    /// Neighbor frame offsets relative to the center frame. Empty disables aggregation.
    pub offsets: Vec<i32>,
    pub weight_mode: WeightMode,
    pub channels: usize,
    /// Divide logits by `sqrt(channels)`. Off by default: the affinity is a plain dot product.
    pub scale_logits: bool,
}

impl Default for TamConfig {
    fn default() -> Self {
        Self {
            window: 7,
            offsets: vec![-1, 1],
            weight_mode: WeightMode::SharedQv,
            channels: 16,
            scale_logits: false,
        }
    }
}

impl TamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "tam.window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("tam.channels must be positive".into()));
        }
        for (i, &o) in self.offsets.iter().enumerate() {
            if o == 0 {
                return Err(Error::Config("tam.offsets must be nonzero".into()));
            }
            if self.offsets[..i].contains(&o) {
                return Err(Error::Config(format!("tam.offsets repeats {o}")));
            }
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        !self.offsets.is_empty()
    }

    fn logit_scale(&self) -> f64 {
        if self.scale_logits {
            1.0 / (self.channels as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Convolution slots of the module. Under [`WeightMode::AllShared`] all three
/// slots are the same parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TamParams {
    pub key: ConvSlot,
    pub query: ConvSlot,
    pub self_conv: ConvSlot,
    /// Only present under [`WeightMode::AllSeparate`].
    pub value: Option<ConvSlot>,
}

impl TamParams {
    /// Registers 3x3 `C -> C` convolutions under `{prefix}.key`, `.query`, `.self` (and `.value`).
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: &TamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.channels;
        let mut conv = |name: &str, rng: &mut R| {
            ConvSlot::register(
                store,
                &format!("{prefix}.{name}"),
                ConvParams::init(c, c, 3, 1, rng)?,
            )
        };
        Ok(match config.weight_mode {
            WeightMode::AllShared => {
                let shared = conv("key", rng)?;
                Self {
                    key: shared,
                    query: shared,
                    self_conv: shared,
                    value: None,
                }
            }
            WeightMode::SharedQv => Self {
                key: conv("key", rng)?,
                query: conv("query", rng)?,
                self_conv: conv("self", rng)?,
                value: None,
            },
            WeightMode::AllSeparate => Self {
                key: conv("key", rng)?,
                query: conv("query", rng)?,
                self_conv: conv("self", rng)?,
                value: Some(conv("value", rng)?),
            },
        })
    }

    /// Role name -> stored parameter prefix, for the checkpoint header.
    pub fn aliases(&self, store: &ParamStore) -> Vec<(String, String)> {
        let prefix = |s: &ConvSlot| {
            let name = store.name(s.kernel);
            name.strip_suffix(".weight").unwrap_or(name).to_string()
        };
        let mut roles = vec![
            ("key".to_string(), prefix(&self.key)),
            ("query".to_string(), prefix(&self.query)),
            ("self".to_string(), prefix(&self.self_conv)),
        ];
        if let Some(v) = &self.value {
            roles.push(("value".to_string(), prefix(v)));
        }
        roles
    }
}

/// Unknown-region cells at feature resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UrMask {
    height: usize,
    width: usize,
    grid: Vec<bool>,
    centers: Vec<(usize, usize)>,
}

impl UrMask {
    pub fn from_grid(height: usize, width: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "ur_mask",
                left: vec![height, width],
                right: vec![grid.len()],
            });
        }
        let centers = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .filter(|&(y, x)| grid[y * width + x])
            .collect();
        Ok(Self {
            height,
            width,
            grid,
            centers,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.width + x]
    }

    /// True cells in row-major order.
    pub fn centers(&self) -> &[(usize, usize)] {
        &self.centers
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn to_mask(&self) -> Mask {
        Mask::new(vec![self.height, self.width], self.grid.clone()).expect("dims")
    }
}

/// Output stride of the aggregation site's allowed values.
pub const ALLOWED_STRIDES: [usize; 3] = [4, 8, 16];

/// Cell `(y, x)` is unknown iff any pixel of its `os x os` block is unknown.
/// Sizes not divisible by `os` are padded by edge replication.
pub fn downsample_trimap(trimap: &Trimap, os: usize) -> Result<UrMask> {
    if !ALLOWED_STRIDES.contains(&os) {
        return Err(invalid(
            "downsample_trimap",
            format!("output stride must be 4, 8 or 16, got {os}"),
        ));
    }
    let (h, w) = (trimap.height(), trimap.width());
    let (fh, fw) = (h.div_ceil(os), w.div_ceil(os));
    let mut grid = vec![false; fh * fw];
    for cy in 0..fh {
        for cx in 0..fw {
            'block: for dy in 0..os {
                for dx in 0..os {
                    let y = (cy * os + dy).min(h - 1);
                    let x = (cx * os + dx).min(w - 1);
                    if trimap.get(y, x) == Label::Unknown {
                        grid[cy * fw + cx] = true;
                        break 'block;
                    }
                }
            }
        }
    }
    UrMask::from_grid(fh, fw, grid)
}

/// Window affinities of one neighbor frame.
#[derive(Clone, Debug)]
pub struct Affinity {
    /// Softmax weights `[M, W²]`.
    pub weights: Var,
    /// Raw dot products `[M, W²]`, the inputs of the target-affinity loss.
    pub logits: Var,
    pub valid: Mask,
    /// Gathered query features `[M, W², C]`.
    pub patches: Var,
}

/// Window affinities between `key` and `query` maps at every mask center.
pub fn affinity(
    g: &mut Graph,
    key: Var,
    query: Var,
    mask: &UrMask,
    window: usize,
    scale: f64,
) -> Result<Affinity> {
    if g.shape(key) != g.shape(query) {
        return Err(Error::ShapeMismatch {
            op: "affinity",
            left: g.shape(key).to_vec(),
            right: g.shape(query).to_vec(),
        });
    }
    let centers = mask.centers();
    let (patches, valid) = g.gather_patches(query, centers, window)?;
    let keys = g.gather_points(key, centers)?;
    let logits = g.row_dot(keys, patches, scale)?;
    let weights = g.masked_softmax(logits, &valid)?;
    Ok(Affinity {
        weights,
        logits,
        valid,
        patches,
    })
}

/// `F̂(i) = S(i) + Σ_f Σ_j A_f(i,j) U_f(i,j)` on the mask, `S(i)` elsewhere.
///
/// `parts` holds `(weights [M,W²], values [M,W²,C])` per neighbor.
pub fn aggregate(g: &mut Graph, s: Var, parts: &[(Var, Var)], mask: &UrMask) -> Result<Var> {
    let m = mask.centers().len();
    let mut modulated = Vec::with_capacity(parts.len());
    for &(weights, values) in parts {
        if g.shape(weights).first() != Some(&m) || g.shape(values).first() != Some(&m) {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                left: vec![m],
                right: g.shape(weights).to_vec(),
            });
        }
        modulated.push(g.weighted_sum(weights, values)?);
    }
    g.scatter_add(s, &modulated, mask.centers())
}

/// Logits and validity of one neighbor, kept for the target-affinity loss.
#[derive(Clone, Debug)]
pub struct OffsetLogits {
    pub offset: i32,
    pub logits: Var,
    pub valid: Mask,
}

#[derive(Clone, Debug)]
pub struct TamOutput {
    pub fused: Var,
    pub per_offset: Vec<OffsetLogits>,
}

/// Full module: convolutions per weight mode, affinities per offset, aggregation.
///
/// `neighbors` maps each configured offset to that frame's input features.
pub fn tam_forward(
    g: &mut Graph,
    bound: &Bound,
    params: &TamParams,
    config: &TamConfig,
    center: Var,
    neighbors: &[(i32, Var)],
    mask: &UrMask,
) -> Result<TamOutput> {
    let s = params.self_conv.apply(g, bound, center)?;
    if !config.enabled() || mask.is_empty() {
        return Ok(TamOutput {
            fused: s,
            per_offset: Vec::new(),
        });
    }
    let (_, fh, fw) = g.value(center).dims3()?;
    if (fh, fw) != (mask.height(), mask.width()) {
        return Err(Error::ShapeMismatch {
            op: "tam_forward",
            left: g.shape(center).to_vec(),
            right: vec![mask.height(), mask.width()],
        });
    }
    let key = params.key.apply(g, bound, center)?;
    let mut parts = Vec::with_capacity(config.offsets.len());
    let mut per_offset = Vec::with_capacity(config.offsets.len());
    for &offset in &config.offsets {
        let features = neighbors
            .iter()
            .find(|(o, _)| *o == offset)
            .map(|&(_, v)| v)
            .ok_or(Error::MissingOffset(offset))?;
        let query = params.query.apply(g, bound, features)?;
        let aff = affinity(g, key, query, mask, config.window, config.logit_scale())?;
        let values = match &params.value {
            Some(vconv) => {
                let v = vconv.apply(g, bound, features)?;
                g.gather_patches(v, mask.centers(), config.window)?.0
            }
            None => aff.patches,
        };
        parts.push((aff.weights, values));
        per_offset.push(OffsetLogits {
            offset,
            logits: aff.logits,
            valid: aff.valid,
        });
    }
    let fused = aggregate(g, s, &parts, mask)?;
    Ok(TamOutput { fused, per_offset })
}
