//! The finite-difference check suite: every op, the full module, each loss and
//! a small end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, Stencil};
use crate::losses::{
    affinity_loss, image_matting_loss, temporal_coherence_loss, AffinityTargetConfig,
    ImageLossVariant, MattingTarget,
};
use crate::model::{build_model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::synth::{gen_clip, ClipSpec};
use crate::tam::{downsample_trimap, tam_forward, TamConfig, TamParams, UrMask, WeightMode};
use crate::tensor::{Mask, Tensor};
use crate::train::{sample_loss, TrainConfig, TrainSample};
use crate::trimap::{dilate_trimap, Label, Trimap};

/// Tolerance for smooth ops.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for ops with kinks, composite blocks and losses.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end model.
pub const MODEL_TOL: f64 = 1e-3;

/// A power of two, so perturbing dyadic points is exact.
const EPS: f64 = 1.0 / (1u64 << 20) as f64;
/// Step and stencil for kink-free functions.
const SMOOTH_STEP: (f64, Stencil) = (1.0 / (1u64 << 10) as f64, Stencil::FourPoint);
/// The model has ReLU and L1 kinks at arbitrary points, so its step stays small.
const MODEL_STEP: (f64, Stencil) = (1.0 / (1u64 << 18) as f64, Stencil::FourPoint);

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub passed: bool,
}

/// Odd multiple of 2^-9 in `(lo, hi)`.
///
/// On dyadic points, linear ops and L1 terms evaluate exactly at `x ± EPS`. Gradients
/// that cancel to exactly zero (one pixel feeding two L1 terms with opposite
/// coefficients) then give an exactly zero finite difference instead of roundoff,
/// which a relative error would score as a failure.
fn dyadic(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let k = rng.gen_range((lo * 256.0) as i64..(hi * 256.0) as i64);
    (2 * k + 1) as f64 / 512.0
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| dyadic(rng, -1.0, 1.0))
}

/// Odd multiples of 2^-9 in `(0, 1)`.
fn unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| dyadic(rng, 0.0, 1.0))
}

/// Even multiples of 2^-9 in `(0, 1)`, never equal to a [`unit`] value.
fn unit_even(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(1..256) as f64 / 256.0)
}

/// Values bounded away from zero so kinks are never straddled by `EPS`.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = dyadic(rng, 0.05, 1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ v` with a fixed random `w`, turning any op output into a scalar.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randn(g.shape(v), &mut rng));
    let m = g.mul(v, w)?;
    g.sum(m)
}

type CheckFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    f: CheckFn,
    points: Vec<Tensor>,
    tol: f64,
    sample: Option<usize>,
    step: (f64, Stencil),
}

fn case(
    name: &str,
    tol: f64,
    points: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        f: Box::new(f),
        points,
        tol,
        sample: None,
        // Smooth ops reach their tighter tolerance only via the higher-order stencil.
        step: if tol <= SMOOTH_TOL {
            SMOOTH_STEP
        } else {
            (EPS, Stencil::TwoPoint)
        },
    }
}

/// Unknown region of exactly half the pixels. With a power-of-two count the `1/N`
/// normalizations of the L1 terms are exact, so terms that cancel across separate
/// losses cancel bitwise too.
fn half_unknown(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let mut data = vec![false; h * w];
    for i in rand::seq::index::sample(rng, h * w, h * w / 2) {
        data[i] = true;
    }
    Mask::new(vec![h, w], data).expect("dims")
}

fn op_cases(rng: &mut ChaCha8Rng, trial: u64) -> Vec<Case> {
    let s = trial * 97;
    let mut cases = vec![
        case(
            "add",
            SMOOTH_TOL,
            vec![randn(&[2, 3, 3], rng), randn(&[2, 3, 3], rng)],
            move |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "sub",
            SMOOTH_TOL,
            vec![randn(&[2, 3, 3], rng), randn(&[2, 3, 3], rng)],
            move |g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "mul",
            SMOOTH_TOL,
            vec![randn(&[2, 3, 3], rng), randn(&[2, 3, 3], rng)],
            move |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "scale",
            SMOOTH_TOL,
            vec![randn(&[4, 3], rng)],
            move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, s)
            },
        ),
        case(
            "sigmoid",
            SMOOTH_TOL,
            vec![randn(&[2, 4, 4], rng)],
            move |g, v| {
                let y = g.sigmoid(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "relu",
            OP_TOL,
            vec![away_from_zero(&[2, 4, 4], rng)],
            move |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "leaky_relu",
            OP_TOL,
            vec![away_from_zero(&[2, 4, 4], rng)],
            move |g, v| {
                let y = g.leaky_relu(v[0], 0.1)?;
                project(g, y, s)
            },
        ),
        case(
            "abs",
            OP_TOL,
            vec![away_from_zero(&[2, 4, 4], rng)],
            move |g, v| {
                let y = g.abs(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "clamp01",
            OP_TOL,
            vec![Tensor::from_fn(&[2, 4, 4], |_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(0.05..0.95)
                } else {
                    rng.gen_range(1.05..1.5)
                }
            })],
            move |g, v| {
                let y = g.clamp01(v[0])?;
                project(g, y, s)
            },
        ),
        case("sum", SMOOTH_TOL, vec![randn(&[3, 4], rng)], |g, v| {
            g.sum(v[0])
        }),
        case("mean", SMOOTH_TOL, vec![randn(&[3, 4], rng)], |g, v| {
            g.mean(v[0])
        }),
        case(
            "conv2d",
            SMOOTH_TOL,
            vec![
                randn(&[3, 6, 5], rng),
                randn(&[4, 3, 3, 3], rng),
                randn(&[4], rng),
            ],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                project(g, y, s)
            },
        ),
        case(
            "conv2d_strided",
            SMOOTH_TOL,
            vec![
                randn(&[2, 7, 8], rng),
                randn(&[3, 2, 3, 3], rng),
                randn(&[3], rng),
            ],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                project(g, y, s)
            },
        ),
        case(
            "concat",
            SMOOTH_TOL,
            vec![randn(&[2, 3, 3], rng), randn(&[1, 3, 3], rng)],
            move |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                project(g, y, s)
            },
        ),
        case(
            "upsample2x",
            SMOOTH_TOL,
            vec![randn(&[2, 3, 4], rng)],
            move |g, v| {
                let y = g.upsample2x(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "avg_pool2",
            SMOOTH_TOL,
            vec![randn(&[2, 4, 6], rng)],
            move |g, v| {
                let y = g.avg_pool2(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "diff_x",
            SMOOTH_TOL,
            vec![randn(&[2, 4, 5], rng)],
            move |g, v| {
                let y = g.diff_x(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "diff_y",
            SMOOTH_TOL,
            vec![randn(&[2, 4, 5], rng)],
            move |g, v| {
                let y = g.diff_y(v[0])?;
                project(g, y, s)
            },
        ),
    ];

    // Attention ops on a 5x6 grid with border and interior centers.
    let centers: Vec<(usize, usize)> = vec![(0, 0), (2, 3), (4, 5), (1, 4)];
    let m = centers.len();
    let c2 = centers.clone();
    cases.push(case(
        "gather_patches",
        SMOOTH_TOL,
        vec![randn(&[3, 5, 6], rng)],
        move |g, v| {
            let (p, _) = g.gather_patches(v[0], &c2, 3)?;
            project(g, p, s)
        },
    ));
    let c2 = centers.clone();
    cases.push(case(
        "gather_points",
        SMOOTH_TOL,
        vec![randn(&[3, 5, 6], rng)],
        move |g, v| {
            let p = g.gather_points(v[0], &c2)?;
            project(g, p, s)
        },
    ));
    cases.push(case(
        "row_dot",
        SMOOTH_TOL,
        vec![randn(&[m, 3], rng), randn(&[m, 9, 3], rng)],
        move |g, v| {
            let y = g.row_dot(v[0], v[1], 0.7)?;
            project(g, y, s)
        },
    ));
    cases.push(case(
        "weighted_sum",
        SMOOTH_TOL,
        vec![randn(&[m, 9], rng), randn(&[m, 9, 3], rng)],
        move |g, v| {
            let y = g.weighted_sum(v[0], v[1])?;
            project(g, y, s)
        },
    ));
    let valid = Mask::new(
        vec![m, 9],
        (0..m * 9)
            .map(|i| i % 9 != 4 || i < 9)
            .map(|b| b || rng.gen_bool(0.3))
            .collect(),
    )
    .expect("dims");
    let v2 = valid.clone();
    cases.push(case(
        "masked_softmax",
        SMOOTH_TOL,
        vec![randn(&[m, 9], rng)],
        move |g, v| {
            let y = g.masked_softmax(v[0], &v2)?;
            project(g, y, s)
        },
    ));
    let c2 = centers.clone();
    cases.push(case(
        "scatter_add",
        SMOOTH_TOL,
        vec![
            randn(&[3, 5, 6], rng),
            randn(&[m, 3], rng),
            randn(&[m, 3], rng),
        ],
        move |g, v| {
            let y = g.scatter_add(v[0], &[v[1], v[2]], &c2)?;
            project(g, y, s)
        },
    ));
    let targets = Tensor::from_fn(&[m, 9], |_| if rng.gen_bool(0.5) { 0.8 } else { 0.0 });
    let v2 = valid.clone();
    cases.push(case(
        "bce_with_logits",
        SMOOTH_TOL,
        vec![randn(&[m, 9], rng)],
        move |g, v| g.bce_with_logits(v[0], &targets, &v2),
    ));
    cases
}

fn tam_cases(rng: &mut ChaCha8Rng, trial: u64) -> Vec<Case> {
    let mut out = Vec::new();
    for mode in [
        WeightMode::SharedQv,
        WeightMode::AllShared,
        WeightMode::AllSeparate,
    ] {
        let config = TamConfig {
            window: 3,
            channels: 3,
            weight_mode: mode,
            ..TamConfig::default()
        };
        let mut store = ParamStore::new();
        let params = TamParams::register(&mut store, "tam", &config, rng).expect("tam params");
        let (h, w) = (5, 6);
        let grid: Vec<bool> = (0..h * w).map(|i| i % 3 != 1).collect();
        let mask = UrMask::from_grid(h, w, grid).expect("dims");
        let n_params = store.len();
        let mut points: Vec<Tensor> = store.values().iter().map(|t| t.map(|v| v * 0.5)).collect();
        for _ in 0..3 {
            points.push(randn(&[3, h, w], rng));
        }
        let s = trial * 31 + mode as u64;
        let mut c = case(&format!("tam_{mode:?}"), OP_TOL, points, move |g, v| {
            let bound = Bound::from_vars(v[..n_params].to_vec());
            let (prev, center, next) = (v[n_params], v[n_params + 1], v[n_params + 2]);
            let y = tam_forward(
                g,
                &bound,
                &params,
                &config,
                center,
                &[(-1, prev), (1, next)],
                &mask,
            )?;
            let mut terms = vec![project(g, y.fused, s)?];
            for ol in &y.per_offset {
                terms.push(project(g, ol.logits, s + 7)?);
            }
            g.add_all(&terms)
        });
        // Convolutions, dot products and softmax only: no kinks.
        c.step = SMOOTH_STEP;
        out.push(c);
    }
    out
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (h, w) = (8, 8);
    let alpha = unit(&[1, h, w], rng);
    let fg = unit(&[3, h, w], rng);
    let bg = unit_even(&[3, h, w], rng);
    let image = crate::synth::composite(&fg, &bg, &alpha).expect("dims");
    let ur = half_unknown(h, w, rng);
    // Opposite parity to alpha (and bg to fg), so `pred - alpha` and `fg - bg` are
    // never zero. The compositing term then keeps every pixel's summed L1
    // coefficients off an exact cancellation, which would leave only roundoff.
    let pred = unit_even(&[1, h, w], rng);
    let mut cases = Vec::new();
    for variant in [
        ImageLossVariant::AlphaOnly,
        ImageLossVariant::DimStyle,
        ImageLossVariant::WithLaplacian,
    ] {
        let (alpha, image, fg, bg, ur) = (
            alpha.clone(),
            image.clone(),
            fg.clone(),
            bg.clone(),
            ur.clone(),
        );
        cases.push(case(
            &format!("image_loss_{variant:?}"),
            OP_TOL,
            vec![pred.clone()],
            move |g, v| {
                let target = MattingTarget {
                    alpha: &alpha,
                    image: &image,
                    fg: &fg,
                    bg: &bg,
                    ur: &ur,
                };
                Ok(image_matting_loss(g, v[0], &target, variant)?.var)
            },
        ));
    }
    let gts: Vec<Tensor> = (0..3).map(|_| unit(&[1, h, w], rng)).collect();
    let preds: Vec<Tensor> = gts.iter().map(|t| t.map(|a| a * 0.25 + 0.375)).collect();
    let masks: Vec<Mask> = (0..2).map(|_| half_unknown(h, w, rng)).collect();
    cases.push(case(
        "temporal_coherence_loss",
        OP_TOL,
        preds,
        move |g, v| {
            let pairs = [(v[0], v[1]), (v[1], v[2])];
            let gt_pairs = [(&gts[0], &gts[1]), (&gts[1], &gts[2])];
            let m: Vec<&Mask> = masks.iter().collect();
            Ok(temporal_coherence_loss(g, &pairs, &gt_pairs, &m)?.var)
        },
    ));
    let targets: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[4, 9], |_| if rng.gen_bool(0.5) { 0.8 } else { 0.0 }))
        .collect();
    let valid: Vec<Mask> = (0..2)
        .map(|_| Mask::new(vec![4, 9], (0..36).map(|_| rng.gen_bool(0.7)).collect()).expect("dims"))
        .collect();
    cases.push(case(
        "affinity_loss",
        OP_TOL,
        vec![randn(&[4, 9], rng), randn(&[4, 9], rng)],
        move |g, v| Ok(affinity_loss(g, v, &targets, &valid)?.var),
    ));
    cases
}

/// Width-4 model on a 16x16 five-frame window through the full training objective.
fn model_case(seed: u64, coords_per_param: usize) -> Result<Case> {
    let config = ModelConfig {
        width: 4,
        tam: TamConfig {
            channels: 4,
            window: 3,
            ..TamConfig::default()
        },
        image_loss: ImageLossVariant::DimStyle,
        seed,
    };
    let model = build_model(&config)?;
    let clip = gen_clip(&ClipSpec::random(16, 16, 5, 0.02, 1.0, seed + 5))?;
    let trimaps = clip
        .trimaps
        .iter()
        .map(|t| dilate_trimap(t, 5))
        .collect::<Result<Vec<_>>>()?;
    let sample = TrainSample { clip, trimaps };
    let train = TrainConfig {
        affinity: AffinityTargetConfig::default(),
        crop: 16,
        ..TrainConfig::default()
    };
    // Zero biases over dead inputs put ReLUs exactly on their kink; shift them off it.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let points: Vec<Tensor> = model
        .store
        .iter()
        .map(|(name, t)| {
            let mut t = t.clone();
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v += rng.gen_range(0.05..0.15) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                }
            }
            t
        })
        .collect();
    let mut c = case("model_width4", MODEL_TOL, points, move |g, v| {
        let bound = Bound::from_vars(v.to_vec());
        Ok(sample_loss(g, &model, &bound, &sample, &train)?.total)
    });
    c.sample = Some(coords_per_param);
    c.step = MODEL_STEP;
    Ok(c)
}

fn run(c: Case, seed: u64) -> Result<CheckOutcome> {
    let (eps, stencil) = c.step;
    let r = grad_check_many(&c.f, &c.points, eps, stencil, c.sample.map(|k| (k, seed)))?;
    Ok(CheckOutcome {
        passed: r.max_rel_err < c.tol,
        name: c.name,
        max_rel_err: r.max_rel_err,
        tolerance: c.tol,
        coords: r.coords_checked,
    })
}

/// Runs every check over `trials` random points per case; outcomes are the
/// per-case worst over trials.
pub fn run_suite(seed: u64, trials: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut merged: Vec<CheckOutcome> = Vec::new();
    for trial in 0..trials.max(1) as u64 {
        let mut cases = op_cases(&mut rng, trial);
        cases.extend(tam_cases(&mut rng, trial));
        cases.extend(loss_cases(&mut rng));
        for c in cases {
            let o = run(c, seed + trial)?;
            match merged.iter_mut().find(|m| m.name == o.name) {
                Some(m) => {
                    m.max_rel_err = m.max_rel_err.max(o.max_rel_err);
                    m.coords += o.coords;
                    m.passed &= o.passed;
                }
                None => merged.push(o),
            }
        }
    }
    merged.push(run(model_case(seed, 6)?, seed)?);
    // The downsampled mask must be nonempty for the model check to reach the module.
    debug_assert!(!downsample_trimap(&Trimap::uniform(16, 16, Label::Unknown), 8)?.is_empty());
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trial_passes() {
        let out = run_suite(3, 1).unwrap();
        for o in &out {
            assert!(
                o.passed,
                "{} failed: {:e} (tol {:e})",
                o.name, o.max_rel_err, o.tolerance
            );
        }
        assert!(out.iter().any(|o| o.name == "model_width4"));
    }
}
