//! Acceptance suite: one pass/fail line per criterion. Exits nonzero if any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tammatte_cli::commands::{cmd_train, hash_tree, TrainOutcome, ValMetrics, LOSSES};
use tammatte_cli::config::RunConfig;
use tammatte_core::checks::run_suite;
use tammatte_core::losses::LossWeights;
use tammatte_core::metrics::{evaluate, FlowField};
use tammatte_core::model::build_model;
use tammatte_core::params::ParamStore;
use tammatte_core::synth::{gen_clip, ClipSpec, SynthConfig};
use tammatte_core::tam::{affinity, tam_forward, TamParams, UrMask};
use tammatte_core::train::{thread_count, TrainConfig, Trainer};
use tammatte_core::trimap::{trimap_from_alpha, validation_trimaps, Label};
use tammatte_core::{Graph, Mask, Tensor};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradients() -> Verdict {
    let t = Instant::now();
    let outcomes = run_suite(0, 10).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<_> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name.clone())
        .collect();
    let worst = outcomes
        .iter()
        .map(|o| o.max_rel_err / o.tolerance)
        .fold(0.0, f64::max);
    check(
        failed.is_empty() && secs < 300.0,
        format!(
            "{} checks, worst err/tol {worst:.3}, {secs:.1}s, failed {failed:?}",
            outcomes.len()
        ),
    )
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn c2_affinity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = RunConfig::default().model.tam;
    let (mut worst, mut border, mut interior, mut bitwise) = (0.0f64, 0, 0, true);
    for i in 0..100 {
        let (c, h, w) = (
            rng.gen_range(1..6),
            rng.gen_range(4..14),
            rng.gen_range(4..14),
        );
        let cfg = tammatte_core::tam::TamConfig {
            channels: c,
            ..config.clone()
        };
        let mut store = ParamStore::new();
        let params =
            TamParams::register(&mut store, "tam", &cfg, &mut ChaCha8Rng::seed_from_u64(i))
                .unwrap();
        let mask =
            UrMask::from_grid(h, w, (0..h * w).map(|_| rng.gen_bool(0.4)).collect()).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let frames: Vec<_> = (0..3)
            .map(|_| g.constant(random(&[c, h, w], &mut rng)))
            .collect();
        let out = tam_forward(
            &mut g,
            &bound,
            &params,
            &cfg,
            frames[1],
            &[(-1, frames[0]), (1, frames[2])],
            &mask,
        )
        .map_err(|e| e.to_string())?;
        let s = params.self_conv.apply(&mut g, &bound, frames[1]).unwrap();
        let (f, sv) = (g.value(out.fused).data(), g.value(s).data());
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let k = (ch * h + y) * w + x;
                    if !mask.contains(y, x) && f[k].to_bits() != sv[k].to_bits() {
                        bitwise = false;
                    }
                }
            }
        }
        let key = params.key.apply(&mut g, &bound, frames[1]).unwrap();
        let query = params.query.apply(&mut g, &bound, frames[0]).unwrap();
        let aff =
            affinity(&mut g, key, query, &mask, cfg.window, 1.0).map_err(|e| e.to_string())?;
        let j = cfg.window * cfg.window;
        for (m, row) in g.value(aff.weights).data().chunks(j).enumerate() {
            let valid = &aff.valid.data()[m * j..(m + 1) * j];
            if valid.iter().all(|&v| v) {
                interior += 1;
            } else {
                border += 1;
            }
            let s: f64 = row
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(a, _)| a)
                .sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    check(
        worst <= 1e-6 && bitwise && border > 0 && interior > 0,
        format!("max |row sum - 1| = {worst:.2e} over {border} border / {interior} interior rows, self path bitwise outside UR: {bitwise}"),
    )
}

fn c3_constants() -> Verdict {
    let c = RunConfig::default();
    let tam = &c.model.tam;
    let aff = c.train.affinity;
    let w = c.train.weights;
    let ok = tam.window == 7
        && tam.offsets == [-1, 1]
        && aff.theta == 0.3
        && aff.smoothing == 0.2
        && (w.w_im, w.w_tg, w.w_af) == (0.1, 0.5, 0.25)
        && c.eval.kernels == [11, 25, 41];
    check(
        ok,
        format!(
            "W={} offsets={:?} theta={} s={} weights=({}, {}, {}) kernels={:?}",
            tam.window,
            tam.offsets,
            aff.theta,
            aff.smoothing,
            w.w_im,
            w.w_tg,
            w.w_af,
            c.eval.kernels
        ),
    )
}

fn oracle(
    pred: &[Tensor],
    gt: &[Tensor],
    ur: &[Mask],
    flow: &[FlowField],
    h: usize,
    w: usize,
) -> [f64; 5] {
    let s = tammatte_core::metrics::SCALES;
    let at = |v: &Tensor, y: usize, x: usize| v.data()[y * w + x];
    let (mut ssda, mut mse, mut sad, mut nf) = (0.0, 0.0, 0.0, 0);
    for t in 0..gt.len() {
        let (mut sq, mut ab, mut n) = (0.0, 0.0, 0);
        for y in 0..h {
            for x in 0..w {
                if ur[t].data()[y * w + x] {
                    let d = at(&pred[t], y, x) - at(&gt[t], y, x);
                    sq += d * d;
                    ab += d.abs();
                    n += 1;
                }
            }
        }
        if n > 0 {
            ssda += sq.sqrt();
            mse += sq / n as f64;
            sad += ab;
            nf += 1;
        }
    }
    let (mut dt, mut me, mut np) = (0.0, 0.0, 0);
    for t in 1..gt.len() {
        let (mut a, mut b, mut n) = (0.0, 0.0, 0);
        for y in 0..h {
            for x in 0..w {
                if !ur[t].data()[y * w + x] {
                    continue;
                }
                let (fy, fx) = flow[t].at(y, x);
                let sy = (y as f64 + fy).round().clamp(0.0, (h - 1) as f64) as usize;
                let sx = (x as f64 + fx).round().clamp(0.0, (w - 1) as f64) as usize;
                let d = (at(&pred[t], y, x) - at(&pred[t - 1], y, x))
                    - (at(&gt[t], y, x) - at(&gt[t - 1], y, x));
                a += d * d;
                let d = (at(&pred[t], y, x) - at(&pred[t - 1], sy, sx))
                    - (at(&gt[t], y, x) - at(&gt[t - 1], sy, sx));
                b += d * d;
                n += 1;
            }
        }
        if n > 0 {
            dt += a.sqrt();
            me += b / n as f64;
            np += 1;
        }
    }
    let (nf, np) = (nf.max(1) as f64, np.max(1) as f64);
    [
        ssda / nf * s.ssda,
        dt / np * s.dtssd,
        me / np * s.messdt,
        mse / nf * s.mse,
        sad / nf * s.sad,
    ]
}

fn c4_metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, t) = (8, 8, 4);
    let (mut worst, mut perfect) = (0.0f64, true);
    for _ in 0..50 {
        let mut plane = || Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..1.0));
        let pred: Vec<_> = (0..t).map(|_| plane()).collect();
        let gt: Vec<_> = (0..t).map(|_| plane()).collect();
        let ur: Vec<_> = (0..t)
            .map(|_| {
                Mask::new(vec![h, w], (0..h * w).map(|_| rng.gen_bool(0.5)).collect()).unwrap()
            })
            .collect();
        let flow: Vec<_> = (0..t)
            .map(|_| FlowField(Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-3.0..3.0))))
            .collect();
        let r = evaluate(&pred, &gt, &ur, Some(&flow)).map_err(|e| e.to_string())?;
        let got = [r.ssda, r.dtssd, r.messdt.unwrap_or(f64::NAN), r.mse, r.sad];
        for (a, b) in got.iter().zip(oracle(&pred, &gt, &ur, &flow, h, w)) {
            worst = worst.max((a - b).abs());
        }
        let z = evaluate(&gt, &gt, &ur, Some(&flow)).map_err(|e| e.to_string())?;
        perfect &= [z.ssda, z.dtssd, z.messdt.unwrap_or(1.0), z.mse, z.sad] == [0.0; 5];
    }
    check(
        worst < 1e-9 && perfect,
        format!("max |vectorized - oracle| = {worst:.2e} over 50 clips, perfect predictions zero: {perfect}"),
    )
}

fn train_run(
    seed: u64,
    tam: bool,
    weights: LossWeights,
    dir: &Path,
) -> Result<(ValMetrics, f64), String> {
    let mut config = RunConfig {
        seed,
        ..RunConfig::default()
    };
    if !tam {
        config.model.tam.offsets.clear();
    }
    config.train.weights = weights;
    config.propagate_seed();
    config.validate().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let TrainOutcome { val, .. } = cmd_train(&config, None, dir).map_err(|e| format!("{e:#}"))?;
    Ok((val.ok_or("no validation clips")?, t.elapsed().as_secs_f64()))
}

struct Ablation {
    base: ValMetrics,
    full: ValMetrics,
    secs: f64,
}

fn c5_ablation(runs: &[Ablation]) -> Verdict {
    let mut lines = Vec::new();
    let mut wins = 0;
    for (seed, r) in runs.iter().enumerate() {
        let (a, b) = (r.base.headline(), r.full.headline());
        let dt = (b.dtssd - a.dtssd) / a.dtssd;
        let sad = (b.sad - a.sad) / a.sad;
        let ok = dt <= -0.05 && sad <= 0.10 && r.secs < 45.0 * 60.0;
        wins += ok as usize;
        lines.push(format!(
            "seed {seed}: dtSSD {:.4} -> {:.4} ({:+.1}%), SAD {:.4} -> {:.4} ({:+.1}%), {:.0}s {}",
            a.dtssd,
            b.dtssd,
            100.0 * dt,
            a.sad,
            b.sad,
            100.0 * sad,
            r.secs,
            if ok { "ok" } else { "miss" }
        ));
    }
    let others: Vec<String> = runs
        .iter()
        .enumerate()
        .flat_map(|(seed, r)| {
            r.base
                .by_kernel
                .iter()
                .filter(|(k, _)| **k != r.base.kernel)
                .map(move |(k, a)| {
                    let b = &r.full.by_kernel[k];
                    format!(
                        "seed {seed} k{k}: dtSSD {:+.1}%, SAD {:+.1}%",
                        100.0 * (b.dtssd - a.dtssd) / a.dtssd,
                        100.0 * (b.sad - a.sad) / a.sad
                    )
                })
        })
        .collect();
    check(
        wins >= 2,
        format!(
            "{wins}/3 seeds at kernel {} on {} threads; {} (other kernels, not scored: {})",
            runs[0].base.kernel,
            thread_count(),
            lines.join("; "),
            others.join(", ")
        ),
    )
}

fn c6_affinity_loss(with: &ValMetrics, without: &ValMetrics) -> Verdict {
    let (a, b) = (
        without.affinity_bce.unwrap_or(f64::NAN),
        with.affinity_bce.unwrap_or(f64::NAN),
    );
    let rel = (a - b) / a;
    check(
        rel >= 0.20,
        format!(
            "validation BCE without L_af {a:.4}, with L_af {b:.4} ({:+.1}% reduction)",
            100.0 * rel
        ),
    )
}

fn c7_overfit() -> Verdict {
    let clips =
        vec![gen_clip(&ClipSpec::random(24, 24, 5, 0.0, 1.0, 7)).map_err(|e| e.to_string())?];
    let config = TrainConfig {
        steps: 50,
        batch_size: 2,
        crop: 16,
        max_dilation: 5,
        lr: 1e-2,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let model = build_model(&RunConfig::default().model).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(model, config).map_err(|e| e.to_string())?;
    let batch = t.sample_batch(&clips).map_err(|e| e.to_string())?;
    let mut totals = Vec::with_capacity(50);
    for _ in 0..50 {
        totals.push(t.step_on(&batch).map_err(|e| e.to_string())?.total);
    }
    let (first, last) = (totals[0], totals[49]);
    check(
        last <= 0.5 * first,
        format!(
            "total loss {first:.4} -> {last:.4} ({:.1}% reduction) in 50 steps",
            100.0 * (1.0 - last / first)
        ),
    )
}

fn c8_compositing() -> Verdict {
    let clips = SynthConfig::default()
        .generate(0)
        .map_err(|e| e.to_string())?;
    let (mut worst, mut labels_ok, mut nested) = (0.0f64, true, true);
    for (_, clip) in &clips {
        let n = clip.height() * clip.width();
        for t in 0..clip.len() {
            let (f, b, a) = (clip.fg[t].data(), clip.bg[t].data(), clip.alphas[t].data());
            for (i, &c) in clip.frames[t].data().iter().enumerate() {
                let al = a[i % n];
                worst = worst.max((c - (al * f[i] + (1.0 - al) * b[i])).abs());
            }
            labels_ok &= trimap_from_alpha(&clip.alphas[t]).map_err(|e| e.to_string())?
                == clip.region_labels[t];
            let [k11, k25, k41] = validation_trimaps(&clip.alphas[t]).map_err(|e| e.to_string())?;
            for ((x, y), z) in k11.labels().iter().zip(k25.labels()).zip(k41.labels()) {
                let u = |l: &Label| *l == Label::Unknown;
                nested &= (!u(x) || u(y)) && (!u(y) || u(z));
            }
        }
    }
    check(
        worst <= 1.0 / 255.0 + 1e-12 && labels_ok && nested,
        format!(
            "{} clips: max compositing error {:.3}/255, region labels reproduced: {labels_ok}, UR11 <= UR25 <= UR41: {nested}",
            clips.len(),
            worst * 255.0
        ),
    )
}

fn pipeline(dir: &Path) -> Result<(std::collections::BTreeMap<String, String>, String), String> {
    let bin = env!("CARGO_BIN_EXE_tam-matte");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let small = [
        "synth.train_clips=2",
        "synth.val_clips=1",
        "synth.frames=6",
        "synth.height=32",
        "synth.width=32",
        "train.steps=4",
        "train.batch_size=2",
        "train.crop=24",
        "seed=5",
    ];
    let sets: Vec<String> = small
        .iter()
        .flat_map(|kv| ["--set".to_string(), kv.to_string()])
        .collect();
    let run = |args: Vec<String>| -> Result<Vec<u8>, String> {
        let out = Command::new(bin)
            .args(&args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(out.stdout)
    };
    let (data, train, pred) = (dir.join("data"), dir.join("train"), dir.join("pred"));
    run([vec!["synth".into(), "--out".into(), s(&data)], sets.clone()].concat())?;
    run([
        vec![
            "train".into(),
            "--data".into(),
            s(&data),
            "--out".into(),
            s(&train),
        ],
        sets,
    ]
    .concat())?;
    let clip = data.join("val/clip_0000");
    run(vec![
        "infer".into(),
        "--ckpt".into(),
        s(&train.join("model.ckpt")),
        "--clip".into(),
        s(&clip),
        "--dilate".into(),
        "11".into(),
        "--out".into(),
        s(&pred),
    ])?;
    let report = run(vec![
        "eval".into(),
        "--pred".into(),
        s(&pred),
        "--gt".into(),
        s(&clip),
    ])?;
    std::fs::write(dir.join("eval.json"), &report).map_err(|e| e.to_string())?;
    let losses = std::fs::read_to_string(train.join(LOSSES)).map_err(|e| e.to_string())?;
    Ok((hash_tree(dir).map_err(|e| e.to_string())?, losses))
}

fn c9_determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ha, la) = pipeline(a.path())?;
    let (hb, lb) = pipeline(b.path())?;
    let differing: Vec<_> = ha
        .iter()
        .filter(|(k, v)| hb.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    check(
        ha.len() == hb.len() && differing.is_empty() && la == lb,
        format!(
            "{} files hashed per run, {} differ, loss records identical: {}",
            ha.len(),
            differing.len(),
            la == lb
        ),
    )
}

fn report(n: usize, name: &str, v: &Verdict) -> bool {
    match v {
        Ok(d) => println!("criterion {n} PASS {name}: {d}"),
        Err(d) => println!("criterion {n} FAIL {name}: {d}"),
    }
    v.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "gradient suite", &c1_gradients());
    ok &= report(2, "affinity normalization", &c2_affinity());
    ok &= report(3, "loss constants", &c3_constants());
    ok &= report(4, "metric oracle", &c4_metrics());

    let tmp = tempfile::tempdir().unwrap();
    let full_weights = LossWeights::default();
    let base_weights = LossWeights {
        w_im: full_weights.w_im,
        w_tg: 0.0,
        w_af: 0.0,
    };
    let mut ablation = Vec::new();
    let mut failure = None;
    for seed in 0..3u64 {
        let base = train_run(
            seed,
            false,
            base_weights,
            &tmp.path().join(format!("base{seed}")),
        );
        let full = train_run(
            seed,
            true,
            full_weights,
            &tmp.path().join(format!("full{seed}")),
        );
        match (base, full) {
            (Ok((base, s1)), Ok((full, s2))) => ablation.push(Ablation {
                base,
                full,
                secs: s1 + s2,
            }),
            (Err(e), _) | (_, Err(e)) => {
                failure = Some(e);
                break;
            }
        }
    }
    let c5 = match &failure {
        Some(e) => Err(format!("training failed: {e}")),
        None => c5_ablation(&ablation),
    };
    ok &= report(5, "directional ablation", &c5);

    let no_af = LossWeights {
        w_af: 0.0,
        ..full_weights
    };
    let c6 = match (
        ablation.first(),
        train_run(0, true, no_af, &tmp.path().join("noaf0")),
    ) {
        (Some(with), Ok((without, _))) => c6_affinity_loss(&with.full, &without),
        (None, _) => Err("no full-model run available".into()),
        (_, Err(e)) => Err(format!("training failed: {e}")),
    };
    ok &= report(6, "affinity-loss effect", &c6);
    ok &= report(7, "overfit sanity", &c7_overfit());
    ok &= report(8, "compositing and trimap round-trip", &c8_compositing());
    ok &= report(9, "determinism", &c9_determinism());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
