//! Command implementations. Each is a thin, validated wrapper over the core library.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tammatte_core::checks::{run_suite, CheckOutcome};
use tammatte_core::eval::{affinity_bce, evaluate_clip, MeanMetrics};
use tammatte_core::metrics::{evaluate, FlowField, MetricsReport};
use tammatte_core::model::{build_model, load_model, save_model, sidecar_path};
use tammatte_core::synth::io::{
    frame_name, list_files, load_alpha, load_flow, load_rgb, load_trimap, read_clip, save_alpha,
    save_rgb, write_clip,
};
use tammatte_core::synth::{composite, Split, SynthConfig, SyntheticClip};
use tammatte_core::train::{LossRecord, Trainer};
use tammatte_core::trimap::{dilate_trimap, Trimap};
use tammatte_core::Mask;

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSSES: &str = "losses.jsonl";
pub const EFFECTIVE_CONFIG: &str = "config.json";
pub const VAL_METRICS: &str = "val_metrics.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Relative path -> SHA-256 of every file under `dir`, sorted.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                out.insert(
                    rel.to_string_lossy().replace('\\', "/"),
                    sha256_file(&path)?,
                );
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub split: Split,
    /// Directory relative to the dataset root.
    pub path: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub warnings: Vec<String>,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub synth: SynthConfig,
    pub clips: Vec<ManifestClip>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.clips.iter().filter(|c| c.split == split).count()
    }
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    Ok(dir.is_dir() && fs::read_dir(dir)?.next().is_some())
}

/// Writes `train/` and `val/` clip directories plus `manifest.json` under `out`.
pub fn cmd_synth(config: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    if is_nonempty_dir(out)? {
        if !force {
            bail!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            );
        }
        for split in [Split::Train, Split::Val] {
            let d = out.join(split.name());
            if d.exists() {
                fs::remove_dir_all(&d).with_context(|| format!("removing {}", d.display()))?;
            }
        }
    }
    let clips = config.synth.generate(config.seed)?;
    let mut manifest = Manifest {
        seed: config.seed,
        synth: config.synth.clone(),
        clips: Vec::with_capacity(clips.len()),
    };
    let mut counts = [0usize; 2];
    for (split, clip) in &clips {
        let i = &mut counts[*split as usize];
        let rel = format!("{}/clip_{:04}", split.name(), *i);
        *i += 1;
        let dir = out.join(&rel);
        write_clip(&dir, clip).with_context(|| format!("writing {}", dir.display()))?;
        for w in &clip.warnings {
            log::warn!("{rel}: {w}");
        }
        manifest.clips.push(ManifestClip {
            split: *split,
            path: rel,
            frames: clip.len(),
            height: clip.height(),
            width: clip.width(),
            warnings: clip.warnings.clone(),
            files: hash_tree(&dir)?,
        });
    }
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Clips under `data/<split>/`, sorted by directory name.
pub fn read_split(data: &Path, split: Split) -> Result<Vec<SyntheticClip>> {
    let dir = data.join(split.name());
    let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| read_clip(d).with_context(|| format!("reading clip {}", d.display())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    /// Kernel of the headline numbers.
    pub kernel: usize,
    /// Mean metrics keyed by dilation kernel.
    pub by_kernel: BTreeMap<usize, MeanMetrics>,
    /// Mean BCE of the affinity logits against their targets; absent without TAM.
    pub affinity_bce: Option<f64>,
}

impl ValMetrics {
    pub fn headline(&self) -> &MeanMetrics {
        &self.by_kernel[&self.kernel]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    pub val: Option<ValMetrics>,
    pub checkpoint: PathBuf,
}

pub fn validation_metrics(
    trainer: &Trainer,
    val: &[SyntheticClip],
    config: &RunConfig,
) -> Result<ValMetrics> {
    let mut kernels = config.eval.kernels.clone();
    if !kernels.contains(&config.eval.kernel) {
        kernels.push(config.eval.kernel);
    }
    let mut by_kernel = BTreeMap::new();
    for k in kernels {
        let reports = val
            .iter()
            .map(|c| evaluate_clip(&trainer.model, c, k).map(|(_, r)| r))
            .collect::<tammatte_core::Result<Vec<_>>>()?;
        by_kernel.insert(k, MeanMetrics::from_reports(&reports));
    }
    let bces = val
        .iter()
        .map(|c| {
            affinity_bce(
                &trainer.model,
                c,
                config.eval.kernel,
                &config.train.affinity,
            )
        })
        .collect::<tammatte_core::Result<Vec<_>>>()?;
    let bces: Vec<f64> = bces.into_iter().flatten().collect();
    let affinity_bce = (!bces.is_empty()).then(|| bces.iter().sum::<f64>() / bces.len() as f64);
    Ok(ValMetrics {
        kernel: config.eval.kernel,
        by_kernel,
        affinity_bce,
    })
}

/// Trains on `data/train` (or freshly generated clips) and writes the run under `out`.
pub fn cmd_train(config: &RunConfig, data: Option<&Path>, out: &Path) -> Result<TrainOutcome> {
    let (train, val) = match data {
        Some(d) => (read_split(d, Split::Train)?, read_split(d, Split::Val)?),
        None => {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (split, clip) in config.synth.generate(config.seed)? {
                match split {
                    Split::Train => train.push(clip),
                    Split::Val => val.push(clip),
                }
            }
            (train, val)
        }
    };
    ensure!(!train.is_empty(), "no training clips found");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(EFFECTIVE_CONFIG), config.to_json()?)?;

    let model = build_model(&config.model)?;
    log::info!("model has {} parameters", model.store.num_scalars());
    let mut trainer = Trainer::new(model, config.train.clone())?;
    let mut log_file = BufWriter::new(fs::File::create(out.join(LOSSES))?);
    let mut records = Vec::with_capacity(config.train.steps);
    let every = (config.train.steps / 20).max(1);
    trainer.run(&train, |r| {
        writeln!(log_file, "{}", serde_json::to_string(r)?)?;
        if r.step % every == 0 {
            log::info!(
                "step {} lr {:.2e} total {:.4} (im {:.4} tc {:.4} af {:.4})",
                r.step,
                r.lr,
                r.total,
                r.l_im,
                r.l_tc,
                r.l_af
            );
        }
        records.push(r.clone());
        Ok(())
    })?;
    log_file.flush()?;

    let checkpoint = out.join(CHECKPOINT);
    save_model(&checkpoint, &trainer.model, trainer.step)?;
    let val_metrics = if val.is_empty() {
        None
    } else {
        let m = validation_metrics(&trainer, &val, config)?;
        fs::write(out.join(VAL_METRICS), serde_json::to_string_pretty(&m)?)?;
        Some(m)
    };
    Ok(TrainOutcome {
        records,
        val: val_metrics,
        checkpoint,
    })
}

fn load_trimaps(dir: &Path, dilate: Option<usize>) -> Result<Vec<Trimap>> {
    list_files(dir, "png")
        .with_context(|| format!("listing {}", dir.display()))?
        .iter()
        .map(|p| {
            let t = load_trimap(p).with_context(|| format!("reading trimap {}", p.display()))?;
            Ok(match dilate {
                Some(k) => dilate_trimap(&t, k)?,
                None => t,
            })
        })
        .collect()
}

/// Predicts alpha for `clip/frames` with `trimaps` (default `clip/trimap`) and writes `out/alpha/`.
pub fn cmd_infer(
    checkpoint: &Path,
    clip: &Path,
    trimap_dir: Option<&Path>,
    dilate: Option<usize>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    ensure!(
        sidecar_path(checkpoint).exists(),
        "checkpoint metadata {} is missing",
        sidecar_path(checkpoint).display()
    );
    let (model, _) =
        load_model(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let frames_dir = clip.join("frames");
    let frames = list_files(&frames_dir, "png")
        .with_context(|| format!("listing {}", frames_dir.display()))?
        .iter()
        .map(|p| load_rgb(p).with_context(|| format!("reading frame {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    ensure!(
        !frames.is_empty(),
        "{} holds no frames",
        frames_dir.display()
    );
    let tdir = trimap_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| clip.join("trimap"));
    let trimaps = load_trimaps(&tdir, dilate)?;
    ensure!(
        trimaps.len() == frames.len(),
        "{} has {} trimaps for {} frames",
        tdir.display(),
        trimaps.len(),
        frames.len()
    );
    let pred = model.infer_clip(&frames, &trimaps)?;
    let alpha_dir = out.join("alpha");
    fs::create_dir_all(&alpha_dir)?;
    let mut written = Vec::with_capacity(pred.len());
    for (t, a) in pred.iter().enumerate() {
        let p = alpha_dir.join(frame_name(t, "png"));
        save_alpha(&p, a)?;
        written.push(p);
    }
    Ok(written)
}

fn read_alphas(dir: &Path) -> Result<Vec<tammatte_core::Tensor>> {
    let dir = if dir.join("alpha").is_dir() {
        dir.join("alpha")
    } else {
        dir.to_path_buf()
    };
    list_files(&dir, "png")
        .with_context(|| format!("listing {}", dir.display()))?
        .iter()
        .map(|p| load_alpha(p).with_context(|| format!("reading alpha {}", p.display())))
        .collect()
}

/// Scores `pred` (an alpha directory or a clip directory) against the clip at `gt`.
/// The unknown region is the ground-truth trimap dilated by `kernel`.
pub fn cmd_eval(pred: &Path, gt: &Path, kernel: usize) -> Result<MetricsReport> {
    let pred_alpha = read_alphas(pred)?;
    let gt_alpha = read_alphas(gt)?;
    ensure!(
        pred_alpha.len() == gt_alpha.len(),
        "{} has {} frames, ground truth {} has {}",
        pred.display(),
        pred_alpha.len(),
        gt.display(),
        gt_alpha.len()
    );
    for (t, (p, g)) in pred_alpha.iter().zip(&gt_alpha).enumerate() {
        ensure!(
            p.shape() == g.shape(),
            "frame {t}: prediction is {:?}, ground truth is {:?}",
            p.shape(),
            g.shape()
        );
    }
    let trimaps = load_trimaps(&gt.join("trimap"), Some(kernel))?;
    ensure!(
        trimaps.len() == gt_alpha.len(),
        "{} has {} trimaps for {} frames",
        gt.join("trimap").display(),
        trimaps.len(),
        gt_alpha.len()
    );
    let masks: Vec<Mask> = trimaps.iter().map(Trimap::unknown_mask).collect();
    let flow_dir = gt.join("flow");
    let flows: Option<Vec<FlowField>> = if flow_dir.is_dir() {
        let flows = list_files(&flow_dir, "tnsr")?
            .iter()
            .map(|p| load_flow(p).with_context(|| format!("reading flow {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        (flows.len() == gt_alpha.len()).then_some(flows)
    } else {
        None
    };
    Ok(evaluate(&pred_alpha, &gt_alpha, &masks, flows.as_deref())?)
}

pub fn cmd_gradcheck(seed: u64, trials: usize) -> Result<Vec<CheckOutcome>> {
    Ok(run_suite(seed, trials)?)
}

/// `out = alpha * fg + (1 - alpha) * bg` for PNG inputs.
pub fn cmd_composite(fg: &Path, bg: &Path, alpha: &Path, out: &Path) -> Result<()> {
    let f = load_rgb(fg).with_context(|| format!("reading foreground {}", fg.display()))?;
    let b = load_rgb(bg).with_context(|| format!("reading background {}", bg.display()))?;
    let a = load_alpha(alpha).with_context(|| format!("reading alpha {}", alpha.display()))?;
    ensure!(
        f.shape() == b.shape(),
        "{} and {} differ in size",
        fg.display(),
        bg.display()
    );
    ensure!(
        a.shape()[1..] == f.shape()[1..],
        "{} does not match the size of {}",
        alpha.display(),
        fg.display()
    );
    save_rgb(out, &composite(&f, &b, &a)?)?;
    Ok(())
}
