//! On-disk clip layout.
//!
//! ```text
//! clip/
//!   spec.json
//!   frames/0000.png   8-bit RGB composite
//!   alpha/0000.png    16-bit gray
//!   trimap/0000.png   8-bit gray, 0 / 128 / 255
//!   flow/0000.tnsr    f32 [2, H, W], (dy, dx) into the previous frame
//!   fg/0000.png       8-bit RGB
//!   bg/0000.png       8-bit RGB
//! ```

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::{ClipSpec, SyntheticClip};
use crate::error::{Error, Result};
use crate::metrics::FlowField;
use crate::tensor::{read_tnsr, write_tnsr, DType, Tensor};
use crate::trimap::Trimap;

pub fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:04}.{ext}")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as 8-bit RGB.
pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Format(format!(
            "expected an RGB tensor, got {c} channels"
        )));
    }
    let n = h * w;
    let d = t.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[n + i]), to_u8(d[2 * n + i])])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * n + i] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `[1, H, W]` alpha as 16-bit gray.
pub fn save_alpha(path: &Path, t: &Tensor) -> Result<()> {
    let (_, h, w) = t.dims3()?;
    let d = t.data();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u16(d[y as usize * w + x as usize])])
    });
    img.save(path)?;
    Ok(())
}

/// Reads an 8- or 16-bit gray alpha as `[1, H, W]`.
pub fn load_alpha(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(
        vec![1, h, w],
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    )
}

pub fn save_trimap(path: &Path, t: &Trimap) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(t.width() as u32, t.height() as u32, t.to_gray8())
            .expect("trimap dims");
    img.save(path)?;
    Ok(())
}

pub fn load_trimap(path: &Path) -> Result<Trimap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Trimap::from_gray8(h, w, img.as_raw())
}

pub fn save_flow(path: &Path, f: &FlowField) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_tnsr(&mut out, &f.0, DType::F32)
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    let (t, _) = read_tnsr(&mut BufReader::new(fs::File::open(path)?))?;
    if t.rank() != 3 || t.shape()[0] != 2 {
        return Err(Error::Format(format!(
            "flow must be [2,H,W], got {:?}",
            t.shape()
        )));
    }
    Ok(FlowField(t))
}

/// Sorted files with extension `ext` in `dir`.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes the full clip layout under `dir`, creating subdirectories.
pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    for sub in ["frames", "alpha", "trimap", "flow", "fg", "bg"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(
        dir.join("spec.json"),
        serde_json::to_string_pretty(&clip.spec)?,
    )?;
    for t in 0..clip.len() {
        let png = frame_name(t, "png");
        save_rgb(&dir.join("frames").join(&png), &clip.frames[t])?;
        save_alpha(&dir.join("alpha").join(&png), &clip.alphas[t])?;
        save_trimap(&dir.join("trimap").join(&png), &clip.trimaps[t])?;
        save_rgb(&dir.join("fg").join(&png), &clip.fg[t])?;
        save_rgb(&dir.join("bg").join(&png), &clip.bg[t])?;
        save_flow(
            &dir.join("flow").join(frame_name(t, "tnsr")),
            &clip.flows[t],
        )?;
    }
    Ok(())
}

/// Reads a clip written by [`write_clip`]. Region labels are taken from the trimaps.
pub fn read_clip(dir: &Path) -> Result<SyntheticClip> {
    let spec: ClipSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    let frames = list_files(&dir.join("frames"), "png")?
        .iter()
        .map(|p| load_rgb(p))
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len();
    let per_frame = |sub: &str, ext: &str| -> Result<Vec<PathBuf>> {
        let files = list_files(&dir.join(sub), ext)?;
        if files.len() != n {
            return Err(Error::Format(format!(
                "{sub}/ has {} files, frames/ has {n}",
                files.len()
            )));
        }
        Ok(files)
    };
    let alphas = per_frame("alpha", "png")?
        .iter()
        .map(|p| load_alpha(p))
        .collect::<Result<Vec<_>>>()?;
    let trimaps = per_frame("trimap", "png")?
        .iter()
        .map(|p| load_trimap(p))
        .collect::<Result<Vec<_>>>()?;
    let flows = per_frame("flow", "tnsr")?
        .iter()
        .map(|p| load_flow(p))
        .collect::<Result<Vec<_>>>()?;
    let fg = per_frame("fg", "png")?
        .iter()
        .map(|p| load_rgb(p))
        .collect::<Result<Vec<_>>>()?;
    let bg = per_frame("bg", "png")?
        .iter()
        .map(|p| load_rgb(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticClip {
        spec,
        frames,
        alphas,
        fg,
        bg,
        flows,
        region_labels: trimaps.clone(),
        trimaps,
        warnings: Vec::new(),
    })
}
