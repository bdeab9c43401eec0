//! Windowed gather, masked softmax and the small contractions used by the
//! temporal aggregation module, plus a fused logits BCE.

use super::{sigmoid, Graph, Op, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Mask, Tensor};

/// Source pixel (flat `y * w + x`) for every `(center, offset)` slot, or `None`
/// when the offset falls outside the grid.
#[derive(Clone, Debug)]
pub(crate) struct PatchIndex {
    slots: Vec<Option<usize>>,
}

fn flat_centers(
    op: &'static str,
    centers: &[(usize, usize)],
    h: usize,
    w: usize,
) -> Result<Vec<usize>> {
    centers
        .iter()
        .map(|&(y, x)| {
            if y < h && x < w {
                Ok(y * w + x)
            } else {
                Err(invalid(
                    op,
                    format!("center ({y}, {x}) outside {h}x{w} grid"),
                ))
            }
        })
        .collect()
}

impl Graph {
    /// Extracts `window x window` patches around each center from `q [C,h,w]`.
    ///
    /// Returns patches `[M, W², C]` (row-major window offsets) and the validity
    /// mask `[M, W²]`; out-of-grid slots are zero.
    pub fn gather_patches(
        &mut self,
        q: Var,
        centers: &[(usize, usize)],
        window: usize,
    ) -> Result<(Var, Mask)> {
        if window.is_multiple_of(2) {
            return Err(invalid(
                "gather_patches",
                format!("window must be odd, got {window}"),
            ));
        }
        let (c, h, w) = self.value(q).dims3()?;
        flat_centers("gather_patches", centers, h, w)?;
        let r = (window / 2) as isize;
        let j_count = window * window;
        let mut slots = Vec::with_capacity(centers.len() * j_count);
        for &(cy, cx) in centers {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    let inside = y >= 0 && y < h as isize && x >= 0 && x < w as isize;
                    slots.push(inside.then(|| y as usize * w + x as usize));
                }
            }
        }
        let src = self.value(q).data();
        let hw = h * w;
        let mut out = vec![0.0; slots.len() * c];
        for (s, slot) in slots.iter().enumerate() {
            if let Some(p) = *slot {
                for ch in 0..c {
                    out[s * c + ch] = src[ch * hw + p];
                }
            }
        }
        let valid = Mask::new(
            vec![centers.len(), j_count],
            slots.iter().map(Option::is_some).collect(),
        )?;
        let value = Tensor::new(vec![centers.len(), j_count, c], out)?;
        let v = self.push(
            "gather_patches",
            value,
            Op::GatherPatches {
                input: q,
                index: PatchIndex { slots },
            },
        )?;
        Ok((v, valid))
    }

    pub(super) fn gather_patches_backward(&mut self, input: Var, index: &PatchIndex, g: &[f64]) {
        let (c, h, w) = self.value(input).dims3().expect("rank 3");
        let hw = h * w;
        if let Some(s) = self.slot(input) {
            for (k, slot) in index.slots.iter().enumerate() {
                if let Some(p) = *slot {
                    for ch in 0..c {
                        s[ch * hw + p] += g[k * c + ch];
                    }
                }
            }
        }
    }

    /// Features of `input [C,h,w]` at each center, as `[M, C]`.
    pub fn gather_points(&mut self, input: Var, centers: &[(usize, usize)]) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let flat = flat_centers("gather_points", centers, h, w)?;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(flat.len() * c);
        for &p in &flat {
            for ch in 0..c {
                out.push(src[ch * h * w + p]);
            }
        }
        let value = Tensor::new(vec![flat.len(), c], out)?;
        self.push(
            "gather_points",
            value,
            Op::GatherPoints {
                input,
                centers: flat,
            },
        )
    }

    pub(super) fn gather_points_backward(&mut self, input: Var, centers: &[usize], g: &[f64]) {
        let (c, h, w) = self.value(input).dims3().expect("rank 3");
        if let Some(s) = self.slot(input) {
            for (m, &p) in centers.iter().enumerate() {
                for ch in 0..c {
                    s[ch * h * w + p] += g[m * c + ch];
                }
            }
        }
    }

    /// `out[m, j] = scale * <keys[m], patches[m, j]>` for keys `[M,C]`, patches `[M,J,C]`.
    pub fn row_dot(&mut self, keys: Var, patches: Var, scale: f64) -> Result<Var> {
        let (m, c) = rank2(self.value(keys), "row_dot")?;
        let ps = self.shape(patches).to_vec();
        if ps.len() != 3 || ps[0] != m || ps[2] != c {
            return Err(Error::ShapeMismatch {
                op: "row_dot",
                left: self.shape(keys).to_vec(),
                right: ps,
            });
        }
        let j_count = ps[1];
        let (k, p) = (self.value(keys).data(), self.value(patches).data());
        let mut out = vec![0.0; m * j_count];
        for mi in 0..m {
            let key = &k[mi * c..(mi + 1) * c];
            for j in 0..j_count {
                let pat = &p[(mi * j_count + j) * c..(mi * j_count + j + 1) * c];
                out[mi * j_count + j] =
                    scale * key.iter().zip(pat).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![m, j_count], out)?;
        self.push(
            "row_dot",
            value,
            Op::RowDot {
                keys,
                patches,
                scale,
            },
        )
    }

    pub(super) fn row_dot_backward(&mut self, keys: Var, patches: Var, scale: f64, g: &[f64]) {
        let ps = self.shape(patches).to_vec();
        let (m, j_count, c) = (ps[0], ps[1], ps[2]);
        let k = self.value(keys).data().to_vec();
        let p = self.value(patches).data().to_vec();
        if let Some(s) = self.slot(keys) {
            for mi in 0..m {
                for j in 0..j_count {
                    let gv = scale * g[mi * j_count + j];
                    let base = (mi * j_count + j) * c;
                    for ch in 0..c {
                        s[mi * c + ch] += gv * p[base + ch];
                    }
                }
            }
        }
        if let Some(s) = self.slot(patches) {
            for mi in 0..m {
                for j in 0..j_count {
                    let gv = scale * g[mi * j_count + j];
                    let base = (mi * j_count + j) * c;
                    for ch in 0..c {
                        s[base + ch] += gv * k[mi * c + ch];
                    }
                }
            }
        }
    }

    /// `out[m, c] = Σ_j weights[m, j] * values[m, j, c]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (m, j_count) = rank2(self.value(weights), "weighted_sum")?;
        let vs = self.shape(values).to_vec();
        if vs.len() != 3 || vs[0] != m || vs[1] != j_count {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: self.shape(weights).to_vec(),
                right: vs,
            });
        }
        let c = vs[2];
        let (a, v) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![0.0; m * c];
        for mi in 0..m {
            let row = &mut out[mi * c..(mi + 1) * c];
            for j in 0..j_count {
                let wv = a[mi * j_count + j];
                let base = (mi * j_count + j) * c;
                for ch in 0..c {
                    row[ch] += wv * v[base + ch];
                }
            }
        }
        let value = Tensor::new(vec![m, c], out)?;
        self.push("weighted_sum", value, Op::WeightedSum { weights, values })
    }

    pub(super) fn weighted_sum_backward(&mut self, weights: Var, values: Var, g: &[f64]) {
        let vs = self.shape(values).to_vec();
        let (m, j_count, c) = (vs[0], vs[1], vs[2]);
        let a = self.value(weights).data().to_vec();
        let v = self.value(values).data().to_vec();
        if let Some(s) = self.slot(weights) {
            for mi in 0..m {
                for j in 0..j_count {
                    let base = (mi * j_count + j) * c;
                    s[mi * j_count + j] +=
                        (0..c).map(|ch| g[mi * c + ch] * v[base + ch]).sum::<f64>();
                }
            }
        }
        if let Some(s) = self.slot(values) {
            for mi in 0..m {
                for j in 0..j_count {
                    let wv = a[mi * j_count + j];
                    let base = (mi * j_count + j) * c;
                    for ch in 0..c {
                        s[base + ch] += wv * g[mi * c + ch];
                    }
                }
            }
        }
    }

    /// Row-wise softmax over valid entries; invalid entries are exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, valid: &Mask) -> Result<Var> {
        let (m, j_count) = rank2(self.value(logits), "masked_softmax")?;
        if valid.shape() != self.shape(logits) {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: self.shape(logits).to_vec(),
                right: valid.shape().to_vec(),
            });
        }
        let x = self.value(logits).data();
        let vm = valid.data();
        let mut out = vec![0.0; m * j_count];
        for mi in 0..m {
            let row = mi * j_count..(mi + 1) * j_count;
            let mut max = f64::NEG_INFINITY;
            for i in row.clone() {
                if vm[i] {
                    max = max.max(x[i]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(invalid(
                    "masked_softmax",
                    format!("row {mi} has no valid entries"),
                ));
            }
            let mut total = 0.0;
            for i in row.clone() {
                if vm[i] {
                    out[i] = (x[i] - max).exp();
                    total += out[i];
                }
            }
            for i in row {
                out[i] /= total;
            }
        }
        let value = Tensor::new(vec![m, j_count], out)?;
        self.push(
            "masked_softmax",
            value,
            Op::MaskedSoftmax {
                logits,
                valid: valid.clone(),
            },
        )
    }

    pub(super) fn masked_softmax_backward(
        &mut self,
        out: usize,
        logits: Var,
        valid: &Mask,
        g: &[f64],
    ) {
        let j_count = valid.shape()[1];
        let y = self.nodes[out].value.data().to_vec();
        let vm = valid.data().to_vec();
        if let Some(s) = self.slot(logits) {
            for (mi, row) in y.chunks(j_count).enumerate() {
                let base = mi * j_count;
                let dot: f64 = (0..j_count).map(|j| row[j] * g[base + j]).sum();
                for j in 0..j_count {
                    if vm[base + j] {
                        s[base + j] += row[j] * (g[base + j] - dot);
                    }
                }
            }
        }
    }

    /// Copies `base [C,h,w]` and adds each `[M,C]` value tensor at its center, in order.
    pub fn scatter_add(
        &mut self,
        base: Var,
        values: &[Var],
        centers: &[(usize, usize)],
    ) -> Result<Var> {
        let (c, h, w) = self.value(base).dims3()?;
        let flat = flat_centers("scatter_add", centers, h, w)?;
        for &v in values {
            if self.shape(v) != [flat.len(), c] {
                return Err(Error::ShapeMismatch {
                    op: "scatter_add",
                    left: vec![flat.len(), c],
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let mut out = self.value(base).data().to_vec();
        for &v in values {
            let src = self.value(v).data();
            for (mi, &p) in flat.iter().enumerate() {
                for ch in 0..c {
                    out[ch * h * w + p] += src[mi * c + ch];
                }
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        self.push(
            "scatter_add",
            value,
            Op::ScatterAdd {
                base,
                values: values.to_vec(),
                centers: flat,
            },
        )
    }

    pub(super) fn scatter_add_backward(
        &mut self,
        base: Var,
        values: &[Var],
        centers: &[usize],
        g: &[f64],
    ) {
        let (c, h, w) = self.value(base).dims3().expect("rank 3");
        if let Some(s) = self.slot(base) {
            for (d, &gv) in s.iter_mut().zip(g) {
                *d += gv;
            }
        }
        for &v in values {
            if let Some(s) = self.slot(v) {
                for (mi, &p) in centers.iter().enumerate() {
                    for ch in 0..c {
                        s[mi * c + ch] += g[ch * h * w + p];
                    }
                }
            }
        }
    }

    /// Mean over valid entries of `BCE(sigmoid(logits), targets)`; zero when nothing is valid.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, valid: &Mask) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if targets.shape() != shape.as_slice() || valid.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: shape,
                right: targets.shape().to_vec(),
            });
        }
        let n = valid.count();
        let x = self.value(logits).data();
        let mut total = 0.0;
        for ((&xi, &ti), &vi) in x.iter().zip(targets.data()).zip(valid.data()) {
            if vi {
                total += xi.max(0.0) - xi * ti + (-xi.abs()).exp().ln_1p();
            }
        }
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            "bce_with_logits",
            Tensor::scalar(value),
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
                valid: valid.clone(),
            },
        )
    }

    pub(super) fn bce_backward(&mut self, logits: Var, targets: &Tensor, valid: &Mask, g: &[f64]) {
        let n = valid.count();
        if n == 0 {
            return;
        }
        let scale = g[0] / n as f64;
        let x = self.value(logits).data().to_vec();
        if let Some(s) = self.slot(logits) {
            for (i, d) in s.iter_mut().enumerate() {
                if valid.data()[i] {
                    *d += scale * (sigmoid(x[i]) - targets.data()[i]);
                }
            }
        }
    }
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        other => Err(invalid(
            op,
            format!("expected rank-2 tensor, got {other:?}"),
        )),
    }
}
