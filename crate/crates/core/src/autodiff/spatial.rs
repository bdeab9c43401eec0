//! Operations over `[C, H, W]` feature maps: convolution, concatenation,
//! resampling and finite differences.

use super::{Graph, Op, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds the input into a `[C_in*k*k, H_out*W_out]` column matrix.
fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.pixels();
    let mut cols = vec![0.0; g.rows() * p];
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto the input layout.
fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.pixels();
    for ci in 0..g.c_in {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear 2x taps along one axis (half-pixel centers, edge clamped).
fn upsample_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let other = if o % 2 == 0 {
                i.saturating_sub(1)
            } else {
                (i + 1).min(n - 1)
            };
            [(i, 0.75), (other, 0.25)]
        })
        .collect()
}

impl Graph {
    /// Cross-correlation of `input [C_in,H,W]` with `kernel [C_out,C_in,k,k]` plus `bias [C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = self.value(input).dims3()?;
        let ks = self.shape(kernel).to_vec();
        let &[c_out, kc, k, k2] = ks.as_slice() else {
            return Err(invalid(
                "conv2d",
                format!("kernel must be rank 4, got {ks:?}"),
            ));
        };
        if kc != c_in || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape(input).to_vec(),
                right: ks,
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: ks,
                right: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape(input).to_vec(),
                right: ks,
            });
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let (rows, p) = (geom.rows(), geom.pixels());
        let wt = self.value(kernel).data();
        let bs = self.value(bias).data();
        let mut out = vec![0.0; c_out * p];
        for co in 0..c_out {
            let dst = &mut out[co * p..(co + 1) * p];
            dst.iter_mut().for_each(|v| *v = bs[co]);
            for r in 0..rows {
                let wv = wt[co * rows + r];
                let src = &cols[r * p..(r + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        )
    }

    pub(super) fn conv2d_backward(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        geom: &ConvGeom,
        cols: &[f64],
        g: &[f64],
    ) {
        let (rows, p) = (geom.rows(), geom.pixels());
        if let Some(s) = self.slot(bias) {
            for co in 0..geom.c_out {
                s[co] += g[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(s) = self.slot(kernel) {
            for co in 0..geom.c_out {
                let gr = &g[co * p..(co + 1) * p];
                for r in 0..rows {
                    let cr = &cols[r * p..(r + 1) * p];
                    s[co * rows + r] += gr.iter().zip(cr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        if self.requires_grad(input) {
            let wt = self.value(kernel).data().to_vec();
            let mut dcols = vec![0.0; rows * p];
            for r in 0..rows {
                let dst = &mut dcols[r * p..(r + 1) * p];
                for co in 0..geom.c_out {
                    let wv = wt[co * rows + r];
                    for (d, &gv) in dst.iter_mut().zip(&g[co * p..(co + 1) * p]) {
                        *d += wv * gv;
                    }
                }
            }
            let s = self.slot(input).expect("tracked");
            col2im(&dcols, geom, s);
        }
    }

    /// Concatenates `[C_i, H, W]` maps along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat", "no operands"))?;
        let (_, h, w) = self.value(first).dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![c_total, h, w], data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()))
    }

    pub(super) fn concat_backward(&mut self, parts: &[Var], g: &[f64]) {
        let mut offset = 0;
        for &p in parts {
            let n = self.value(p).len();
            if let Some(s) = self.slot(p) {
                for (d, &gv) in s.iter_mut().zip(&g[offset..offset + n]) {
                    *d += gv;
                }
            }
            offset += n;
        }
    }

    /// 2x bilinear upsampling with half-pixel alignment and clamped edges.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let src = self.value(a).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, yt) in ty.iter().enumerate() {
                for (ox, xt) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(iy, wy) in yt {
                        for &(ix, wx) in xt {
                            acc += wy * wx * plane[iy * w + ix];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.push("upsample2x", value, Op::Upsample2x(a))
    }

    pub(super) fn upsample_backward(&mut self, a: Var, g: &[f64]) {
        let (c, h, w) = self.value(a).dims3().expect("rank 3");
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        if let Some(s) = self.slot(a) {
            for ch in 0..c {
                for (oy, yt) in ty.iter().enumerate() {
                    for (ox, xt) in tx.iter().enumerate() {
                        let gv = g[(ch * oh + oy) * ow + ox];
                        for &(iy, wy) in yt {
                            for &(ix, wx) in xt {
                                s[(ch * h + iy) * w + ix] += wy * wx * gv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    out[(ch * oh + oy) * ow + ox] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.push("avg_pool2", value, Op::AvgPool2(a))
    }

    pub(super) fn avgpool_backward(&mut self, a: Var, g: &[f64]) {
        let (c, h, w) = self.value(a).dims3().expect("rank 3");
        let (oh, ow) = (h / 2, w / 2);
        if let Some(s) = self.slot(a) {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = 0.25 * g[(ch * oh + oy) * ow + ox];
                        let base = (ch * h + 2 * oy) * w + 2 * ox;
                        s[base] += gv;
                        s[base + 1] += gv;
                        s[base + w] += gv;
                        s[base + w + 1] += gv;
                    }
                }
            }
        }
    }

    /// Forward difference along x: `out[y,x] = in[y,x+1] - in[y,x]`, zero in the last column.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let value = diff(self.value(a), false)?;
        self.push("diff_x", value, Op::DiffX(a))
    }

    /// Forward difference along y, zero in the last row.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let value = diff(self.value(a), true)?;
        self.push("diff_y", value, Op::DiffY(a))
    }

    pub(super) fn diff_backward(&mut self, a: Var, g: &[f64], along_y: bool) {
        let (c, h, w) = self.value(a).dims3().expect("rank 3");
        if let Some(s) = self.slot(a) {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let i = (ch * h + y) * w + x;
                        let next = if along_y {
                            (y + 1 < h).then(|| i + w)
                        } else {
                            (x + 1 < w).then(|| i + 1)
                        };
                        if let Some(j) = next {
                            s[j] += g[i];
                            s[i] -= g[i];
                        }
                    }
                }
            }
        }
    }
}

fn diff(t: &Tensor, along_y: bool) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if along_y && y + 1 < h {
                    out[i] = src[i + w] - src[i];
                } else if !along_y && x + 1 < w {
                    out[i] = src[i + 1] - src[i];
                }
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_graph(input: Tensor, kernel: Tensor, bias: Tensor, pad: usize) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(input);
        let k = g.constant(kernel);
        let b = g.constant(bias);
        let y = g.conv2d(x, k, b, 1, pad).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_1x1_kernel() {
        let input = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let mut k = Tensor::zeros(&[2, 2, 1, 1]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let out = conv_graph(input.clone(), k, Tensor::zeros(&[2]), 0);
        assert_eq!(out, input);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let c = 1.7;
        let input = Tensor::full(&[1, 5, 6], c);
        let out = conv_graph(
            input,
            Tensor::full(&[1, 1, 3, 3], 1.0),
            Tensor::zeros(&[1]),
            1,
        );
        for y in 1..4 {
            for x in 1..5 {
                assert!((out.data()[y * 6 + x] - 9.0 * c).abs() < 1e-12);
            }
        }
        // Corners see four in-bounds pixels under zero padding.
        assert!((out.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn strided_output_size() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 16, 16]));
        let k = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[4, 8, 8]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let err = g.conv2d(x, k, b, 1, 1).unwrap_err().to_string();
        assert!(
            err.contains("[2, 4, 4]") && err.contains("[1, 3, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn upsample_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 2], 2.5));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(y), &[1, 6, 4]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn diff_of_ramp() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 3], |i| (i % 3) as f64));
        let dx = g.diff_x(x).unwrap();
        assert_eq!(g.value(dx).data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let dy = g.diff_y(x).unwrap();
        assert!(g.value(dy).data().iter().all(|&v| v == 0.0));
    }
}
