//! Trimaps: derivation from alpha and unknown-region dilation.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Mask, Tensor};

/// Alpha tolerance absorbing 8-bit quantization: half of one 8-bit step.
pub const ALPHA_EPS: f64 = 1.0 / 510.0;

/// Dilation kernels for narrow, medium and wide validation trimaps.
pub const VALIDATION_KERNELS: [usize; 3] = [11, 25, 41];

/// Largest dilation kernel accepted by [`dilate_trimap`].
pub const MAX_KERNEL: usize = 51;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Background,
    Unknown,
    Foreground,
}

impl Label {
    pub fn to_gray(self) -> u8 {
        match self {
            Label::Background => 0,
            Label::Unknown => 128,
            Label::Foreground => 255,
        }
    }

    pub fn from_gray(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Background),
            128 => Some(Label::Unknown),
            255 => Some(Label::Foreground),
            _ => None,
        }
    }

    /// Label of a single alpha value.
    pub fn of_alpha(a: f64) -> Self {
        if a >= 1.0 - ALPHA_EPS {
            Label::Foreground
        } else if a <= ALPHA_EPS {
            Label::Background
        } else {
            Label::Unknown
        }
    }
}

/// Per-pixel FR/BR/UR labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trimap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl Trimap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "trimap",
                left: vec![height, width],
                right: vec![labels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn uniform(height: usize, width: usize, label: Label) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `[H, W]` mask of unknown pixels.
    pub fn unknown_mask(&self) -> Mask {
        Mask::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l == Label::Unknown).collect(),
        )
        .expect("trimap dims")
    }

    /// `[3, H, W]` one-hot planes in (background, unknown, foreground) order.
    pub fn one_hot(&self) -> Tensor {
        let n = self.labels.len();
        let mut data = vec![0.0; 3 * n];
        for (i, l) in self.labels.iter().enumerate() {
            let c = match l {
                Label::Background => 0,
                Label::Unknown => 1,
                Label::Foreground => 2,
            };
            data[c * n + i] = 1.0;
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("trimap dims")
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.to_gray()).collect()
    }

    pub fn from_gray8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let labels = bytes
            .iter()
            .map(|&b| {
                Label::from_gray(b)
                    .ok_or_else(|| Error::Format(format!("trimap value {b} is not 0, 128 or 255")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, labels)
    }

    /// Applies a pixel-coordinate map `(y, x) -> source (y, x)` to build a new trimap.
    pub fn remap(
        &self,
        height: usize,
        width: usize,
        src: impl Fn(usize, usize) -> (usize, usize),
    ) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                labels.push(self.get(sy, sx));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }
}

fn alpha_dims(alpha: &Tensor) -> Result<(usize, usize)> {
    match alpha.shape() {
        &[1, h, w] | &[h, w] => Ok((h, w)),
        other => Err(invalid(
            "trimap_from_alpha",
            format!("alpha must be [1,H,W] or [H,W], got {other:?}"),
        )),
    }
}

/// FR where `α ≥ 1-ε`, BR where `α ≤ ε`, UR otherwise.
pub fn trimap_from_alpha(alpha: &Tensor) -> Result<Trimap> {
    let (h, w) = alpha_dims(alpha)?;
    Trimap::new(
        h,
        w,
        alpha.data().iter().map(|&a| Label::of_alpha(a)).collect(),
    )
}

/// Grows the unknown region by a `k x k` square structuring element.
///
/// Pixels reached by the dilation become UR regardless of their previous label.
pub fn dilate_trimap(trimap: &Trimap, k: usize) -> Result<Trimap> {
    if k.is_multiple_of(2) || k == 0 || k > MAX_KERNEL {
        return Err(invalid(
            "dilate_trimap",
            format!("kernel must be odd and in 1..={MAX_KERNEL}, got {k}"),
        ));
    }
    if k == 1 {
        return Ok(trimap.clone());
    }
    let (h, w) = (trimap.height, trimap.width);
    let r = k / 2;
    let src: Vec<bool> = trimap.labels.iter().map(|&l| l == Label::Unknown).collect();
    // Separable box max: rows, then columns.
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().any(|&v| v);
        }
    }
    let mut out = trimap.clone();
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            if (lo..=hi).any(|yy| rows[yy * w + x]) {
                out.labels[y * w + x] = Label::Unknown;
            }
        }
    }
    Ok(out)
}

/// Narrow, medium and wide trimaps (kernels 11, 25, 41) from ground-truth alpha.
pub fn validation_trimaps(alpha: &Tensor) -> Result<[Trimap; 3]> {
    let base = trimap_from_alpha(alpha)?;
    Ok([
        dilate_trimap(&base, VALIDATION_KERNELS[0])?,
        dilate_trimap(&base, VALIDATION_KERNELS[1])?,
        dilate_trimap(&base, VALIDATION_KERNELS[2])?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_dilate(t: &Trimap, k: usize) -> Trimap {
        let r = (k / 2) as isize;
        let mut out = t.clone();
        for y in 0..t.height() as isize {
            for x in 0..t.width() as isize {
                let mut hit = false;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < t.height() as isize && xx < t.width() as isize
                        {
                            hit |= t.get(yy as usize, xx as usize) == Label::Unknown;
                        }
                    }
                }
                if hit {
                    out.set(y as usize, x as usize, Label::Unknown);
                }
            }
        }
        out
    }

    fn is_subset(a: &Trimap, b: &Trimap) -> bool {
        a.labels()
            .iter()
            .zip(b.labels())
            .all(|(&la, &lb)| la != Label::Unknown || lb == Label::Unknown)
    }

    #[test]
    fn constant_alphas() {
        let one = trimap_from_alpha(&Tensor::full(&[1, 4, 5], 1.0)).unwrap();
        assert_eq!(one.count(Label::Foreground), 20);
        let zero = trimap_from_alpha(&Tensor::full(&[4, 5], 0.0)).unwrap();
        assert_eq!(zero.count(Label::Background), 20);
    }

    #[test]
    fn epsilon_thresholds() {
        assert_eq!(Label::of_alpha(1.0 / 600.0), Label::Background);
        assert_eq!(Label::of_alpha(1.0 - 1.0 / 600.0), Label::Foreground);
        assert_eq!(Label::of_alpha(0.01), Label::Unknown);
    }

    #[test]
    fn unit_kernel_is_identity_and_even_is_rejected() {
        let mut t = Trimap::uniform(5, 5, Label::Foreground);
        t.set(2, 2, Label::Unknown);
        assert_eq!(dilate_trimap(&t, 1).unwrap(), t);
        assert!(dilate_trimap(&t, 4).is_err());
        assert!(dilate_trimap(&t, 53).is_err());
    }

    #[test]
    fn single_pixel_grows_to_block() {
        let mut t = Trimap::uniform(7, 7, Label::Background);
        t.set(3, 3, Label::Unknown);
        let d = dilate_trimap(&t, 3).unwrap();
        assert_eq!(d, brute_dilate(&t, 3));
        assert_eq!(d.count(Label::Unknown), 9);
        for y in 2..=4 {
            for x in 2..=4 {
                assert_eq!(d.get(y, x), Label::Unknown);
            }
        }
    }

    #[test]
    fn gray_encoding() {
        let t = Trimap::new(
            1,
            3,
            vec![Label::Background, Label::Unknown, Label::Foreground],
        )
        .unwrap();
        assert_eq!(t.to_gray8(), vec![0, 128, 255]);
        assert_eq!(Trimap::from_gray8(1, 3, &[0, 128, 255]).unwrap(), t);
        assert!(Trimap::from_gray8(1, 1, &[7]).is_err());
    }

    #[test]
    fn constant_alpha_validation_trimaps_are_identical() {
        let [n, m, w] = validation_trimaps(&Tensor::full(&[1, 30, 30], 1.0)).unwrap();
        assert_eq!(n, m);
        assert_eq!(m, w);
        assert_eq!(n.count(Label::Foreground), 900);
    }

    fn arb_trimap() -> impl Strategy<Value = Trimap> {
        (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..3, h * w).prop_map(move |v| {
                let labels = v
                    .into_iter()
                    .map(|b| match b {
                        0 => Label::Background,
                        1 => Label::Unknown,
                        _ => Label::Foreground,
                    })
                    .collect();
                Trimap::new(h, w, labels).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn dilation_matches_brute_force(t in arb_trimap(), half in 0usize..6) {
            let k = 2 * half + 1;
            prop_assert_eq!(dilate_trimap(&t, k).unwrap(), brute_dilate(&t, k));
        }

        #[test]
        fn dilation_is_monotone(t in arb_trimap(), a in 0usize..8, b in 0usize..8) {
            let (k1, k2) = (2 * a.min(b) + 1, 2 * a.max(b) + 1);
            let d1 = dilate_trimap(&t, k1).unwrap();
            let d2 = dilate_trimap(&t, k2).unwrap();
            prop_assert!(is_subset(&t, &d1));
            prop_assert!(is_subset(&d1, &d2));
            // FR and BR only ever shrink.
            for (o, n) in t.labels().iter().zip(d2.labels()) {
                prop_assert!(n == o || *n == Label::Unknown);
            }
        }
    }
}
