//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Finite-difference stencil; both are central.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. Fourth-order accurate, so a
    /// larger `h` can be used on smooth functions, which cuts roundoff.
    FourPoint,
}

/// Outcome of a multi-input check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Checks the gradient of the scalar function `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(grad_check_many(f, std::slice::from_ref(point), eps, Stencil::TwoPoint, None)?.max_rel_err)
}

/// Checks `f` jointly over several inputs. With `sample = Some((k, seed))` only
/// `k` coordinates per input (chosen by seed) are perturbed.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor],
    eps: f64,
    stencil: Stencil,
    sample_per_input: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarSeed(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(sample_per_input.map_or(0, |(_, s)| s));
    let mut work: Vec<Tensor> = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for input in 0..points.len() {
        let n = points[input].len();
        let coords: Vec<usize> = match sample_per_input {
            Some((k, _)) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = points[input].data()[i];
            let mut at = |k: f64| -> Result<f64> {
                work[input].data_mut()[i] = orig + k * eps;
                eval(&work)
            };
            let numeric = match stencil {
                Stencil::TwoPoint => (at(1.0)? - at(-1.0)?) / (2.0 * eps),
                Stencil::FourPoint => {
                    (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * eps)
                }
            };
            work[input].data_mut()[i] = orig;
            let err = relative_error(analytic[input].data()[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((input, i));
            }
        }
    }
    Ok(report)
}
