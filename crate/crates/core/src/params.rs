//! Named parameter storage and convolution parameter initialization.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Concrete convolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in, k, k]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Fan-in scaled uniform kernel (`±sqrt(6 / fan_in)`), zero bias, "same" padding.
    pub fn init<R: Rng>(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(invalid(
                "conv_params",
                format!("kernel size must be odd, got {k}"),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv_params", "stride must be positive"));
        }
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let kernel = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.gen_range(-bound..bound));
        Ok(Self {
            kernel,
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding: (k - 1) / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a convolution whose kernel and bias live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSlot {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSlot {
    pub fn register(store: &mut ParamStore, name: &str, params: ConvParams) -> Result<Self> {
        Ok(Self {
            kernel: store.add(format!("{name}.weight"), params.kernel)?,
            bias: store.add(format!("{name}.bias"), params.bias)?,
            stride: params.stride,
            padding: params.padding,
        })
    }

    pub fn apply(&self, g: &mut Graph, bound: &Bound, input: Var) -> Result<Var> {
        g.conv2d(
            input,
            bound[self.kernel],
            bound[self.bias],
            self.stride,
            self.padding,
        )
    }

    pub fn to_params(&self, store: &ParamStore) -> ConvParams {
        ConvParams {
            kernel: store.get(self.kernel).clone(),
            bias: store.get(self.bias).clone(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(invalid(
                "param_store",
                format!("duplicate parameter `{name}`"),
            ));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Replaces every value, checking names and shapes against `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            let src = other.get(j);
            if src.shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    left: self.values[i].shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }

    /// Registers every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Registers every parameter as an untracked constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Gradients for every parameter after `g.backward`; untouched ones are zero.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph vars for a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps vars that stand for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ConvParams::init(4, 3, 3, 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = ConvParams::init(4, 3, 3, 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(a.kernel.data().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.padding, 1);
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(ConvParams::init(1, 1, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
    }
}
