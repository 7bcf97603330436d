//! Named parameter registry and the feedforward layers the blocks share.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{AmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensors keyed by unique dotted names, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AmdError::config(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let id = self.id(name)?;
        Some(self.get_mut(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Records every parameter as a trainable leaf; the result is indexed by
    /// [`ParamId`].
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    /// True when both stores hold bit-identical values under the same names.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weight and bias.
    KaimingUniform,
    Zeros,
}

/// `y = x W + b` applied to the last axis; `W` is stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<F> {
            match init {
                Init::Zeros => vec![F::zero(); n],
                Init::KaimingUniform => (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect(),
            }
        };
        let w = Tensor::new(vec![in_dim, out_dim], draw(in_dim * out_dim))?;
        let weight = store.register(format!("{prefix}.weight"), w)?;
        let bias = if bias {
            let b = Tensor::new(vec![out_dim], draw(out_dim))?;
            Some(store.register(format!("{prefix}.bias"), b)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, params: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, params[self.weight.index()])?;
        match self.bias {
            Some(b) => g.add(y, params[b.index()]),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// One linear layer, or two with GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub layers: Vec<Linear>,
}

impl FeedForward {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = match depth {
            1 => vec![Linear::new(store, &format!("{prefix}.fc1"), in_dim, out_dim, true, init, rng)?],
            2 => vec![
                Linear::new(store, &format!("{prefix}.fc1"), in_dim, hidden, true, init, rng)?,
                Linear::new(store, &format!("{prefix}.fc2"), hidden, out_dim, true, init, rng)?,
            ],
            d => return Err(AmdError::config(format!("feedforward depth must be 1 or 2, got {d}"))),
        };
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = layer.forward(g, params, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Sets the listed parameters to zero.
pub fn zero_params<F: Scalar>(store: &mut ParamStore<F>, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = F::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.register("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.register("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn kaiming_bounds_and_names() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ff = FeedForward::new(&mut s, "blk", 16, 8, 4, 2, Init::KaimingUniform, &mut rng).unwrap();
        assert_eq!(ff.params().len(), 4);
        assert_eq!(s.names(), &["blk.fc1.weight", "blk.fc1.bias", "blk.fc2.weight", "blk.fc2.bias"]);
        assert!(s.by_name("blk.fc1.weight").unwrap().data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(s.num_values(), 16 * 8 + 8 + 8 * 4 + 4);
    }

    #[test]
    fn linear_applies_to_last_axis() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut s, "l", 2, 1, true, Init::Zeros, &mut rng).unwrap();
        *s.get_mut(lin.weight) = Tensor::from_f64(&[2, 1], &[1.0, 10.0]).unwrap();
        *s.get_mut(lin.bias.unwrap()) = Tensor::from_f64(&[1], &[0.5]).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let x = g.constant(Tensor::from_f64(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        assert_eq!(g.value(y).data(), &[21.5, 43.5, 65.5, 87.5]);
    }
}
