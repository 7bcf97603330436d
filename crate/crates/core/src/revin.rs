//! Reversible instance normalization.
//!
//! Statistics are computed per instance and channel over the time axis
//! (population variance) and treated as constants in the graph; only the
//! optional affine scale and bias are trainable.

use rand::Rng;

use crate::error::{AmdError, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Cached statistics from the last `norm` call, shaped like the input with
/// the time axis reduced to 1.
#[derive(Debug, Clone, Default)]
pub struct RevinState<F> {
    pub mean: Option<Tensor<F>>,
    pub std: Option<Tensor<F>>,
}

impl<F: Scalar> RevinState<F> {
    pub fn new() -> Self {
        Self { mean: None, std: None }
    }
}

#[derive(Debug, Clone)]
pub struct Revin {
    pub scale: Option<ParamId>,
    pub bias: Option<ParamId>,
    pub channels: usize,
    pub eps: f64,
}

/// Mean and floored population std over axis `ndim - 2`.
fn time_stats<F: Scalar>(x: &Tensor<F>, eps: F) -> Result<(Tensor<F>, Tensor<F>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(AmdError::shape(format!("revin needs [.., L, C], got {shape:?}")));
    }
    let nd = shape.len();
    let (len, c) = (shape[nd - 2], shape[nd - 1]);
    if len == 0 {
        return Err(AmdError::shape("revin needs at least one time step"));
    }
    let outer = x.len() / (len * c);
    let nf = F::of(len as f64);
    let d = x.data();
    let mut mean = vec![F::zero(); outer * c];
    let mut std = vec![F::zero(); outer * c];
    for o in 0..outer {
        for ch in 0..c {
            let at = |t: usize| d[(o * len + t) * c + ch];
            let m = (0..len).map(at).sum::<F>() / nf;
            let v = (0..len).map(|t| (at(t) - m).powi(2)).sum::<F>() / nf;
            mean[o * c + ch] = m;
            std[o * c + ch] = v.sqrt().max(eps);
        }
    }
    let mut stat_shape = shape.to_vec();
    stat_shape[nd - 2] = 1;
    Ok((Tensor::new(stat_shape.clone(), mean)?, Tensor::new(stat_shape, std)?))
}

impl Revin {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        channels: usize,
        affine: bool,
        eps: f64,
        _rng: &mut R,
    ) -> Result<Self> {
        let (scale, bias) = if affine {
            (
                Some(store.register(format!("{prefix}.affine_scale"), Tensor::ones(&[channels]))?),
                Some(store.register(format!("{prefix}.affine_bias"), Tensor::zeros(&[channels]))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            scale,
            bias,
            channels,
            eps,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.scale.into_iter().chain(self.bias).collect()
    }

    /// Normalizes `x: [.., L, C]` and caches its statistics in `state`.
    pub fn norm<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        params: &[Var],
        x: Var,
        state: &mut RevinState<F>,
    ) -> Result<Var> {
        let (mean, std) = time_stats(g.value(x), F::of(self.eps))?;
        let m = g.constant(mean.clone());
        let s = g.constant(std.clone());
        state.mean = Some(mean);
        state.std = Some(std);
        let centered = g.sub(x, m)?;
        let mut y = g.div(centered, s)?;
        if let (Some(w), Some(b)) = (self.scale, self.bias) {
            y = g.mul(y, params[w.index()])?;
            y = g.add(y, params[b.index()])?;
        }
        Ok(y)
    }

    /// Undoes the affine map, then restores the cached mean and std.
    pub fn denorm<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        params: &[Var],
        y: Var,
        state: &RevinState<F>,
    ) -> Result<Var> {
        let (Some(mean), Some(std)) = (&state.mean, &state.std) else {
            return Err(AmdError::Contract("revin denorm called before norm".into()));
        };
        let mut y = y;
        if let (Some(w), Some(b)) = (self.scale, self.bias) {
            y = g.sub(y, params[b.index()])?;
            y = g.div(y, params[w.index()])?;
        }
        let s = g.constant(std.clone());
        let m = g.constant(mean.clone());
        let y = g.mul(y, s)?;
        g.add(y, m)
    }

    /// Value-level normalization with the parameters in `store`.
    pub fn norm_values<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
        state: &mut RevinState<F>,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = self.norm(&mut g, &p, xv, state)?;
        Ok(g.value(y).clone())
    }

    pub fn denorm_values<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        y: &Tensor<F>,
        state: &RevinState<F>,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let yv = g.constant(y.clone());
        let out = self.denorm(&mut g, &p, yv, state)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(affine: bool) -> (Revin, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Revin::new(&mut store, "revin", 1, affine, 1e-5, &mut rng).unwrap();
        (r, store)
    }

    #[test]
    fn zscore_with_population_std() {
        let (r, store) = block(false);
        let x = Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let mut st = RevinState::new();
        let y = r.norm_values(&store, &x, &mut st).unwrap();
        let e = 1.224_744_871_391_589;
        assert!((y.data()[0] + e).abs() < 1e-12 && y.data()[1] == 0.0 && (y.data()[2] - e).abs() < 1e-12);
        assert_eq!(st.mean.as_ref().unwrap().data(), &[2.0]);
        assert!((st.std.as_ref().unwrap().data()[0] - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_hits_floor() {
        let (r, store) = block(false);
        let x = Tensor::from_f64(&[3, 1], &[5.0, 5.0, 5.0]).unwrap();
        let mut st = RevinState::new();
        let y = r.norm_values(&store, &x, &mut st).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(st.std.unwrap().data(), &[1e-5]);
    }

    #[test]
    fn affine_applies_after_normalization() {
        let (r, mut store) = block(true);
        *store.get_mut(r.scale.unwrap()) = Tensor::from_f64(&[1], &[2.0]).unwrap();
        *store.get_mut(r.bias.unwrap()) = Tensor::from_f64(&[1], &[1.0]).unwrap();
        // [-1, 0, 1] is already normalized: mean 0, population std sqrt(2/3)
        let x = Tensor::from_f64(&[3, 1], &[-1.0, 0.0, 1.0]).unwrap();
        let mut st = RevinState::new();
        let y = r.norm_values(&store, &x, &mut st).unwrap();
        let s =(2.0f64 / 3.0).sqrt();
        let expect = [-2.0 / s + 1.0, 1.0, 2.0 / s + 1.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // with unit-std input the mapping is exactly [-1, 1, 3]
        let unit = Tensor::from_f64(&[2, 1], &[-1.0, 1.0]).unwrap();
        let y = r.norm_values(&store, &unit, &mut st).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
    }

    #[test]
    fn denorm_uses_cached_stats() {
        let (r, store) = block(false);
        let st = RevinState {
            mean: Some(Tensor::from_f64(&[1, 1], &[10.0]).unwrap()),
            std: Some(Tensor::from_f64(&[1, 1], &[2.0]).unwrap()),
        };
        let y = Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap();
        assert_eq!(r.denorm_values(&store, &y, &st).unwrap().data(), &[10.0, 12.0]);
        assert!(r.denorm_values(&store, &y, &RevinState::new()).is_err());
    }
}
