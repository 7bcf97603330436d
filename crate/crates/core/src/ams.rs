//! Adaptive multi-predictor synthesis: a noisy top-k gate over `m`
//! feedforward predictors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{AmsConfig, MixtureMode, ModelConfig};
use crate::error::{AmdError, Result};
use crate::nn::{FeedForward, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Per entry, `true` when it is at least the k-th largest value. Ties at the
/// threshold are all marked.
pub fn topk_mask<F: Scalar>(u: &[F], k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > u.len() {
        return Err(AmdError::Contract(format!("top-k needs 1 <= k <= {}, got {k}", u.len())));
    }
    let mut sorted = u.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let vk = sorted[k - 1];
    Ok(u.iter().map(|&v| v >= vk).collect())
}

/// `alpha * exp(u) - 1` on the top-k entries, `alpha * ln(u + 1)` elsewhere.
pub fn topk_scale<F: Scalar>(u: &[F], k: usize, alpha: F) -> Result<Vec<F>> {
    let mask = topk_mask(u, k)?;
    Ok(u
        .iter()
        .zip(mask)
        .map(|(&v, top)| if top { alpha * v.exp() - F::one() } else { alpha * v.ln_1p() })
        .collect())
}

/// Indices of the `k` largest entries, largest first; ties keep the lower
/// index first.
pub fn topk_indices<F: Scalar>(u: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[b].partial_cmp(&u[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone)]
pub struct Selector {
    pub decomp: FeedForward,
    pub w_noise: ParamId,
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub noise: bool,
}

impl Selector {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        seq_len: usize,
        cfg: &AmsConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let m = cfg.num_predictors;
        let decomp = FeedForward::new(
            store,
            &format!("{prefix}.decomp"),
            seq_len,
            cfg.selector_hidden,
            m,
            2,
            Init::KaimingUniform,
            rng,
        )?;
        let w_noise = store.register(format!("{prefix}.w_noise"), Tensor::zeros(&[m, m]))?;
        Ok(Self {
            decomp,
            w_noise,
            m,
            k: cfg.top_k,
            alpha: cfg.alpha,
            noise: cfg.noise,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.decomp.params();
        ids.push(self.w_noise);
        ids
    }

    /// `u: [.., L] -> S: [.., m]`. Noise is drawn from `rng` only when
    /// `training` and noise are both on.
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        params: &[Var],
        u: Var,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let d = self.decomp.forward(g, params, u)?;
        let q = if self.noise && training {
            let shape = g.shape(d).to_vec();
            let n: usize = shape.iter().product();
            let psi: Vec<F> = (0..n).map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect();
            let psi = g.constant(Tensor::new(shape, psi)?);
            let dw = g.matmul(d, params[self.w_noise.index()])?;
            let sp = g.softplus(dw);
            let noise = g.mul(psi, sp)?;
            g.add(d, noise)?
        } else {
            d
        };
        let p = g.softmax(q)?;
        let scaled = self.topk_scale(g, p)?;
        g.softmax(scaled)
    }

    /// Graph form of [`topk_scale`] over the last axis; the branch choice is
    /// a constant mask.
    pub fn topk_scale<F: Scalar>(&self, g: &mut Graph<'_, F>, p: Var) -> Result<Var> {
        let shape = g.shape(p).to_vec();
        let mut top = Vec::with_capacity(g.value(p).len());
        for row in g.value(p).data().chunks(self.m) {
            top.extend(topk_mask(row, self.k)?.into_iter().map(|t| if t { F::one() } else { F::zero() }));
        }
        let rest: Vec<F> = top.iter().map(|&t| F::one() - t).collect();
        let top = g.constant(Tensor::new(shape.clone(), top)?);
        let rest = g.constant(Tensor::new(shape, rest)?);
        let alpha = F::of(self.alpha);
        let e = g.exp(p);
        let e = g.scale(e, alpha);
        let e = g.shift(e, -F::one());
        let l = g.shift(p, F::one());
        let l = g.ln(l);
        let l = g.scale(l, alpha);
        let a = g.mul(e, top)?;
        let b = g.mul(l, rest)?;
        g.add(a, b)
    }
}

#[derive(Debug, Clone)]
pub struct Ams {
    pub selector: Selector,
    pub predictors: Vec<FeedForward>,
    pub mode: MixtureMode,
    pub pred_len: usize,
}

impl Ams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let a = &cfg.ams;
        if a.top_k == 0 || a.top_k > a.num_predictors {
            return Err(AmdError::config(format!(
                "top_k must be in 1..={}, got {}",
                a.num_predictors, a.top_k
            )));
        }
        let selector = Selector::new(store, &format!("{prefix}.selector"), cfg.seq_len, a, rng)?;
        let predictors = (0..a.num_predictors)
            .map(|j| {
                FeedForward::new(
                    store,
                    &format!("{prefix}.predictor{j}"),
                    cfg.seq_len,
                    a.hidden,
                    cfg.pred_len,
                    2,
                    Init::KaimingUniform,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            selector,
            predictors,
            mode: a.mode,
            pred_len: cfg.pred_len,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.selector.params();
        ids.extend(self.predictors.iter().flat_map(FeedForward::params));
        ids
    }

    /// Stacks every predictor's output on a new last axis: `[.., T, m]`.
    pub fn predict_all<F: Scalar>(&self, g: &mut Graph<'_, F>, params: &[Var], v: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.predictors.len());
        for p in &self.predictors {
            let y = p.forward(g, params, v)?;
            let mut s = g.shape(y).to_vec();
            s.push(1);
            outs.push(g.reshape(y, &s)?);
        }
        let axis = g.shape(outs[0]).len() - 1;
        g.concat(&outs, axis)
    }

    /// `u, v: [.., L] -> (y: [.., T], S: [.., m])`.
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        params: &[Var],
        u: Var,
        v: Var,
        rng: &mut R,
        training: bool,
    ) -> Result<(Var, Var)> {
        let s = self.selector.forward(g, params, u, rng, training)?;
        let preds = self.predict_all(g, params, v)?;
        let y = self.mix(g, preds, s)?;
        Ok((y, s))
    }

    /// Combines `preds: [.., T, m]` under the gate `s: [.., m]`.
    pub fn mix<F: Scalar>(&self, g: &mut Graph<'_, F>, preds: Var, s: Var) -> Result<Var> {
        let m = self.predictors.len();
        let pshape = g.shape(preds).to_vec();
        let axis = pshape.len() - 1;
        let t = pshape[axis - 1];
        let mut wshape = g.shape(s).to_vec();
        wshape.insert(wshape.len() - 1, 1);
        match self.mode {
            MixtureMode::Dense => {
                let w = g.reshape(s, &wshape)?;
                let prod = g.mul(preds, w)?;
                g.sum_axis(prod, axis, false)
            }
            MixtureMode::Average => {
                let total = g.sum_axis(preds, axis, false)?;
                Ok(g.scale(total, F::one() / F::of(m as f64)))
            }
            MixtureMode::Sparse => {
                let k = self.selector.k;
                let idx: Vec<usize> = g
                    .value(s)
                    .data()
                    .chunks(m)
                    .flat_map(|row| topk_indices(row, k))
                    .collect();
                let top = g.gather(s, &idx, k)?;
                let last = g.shape(top).len() - 1;
                let norm = g.sum_axis(top, last, true)?;
                let w = g.div(top, norm)?;
                let pidx: Vec<usize> = idx
                    .chunks(k)
                    .flat_map(|row| std::iter::repeat_n(row, t).flatten().copied())
                    .collect();
                let picked = g.gather(preds, &pidx, k)?;
                wshape[axis] = k;
                let w = g.reshape(w, &wshape)?;
                let prod = g.mul(picked, w)?;
                g.sum_axis(prod, axis, false)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_scale_example() {
        let out = topk_scale(&[0.5f64, 0.3, 0.2], 1, 1.0).unwrap();
        let expect = [0.648_721_270_7, 0.262_364_264_5, 0.182_321_556_8];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_with_k_equal_m_takes_exp_branch() {
        let u = [0.25; 4];
        let out = topk_scale(&u, 4, 1.0).unwrap();
        assert!(out.iter().all(|&v| v == 0.25f64.exp() - 1.0));
        assert!(topk_scale(&u, 0, 1.0).is_err());
        assert!(topk_scale(&u, 5, 1.0).is_err());
    }

    #[test]
    fn ties_at_threshold_are_all_top() {
        assert_eq!(topk_mask(&[0.4, 0.4, 0.2], 1).unwrap(), vec![true, true, false]);
        assert_eq!(topk_indices(&[0.1, 0.4, 0.4], 2), vec![1, 2]);
    }
}
