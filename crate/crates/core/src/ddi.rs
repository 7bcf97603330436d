//! Dual dependency interaction over patches of the mixed `[B, C, L]` matrix.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{AmdError, Result};
use crate::nn::{FeedForward, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// `[.., L] -> [.., N, P]` with `N = L / P`.
pub fn patchify<F: Scalar>(u: &Tensor<F>, patch_len: usize) -> Result<Tensor<F>> {
    let shape = u.shape();
    let len = *shape.last().ok_or_else(|| AmdError::shape("patchify on a scalar"))?;
    if patch_len == 0 || len % patch_len != 0 {
        return Err(AmdError::shape(format!(
            "length {len} is not a multiple of patch length {patch_len}"
        )));
    }
    let mut out = shape[..shape.len() - 1].to_vec();
    out.extend([len / patch_len, patch_len]);
    u.clone().reshape(&out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(u: &Tensor<F>) -> Result<Tensor<F>> {
    let shape = u.shape();
    if shape.len() < 2 {
        return Err(AmdError::shape(format!("unpatchify needs [.., N, P], got {shape:?}")));
    }
    let nd = shape.len();
    let mut out = shape[..nd - 2].to_vec();
    out.push(shape[nd - 2] * shape[nd - 1]);
    u.clone().reshape(&out)
}

#[derive(Debug, Clone)]
pub struct DdiBlock {
    pub time_ff: FeedForward,
    pub chan_ff: FeedForward,
    pub ln_gamma: Option<ParamId>,
    pub ln_beta: Option<ParamId>,
    pub patch_len: usize,
    pub beta: f64,
}

impl DdiBlock {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (p, c, h, depth) = (cfg.ddi.patch_len, cfg.channels, cfg.d_model(), cfg.ddi.depth);
        if p == 0 || !cfg.seq_len.is_multiple_of(p) {
            return Err(AmdError::config(format!(
                "seq_len {} is not a multiple of patch_len {p}",
                cfg.seq_len
            )));
        }
        let time_ff = FeedForward::new(store, &format!("{prefix}.time"), p, h, p, depth, Init::KaimingUniform, rng)?;
        let chan_ff = FeedForward::new(store, &format!("{prefix}.channel"), c, h, c, depth, Init::KaimingUniform, rng)?;
        let (ln_gamma, ln_beta) = if cfg.ddi.layer_norm {
            (
                Some(store.register(format!("{prefix}.norm.gamma"), Tensor::ones(&[cfg.seq_len]))?),
                Some(store.register(format!("{prefix}.norm.beta"), Tensor::zeros(&[cfg.seq_len]))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            time_ff,
            chan_ff,
            ln_gamma,
            ln_beta,
            patch_len: p,
            beta: cfg.ddi.beta,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.time_ff.params();
        ids.extend(self.chan_ff.params());
        ids.extend(self.ln_gamma);
        ids.extend(self.ln_beta);
        ids
    }

    /// `u: [B, C, L] -> [B, C, L]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, params: &[Var], u: Var) -> Result<Var> {
        let shape = g.shape(u).to_vec();
        if shape.len() != 3 || !shape[2].is_multiple_of(self.patch_len) {
            return Err(AmdError::shape(format!(
                "ddi expects [B, C, L] with L a multiple of {}, got {shape:?}",
                self.patch_len
            )));
        }
        let u = match (self.ln_gamma, self.ln_beta) {
            (Some(gm), Some(bt)) => g.layer_norm(u, params[gm.index()], params[bt.index()], F::of(LN_EPS))?,
            _ => u,
        };
        let p = self.patch_len;
        let n = shape[2] / p;
        let mut out = Vec::with_capacity(n);
        out.push(g.slice(u, 2, 0, p)?);
        for j in 1..n {
            let up = g.slice(u, 2, j * p, (j + 1) * p)?;
            let t = self.time_ff.forward(g, params, out[j - 1])?;
            let z = g.add(up, t)?;
            let zt = g.transpose(z)?;
            let ct = self.chan_ff.forward(g, params, zt)?;
            let c = g.transpose(ct)?;
            let c = g.scale(c, F::of(self.beta));
            out.push(g.add(z, c)?);
        }
        if n == 1 {
            return Ok(out[0]);
        }
        g.concat(&out, 2)
    }
}

/// `n` stacked blocks, each feeding its output back in as the next input.
#[derive(Debug, Clone)]
pub struct Ddi {
    pub blocks: Vec<DdiBlock>,
}

impl Ddi {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..cfg.ddi.num_blocks)
            .map(|i| DdiBlock::new(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(DdiBlock::params).collect()
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, params: &[Var], u: Var) -> Result<Var> {
        self.blocks.iter().try_fold(u, |v, b| b.forward(g, params, v))
    }
}
