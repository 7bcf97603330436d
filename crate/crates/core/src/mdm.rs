//! Multi-scale decomposable mixing.
//!
//! The input is pooled into progressively coarser copies, then mixed back
//! coarse-to-fine through residual feedforwards. Operates on the last axis,
//! so every leading axis (batch, channel) shares the same weights.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{AmdError, Result};
use crate::nn::{FeedForward, Init, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Block means over consecutive runs of `d`; the trailing `len % d` values
/// are dropped.
pub fn avg_downsample<F: Scalar>(x: &[F], d: usize) -> Result<Vec<F>> {
    if d == 0 || x.len() < d {
        return Err(AmdError::shape(format!(
            "downsampling needs length >= rate, got length {} and rate {d}",
            x.len()
        )));
    }
    let inv = F::one() / F::of(d as f64);
    Ok(x.chunks_exact(d).map(|c| c.iter().copied().sum::<F>() * inv).collect())
}

#[derive(Debug, Clone)]
pub struct Mdm {
    /// `mix[i]` maps level `i + 1` onto level `i`.
    pub mix: Vec<FeedForward>,
    pub lengths: Vec<usize>,
    pub rate: usize,
}

impl Mdm {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let rate = cfg.mdm.downsample_rate;
        let min_len = rate.checked_pow(cfg.mdm.num_scales as u32).unwrap_or(usize::MAX);
        if cfg.seq_len < min_len {
            return Err(AmdError::config(format!(
                "mdm needs seq_len >= {min_len}, got {}",
                cfg.seq_len
            )));
        }
        let lengths = cfg.scale_lengths();
        let mut mix = Vec::with_capacity(lengths.len().saturating_sub(1));
        for i in 0..lengths.len() - 1 {
            let (src, dst) = (lengths[i + 1], lengths[i]);
            let name = format!("{prefix}.mix{i}");
            let ff = if cfg.mdm.linear {
                FeedForward::from_layers(vec![Linear::new(
                    store,
                    &format!("{name}.fc1"),
                    src,
                    dst,
                    false,
                    Init::KaimingUniform,
                    rng,
                )?])
            } else {
                FeedForward::new(store, &name, src, dst, dst, 2, Init::KaimingUniform, rng)?
            };
            mix.push(ff);
        }
        Ok(Self { mix, lengths, rate })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mix.iter().flat_map(FeedForward::params).collect()
    }

    /// `x: [.., L] -> [.., L]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, params: &[Var], x: Var) -> Result<Var> {
        let len = *g.shape(x).last().unwrap_or(&0);
        if len != self.lengths[0] {
            return Err(AmdError::shape(format!(
                "mdm built for length {}, got {len}",
                self.lengths[0]
            )));
        }
        let mut levels = vec![x];
        for _ in 1..self.lengths.len() {
            let prev = *levels.last().unwrap();
            levels.push(g.avg_pool(prev, self.rate)?);
        }
        let mut xi = *levels.last().unwrap();
        for i in (0..self.mix.len()).rev() {
            let mixed = self.mix[i].forward(g, params, xi)?;
            xi = g.add(levels[i], mixed)?;
        }
        Ok(xi)
    }
}
