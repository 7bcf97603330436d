//! The full forecaster: instance normalization, multi-scale mixing, dual
//! dependency interaction and the gated predictor mixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ams::Ams;
use crate::config::ModelConfig;
use crate::ddi::Ddi;
use crate::error::{AmdError, Result};
use crate::mdm::Mdm;
use crate::nn::{ParamId, ParamStore};
use crate::revin::{Revin, RevinState};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[B, T, C]` in the input's scale.
    pub y_hat: Var,
    /// `[B, C, m]` gate weights.
    pub gates: Var,
}

#[derive(Debug, Clone)]
pub struct AmdModel<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub revin: Revin,
    pub mdm: Option<Mdm>,
    pub ddi: Option<Ddi>,
    pub ams: Ams,
}

impl<F: Scalar> AmdModel<F> {
    /// Builds and initializes every block from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let revin = Revin::new(&mut params, "revin", config.channels, config.revin.affine, config.revin.eps, rng)?;
        let mdm = if config.mdm.enabled {
            Some(Mdm::new(&mut params, "mdm", &config, rng)?)
        } else {
            None
        };
        let ddi = if config.ddi.enabled {
            Some(Ddi::new(&mut params, "ddi", &config, rng)?)
        } else {
            None
        };
        let ams = Ams::new(&mut params, "ams", &config, rng)?;
        Ok(Self {
            config,
            params,
            revin,
            mdm,
            ddi,
            ams,
        })
    }

    /// Every parameter id grouped by block name.
    pub fn blocks(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut out = vec![("revin", self.revin.params())];
        if let Some(m) = &self.mdm {
            out.push(("mdm", m.params()));
        }
        if let Some(d) = &self.ddi {
            out.push(("ddi", d.params()));
        }
        out.push(("selector", self.ams.selector.params()));
        out.push((
            "predictors",
            self.ams.predictors.iter().flat_map(|p| p.params()).collect(),
        ));
        out
    }

    /// Records the forward pass for `x: [B, L, C]` using already-bound
    /// parameter handles.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        params: &[Var],
        x: Var,
        rng: &mut R,
        training: bool,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != c.seq_len || shape[2] != c.channels {
            return Err(AmdError::shape(format!(
                "model expects [batch, {}, {}], got {shape:?}",
                c.seq_len, c.channels
            )));
        }
        let mut state = RevinState::new();
        let xn = self.revin.norm(g, params, x, &mut state)?;
        let xt = g.transpose(xn)?;
        let u = match &self.mdm {
            Some(m) => m.forward(g, params, xt)?,
            None => xt,
        };
        let v = match &self.ddi {
            Some(d) => d.forward(g, params, u)?,
            None => u,
        };
        let (y, gates) = self.ams.forward(g, params, u, v, rng, training)?;
        let yt = g.transpose(y)?;
        let y_hat = self.revin.denorm(g, params, yt, &state)?;
        Ok(ForwardOutput { y_hat, gates })
    }

    /// Inference on a value batch; returns `(y_hat, gates)`.
    pub fn predict(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut g = Graph::new();
        let params = self.params.bind(&mut g);
        let xv = g.leaf(x, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_with(&mut g, &params, xv, &mut rng, false)?;
        Ok((g.value(out.y_hat).clone(), g.value(out.gates).clone()))
    }
}
