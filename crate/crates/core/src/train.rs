//! Minibatch training with best-on-validation parameter retention.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowDataset;
use crate::error::{AmdError, Result};
use crate::loss::{balance_loss, evaluate_metrics, pred_loss, total_loss, Metrics};
use crate::model::AmdModel;
use crate::optim::{clip_grad_norm, Adam};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Stream ids carved out of the training seed.
const NOISE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's minibatches.
    pub train_loss: f64,
    /// Mean prediction loss over the epoch's minibatches.
    pub train_mse: f64,
    pub val: Metrics,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val: Metrics,
    pub epochs: Vec<EpochLog>,
    /// Total loss of every minibatch in order.
    pub loss_curve: Vec<f64>,
    /// 1-based epoch whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_val: Metrics,
    /// Gate-noise generator state after the last step.
    pub rng: ChaCha8Rng,
}

/// Forward-only metrics in evaluation mode (no gate noise).
pub fn evaluate<F: Scalar>(model: &AmdModel<F>, data: &WindowDataset<'_>, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(AmdError::data("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<(f64, f64, usize)> {
            let (x, y) = data.batch::<F>(chunk)?;
            let (y_hat, _) = model.predict(&x)?;
            let m = evaluate_metrics(y_hat.data(), y.data())?;
            let n = y.len();
            Ok((m.mse * n as f64, m.mae * n as f64, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (se, ae, n) = parts
        .into_iter()
        .fold((0.0, 0.0, 0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

/// Predictions for every window, as `[N, T, C]` and gates `[N, C, m]`.
pub fn predict_all<F: Scalar>(
    model: &AmdModel<F>,
    data: &WindowDataset<'_>,
    batch_size: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (x, _) = data.batch::<F>(chunk)?;
            model.predict(&x)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut ys, mut gs) = (Vec::new(), Vec::new());
    for (y, g) in parts {
        ys.extend_from_slice(y.data());
        gs.extend_from_slice(g.data());
    }
    let c = &model.config;
    let n = data.len();
    Ok((
        Tensor::new(vec![n, c.pred_len, c.channels], ys)?,
        Tensor::new(vec![n, c.channels, c.ams.num_predictors], gs)?,
    ))
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters. `on_epoch` sees each epoch's log as it completes.
pub fn train<F: Scalar>(
    model: &mut AmdModel<F>,
    train_data: &WindowDataset<'_>,
    val_data: &WindowDataset<'_>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train_data.is_empty() || val_data.is_empty() {
        return Err(AmdError::data("training and validation sets must be non-empty"));
    }
    let cfg = model.config.clone();
    let tc = &cfg.train;
    for (name, ds) in [("training", train_data), ("validation", val_data)] {
        if ds.seq_len != cfg.seq_len || ds.pred_len != cfg.pred_len || ds.channels() != cfg.channels {
            return Err(AmdError::data(format!(
                "{name} windows are {}x{} over {} channels, model expects {}x{} over {}",
                ds.seq_len,
                ds.pred_len,
                ds.channels(),
                cfg.seq_len,
                cfg.pred_len,
                cfg.channels
            )));
        }
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut opt = Adam::<F>::from_config(tc);

    let initial_val = evaluate(model, val_data, tc.batch_size)?;
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut best_params = model.params.clone();
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut loss_curve = Vec::new();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut mse_sum, mut count) = (0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(tc.batch_size).enumerate() {
            let (x, y) = train_data.batch::<F>(chunk)?;
            let (total, pred, mut grads) = {
                let mut g = Graph::new();
                let params = model.params.bind(&mut g);
                let xv = g.leaf(&x, false);
                let yv = g.leaf(&y, false);
                let out = model.forward_with(&mut g, &params, xv, &mut noise_rng, true)?;
                let pl = pred_loss(&mut g, out.y_hat, yv)?;
                let bl = balance_loss(&mut g, out.gates, cfg.loss.eps, cfg.loss.balance)?;
                let tl = total_loss(&mut g, pl, bl, &cfg.loss)
                    .map_err(|_| AmdError::NonFiniteLoss { epoch, batch })?;
                let total = g.value(tl).item()?.as_f64();
                let pred = g.value(pl).item()?.as_f64();
                if !total.is_finite() {
                    return Err(AmdError::NonFiniteLoss { epoch, batch });
                }
                g.backward(tl)?;
                let grads: Vec<Option<Tensor<F>>> = params.iter().map(|&p| g.take_grad(p)).collect();
                (total, pred, grads)
            };
            if let Some(max) = tc.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            opt.apply(&mut model.params, &grads)?;
            loss_curve.push(total);
            loss_sum += total * chunk.len() as f64;
            mse_sum += pred * chunk.len() as f64;
            count += chunk.len();
        }
        let val = evaluate(model, val_data, tc.batch_size)?;
        if val.mse < best_val.mse {
            best_val = val;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / count as f64,
            train_mse: mse_sum / count as f64,
            val,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6} train mse {:.6} val mse {:.6}",
            log.train_loss,
            log.train_mse,
            log.val.mse
        );
        on_epoch(&log);
        epochs.push(log);
    }
    model.params = best_params;
    Ok(TrainReport {
        initial_val,
        epochs,
        loss_curve,
        best_epoch,
        best_val,
        rng: noise_rng,
    })
}
