use std::ops::Range;
use std::path::Path;

use amd_core::checkpoint::{load_checkpoint, save_checkpoint, DataInfo, TrainingMeta};
use amd_core::config::{Ablation, MixtureMode, ModelConfig};
use amd_core::data::{
    gen_synthetic, load_csv, make_windows, standardize, write_csv, Partition, Series, SplitSpec, SynthSpec,
};
use amd_core::loss::{balance_loss, evaluate_metrics, pred_loss, total_loss, Metrics};
use amd_core::model::AmdModel;
use amd_core::tensor::{grad_check, Graph, Tensor, Var};
use amd_core::theory::{theorem1_bound_check, BoundCheckSpec};
use amd_core::train::{evaluate, predict_all, train, TrainReport};
use amd_core::{AmdError, Result};
use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use crate::run_config::{self, CsvSource, Run};
use crate::{Command, CsvOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Train,
    Val,
    Test,
    /// Every row of the file.
    All,
}

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train {
            config,
            preset,
            data,
            out,
            seed,
            csv,
        } => cmd_train(&config, preset.as_deref(), data.as_deref(), out.as_deref(), seed, &csv),
        Command::Evaluate {
            ckpt,
            data,
            horizon,
            partition,
            csv,
        } => cmd_evaluate(&ckpt, &data, &horizon, partition, &csv),
        Command::Predict { ckpt, input, out, csv } => cmd_predict(&ckpt, &input, &out, &csv),
        Command::Ablate {
            config,
            mode,
            preset,
            data,
            seed,
            csv,
        } => cmd_ablate(&config, &mode, preset.as_deref(), data.as_deref(), seed, &csv),
        Command::Gates {
            ckpt,
            data,
            out,
            stride,
            csv,
        } => cmd_gates(&ckpt, &data, &out, stride, &csv),
        Command::TheoremCheck {
            period,
            length,
            horizon,
            trials,
            seed,
            downsample_rate,
            depth,
        } => {
            let spec = BoundCheckSpec {
                period,
                length,
                horizon,
                trials,
                seed,
                downsample_rate,
                depth,
                zero_weights: false,
            };
            let report = theorem1_bound_check(&spec)?;
            print_json(&report)?;
            Ok(if report.passed { 0 } else { 3 })
        }
        Command::Gradcheck { full_model, seed } => cmd_gradcheck(full_model, seed),
        Command::Synth {
            kind,
            out,
            length,
            channels,
            period,
            amplitude,
            slope,
            noise,
            seed,
        } => {
            let spec = SynthSpec {
                kind: kind.parse()?,
                length,
                channels,
                period,
                amplitude,
                slope,
                noise,
                seed,
            };
            write_csv(&out, &gen_synthetic(&spec)?)?;
            Ok(0)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_csv(path: &Path, opts: &CsvOpts) -> Result<Series> {
    load_csv(path, !opts.no_header, opts.date_column)
}

fn csv_source(data: Option<&Path>, opts: &CsvOpts) -> Option<CsvSource> {
    data.map(|p| CsvSource {
        path: p.to_path_buf(),
        has_header: !opts.no_header,
        date_column: opts.date_column,
    })
}

fn resolve_run(
    config: &Path,
    preset: Option<&str>,
    data: Option<&Path>,
    seed: Option<u64>,
    csv: &CsvOpts,
) -> Result<Run> {
    let file = run_config::read(config)?;
    let mut run = run_config::resolve(&file, preset, csv_source(data, csv).as_ref())?;
    if let Some(s) = seed {
        run.model.train.seed = s;
    }
    Ok(run)
}

struct Trained {
    model: AmdModel<f64>,
    report: TrainReport,
    test: Option<Metrics>,
    info: DataInfo,
}

/// Standardizes on the training rows, trains, and scores the test partition
/// when it is long enough to hold a window.
fn fit(cfg: ModelConfig, split: SplitSpec, series: &Series) -> Result<Trained> {
    let total = series.len();
    let [train_rows, _, _] = split.partitions(total)?;
    let (z, standardizer) = standardize(series, train_rows)?;
    let (l, t) = (cfg.seq_len, cfg.pred_len);
    let train_ds = make_windows(&z, l, t, cfg.train.stride, split.span(total, l, Partition::Train)?)?;
    let val_ds = make_windows(&z, l, t, 1, split.span(total, l, Partition::Val)?)?;
    let seed = cfg.train.seed;
    let mut model = AmdModel::new(cfg, seed)?;
    let report = train(&mut model, &train_ds, &val_ds, |_| {})?;
    let test = match make_windows(&z, l, t, 1, split.span(total, l, Partition::Test)?) {
        Ok(ds) => Some(evaluate(&model, &ds, model.config.train.batch_size)?),
        Err(e) => {
            log::warn!("no test metrics: {e}");
            None
        }
    };
    let info = DataInfo {
        channel_names: series.channel_names.clone(),
        standardizer,
        split,
    };
    Ok(Trained {
        model,
        report,
        test,
        info,
    })
}

fn cmd_train(
    config: &Path,
    preset: Option<&str>,
    data: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    csv: &CsvOpts,
) -> Result<u8> {
    let run = resolve_run(config, preset, data, seed, csv)?;
    let fitted = fit(run.model, run.split, &run.series)?;
    let r = &fitted.report;
    if let Some(path) = out {
        let meta = TrainingMeta {
            epoch: r.best_epoch,
            best_val_mse: Some(r.best_val.mse),
            rng: Some(r.rng.clone()),
            data: Some(fitted.info.clone()),
        };
        save_checkpoint(&fitted.model, &meta, path)?;
        log::info!("checkpoint written to {}", path.display());
    }
    print_json(&json!({
        "config": fitted.model.config,
        "initial_val": r.initial_val,
        "epochs": r.epochs,
        "best_epoch": r.best_epoch,
        "best_val": r.best_val,
        "test": fitted.test,
        "checkpoint": out,
    }))?;
    Ok(0)
}

/// Loads a checkpoint and a CSV and standardizes the CSV the way the
/// training data was.
fn load_pair(ckpt: &Path, data: &Path, opts: &CsvOpts) -> Result<(AmdModel<f64>, TrainingMeta, Series)> {
    let (model, meta) = load_checkpoint::<f64>(ckpt)?;
    let raw = read_csv(data, opts)?;
    let c = model.config.channels;
    if raw.channels() != c {
        return Err(AmdError::data(format!(
            "checkpoint expects {c} channels but {} has {}",
            data.display(),
            raw.channels()
        )));
    }
    let series = match &meta.data {
        Some(info) => info.standardizer.transform(&raw)?,
        None => raw,
    };
    Ok((model, meta, series))
}

fn rows_for(partition: PartitionArg, meta: &TrainingMeta, total: usize, lookback: usize) -> Result<Range<usize>> {
    let p = match partition {
        PartitionArg::All => return Ok(0..total),
        PartitionArg::Train => Partition::Train,
        PartitionArg::Val => Partition::Val,
        PartitionArg::Test => Partition::Test,
    };
    match &meta.data {
        Some(info) => info.split.span(total, lookback, p),
        None => Err(AmdError::data(
            "checkpoint carries no split; pass --partition all",
        )),
    }
}

#[derive(Debug, Serialize)]
struct HorizonMetrics {
    horizon: usize,
    mse: f64,
    mae: f64,
}

fn cmd_evaluate(ckpt: &Path, data: &Path, horizons: &[usize], partition: PartitionArg, csv: &CsvOpts) -> Result<u8> {
    let (model, meta, series) = load_pair(ckpt, data, csv)?;
    let cfg = &model.config;
    let (l, t, c) = (cfg.seq_len, cfg.pred_len, cfg.channels);
    let horizons = if horizons.is_empty() { vec![t] } else { horizons.to_vec() };
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > t) {
        return Err(AmdError::config(format!("horizon {h} must be in 1..={t}")));
    }
    let rows = rows_for(partition, &meta, series.len(), l)?;
    let ds = make_windows(&series, l, t, 1, rows)?;
    let (y_hat, _) = predict_all(&model, &ds, cfg.train.batch_size)?;
    let mut results = Vec::with_capacity(horizons.len());
    for &h in &horizons {
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for i in 0..ds.len() {
            let (_, y) = ds.get(i);
            pred.extend_from_slice(&y_hat.data()[i * t * c..(i * t + h) * c]);
            truth.extend_from_slice(&y[..h * c]);
        }
        let m = evaluate_metrics(&pred, &truth)?;
        results.push(HorizonMetrics {
            horizon: h,
            mse: m.mse,
            mae: m.mae,
        });
    }
    print_json(&json!({
        "partition": format!("{partition:?}").to_lowercase(),
        "windows": ds.len(),
        "metrics": results,
    }))?;
    Ok(0)
}

fn cmd_predict(ckpt: &Path, input: &Path, out: &Path, csv: &CsvOpts) -> Result<u8> {
    let (model, meta, series) = load_pair(ckpt, input, csv)?;
    let cfg = &model.config;
    let (l, t, c) = (cfg.seq_len, cfg.pred_len, cfg.channels);
    if series.len() < l {
        return Err(AmdError::data(format!(
            "{} has {} rows, the look-back needs {l}",
            input.display(),
            series.len()
        )));
    }
    let start = series.len() - l;
    let x = Tensor::from_f64(&[1, l, c], &series.values()[start * c..])?;
    let (y_hat, _) = model.predict(&x)?;
    let names = match &meta.data {
        Some(info) => info.channel_names.clone(),
        None => series.channel_names.clone(),
    };
    let mut forecast = Series::new(y_hat.data().to_vec(), c, names)?;
    if let Some(info) = &meta.data {
        forecast = info.standardizer.inverse(&forecast)?;
    }
    debug_assert_eq!(forecast.len(), t);
    write_csv(out, &forecast)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: String,
    mode: MixtureMode,
    best_epoch: usize,
    val: Metrics,
    test: Option<Metrics>,
}

fn cmd_ablate(
    config: &Path,
    mode: &str,
    preset: Option<&str>,
    data: Option<&Path>,
    seed: Option<u64>,
    csv: &CsvOpts,
) -> Result<u8> {
    let ablation: Ablation = mode.parse()?;
    let run = resolve_run(config, preset, data, seed, csv)?;
    let mut variant_cfg = run.model.clone();
    ablation.apply(&mut variant_cfg);
    variant_cfg.validate()?;
    let base_name = match run.model.ams.mode {
        MixtureMode::Dense => "dense".to_string(),
        _ => "baseline".to_string(),
    };
    let mut rows = Vec::new();
    for (name, cfg) in [(base_name, run.model.clone()), (ablation.to_string(), variant_cfg)] {
        let fitted = fit(cfg, run.split, &run.series)?;
        rows.push(AblationRow {
            variant: name,
            mode: fitted.model.config.ams.mode,
            best_epoch: fitted.report.best_epoch,
            val: fitted.report.best_val,
            test: fitted.test,
        });
    }
    print_json(&json!({ "ablation": ablation.to_string(), "rows": rows }))?;
    Ok(0)
}

fn cmd_gates(ckpt: &Path, data: &Path, out: &Path, stride: usize, csv: &CsvOpts) -> Result<u8> {
    let (model, _, series) = load_pair(ckpt, data, csv)?;
    let cfg = &model.config;
    let (l, t, c, m) = (cfg.seq_len, cfg.pred_len, cfg.channels, cfg.ams.num_predictors);
    let ds = make_windows(&series, l, t, stride, 0..series.len())?;
    let (_, gates) = predict_all(&model, &ds, cfg.train.batch_size)?;
    let mut w = csv::Writer::from_path(out).map_err(|e| AmdError::data(format!("{}: {e}", out.display())))?;
    let mut header = vec!["window".to_string(), "start_row".into(), "channel".into()];
    header.extend((0..m).map(|j| format!("w{j}")));
    let werr = |e: csv::Error| AmdError::data(format!("{}: {e}", out.display()));
    w.write_record(&header).map_err(werr)?;
    for i in 0..ds.len() {
        for ch in 0..c {
            let row = &gates.data()[(i * c + ch) * m..(i * c + ch + 1) * m];
            let mut rec = vec![i.to_string(), ds.start(i).to_string(), series.channel_names[ch].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(werr)?;
        }
    }
    w.flush().map_err(|e| AmdError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct BlockCheck {
    block: String,
    parameters: usize,
    evaluations: usize,
    max_relative_error: f64,
}

fn gradcheck_config(full: bool) -> ModelConfig {
    let mut cfg = amd_core::config::toy_config();
    if !full {
        cfg.ams.hidden = 4;
        cfg.ams.selector_hidden = 4;
    }
    cfg
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), v)
}

/// Checks each block's parameters with everything else held fixed; with
/// `full`, also every parameter at once.
fn cmd_gradcheck(full: bool, seed: u64) -> Result<u8> {
    let cfg = gradcheck_config(full);
    let mut model = AmdModel::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let m = model.config.ams.num_predictors;
    let wn = model.ams.selector.w_noise;
    *model.params.get_mut(wn) = randn(&[m, m], &mut rng)?.map(|v| 0.5 * v);
    let c = &model.config;
    let x = randn(&[2, c.seq_len, c.channels], &mut rng)?;
    let y = randn(&[2, c.pred_len, c.channels], &mut rng)?;

    let mut groups: Vec<(String, Vec<usize>)> = model
        .blocks()
        .into_iter()
        .map(|(name, ids)| (name.to_string(), ids.iter().map(|p| p.index()).collect()))
        .collect();
    if full {
        groups.push(("full_model".into(), (0..model.params.len()).collect()));
    }
    let all = model.params.tensors().to_vec();
    let mut rows = Vec::with_capacity(groups.len());
    for (block, ids) in groups {
        let inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| all[i].clone()).collect();
        let f = |g: &mut Graph<'_, f64>, vars: &[Var]| -> Result<Var> {
            let mut params: Vec<Var> = Vec::with_capacity(all.len());
            for (i, t) in all.iter().enumerate() {
                match ids.iter().position(|&j| j == i) {
                    Some(k) => params.push(vars[k]),
                    None => params.push(g.constant(t.clone())),
                }
            }
            let mut noise = ChaCha8Rng::seed_from_u64(seed);
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let out = model.forward_with(g, &params, xv, &mut noise, true)?;
            let pl = pred_loss(g, out.y_hat, yv)?;
            let bl = balance_loss(g, out.gates, model.config.loss.eps, model.config.loss.balance)?;
            total_loss(g, pl, bl, &model.config.loss)
        };
        let rep = grad_check(f, &inputs, 1e-6)?;
        rows.push(BlockCheck {
            block,
            parameters: inputs.iter().map(Tensor::len).sum(),
            evaluations: rep.evaluations,
            max_relative_error: rep.max_relative_error,
        });
    }
    print_json(&json!({ "seed": seed, "full_model": full, "blocks": rows }))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_split_requires_all() {
        let meta = TrainingMeta::default();
        assert_eq!(rows_for(PartitionArg::All, &meta, 50, 8).unwrap(), 0..50);
        assert!(rows_for(PartitionArg::Test, &meta, 50, 8).is_err());
    }
}
