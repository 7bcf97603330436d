//! Executable check of the linear-forecast error bound for multi-scale mixed
//! series.
//!
//! Indexing follows the 1-based convention of the bound: `g(1)` is the first
//! value, forecast step `t` runs over `1..=T`, the target is
//! `y_t = g(P + 1 + t)` and the periodic predictor is
//! `ŷ_t = g(t mod P + 1) - g(1) + g(P + 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::max_step;
use crate::error::{AmdError, Result};

/// Row-major dense matrix used by the reference recursion.
pub type Matrix = Vec<Vec<f64>>;

fn block_means(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / d);
    let mut i = 0;
    while i + d <= x.len() {
        let mut s = 0.0;
        for j in 0..d {
            s += x[i + j];
        }
        out.push(s / d as f64);
        i += d;
    }
    out
}

/// Coarser copies `f_0 = f, f_1, ..., f_n` by repeated block averaging.
pub fn pyramid(f: &[f64], d: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    if d < 2 {
        return Err(AmdError::config(format!("downsample rate must be >= 2, got {d}")));
    }
    let mut levels = vec![f.to_vec()];
    for i in 0..n {
        if levels[i].len() < d {
            return Err(AmdError::shape(format!(
                "length {} too short for {n} levels at rate {d}",
                f.len()
            )));
        }
        let next = block_means(&levels[i], d);
        levels.push(next);
    }
    Ok(levels)
}

/// `g_n = f_n`, `g_i = f_i + g_{i+1} W_i`, returning `g_0`. `w[i]` has
/// `len(f_{i+1})` rows and `len(f_i)` columns.
pub fn multiscale_mixing_reference(f: &[f64], d: usize, n: usize, w: &[Matrix]) -> Result<Vec<f64>> {
    let levels = pyramid(f, d, n)?;
    if w.len() != n {
        return Err(AmdError::shape(format!("expected {n} mixing matrices, got {}", w.len())));
    }
    let mut g = levels[n].clone();
    for i in (0..n).rev() {
        let (rows, cols) = (levels[i + 1].len(), levels[i].len());
        let wi = &w[i];
        if wi.len() != rows || wi.iter().any(|r| r.len() != cols) {
            return Err(AmdError::shape(format!(
                "mixing matrix {i} must be {rows}x{cols}"
            )));
        }
        let mut next = levels[i].clone();
        for (c, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += g[r] * wi[r][c];
            }
            *out += acc;
        }
        g = next;
    }
    Ok(g)
}

/// The `L x T` matrix of the periodic predictor, so that `ŷ = g A`.
pub fn theorem1_matrix(len: usize, period: usize, horizon: usize) -> Result<Matrix> {
    if period == 0 || len < period + 1 {
        return Err(AmdError::config(format!(
            "periodic predictor needs length >= period + 1, got length {len}, period {period}"
        )));
    }
    let mut a = vec![vec![0.0; horizon]; len];
    for t in 1..=horizon {
        a[period][t - 1] += 1.0;
        a[t % period][t - 1] += 1.0;
        a[0][t - 1] -= 1.0;
    }
    Ok(a)
}

/// Closed-form periodic forecast, cross-checked against `g A`.
pub fn theorem1_predictor(g: &[f64], period: usize, horizon: usize) -> Result<Vec<f64>> {
    let a = theorem1_matrix(g.len(), period, horizon)?;
    let closed: Vec<f64> = (1..=horizon).map(|t| g[t % period] - g[0] + g[period]).collect();
    for (j, &c) in closed.iter().enumerate() {
        let via_matrix: f64 = g.iter().zip(&a).map(|(gv, row)| gv * row[j]).sum();
        if (via_matrix - c).abs() > 1e-12 * c.abs().max(1.0) {
            return Err(AmdError::Contract(format!(
                "matrix and closed-form predictor disagree at t={}: {via_matrix} vs {c}",
                j + 1
            )));
        }
    }
    Ok(closed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothKind {
    Sine,
    SinePlusTrend,
    Constant,
}

/// A generated series with its analytic Lipschitz constant.
#[derive(Debug, Clone)]
pub struct SmoothSeries {
    pub kind: SmoothKind,
    pub values: Vec<f64>,
    pub lipschitz: f64,
}

pub fn smooth_series<R: Rng + ?Sized>(kind: SmoothKind, period: usize, len: usize, rng: &mut R) -> SmoothSeries {
    let amp = rng.random_range(0.5..2.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let slope = match kind {
        SmoothKind::SinePlusTrend => rng.random_range(-0.05..0.05),
        _ => 0.0,
    };
    let omega = std::f64::consts::TAU / period as f64;
    let (values, lipschitz) = match kind {
        SmoothKind::Constant => (vec![amp; len], 0.0),
        _ => (
            (0..len).map(|t| amp * (omega * t as f64 + phase).sin() + slope * t as f64).collect(),
            amp * omega + slope.abs(),
        ),
    };
    SmoothSeries { kind, values, lipschitz }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckSpec {
    pub period: usize,
    pub length: usize,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub downsample_rate: usize,
    pub depth: usize,
    /// Use all-zero mixing matrices instead of random ones.
    pub zero_weights: bool,
}

impl Default for BoundCheckSpec {
    fn default() -> Self {
        Self {
            period: 24,
            length: 96,
            horizon: 48,
            trials: 100,
            seed: 7,
            downsample_rate: 2,
            depth: 3,
            zero_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub trial: usize,
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub spec: BoundCheckSpec,
    pub checked: usize,
    pub violations: Vec<Violation>,
    /// Largest `lhs / rhs` over all steps with `rhs > 0`.
    pub max_ratio: f64,
    /// Trials where a pooled level was rougher (per original time step) than
    /// the raw series, or the series exceeded its analytic constant.
    pub smoothness_failures: Vec<usize>,
    pub passed: bool,
}

struct TrialOutcome {
    violations: Vec<Violation>,
    max_ratio: f64,
    smooth_ok: bool,
}

fn run_trial(spec: &BoundCheckSpec, trial: usize) -> Result<TrialOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(trial as u64);
    let kind = if rng.random_bool(0.5) {
        SmoothKind::Sine
    } else {
        SmoothKind::SinePlusTrend
    };
    let total = spec.length + spec.horizon;
    let series = smooth_series(kind, spec.period, total, &mut rng);
    let f = &series.values;
    let levels = pyramid(f, spec.downsample_rate, spec.depth)?;
    let k_f = max_step(f);
    let mut smooth_ok = k_f <= series.lipschitz + 1e-12;
    let mut scale = 1.0;
    for lvl in &levels[1..] {
        scale *= spec.downsample_rate as f64;
        smooth_ok &= max_step(lvl) / scale <= k_f + 1e-12;
    }
    let bound = 1.0 / spec.length as f64;
    let w: Vec<Matrix> = (0..spec.depth)
        .map(|i| {
            let (rows, cols) = (levels[i + 1].len(), levels[i].len());
            (0..rows)
                .map(|_| {
                    (0..cols)
                        .map(|_| if spec.zero_weights { 0.0 } else { rng.random_range(-bound..=bound) })
                        .collect()
                })
                .collect()
        })
        .collect();
    let g = multiscale_mixing_reference(f, spec.downsample_rate, spec.depth, &w)?;
    let k_g = max_step(&g);
    let y_hat = theorem1_predictor(&g[..spec.length], spec.period, spec.horizon)?;
    let mut violations = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for t in 1..=spec.horizon {
        let y = g[spec.period + t];
        let lhs = (y - y_hat[t - 1]).abs();
        let rhs = k_g * (t + t % spec.period) as f64;
        if lhs > rhs + 1e-12 * rhs.max(1.0) {
            violations.push(Violation { trial, t, lhs, rhs });
        }
        if rhs > 0.0 {
            max_ratio = max_ratio.max(lhs / rhs);
        }
    }
    Ok(TrialOutcome {
        violations,
        max_ratio,
        smooth_ok,
    })
}

/// Runs every trial (in parallel on the current rayon pool) and collects
/// violations in trial order.
pub fn theorem1_bound_check(spec: &BoundCheckSpec) -> Result<BoundReport> {
    if spec.period == 0 || spec.length < spec.period + 1 {
        return Err(AmdError::config(format!(
            "length {} must be at least period + 1 = {}",
            spec.length,
            spec.period + 1
        )));
    }
    if spec.horizon == 0 || spec.trials == 0 {
        return Err(AmdError::config("horizon and trials must be positive"));
    }
    let outcomes = (0..spec.trials)
        .into_par_iter()
        .map(|i| run_trial(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let mut violations = Vec::new();
    let mut smoothness_failures = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for (i, o) in outcomes.into_iter().enumerate() {
        violations.extend(o.violations);
        max_ratio = max_ratio.max(o.max_ratio);
        if !o.smooth_ok {
            smoothness_failures.push(i);
        }
    }
    let passed = violations.is_empty() && smoothness_failures.is_empty();
    Ok(BoundReport {
        spec: spec.clone(),
        checked: spec.trials * spec.horizon,
        violations,
        max_ratio,
        smoothness_failures,
        passed,
    })
}
