//! CSV ingestion, standardization, chronological splits, sliding windows and
//! synthetic signals.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multichannel series stored row-major as `num_timesteps x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    values: Vec<f64>,
    channels: usize,
    pub channel_names: Vec<String>,
    /// Carried through from the CSV, never read by the model.
    pub timestamps: Option<Vec<String>>,
}

impl Series {
    pub fn new(values: Vec<f64>, channels: usize, channel_names: Vec<String>) -> Result<Self> {
        if channels == 0 {
            return Err(AmdError::data("series needs at least one channel"));
        }
        if !values.len().is_multiple_of(channels) {
            return Err(AmdError::data(format!(
                "{} values do not tile {channels} channels",
                values.len()
            )));
        }
        if channel_names.len() != channels {
            return Err(AmdError::data(format!(
                "{} channel names for {channels} channels",
                channel_names.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(AmdError::data(format!(
                "non-finite value at row {}, channel {}",
                pos / channels,
                pos % channels
            )));
        }
        Ok(Self {
            values,
            channels,
            channel_names,
            timestamps: None,
        })
    }

    /// Builds a series from per-channel columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let c = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|col| col.len() != n) {
            return Err(AmdError::data("columns have different lengths"));
        }
        let values = (0..n).flat_map(|t| columns.iter().map(move |col| col[t])).collect();
        Self::new(values, c, default_names(c))
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.at(t, c)).collect()
    }

    /// Rows `range` as a new series.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(AmdError::data(format!(
                "row range {range:?} outside series of length {}",
                self.len()
            )));
        }
        let c = self.channels;
        let mut out = Self::new(
            self.values[range.start * c..range.end * c].to_vec(),
            c,
            self.channel_names.clone(),
        )?;
        out.timestamps = self.timestamps.as_ref().map(|ts| ts[range].to_vec());
        Ok(out)
    }
}

fn default_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i}")).collect()
}

/// Reads a comma-separated file. The optional date column is dropped.
pub fn load_csv(path: &Path, has_header: bool, date_column: Option<usize>) -> Result<Series> {
    let file = std::fs::File::open(path).map_err(|e| AmdError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Option<Vec<String>> = if has_header {
        let h = reader
            .headers()
            .map_err(|e| AmdError::data(format!("{}: {e}", path.display())))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut values = Vec::new();
    let mut timestamps = date_column.map(|_| Vec::new());
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1 + usize::from(has_header);
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => AmdError::data(format!(
                "{}: row {row} has {len} fields, expected {expected_len}",
                path.display()
            )),
            _ => AmdError::data(format!("{}: row {row}: {e}", path.display())),
        })?;
        let w = *width.get_or_insert(record.len());
        if let Some(dc) = date_column {
            if dc >= w {
                return Err(AmdError::data(format!(
                    "date column {dc} out of range for {w} columns"
                )));
            }
        }
        for (col, cell) in record.iter().enumerate() {
            if Some(col) == date_column {
                if let Some(ts) = timestamps.as_mut() {
                    ts.push(cell.to_string());
                }
                continue;
            }
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                AmdError::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: col,
                    value: cell.to_string(),
                }
            })?;
            values.push(v);
        }
    }
    let width = width.ok_or_else(|| AmdError::data(format!("{}: no data rows", path.display())))?;
    let channels = width - usize::from(date_column.is_some());
    let names = match header {
        Some(h) => h
            .into_iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != date_column)
            .map(|(_, n)| n)
            .collect(),
        None => default_names(channels),
    };
    let mut series = Series::new(values, channels, names)?;
    series.timestamps = timestamps;
    Ok(series)
}

/// Writes a series with a header row of channel names.
pub fn write_csv(path: &Path, series: &Series) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AmdError::data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| AmdError::data(format!("{}: {e}", path.display()));
    w.write_record(&series.channel_names).map_err(csv_err)?;
    for t in 0..series.len() {
        w.write_record(series.row(t).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| AmdError::io(path, e))
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics over `rows`; zero deviations are clamped to 1.
    pub fn fit(series: &Series, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > series.len() {
            return Err(AmdError::data(format!(
                "statistics range {rows:?} is empty or outside series of length {}",
                series.len()
            )));
        }
        let n = rows.len() as f64;
        let c = series.channels();
        let mut mean = vec![0.0; c];
        for t in rows.clone() {
            for (m, v) in mean.iter_mut().zip(series.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for t in rows {
            for ((s, v), m) in var.iter_mut().zip(series.row(t)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    fn apply(&self, series: &Series, f: impl Fn(f64, f64, f64) -> f64) -> Result<Series> {
        if series.channels() != self.mean.len() {
            return Err(AmdError::data(format!(
                "standardizer has {} channels, series has {}",
                self.mean.len(),
                series.channels()
            )));
        }
        let c = series.channels();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % c], self.std[i % c]))
            .collect();
        let mut out = Series::new(values, c, series.channel_names.clone())?;
        out.timestamps = series.timestamps.clone();
        Ok(out)
    }

    pub fn transform(&self, series: &Series) -> Result<Series> {
        self.apply(series, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, series: &Series) -> Result<Series> {
        self.apply(series, |v, m, s| v * s + m)
    }
}

/// Standardizes every row with statistics from `stats_from` only.
pub fn standardize(series: &Series, stats_from: Range<usize>) -> Result<(Series, Standardizer)> {
    let stats = Standardizer::fit(series, stats_from)?;
    Ok((stats.transform(series)?, stats))
}

pub fn destandardize(series: &Series, stats: &Standardizer) -> Result<Series> {
    stats.inverse(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    fn slot(self) -> usize {
        match self {
            Partition::Train => 0,
            Partition::Val => 1,
            Partition::Test => 2,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = AmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(AmdError::config(format!("unknown partition `{other}`"))),
        }
    }
}

/// Chronological train/validation/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitSpec {
    Ratio { train: f64, val: f64, test: f64 },
    FixedCounts { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    /// Row ranges owned by each partition (the rows whose values may be
    /// forecast targets).
    pub fn partitions(&self, total: usize) -> Result<[Range<usize>; 3]> {
        let (train, val, test) = match *self {
            SplitSpec::Ratio { train, val, test } => {
                if train <= 0.0 || val < 0.0 || test < 0.0 || (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(AmdError::config(format!(
                        "split ratios must be non-negative and sum to 1, got {train}/{val}/{test}"
                    )));
                }
                let n_train = (total as f64 * train).floor() as usize;
                let n_test = (total as f64 * test).floor() as usize;
                (n_train, total - n_train - n_test, n_test)
            }
            SplitSpec::FixedCounts { train, val, test } => {
                if train + val + test > total {
                    return Err(AmdError::data(format!(
                        "split counts {train}+{val}+{test} exceed series length {total}"
                    )));
                }
                (train, val, test)
            }
        };
        Ok([0..train, train..train + val, train + val..train + val + test])
    }

    /// Rows windows of `partition` may touch: its own rows plus up to
    /// `lookback` rows of the preceding partition for the look-back.
    pub fn span(&self, total: usize, lookback: usize, partition: Partition) -> Result<Range<usize>> {
        let parts = self.partitions(total)?;
        let own = parts[partition.slot()].clone();
        let start = match partition {
            Partition::Train => own.start,
            _ => own.start.saturating_sub(lookback),
        };
        Ok(start..own.end)
    }
}

/// Sliding windows over a row span: input `L x C`, target the next `T x C`.
#[derive(Debug, Clone)]
pub struct WindowDataset<'a> {
    series: &'a Series,
    pub seq_len: usize,
    pub pred_len: usize,
    pub stride: usize,
    span: Range<usize>,
    count: usize,
}

/// Windows whose rows lie entirely inside `span`.
pub fn make_windows<'a>(
    series: &'a Series,
    seq_len: usize,
    pred_len: usize,
    stride: usize,
    span: Range<usize>,
) -> Result<WindowDataset<'a>> {
    if stride == 0 || seq_len == 0 || pred_len == 0 {
        return Err(AmdError::config("look-back, horizon and stride must be positive"));
    }
    if span.end > series.len() {
        return Err(AmdError::data(format!(
            "span {span:?} exceeds series length {}",
            series.len()
        )));
    }
    let need = seq_len + pred_len;
    if span.len() < need {
        return Err(AmdError::data(format!(
            "partition of {} rows is too short: windows need at least {need} rows (L={seq_len} + T={pred_len})",
            span.len()
        )));
    }
    let count = (span.len() - need) / stride + 1;
    Ok(WindowDataset {
        series,
        seq_len,
        pred_len,
        stride,
        span,
        count,
    })
}

impl<'a> WindowDataset<'a> {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    pub fn series(&self) -> &'a Series {
        self.series
    }

    /// First row of window `i`'s look-back.
    pub fn start(&self, i: usize) -> usize {
        self.span.start + i * self.stride
    }

    /// Row range of window `i`'s forecast targets.
    pub fn target_rows(&self, i: usize) -> Range<usize> {
        let s = self.start(i) + self.seq_len;
        s..s + self.pred_len
    }

    /// `(input, target)` as row-major `L x C` and `T x C` buffers.
    pub fn get(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        assert!(i < self.count, "window {i} out of range {}", self.count);
        let c = self.series.channels();
        let s = self.start(i);
        let vals = self.series.values();
        let mid = s + self.seq_len;
        (
            vals[s * c..mid * c].to_vec(),
            vals[mid * c..(mid + self.pred_len) * c].to_vec(),
        )
    }

    /// Stacks windows into `(batch, L, C)` inputs and `(batch, T, C)` targets.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<F>, Tensor<F>)> {
        let c = self.series.channels();
        let mut xs = Vec::with_capacity(indices.len() * self.seq_len * c);
        let mut ys = Vec::with_capacity(indices.len() * self.pred_len * c);
        for &i in indices {
            let (x, y) = self.get(i);
            xs.extend(x.into_iter().map(F::of));
            ys.extend(y.into_iter().map(F::of));
        }
        let b = indices.len();
        Ok((
            Tensor::new(vec![b, self.seq_len, c], xs)?,
            Tensor::new(vec![b, self.pred_len, c], ys)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Sine,
    SinePlusTrend,
    MultiScaleMix,
}

impl FromStr for SynthKind {
    type Err = AmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "sine-plus-trend" => Ok(SynthKind::SinePlusTrend),
            "multi-scale-mix" => Ok(SynthKind::MultiScaleMix),
            other => Err(AmdError::config(format!(
                "unknown synthetic kind `{other}` (expected sine, sine-plus-trend or multi-scale-mix)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub channels: usize,
    pub period: f64,
    pub amplitude: f64,
    pub slope: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sine,
            length: 1024,
            channels: 1,
            period: 24.0,
            amplitude: 1.0,
            slope: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Deterministic synthetic series.
///
/// Channel `c` is phase-shifted by `2πc/C`. `sine` is `A·sin(2πt/P + φ)`,
/// `sine-plus-trend` adds `slope·t`, and `multi-scale-mix` alternates slowly
/// between a period-`P` and a period-`4P` component (envelope period `16P`)
/// before adding the trend. Gaussian noise of deviation `noise` goes on top.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Series> {
    if spec.period < 2.0 {
        return Err(AmdError::config(format!("period must be >= 2, got {}", spec.period)));
    }
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(AmdError::config(format!("noise deviation must be >= 0, got {}", spec.noise)));
    }
    if spec.channels == 0 {
        return Err(AmdError::config("channels must be >= 1"));
    }
    let tau = std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.length * spec.channels);
    for t in 0..spec.length {
        let tf = t as f64;
        for c in 0..spec.channels {
            let phase = tau * c as f64 / spec.channels as f64;
            let fast = (tau * tf / spec.period + phase).sin();
            let base = match spec.kind {
                SynthKind::Sine => spec.amplitude * fast,
                SynthKind::SinePlusTrend => spec.amplitude * fast + spec.slope * tf,
                SynthKind::MultiScaleMix => {
                    let slow = (tau * tf / (4.0 * spec.period) + phase).sin();
                    let w = 0.5 * (1.0 + (tau * tf / (16.0 * spec.period)).sin());
                    spec.amplitude * (w * fast + (1.0 - w) * slow) + spec.slope * tf
                }
            };
            let eps: f64 = if spec.noise > 0.0 {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            values.push(base + spec.noise * eps);
        }
    }
    Series::new(values, spec.channels, default_names(spec.channels))
}

/// Largest absolute successive difference, i.e. the Lipschitz constant of
/// the piecewise-linear interpolant.
pub fn max_step(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_headerless_csv() {
        let f = write_tmp("1,2\n3,4\n5,6\n");
        let s = load_csv(f.path(), false, None).unwrap();
        assert_eq!((s.len(), s.channels()), (3, 2));
        assert_eq!(s.column(1), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn drops_date_column() {
        let f = write_tmp("date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n");
        let s = load_csv(f.path(), true, Some(0)).unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.channel_names, vec!["a", "b"]);
        assert_eq!(s.timestamps.as_ref().unwrap()[1], "2020-01-02");
    }

    #[test]
    fn etth1_shaped_header_gives_seven_channels() {
        let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for i in 0..5 {
            text.push_str(&format!("2016-07-01 0{i}:00:00,1,2,3,4,5,6,{i}\n"));
        }
        let f = write_tmp(&text);
        let s = load_csv(f.path(), true, Some(0)).unwrap();
        assert_eq!(s.channels(), 7);
    }

    #[test]
    fn reports_bad_cells_and_ragged_rows() {
        let f = write_tmp("1,2\n3,x\n");
        match load_csv(f.path(), false, None) {
            Err(AmdError::Parse { row, column, .. }) => assert_eq!((row, column), (2, 1)),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("1,2\n3\n");
        assert!(matches!(load_csv(f.path(), false, None), Err(AmdError::Data(_))));
        let f = write_tmp("1,NaN\n");
        assert!(load_csv(f.path(), false, None).is_err());
        let f = write_tmp("1,\n");
        assert!(load_csv(f.path(), false, None).is_err());
    }

    #[test]
    fn zscore_and_constant_channel() {
        let s = Series::from_columns(&[vec![2.0, 4.0, 6.0], vec![5.0, 5.0, 5.0]]).unwrap();
        let (z, stats) = standardize(&s, 0..3).unwrap();
        let expect = 1.224_744_871_391_589;
        assert!((z.at(0, 0) + expect).abs() < 1e-12);
        assert_eq!(z.at(1, 0), 0.0);
        assert!((z.at(2, 0) - expect).abs() < 1e-12);
        assert_eq!(stats.std[1], 1.0);
        assert_eq!(z.column(1), vec![0.0, 0.0, 0.0]);
        assert!(standardize(&s, 1..1).is_err());
    }

    #[test]
    fn window_counts() {
        let s = Series::from_columns(&[(0..10).map(f64::from).collect()]).unwrap();
        assert_eq!(make_windows(&s, 4, 2, 1, 0..10).unwrap().len(), 5);
        assert_eq!(make_windows(&s, 4, 2, 4, 0..10).unwrap().len(), 2);
        let err = make_windows(&s, 8, 4, 1, 0..10).unwrap_err();
        assert!(err.to_string().contains("at least 12"));
    }

    #[test]
    fn window_count_formula_at_etth1_scale() {
        // floor((8545 - 512 - 96) / 1) + 1
        let s = Series::from_columns(&[vec![0.0; 8545]]).unwrap();
        assert_eq!(make_windows(&s, 512, 96, 1, 0..8545).unwrap().len(), 7938);
    }

    #[test]
    fn split_spans_keep_targets_disjoint() {
        let split = SplitSpec::default();
        let parts = split.partitions(1000).unwrap();
        assert_eq!(parts, [0..700, 700..800, 800..1000]);
        let s = Series::from_columns(&[vec![0.0; 1000]]).unwrap();
        let train = make_windows(&s, 24, 8, 1, split.span(1000, 24, Partition::Train).unwrap()).unwrap();
        let last = train.target_rows(train.len() - 1);
        assert!(last.end <= 700);
        let val = make_windows(&s, 24, 8, 1, split.span(1000, 24, Partition::Val).unwrap()).unwrap();
        assert_eq!(val.target_rows(0).start, 700);
        assert!(val.target_rows(val.len() - 1).end <= 800);

        let fixed = SplitSpec::FixedCounts { train: 600, val: 200, test: 300 };
        assert!(fixed.partitions(1000).is_err());
    }

    #[test]
    fn sine_generator_contract() {
        let s = gen_synthetic(&SynthSpec {
            length: 96,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(s.at(0, 0), 0.0);
        assert!(s.values().iter().all(|v| v.abs() <= 1.0));
        assert!("sawtooth".parse::<SynthKind>().is_err());
    }

    #[test]
    fn trend_generator_step_bound() {
        let spec = SynthSpec {
            kind: SynthKind::SinePlusTrend,
            length: 500,
            slope: 0.01,
            ..SynthSpec::default()
        };
        let s = gen_synthetic(&spec).unwrap();
        assert!(max_step(&s.column(0)) <= std::f64::consts::TAU / 24.0 + 0.01);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SynthSpec {
            kind: SynthKind::MultiScaleMix,
            channels: 3,
            noise: 0.3,
            seed: 11,
            ..SynthSpec::default()
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
