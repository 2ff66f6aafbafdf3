//! Dataset ingestion (`.ts` text format and long-form CSV), tokenization,
//! splits, and synthetic generators with known discriminative structure.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

/// One multivariate series: a channels x length value grid plus an optional
/// class label and an optional forecast continuation of channel 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesInstance {
    pub values: Matrix,
    pub label: Option<String>,
    pub target: Option<Vec<f64>>,
}

impl TimeSeriesInstance {
    pub fn new(values: Matrix) -> Self {
        Self {
            values,
            label: None,
            target: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<TimeSeriesInstance>,
    pub vocabulary: Vec<String>,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, instances: Vec<TimeSeriesInstance>) -> Result<Self> {
        let mut vocab: Vec<String> = instances
            .iter()
            .filter_map(|x| x.label.clone())
            .collect();
        vocab.sort();
        vocab.dedup();
        let ds = Self {
            name: name.into(),
            instances,
            vocabulary: vocab,
            split: Split::Train,
            provenance: String::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::Empty(format!("dataset {}", self.name)));
        }
        let c = self.instances[0].channels();
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.channels() != c {
                return Err(Error::ShapeMismatch {
                    context: format!("dataset {} instance {i}", self.name),
                    left: format!("{} channels", inst.channels()),
                    right: format!("{c} channels"),
                });
            }
            if let Some(label) = &inst.label {
                if !self.vocabulary.contains(label) {
                    return Err(Error::Parse {
                        line: 0,
                        col: None,
                        msg: format!("label {label:?} outside vocabulary"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.instances.first().map(|x| x.channels()).unwrap_or(0)
    }

    /// Index of an instance's label in the vocabulary.
    pub fn label_index(&self, inst: &TimeSeriesInstance) -> Option<usize> {
        inst.label
            .as_ref()
            .and_then(|l| self.vocabulary.iter().position(|v| v == l))
    }
}

// ---------------------------------------------------------------------------
// .ts format
// ---------------------------------------------------------------------------

/// Parse the sktime-style `.ts` dialect used by the UEA classification
/// archive: `@`-prefixed headers, then one line per instance with channels
/// separated by `:`, values by `,`, and the class label as the final field
/// when `@classLabel true`.
///
/// Only equal-length, timestamp-free, complete series are supported; files
/// declaring anything else are rejected. Unknown header tags produce a
/// warning recorded in the dataset's provenance note.
pub fn parse_uea_ts(text: &str) -> Result<Dataset> {
    let mut name = String::from("unnamed");
    let mut dimensions: Option<usize> = None;
    let mut series_length: Option<usize> = None;
    let mut class_label = false;
    let mut vocabulary: Vec<String> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut instances: Vec<TimeSeriesInstance> = Vec::new();
    let mut in_data = false;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data && line.starts_with('@') {
            let mut parts = line.splitn(2, char::is_whitespace);
            let tag = parts.next().unwrap_or("").to_ascii_lowercase();
            let rest = parts.next().unwrap_or("").trim();
            match tag.as_str() {
                "@problemname" => name = rest.to_string(),
                "@dimensions" => {
                    dimensions = Some(parse_header_count(rest, lineno, "@dimensions")?)
                }
                "@serieslength" => {
                    series_length = Some(parse_header_count(rest, lineno, "@serieslength")?)
                }
                "@equallength" => {
                    if rest.eq_ignore_ascii_case("false") {
                        return Err(Error::Unsupported(
                            "variable-length series (@equallength false)".into(),
                        ));
                    }
                }
                "@timestamps" => {
                    if rest.eq_ignore_ascii_case("true") {
                        return Err(Error::Unsupported("timestamped series (@timestamps true)".into()));
                    }
                }
                "@missing" => {
                    if rest.eq_ignore_ascii_case("true") {
                        return Err(Error::Unsupported("missing values (@missing true)".into()));
                    }
                }
                "@univariate" => {}
                "@classlabel" => {
                    let mut fields = rest.split_whitespace();
                    class_label = fields
                        .next()
                        .map(|f| f.eq_ignore_ascii_case("true"))
                        .unwrap_or(false);
                    if class_label {
                        vocabulary = fields.map(str::to_string).collect();
                        if vocabulary.is_empty() {
                            return Err(Error::Parse {
                                line: lineno,
                                col: None,
                                msg: "@classlabel true requires a label list".into(),
                            });
                        }
                    }
                }
                "@data" => in_data = true,
                other => warnings.push(format!("unknown header tag {other} (line {lineno})")),
            }
            continue;
        }
        if !in_data {
            return Err(Error::Parse {
                line: lineno,
                col: None,
                msg: "data line before @data".into(),
            });
        }
        let inst = parse_ts_data_line(
            raw,
            lineno,
            dimensions,
            series_length,
            class_label,
            &vocabulary,
        )?;
        instances.push(inst);
    }

    if instances.is_empty() {
        return Err(Error::Empty(format!(".ts file {name}")));
    }
    let mut ds = Dataset::new(name, instances)?;
    if class_label {
        // keep the declared label order, not the sorted one
        ds.vocabulary = vocabulary;
        ds.validate()?;
    }
    if !warnings.is_empty() {
        ds.provenance = format!("warnings: {}", warnings.join("; "));
    }
    Ok(ds)
}

fn parse_header_count(text: &str, line: usize, tag: &str) -> Result<usize> {
    text.split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Parse {
            line,
            col: None,
            msg: format!("{tag} expects a positive integer, got {text:?}"),
        })
}

fn parse_ts_data_line(
    raw: &str,
    lineno: usize,
    dimensions: Option<usize>,
    series_length: Option<usize>,
    class_label: bool,
    vocabulary: &[String],
) -> Result<TimeSeriesInstance> {
    let line = raw.trim_end_matches(['\r', '\n']);
    let mut fields: Vec<&str> = line.split(':').collect();
    let label = if class_label {
        let lab = fields.pop().ok_or_else(|| Error::Parse {
            line: lineno,
            col: None,
            msg: "missing class label field".into(),
        })?;
        let lab = lab.trim().to_string();
        if !vocabulary.contains(&lab) {
            return Err(Error::Parse {
                line: lineno,
                col: None,
                msg: format!("class label {lab:?} not in @classlabel list"),
            });
        }
        Some(lab)
    } else {
        None
    };

    if let Some(d) = dimensions {
        if fields.len() != d {
            return Err(Error::Parse {
                line: lineno,
                col: None,
                msg: format!("{} channels, expected @dimensions {d}", fields.len()),
            });
        }
    }

    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(fields.len());
    for (ci, field) in fields.iter().enumerate() {
        let mut channel = Vec::new();
        // byte offset of this field inside the line, for column reporting
        let field_start = field.as_ptr() as usize - line.as_ptr() as usize;
        let mut cursor = 0usize;
        for tok in field.split(',') {
            let trimmed = tok.trim();
            let value: f64 = trimmed.parse().map_err(|_| Error::Parse {
                line: lineno,
                col: Some(field_start + cursor + 1),
                msg: format!("invalid value {trimmed:?} in channel {}", ci + 1),
            })?;
            channel.push(value);
            cursor += tok.len() + 1;
        }
        if let Some(l) = series_length {
            if channel.len() != l {
                return Err(Error::Parse {
                    line: lineno,
                    col: None,
                    msg: format!(
                        "channel {} has length {}, expected @serieslength {l}",
                        ci + 1,
                        channel.len()
                    ),
                });
            }
        }
        channels.push(channel);
    }
    let width = channels.first().map(|c| c.len()).unwrap_or(0);
    if channels.iter().any(|c| c.len() != width) {
        return Err(Error::Parse {
            line: lineno,
            col: None,
            msg: "channels have unequal lengths".into(),
        });
    }
    let mut inst = TimeSeriesInstance::new(Matrix::from_rows(&channels)?);
    inst.label = label;
    Ok(inst)
}

/// Serialize a dataset back to the `.ts` dialect. Floats are printed with 17
/// significant digits so `parse_uea_ts(write_uea_ts(ds))` reproduces every
/// value exactly.
pub fn write_uea_ts(ds: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(&format!("@problemName {}\n", ds.name));
    out.push_str(&format!("@dimensions {}\n", ds.channels()));
    if let Some(first) = ds.instances.first() {
        out.push_str(&format!("@seriesLength {}\n", first.len()));
    }
    out.push_str("@equalLength true\n");
    if ds.vocabulary.is_empty() {
        out.push_str("@classLabel false\n");
    } else {
        out.push_str(&format!("@classLabel true {}\n", ds.vocabulary.join(" ")));
    }
    out.push_str("@data\n");
    for inst in &ds.instances {
        let channels: Vec<String> = (0..inst.channels())
            .map(|c| {
                inst.channel(c)
                    .iter()
                    .map(|v| format!("{v:.16e}"))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        out.push_str(&channels.join(":"));
        if let Some(label) = &inst.label {
            out.push(':');
            out.push_str(label);
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// CSV format
// ---------------------------------------------------------------------------

/// Parse long-form CSV with columns `instance_id,channel,t,value[,label]`.
/// Row order does not matter; instances are ordered by id. Duplicate or
/// missing `(instance, channel, t)` cells and ragged channels are errors.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            col: None,
            msg: format!("bad CSV header: {e}"),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ci_id, ci_ch, ci_t, ci_v) = match (col("instance_id"), col("channel"), col("t"), col("value")) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => {
            return Err(Error::Parse {
                line: 1,
                col: None,
                msg: format!(
                    "header must contain instance_id,channel,t,value (got {:?})",
                    headers.iter().collect::<Vec<_>>()
                ),
            })
        }
    };
    let ci_label = col("label");

    type CellMap = BTreeMap<(usize, usize), f64>;
    let mut cells: BTreeMap<String, CellMap> = BTreeMap::new();
    let mut labels: BTreeMap<String, String> = BTreeMap::new();

    for (ri, record) in reader.records().enumerate() {
        let lineno = ri + 2;
        let record = record.map_err(|e| Error::Parse {
            line: lineno,
            col: None,
            msg: format!("bad CSV row: {e}"),
        })?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Parse {
                line: lineno,
                col: Some(i + 1),
                msg: "missing field".into(),
            })
        };
        let id = field(ci_id)?.to_string();
        let channel: usize = field(ci_ch)?.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            col: Some(ci_ch + 1),
            msg: format!("invalid channel {:?}", field(ci_ch).unwrap_or("")),
        })?;
        let t: usize = field(ci_t)?.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            col: Some(ci_t + 1),
            msg: format!("invalid t {:?}", field(ci_t).unwrap_or("")),
        })?;
        let value: f64 = field(ci_v)?.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            col: Some(ci_v + 1),
            msg: format!("invalid value {:?}", field(ci_v).unwrap_or("")),
        })?;
        if let Some(li) = ci_label {
            let lab = field(li)?.trim();
            if !lab.is_empty() {
                if let Some(prev) = labels.get(&id) {
                    if prev != lab {
                        return Err(Error::Parse {
                            line: lineno,
                            col: Some(li + 1),
                            msg: format!("instance {id} has conflicting labels {prev:?} and {lab:?}"),
                        });
                    }
                } else {
                    labels.insert(id.clone(), lab.to_string());
                }
            }
        }
        if cells.entry(id.clone()).or_default().insert((channel, t), value).is_some() {
            return Err(Error::Parse {
                line: lineno,
                col: None,
                msg: format!("duplicate cell (instance {id}, channel {channel}, t {t})"),
            });
        }
    }

    if cells.is_empty() {
        return Err(Error::Empty("CSV data".into()));
    }

    let mut instances = Vec::with_capacity(cells.len());
    for (id, grid) in &cells {
        let n_ch = grid.keys().map(|(c, _)| c + 1).max().unwrap_or(0);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_ch);
        let mut lengths = Vec::with_capacity(n_ch);
        for c in 0..n_ch {
            let mut ts: Vec<(usize, f64)> = grid
                .iter()
                .filter(|((ch, _), _)| *ch == c)
                .map(|((_, t), v)| (*t, *v))
                .collect();
            ts.sort_by_key(|(t, _)| *t);
            for (want, (got, _)) in ts.iter().enumerate() {
                if *got != want {
                    return Err(Error::Parse {
                        line: 0,
                        col: None,
                        msg: format!("instance {id} channel {c} missing t={want}"),
                    });
                }
            }
            lengths.push(ts.len());
            rows.push(ts.into_iter().map(|(_, v)| v).collect());
        }
        if lengths.iter().any(|l| *l != lengths[0]) {
            return Err(Error::Parse {
                line: 0,
                col: None,
                msg: format!("instance {id} has ragged channels (lengths {lengths:?})"),
            });
        }
        let mut inst = TimeSeriesInstance::new(Matrix::from_rows(&rows)?);
        inst.label = labels.get(id).cloned();
        instances.push(inst);
    }
    Dataset::new("csv", instances)
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScheme {
    /// One token per time step; token dimension = channel count.
    PerTimestep,
}

/// Turn an instance into the model input matrix (n tokens x d dims).
pub fn tokenize(x: &TimeSeriesInstance, scheme: TokenScheme) -> Result<Matrix> {
    match scheme {
        TokenScheme::PerTimestep => {
            if x.channels() < 2 {
                return Err(Error::Unsupported(format!(
                    "per-timestep tokenization needs >= 2 channels (got {}); the encoder \
                     requires token dimension d >= 2 — embed univariate series into lag \
                     channels first",
                    x.channels()
                )));
            }
            Ok(x.values.transpose())
        }
    }
}

/// Inverse of [`tokenize`]: token matrix back to the channels x length grid.
pub fn untokenize(tokens: &Matrix) -> Matrix {
    tokens.transpose()
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

const DOMINANT_OMEGA: f64 = 0.5;
const DOMINANT_PHASE_A: f64 = 7.0 * PI / 12.0;
const DOMINANT_PHASE_B: f64 = 13.0 * PI / 12.0;

/// Two-channel, two-class classification set where channel 1 is
/// class-independent Gaussian noise scaled by `scale_ratio` and channel 2 is
/// a unit-amplitude sinusoid whose phase encodes the class. Pooled (global)
/// scaling shrinks channel 2 by ~`scale_ratio`; per-channel scaling keeps it.
pub fn synth_dominant_channel(
    n_instances: usize,
    length: usize,
    scale_ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    if scale_ratio < 1.0 {
        return Err(Error::Config(format!(
            "scale_ratio must be >= 1, got {scale_ratio}"
        )));
    }
    let base = RngStream::new(seed, 0);
    let mut instances = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let mut rng = base.substream(i as u64);
        let class_a = i % 2 == 0;
        let phase = if class_a { DOMINANT_PHASE_A } else { DOMINANT_PHASE_B };
        let ch1: Vec<f64> = rng.gaussian_vec(length).iter().map(|v| v * scale_ratio).collect();
        let ch2: Vec<f64> = (0..length)
            .map(|t| (DOMINANT_OMEGA * t as f64 + phase).sin())
            .collect();
        let mut inst = TimeSeriesInstance::new(Matrix::from_rows(&[ch1, ch2])?);
        inst.label = Some(if class_a { "A".into() } else { "B".into() });
        instances.push(inst);
    }
    let mut ds = Dataset::new("synth_dominant_channel", instances)?;
    ds.provenance = format!(
        "synth_dominant_channel(n={n_instances}, length={length}, scale_ratio={scale_ratio}, seed={seed})"
    );
    Ok(ds)
}

/// Two-channel, two-class set where channel 1 carries one shared waveform
/// scaled by a class-specific amplitude and channel 2 is unit reference
/// noise. Per-channel instance standardization provably erases the class
/// signal; pooled scaling preserves it through the amplitude ratio.
pub fn synth_amplitude_classes(
    n_instances: usize,
    length: usize,
    amp_a: f64,
    amp_b: f64,
    seed: u64,
) -> Result<Dataset> {
    if amp_a == amp_b {
        return Err(Error::Config(format!(
            "amp_a and amp_b must differ, got {amp_a} and {amp_b}"
        )));
    }
    let base = RngStream::new(seed, 0);
    let wave: Vec<f64> = (0..length)
        .map(|t| 0.15 + 0.10 * (2.0 * PI * t as f64 / 16.0).sin())
        .collect();
    let mut instances = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let mut rng = base.substream(i as u64);
        let class_a = i % 2 == 0;
        let amp = if class_a { amp_a } else { amp_b };
        let ch1: Vec<f64> = wave.iter().map(|w| amp * w).collect();
        let ch2 = rng.gaussian_vec(length);
        let mut inst = TimeSeriesInstance::new(Matrix::from_rows(&[ch1, ch2])?);
        inst.label = Some(if class_a { "A".into() } else { "B".into() });
        instances.push(inst);
    }
    let mut ds = Dataset::new("synth_amplitude_classes", instances)?;
    ds.provenance = format!(
        "synth_amplitude_classes(n={n_instances}, length={length}, amp_a={amp_a}, amp_b={amp_b}, seed={seed})"
    );
    Ok(ds)
}

/// Shape of the synthetic forecasting series.
#[derive(Debug, Clone)]
pub struct TrendParams {
    /// Per-instance slope drawn uniformly from this range.
    pub slope_min: f64,
    pub slope_max: f64,
    pub seasonal_amp: f64,
    pub seasonal_period: f64,
    pub noise_std: f64,
    /// The univariate signal is materialized as this many lag channels
    /// (channel j = series delayed by j steps) so the per-timestep tokenizer
    /// yields d >= 2 tokens.
    pub lag_channels: usize,
}

impl Default for TrendParams {
    fn default() -> Self {
        Self {
            slope_min: 0.05,
            slope_max: 0.40,
            seasonal_amp: 4.0,
            seasonal_period: 24.0,
            noise_std: 0.4,
            lag_channels: 4,
        }
    }
}

/// Univariate trend + seasonal + noise forecasting set riding on a large
/// level `offset`, which makes training on unnormalized values
/// ill-conditioned. The target is the next `horizon` values of the signal.
pub fn synth_trend_forecast(
    n_instances: usize,
    context: usize,
    horizon: usize,
    offset: f64,
    seed: u64,
) -> Result<Dataset> {
    synth_trend_forecast_with(n_instances, context, horizon, offset, seed, &TrendParams::default())
}

pub fn synth_trend_forecast_with(
    n_instances: usize,
    context: usize,
    horizon: usize,
    offset: f64,
    seed: u64,
    params: &TrendParams,
) -> Result<Dataset> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if params.lag_channels < 2 {
        return Err(Error::Config("lag_channels must be >= 2".into()));
    }
    let base = RngStream::new(seed, 0);
    let total = context + horizon;
    let mut instances = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let mut rng = base.substream(i as u64);
        let slope = params.slope_min + (params.slope_max - params.slope_min) * rng.uniform();
        let series: Vec<f64> = (0..total)
            .map(|t| {
                offset
                    + slope * t as f64
                    + params.seasonal_amp * (2.0 * PI * t as f64 / params.seasonal_period).sin()
                    + params.noise_std * rng.gaussian()
            })
            .collect();
        let mut rows = Vec::with_capacity(params.lag_channels);
        for lag in 0..params.lag_channels {
            let row: Vec<f64> = (0..context)
                .map(|t| series[t.saturating_sub(lag)])
                .collect();
            rows.push(row);
        }
        let mut inst = TimeSeriesInstance::new(Matrix::from_rows(&rows)?);
        inst.target = Some(series[context..].to_vec());
        instances.push(inst);
    }
    let mut ds = Dataset::new("synth_trend_forecast", instances)?;
    let pmae = persistence_mae(&ds).unwrap_or(f64::NAN);
    ds.provenance = format!(
        "synth_trend_forecast(n={n_instances}, context={context}, horizon={horizon}, \
         offset={offset}, seed={seed}) persistence_mae={pmae:.6}"
    );
    Ok(ds)
}

/// Repeat-last-value baseline: mean absolute error of forecasting every
/// target step as the final context value of channel 0.
pub fn persistence_mae(ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in &ds.instances {
        let target = inst.target.as_ref().ok_or_else(|| {
            Error::Empty(format!("dataset {} has no forecast targets", ds.name))
        })?;
        let last = *inst.channel(0).last().ok_or_else(|| {
            Error::Empty(format!("dataset {} has an empty instance", ds.name))
        })?;
        for v in target {
            total += (v - last).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("no target values".into()));
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Deterministic train/validation index split. Classification labels are
/// stratified; unlabeled data splits uniformly. `val_fraction` of each
/// stratum (rounded down, at least one instance if the stratum has two)
/// goes to validation.
pub fn train_val_split(ds: &Dataset, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut strata: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, inst) in ds.instances.iter().enumerate() {
        strata.entry(inst.label.as_deref()).or_default().push(i);
    }
    let mut rng = RngStream::new(seed, 0x5354_5241_5449_4659);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in strata {
        rng.shuffle(&mut idx);
        let mut n_val = (idx.len() as f64 * val_fraction).floor() as usize;
        if n_val == 0 && idx.len() >= 2 && val_fraction > 0.0 {
            n_val = 1;
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
