//! Dataset ingestion, synthetic generators, window construction, and
//! chronological splits. Channel independence throughout: an N-variable
//! series becomes N univariate window streams sharing all model parameters.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// One training example: lookback of length T, target of length τ, plus the
/// identifiers linking it to its channel and position in time.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInstance {
    pub id: usize,
    pub channel: usize,
    /// Time index of the first lookback step in the full series.
    pub offset: usize,
    pub lookback: Vec<f64>,
    pub target: Vec<f64>,
}

/// Windows at offsets 0, stride, 2·stride, … while the whole window
/// (lookback + target) fits; ids are assigned in offset order.
pub fn make_windows(
    series: &[f64],
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowInstance>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be >= 1".into()));
    }
    if series.len() < lookback + horizon {
        return Err(Error::InvalidInput(format!(
            "series of length {} is too short for lookback {} + horizon {}",
            series.len(),
            lookback,
            horizon
        )));
    }
    let mut windows = Vec::new();
    let mut offset = 0;
    while offset + lookback + horizon <= series.len() {
        windows.push(WindowInstance {
            id: windows.len(),
            channel: 0,
            offset,
            lookback: series[offset..offset + lookback].to_vec(),
            target: series[offset + lookback..offset + lookback + horizon].to_vec(),
        });
        offset += stride;
    }
    Ok(windows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> SplitFractions {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.val < 0.0 || self.test <= 0.0 {
            return Err(Error::Config(
                "split fractions need train > 0, val >= 0, test > 0".into(),
            ));
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Per-channel standard scaling fit on the train segment only and applied to
/// the whole series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScaler {
    pub mean: f64,
    pub std: f64,
}

impl ChannelScaler {
    pub fn fit(train_segment: &[f64]) -> ChannelScaler {
        let n = train_segment.len() as f64;
        let mean = train_segment.iter().sum::<f64>() / n;
        let var = train_segment.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        ChannelScaler {
            mean,
            std: var.sqrt().max(1e-12),
        }
    }

    pub fn scale(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn unscale(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

#[derive(Debug, Default, Clone)]
pub struct WindowSet {
    pub train: Vec<WindowInstance>,
    pub val: Vec<WindowInstance>,
    pub test: Vec<WindowInstance>,
}

/// A fully prepared dataset: scaled series, the scalers that produced them,
/// and chronologically split windows. Train windows take ids 0..n_train so
/// they index vocabulary rows directly; val and test ids continue after.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: Vec<Vec<f64>>,
    pub scalers: Vec<ChannelScaler>,
    pub windows: WindowSet,
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Time indices [0, train_end) / [train_end, val_end) / [val_end, len).
    pub train_end: usize,
    pub val_end: usize,
}

pub fn build_dataset(
    raw: Vec<Vec<f64>>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    splits: SplitFractions,
) -> Result<Dataset> {
    splits.validate()?;
    if raw.is_empty() {
        return Err(Error::InvalidInput("dataset has no channels".into()));
    }
    let len = raw[0].len();
    if raw.iter().any(|ch| ch.len() != len) {
        return Err(Error::InvalidInput("channels have unequal lengths".into()));
    }
    let train_end = (len as f64 * splits.train).floor() as usize;
    let val_end = (len as f64 * (splits.train + splits.val)).floor() as usize;

    let scalers: Vec<ChannelScaler> = raw.iter().map(|ch| ChannelScaler::fit(&ch[..train_end.max(1)])).collect();
    let series: Vec<Vec<f64>> = raw
        .iter()
        .zip(&scalers)
        .map(|(ch, sc)| ch.iter().map(|&x| sc.scale(x)).collect())
        .collect();

    let mut windows = WindowSet::default();
    let mut next_id = 0;
    let enumerate_segment =
        |start: usize, end: usize, out: &mut Vec<WindowInstance>, next_id: &mut usize| {
            for (channel, ch) in series.iter().enumerate() {
                let mut offset = start;
                while offset + lookback + horizon <= end {
                    out.push(WindowInstance {
                        id: *next_id,
                        channel,
                        offset,
                        lookback: ch[offset..offset + lookback].to_vec(),
                        target: ch[offset + lookback..offset + lookback + horizon].to_vec(),
                    });
                    *next_id += 1;
                    offset += stride;
                }
            }
        };
    enumerate_segment(0, train_end, &mut windows.train, &mut next_id);
    enumerate_segment(train_end, val_end, &mut windows.val, &mut next_id);
    enumerate_segment(val_end, len, &mut windows.test, &mut next_id);

    if windows.train.is_empty() {
        return Err(Error::InvalidInput(format!(
            "train split [0, {train_end}) too short for lookback {lookback} + horizon {horizon}"
        )));
    }
    if windows.test.is_empty() {
        return Err(Error::InvalidInput(format!(
            "test split [{val_end}, {len}) too short for lookback {lookback} + horizon {horizon}"
        )));
    }

    Ok(Dataset {
        series,
        scalers,
        windows,
        lookback,
        horizon,
        stride,
        train_end,
        val_end,
    })
}

// ── Synthetic generators ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    Sines {
        channels: usize,
        length: usize,
        components: usize,
        noise_std: f64,
    },
    Trend {
        channels: usize,
        length: usize,
        noise_std: f64,
    },
    ArmaLike {
        channels: usize,
        length: usize,
        phi: f64,
        theta: f64,
        noise_std: f64,
    },
}

/// Sum-of-sines with optional additive Gaussian noise:
/// x_t = Σ_j a_j·sin(2π f_j t + φ_j) + noise.
pub fn sines_from_components<R: Rng>(
    length: usize,
    components: &[(f64, f64, f64)],
    noise_std: f64,
    rng: &mut R,
) -> Vec<f64> {
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    (0..length)
        .map(|t| {
            let clean: f64 = components
                .iter()
                .map(|&(a, f, phi)| a * (2.0 * std::f64::consts::PI * f * t as f64 + phi).sin())
                .sum();
            if noise_std > 0.0 {
                clean + noise.sample(rng)
            } else {
                clean
            }
        })
        .collect()
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::seeded(seed);
    match spec {
        SynthSpec::Sines {
            channels,
            length,
            components,
            noise_std,
        } => {
            if *components == 0 {
                return Err(Error::Config("sines generator needs >= 1 component".into()));
            }
            let mut out = Vec::with_capacity(*channels);
            for _ in 0..*channels {
                let comps: Vec<(f64, f64, f64)> = (0..*components)
                    .map(|_| {
                        let amplitude = rng.random_range(0.5..1.5);
                        let period = rng.random_range(16.0..64.0);
                        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                        (amplitude, 1.0 / period, phase)
                    })
                    .collect();
                out.push(sines_from_components(*length, &comps, *noise_std, &mut rng));
            }
            Ok(out)
        }
        SynthSpec::Trend {
            channels,
            length,
            noise_std,
        } => {
            let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
            let mut out = Vec::with_capacity(*channels);
            for _ in 0..*channels {
                let slope = rng.random_range(-0.02..0.02);
                let intercept = rng.random_range(-1.0..1.0);
                out.push(
                    (0..*length)
                        .map(|t| {
                            let clean = slope * t as f64 + intercept;
                            if *noise_std > 0.0 {
                                clean + noise.sample(&mut rng)
                            } else {
                                clean
                            }
                        })
                        .collect(),
                );
            }
            Ok(out)
        }
        SynthSpec::ArmaLike {
            channels,
            length,
            phi,
            theta,
            noise_std,
        } => {
            let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
            let mut out = Vec::with_capacity(*channels);
            for _ in 0..*channels {
                let mut series = Vec::with_capacity(*length);
                let mut prev_x = 0.0;
                let mut prev_e = 0.0;
                for _ in 0..*length {
                    let e = if *noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let x = phi * prev_x + e + theta * prev_e;
                    series.push(x);
                    prev_x = x;
                    prev_e = e;
                }
                out.push(series);
            }
            Ok(out)
        }
    }
}

// ── CSV ingestion ───────────────────────────────────────────────────

/// Loads an ETT-style CSV (header row, rows = time steps) into one row per
/// variable. A leading date column — detected by header name or a
/// non-numeric first cell — is ignored. `value_columns` restricts to named
/// headers.
pub fn load_csv(path: &Path, value_columns: Option<&[String]>) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::InvalidInput(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::Parse {
                row: pos.as_ref().map(|p| p.line() as usize).unwrap_or(0),
                col: 0,
                msg: format!("ragged row: expected {expected_len} fields, got {len}"),
            },
            _ => Error::InvalidInput(format!("csv read error: {e}")),
        })?;
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has a header but no data rows",
            path.display()
        )));
    }

    let selected: Vec<usize> = match value_columns {
        Some(names) => names
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::Config(format!("column '{name}' not found in header")))
            })
            .collect::<Result<_>>()?,
        None => {
            let first_is_date = headers
                .first()
                .is_some_and(|h| h.eq_ignore_ascii_case("date"))
                || records[0]
                    .get(0)
                    .is_some_and(|cell| cell.trim().parse::<f64>().is_err());
            let start = if first_is_date { 1 } else { 0 };
            (start..headers.len()).collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::InvalidInput("no value columns selected".into()));
    }

    let mut out = vec![Vec::with_capacity(records.len()); selected.len()];
    for (r, record) in records.iter().enumerate() {
        for (slot, &c) in selected.iter().enumerate() {
            let cell = record.get(c).unwrap_or("");
            let value = cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                // +2: header line is 1, first data row is 2
                row: r + 2,
                col: c + 1,
                msg: format!("cannot parse '{cell}' as a number"),
            })?;
            out[slot].push(value);
        }
    }
    Ok(out)
}

/// Series matrix to CSV text (columns = channels, rows = time). Values use
/// shortest-roundtrip formatting, so a parse-back is bit-equal.
pub fn series_to_csv(series: &[Vec<f64>], column_prefix: &str) -> String {
    let channels = series.len();
    let len = series.first().map(Vec::len).unwrap_or(0);
    let mut out = String::new();
    let header: Vec<String> = (0..channels).map(|c| format!("{column_prefix}{c}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..len {
        let row: Vec<String> = series.iter().map(|ch| ch[t].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
