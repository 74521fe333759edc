use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assemble, window_stream, AlignedTriplet, Dataset, IMU_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column names of a HAR CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    /// Accelerometer xyz then gyroscope xyz.
    pub channels: [String; IMU_CHANNELS],
    pub label: String,
    /// Seconds; when present must increase at the declared sample rate.
    pub timestamp: Option<String>,
    pub window_s: f64,
    pub hop_s: f64,
    pub test_fraction: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            channels: ["acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z"].map(String::from),
            label: "label".into(),
            timestamp: None,
            window_s: 5.0,
            hop_s: 5.0,
            test_fraction: 0.2,
        }
    }
}

/// Relative tolerance on timestamp spacing.
const RATE_TOL: f64 = 0.1;

struct Run {
    label: String,
    first_line: usize,
    samples: Vec<[f64; IMU_CHANNELS]>,
}

/// Reads a labeled 6-channel CSV, splits it into runs of constant label and
/// windows each run. The result carries labels but no video or text.
pub fn import_csv(path: &Path, schema: &CsvSchema, sample_rate_hz: f64) -> Result<Dataset> {
    if !(sample_rate_hz > 0.0) {
        return Err(Error::config("sample_rate_hz", "must be positive"));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            reason: format!("missing column {name:?}"),
        })
    };
    let ch_cols = schema.channels.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let label_col = col(&schema.label)?;
    let ts_col = schema.timestamp.as_deref().map(col).transpose()?;

    let mut runs: Vec<Run> = Vec::new();
    let mut prev_ts: Option<f64> = None;
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        let num = |c: usize, name: &str| -> Result<f64> {
            let cell = rec.get(c).unwrap_or("");
            cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                reason: format!("column {name:?}: {cell:?} is not a finite number"),
            })
        };
        let mut sample = [0.0; IMU_CHANNELS];
        for (s, (&c, name)) in sample.iter_mut().zip(ch_cols.iter().zip(&schema.channels)) {
            *s = num(c, name)?;
        }
        if let Some(c) = ts_col {
            let ts = num(c, schema.timestamp.as_deref().unwrap())?;
            if let Some(p) = prev_ts {
                let dt = ts - p;
                let want = 1.0 / sample_rate_hz;
                if dt <= 0.0 {
                    return Err(Error::Parse {
                        line,
                        reason: format!("timestamp {ts} does not increase"),
                    });
                }
                if (dt - want).abs() > RATE_TOL * want {
                    return Err(Error::Parse {
                        line,
                        reason: format!("sample spacing {dt}s inconsistent with {sample_rate_hz} Hz"),
                    });
                }
            }
            prev_ts = Some(ts);
        }
        let label = rec.get(label_col).unwrap_or("").to_string();
        if label.is_empty() {
            return Err(Error::Parse {
                line,
                reason: "empty label".into(),
            });
        }
        match runs.last_mut() {
            Some(r) if r.label == label => r.samples.push(sample),
            _ => runs.push(Run {
                label,
                first_line: line,
                samples: vec![sample],
            }),
        }
    }
    if runs.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }

    let names: Vec<String> = runs.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let stem = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    let mut segments = Vec::new();
    for run in &runs {
        let n = run.samples.len();
        let mut data = vec![0.0; IMU_CHANNELS * n];
        for (i, s) in run.samples.iter().enumerate() {
            for c in 0..IMU_CHANNELS {
                data[c * n + i] = s[c];
            }
        }
        let stream = Tensor::new(vec![IMU_CHANNELS, n], data)?;
        let label = names.binary_search(&run.label).expect("label collected");
        let w = window_stream(&stream, sample_rate_hz, schema.window_s, schema.hop_s)?;
        for (k, imu) in w.windows.into_iter().enumerate() {
            segments.push(AlignedTriplet {
                imu,
                video_emb: None,
                text_emb: None,
                label: Some(label),
                source_id: format!("{stem}:{}:{k}", run.first_line),
            });
        }
    }
    if segments.is_empty() {
        return Err(Error::Data(format!(
            "{}: no label run is long enough for one {}s window",
            path.display(),
            schema.window_s
        )));
    }
    assemble(segments, names, sample_rate_hz, schema.test_fraction, 0, true)
}
