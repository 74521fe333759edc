//! Aligned IMU/video/text datasets: in-memory model, synthetic generator,
//! stream windowing, alignment stripping, few-shot sampling, CSV ingestion
//! and the on-disk container.

mod csv_import;
mod storage;
mod synthetic;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::BatchView;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use csv_import::{import_csv, CsvSchema};
pub use storage::{content_hash, load_dataset, save_dataset, BlobInfo, DatasetManifest, FORMAT_VERSION};
pub use synthetic::{gen_synthetic, SyntheticSpec};

pub const IMU_CHANNELS: usize = 6;
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTriplet {
    /// `[6 × T]`: accelerometer xyz then gyroscope xyz.
    pub imu: Tensor,
    pub video_emb: Option<Vec<f64>>,
    pub text_emb: Option<Vec<f64>>,
    pub label: Option<usize>,
    pub source_id: String,
}

/// Per-channel affine normalization applied to the stored IMU values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub segments: Vec<AlignedTriplet>,
    pub sample_rate_hz: f64,
    pub class_names: Vec<String>,
    /// Training rows are `train`, held-out rows are `test`; together they
    /// cover every segment.
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub normalization: Option<Normalization>,
}

fn unit_norm_ok(v: &[f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n - 1.0).abs() <= UNIT_TOL
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Rounds every value through `f32`, the on-disk precision.
pub(crate) fn quantize(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Samples per segment.
    pub fn segment_len(&self) -> usize {
        self.segments.first().map_or(0, |s| s.imu.shape()[1])
    }

    /// Embedding dimension of the first present video or text vector, 0 if none.
    pub fn embed_dim(&self) -> usize {
        self.segments
            .iter()
            .find_map(|s| s.video_emb.as_ref().or(s.text_emb.as_ref()))
            .map_or(0, |v| v.len())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.train.clone().collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.test.clone().collect()
    }

    pub fn video_aligned_count(&self) -> usize {
        self.segments.iter().filter(|s| s.video_emb.is_some()).count()
    }

    pub fn text_aligned_count(&self) -> usize {
        self.segments.iter().filter(|s| s.text_emb.is_some()).count()
    }

    pub fn is_labeled(&self) -> bool {
        !self.segments.is_empty() && self.segments.iter().all(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.segments.iter().map(|s| s.label).collect()
    }

    /// Checks every structural invariant: finite IMU of one shape, unit-norm
    /// embeddings of one dimension, labels within the class list, and
    /// disjoint in-bounds splits that cover the dataset.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Data("dataset has no segments".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if self.train.start != 0 || self.train.end != self.test.start || self.test.end != n {
            return Err(Error::Data(format!(
                "splits {:?}/{:?} do not partition {n} segments",
                self.train, self.test
            )));
        }
        let t = self.segment_len();
        let d = self.embed_dim();
        for (i, s) in self.segments.iter().enumerate() {
            if s.imu.shape() != [IMU_CHANNELS, t] {
                return Err(Error::Data(format!(
                    "segment {i} has shape {:?}, expected [{IMU_CHANNELS}, {t}]",
                    s.imu.shape()
                )));
            }
            if !s.imu.is_finite() {
                return Err(Error::Data(format!("segment {i} has non-finite IMU values")));
            }
            for (name, e) in [("video", &s.video_emb), ("text", &s.text_emb)] {
                if let Some(e) = e {
                    if e.len() != d || !unit_norm_ok(e) {
                        return Err(Error::Data(format!("segment {i} {name} embedding is not a unit {d}-vector")));
                    }
                }
            }
            if let Some(l) = s.label {
                if l >= self.n_classes() {
                    return Err(Error::Data(format!("segment {i} label {l} outside {} classes", self.n_classes())));
                }
            }
        }
        Ok(())
    }

    pub fn batch_view(&self, indices: &[usize]) -> BatchView {
        let seg = |i: usize| &self.segments[i];
        BatchView {
            imu: indices.iter().map(|&i| seg(i).imu.clone()).collect(),
            video: indices.iter().map(|&i| seg(i).video_emb.clone()).collect(),
            text: indices.iter().map(|&i| seg(i).text_emb.clone()).collect(),
            labels: indices.iter().map(|&i| seg(i).label).collect(),
        }
    }

    /// Labeled training rows grouped by class.
    fn train_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by: BTreeMap<usize, Vec<usize>> = (0..self.n_classes()).map(|c| (c, Vec::new())).collect();
        for i in self.train.clone() {
            if let Some(l) = self.segments[i].label {
                by.entry(l).or_default().push(i);
            }
        }
        by
    }
}

/// Builds a dataset from labeled segments: stratified split with
/// `test_fraction` of each class held out, training rows first, then
/// per-channel z-normalization fitted on the training rows and rounding to
/// storage precision.
pub(crate) fn assemble(
    segments: Vec<AlignedTriplet>,
    class_names: Vec<String>,
    sample_rate_hz: f64,
    test_fraction: f64,
    split_seed: u64,
    normalize_imu: bool,
) -> Result<Dataset> {
    let mut by_class: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = SeededRng::derive(split_seed, 0x5911);
    let mut is_test = vec![false; segments.len()];
    for idx in by_class.values_mut() {
        rng.shuffle(idx);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in segments.into_iter().zip(is_test) {
        if t {
            test.push(s)
        } else {
            train.push(s)
        }
    }
    let n_train = train.len();
    train.extend(test);
    let mut segments = train;

    let normalization = if normalize_imu && n_train > 0 {
        let t = segments[0].imu.shape()[1];
        let mut mean = vec![0.0; IMU_CHANNELS];
        let mut sq = vec![0.0; IMU_CHANNELS];
        for s in &segments[..n_train] {
            for (c, (m, q)) in mean.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in &s.imu.data()[c * t..(c + 1) * t] {
                    *m += v;
                    *q += v * v;
                }
            }
        }
        let count = (n_train * t) as f64;
        let std: Vec<f64> = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, q)| {
                *m /= count;
                let var = (q / count - *m * *m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        for s in &mut segments {
            for c in 0..IMU_CHANNELS {
                for v in &mut s.imu.data_mut()[c * t..(c + 1) * t] {
                    *v = (*v - mean[c]) / std[c];
                }
            }
        }
        Some(Normalization { mean, std })
    } else {
        None
    };

    for s in &mut segments {
        quantize(s.imu.data_mut());
        for e in [&mut s.video_emb, &mut s.text_emb].into_iter().flatten() {
            quantize(e);
        }
    }
    let n = segments.len();
    let ds = Dataset {
        segments,
        sample_rate_hz,
        class_names,
        train: 0..n_train,
        test: n_train..n,
        normalization,
    };
    ds.validate()?;
    Ok(ds)
}

/// Windows produced from one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    pub windows: Vec<Tensor>,
    /// The stream was shorter than one window.
    pub too_short: bool,
}

/// Cuts a `[C × N]` stream into `[C × W]` windows, `W = round(window_s · rate)`,
/// advancing `round(hop_s · rate)` samples each time. A trailing remainder is
/// dropped.
pub fn window_stream(stream: &Tensor, sample_rate_hz: f64, window_s: f64, hop_s: f64) -> Result<Windows> {
    let (c, n) = stream.dims2("window_stream")?;
    let w = (window_s * sample_rate_hz).round() as usize;
    let hop = (hop_s * sample_rate_hz).round() as usize;
    if w == 0 {
        return Err(Error::config("window_s", "window must span at least one sample"));
    }
    if hop == 0 {
        return Err(Error::config("hop_s", "hop must span at least one sample"));
    }
    if n < w {
        log::warn!("stream of {n} samples is shorter than one {w}-sample window");
        return Ok(Windows {
            windows: Vec::new(),
            too_short: true,
        });
    }
    let count = (n - w) / hop + 1;
    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * hop;
        let mut data = Vec::with_capacity(c * w);
        for ch in 0..c {
            data.extend_from_slice(&stream.data()[ch * n + start..ch * n + start + w]);
        }
        windows.push(Tensor::new(vec![c, w], data)?);
    }
    Ok(Windows {
        windows,
        too_short: false,
    })
}

/// Removes video and text embeddings from exactly `round((1 − keep_fraction)·n)`
/// segments chosen uniformly without replacement.
pub fn strip_alignment(dataset: &Dataset, keep_fraction: f64, rng: &mut SeededRng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::config("aligned_fraction", "must lie in [0, 1]"));
    }
    let n = dataset.len();
    let n_strip = ((1.0 - keep_fraction) * n as f64).round() as usize;
    let mut out = dataset.clone();
    for i in rng.sample_indices(n, n_strip) {
        out.segments[i].video_emb = None;
        out.segments[i].text_emb = None;
    }
    Ok(out)
}

/// `n_per_class` training rows of every class, sampled without replacement
/// under `trial_seed`, returned sorted.
pub fn sample_few_shot(dataset: &Dataset, n_per_class: usize, trial_seed: u64) -> Result<Vec<usize>> {
    let mut rng = SeededRng::new(trial_seed);
    let mut out = Vec::with_capacity(n_per_class * dataset.n_classes());
    for (c, rows) in dataset.train_by_class() {
        if rows.len() < n_per_class {
            return Err(Error::Data(format!(
                "class {:?} has {} labeled training segments, {n_per_class} requested",
                dataset.class_names[c],
                rows.len()
            )));
        }
        out.extend(rng.sample_indices(rows.len(), n_per_class).into_iter().map(|k| rows[k]));
    }
    out.sort_unstable();
    Ok(out)
}

/// Largest `n_per_class` every class can supply from the training split.
pub fn max_shots(dataset: &Dataset) -> usize {
    dataset.train_by_class().values().map(Vec::len).min().unwrap_or(0)
}
