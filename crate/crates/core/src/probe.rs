//! Frozen-feature extraction, linear probing, few-shot evaluation and the
//! representation-collapse diagnostic.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{sample_few_shot, Dataset};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};

const FEATURE_CHUNK: usize = 128;

/// Multimodal-head embeddings of every segment, `[n × embed_dim]`, and the
/// labels. The encoder is only read.
pub fn extract_features(params: &EncoderParams, dataset: &Dataset) -> Result<(Tensor, Vec<usize>)> {
    if !dataset.is_labeled() {
        return Err(Error::Data("feature extraction needs a fully labeled dataset".into()));
    }
    let labels = dataset.segments.iter().map(|s| s.label.unwrap()).collect();
    let imu: Vec<Tensor> = dataset.segments.iter().map(|s| s.imu.clone()).collect();
    let mut data = Vec::with_capacity(imu.len() * params.config.embed_dim);
    for chunk in imu.chunks(FEATURE_CHUNK) {
        data.extend_from_slice(params.embed(chunk)?.data());
    }
    Ok((Tensor::new(vec![imu.len(), params.config.embed_dim], data)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_iters: 2000,
            grad_tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression on `features[train]`, zero-initialized
/// and fitted with full-batch Adam; returns accuracy on `features[eval]`.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    train: &[usize],
    eval: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (n, d) = features.dims2("linear_probe")?;
    if labels.len() != n {
        return Err(Error::dim("linear_probe", format!("{} labels for {n} rows", labels.len())));
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("probe needs non-empty train and eval sets".into()));
    }
    if let Some(&i) = train.iter().chain(eval).find(|&&i| i >= n) {
        return Err(Error::Data(format!("index {i} outside {n} feature rows")));
    }
    let mut in_train = vec![false; n];
    train.iter().for_each(|&i| in_train[i] = true);
    if eval.iter().any(|&i| in_train[i]) {
        return Err(Error::Data("probe train and eval indices overlap".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let first = labels[train[0]];
    if train.iter().all(|&i| labels[i] == first) {
        return Err(Error::Data("probe train set contains a single class".into()));
    }

    // weights [d × k] then bias [k]
    let mut w = Tensor::zeros(vec![d + 1, k]);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &[&w],
    );
    let m = train.len() as f64;
    let mut logits = vec![0.0; k];
    for _ in 0..cfg.max_iters {
        let mut grad = vec![0.0; (d + 1) * k];
        for &i in train {
            let x = features.row(i);
            scores(x, w.data(), k, &mut logits);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..k {
                let p = (logits[c] - mx).exp() / z - if labels[i] == c { 1.0 } else { 0.0 };
                for (j, xj) in x.iter().enumerate() {
                    grad[j * k + c] += p * xj / m;
                }
                grad[d * k + c] += p / m;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < cfg.grad_tol {
            break;
        }
        adam.step(&mut [&mut w], &[Tensor::new(vec![d + 1, k], grad)?])?;
    }
    let correct = eval
        .iter()
        .filter(|&&i| {
            scores(features.row(i), w.data(), k, &mut logits);
            argmax(&logits) == labels[i]
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}

fn scores(x: &[f64], w: &[f64], k: usize, out: &mut [f64]) {
    let d = x.len();
    out.copy_from_slice(&w[d * k..(d + 1) * k]);
    for (j, xj) in x.iter().enumerate() {
        for c in 0..k {
            out[c] += xj * w[j * k + c];
        }
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Joint fine-tuning of a randomly initialized (or any) encoder and a linear
/// classifier on the labeled rows; the "standard training" baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

pub fn fine_tune(
    init: &EncoderParams,
    dataset: &Dataset,
    train: &[usize],
    eval: &[usize],
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<f64> {
    if !dataset.is_labeled() {
        return Err(Error::Data("fine-tuning needs a fully labeled dataset".into()));
    }
    let k = dataset.n_classes();
    let e = init.config.embed_dim;
    let mut params = init.clone();
    let mut rng = SeededRng::derive(seed, 0xF17E);
    let bound = 1.0 / (e as f64).sqrt();
    let mut head = vec![
        Tensor::new(vec![e, k], (0..e * k).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect())?,
        Tensor::zeros(vec![k]),
    ];
    let mut slots: Vec<&Tensor> = params.tensors();
    slots.extend(head.iter());
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &slots,
    );
    let mut order = train.to_vec();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let enc = params.bind(&mut g);
            let w = g.param(head[0].clone());
            let b = g.param(head[1].clone());
            let segs: Vec<Tensor> = chunk.iter().map(|&i| dataset.segments[i].imu.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.segments[i].label.unwrap()).collect();
            let h = enc.encode_backbone(&mut g, &segs)?;
            let z = enc.head_mm(&mut g, h)?;
            let logits = g.linear(z, w, b)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            let mut grads = enc.grads(&g);
            grads.push(g.grad_or_zeros(w));
            grads.push(g.grad_or_zeros(b));
            let mut slots = params.tensors_mut();
            slots.extend(head.iter_mut());
            adam.step(&mut slots, &grads)?;
        }
    }
    let mut correct = 0;
    for chunk in eval.chunks(FEATURE_CHUNK) {
        let segs: Vec<Tensor> = chunk.iter().map(|&i| dataset.segments[i].imu.clone()).collect();
        let z = params.embed(&segs)?;
        let mut logits = vec![0.0; k];
        for (r, &i) in chunk.iter().enumerate() {
            logits.copy_from_slice(head[1].data());
            for (j, zj) in z.row(r).iter().enumerate() {
                for c in 0..k {
                    logits[c] += zj * head[0].data()[j * k + c];
                }
            }
            if argmax(&logits) == dataset.segments[i].label.unwrap() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// How the few-shot classifier is fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    LinearProbe(ProbeConfig),
    FineTune(FineTuneConfig),
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::LinearProbe(ProbeConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub objective: String,
    pub aligned_fraction: f64,
    pub n_per_class: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials divided by `sqrt(trials)`.
    pub stderr: f64,
    pub trials: usize,
    /// Only one trial ran, so `stderr` is reported as 0.
    pub single_trial: bool,
}

impl ProbeReport {
    pub fn from_accuracies(task: &str, objective: &str, aligned_fraction: f64, n: usize, acc: Vec<f64>) -> Self {
        let t = acc.len();
        let mean = acc.iter().sum::<f64>() / t as f64;
        let stderr = if t > 1 {
            let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
            var.sqrt() / (t as f64).sqrt()
        } else {
            0.0
        };
        Self {
            task: task.into(),
            objective: objective.into(),
            aligned_fraction,
            n_per_class: n,
            accuracies: acc,
            mean,
            stderr,
            trials: t,
            single_trial: t == 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: String,
    pub shots: Vec<usize>,
    pub trials: usize,
    /// Trial `i` samples its few-shot subset with seed `base_seed + i`.
    pub base_seed: u64,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: "synthetic-har".into(),
            shots: vec![10, 50, 100],
            trials: 5,
            base_seed: 0,
            protocol: Protocol::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::config("shots", "need at least one positive shot count"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be positive"));
        }
        Ok(())
    }
}

/// For each shot count and trial: sample a few-shot subset of the training
/// split, fit the classifier, and score it on the full test split.
pub fn few_shot_eval(
    params: &EncoderParams,
    dataset: &Dataset,
    cfg: &EvalConfig,
    objective: &str,
    aligned_fraction: f64,
) -> Result<Vec<ProbeReport>> {
    cfg.validate()?;
    let eval = dataset.test_indices();
    if eval.is_empty() {
        return Err(Error::Data("dataset has an empty test split".into()));
    }
    let max = *cfg.shots.iter().max().unwrap();
    sample_few_shot(dataset, max, cfg.base_seed)?;
    let features = match &cfg.protocol {
        Protocol::LinearProbe(_) => Some(extract_features(params, dataset)?),
        Protocol::FineTune(_) => None,
    };
    let mut reports = Vec::with_capacity(cfg.shots.len());
    for &n in &cfg.shots {
        let mut acc = Vec::with_capacity(cfg.trials);
        for trial in 0..cfg.trials as u64 {
            let seed = cfg.base_seed + trial;
            let train = sample_few_shot(dataset, n, seed)?;
            let a = match (&cfg.protocol, &features) {
                (Protocol::LinearProbe(p), Some((f, labels))) => linear_probe(f, labels, &train, &eval, p)?,
                (Protocol::FineTune(ft), _) => fine_tune(params, dataset, &train, &eval, ft, seed)?,
                _ => unreachable!(),
            };
            acc.push(a);
        }
        log::info!("{objective}: {n}-shot accuracies {acc:?}");
        reports.push(ProbeReport::from_accuracies(&cfg.task, objective, aligned_fraction, n, acc));
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostic {
    /// Largest squared singular value of the centered feature matrix over
    /// the sum of all of them; 1 when the features have no spread.
    pub top_sv_ratio: f64,
    /// Probe accuracy minus chance.
    pub probe_gap: f64,
    pub collapsed: bool,
}

pub const COLLAPSE_SV_RATIO: f64 = 0.95;
pub const COLLAPSE_GAP: f64 = 0.05;

/// Spectral share of the dominant direction of the centered features.
pub fn top_singular_value_ratio(features: &Tensor) -> Result<f64> {
    let (n, d) = features.dims2("top_singular_value_ratio")?;
    let mut m = DMatrix::from_row_slice(n, d, features.data());
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let gram = m.transpose() * &m;
    let eig = SymmetricEigen::new(gram);
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let top = vals.iter().cloned().fold(0.0, f64::max);
    Ok(if total <= 1e-12 * n as f64 { 1.0 } else { top / total })
}

/// Flags collapse when one direction holds nearly all variance or the probe
/// barely beats chance.
pub fn collapse_diagnostic(features: &Tensor, probe_accuracy: f64, n_classes: usize) -> Result<CollapseDiagnostic> {
    let ratio = top_singular_value_ratio(features)?;
    let gap = probe_accuracy - 1.0 / n_classes as f64;
    Ok(CollapseDiagnostic {
        top_sv_ratio: ratio,
        probe_gap: gap,
        collapsed: ratio > COLLAPSE_SV_RATIO || gap < COLLAPSE_GAP,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_formula() {
        let r = ProbeReport::from_accuracies("t", "o", 1.0, 5, vec![0.5, 0.7, 0.6]);
        assert!((r.mean - 0.6).abs() < 1e-15);
        let sd = (0.02f64 / 2.0).sqrt();
        assert!((r.stderr - sd / 3f64.sqrt()).abs() < 1e-15);
        let one = ProbeReport::from_accuracies("t", "o", 1.0, 5, vec![0.4]);
        assert_eq!(one.stderr, 0.0);
        assert!(one.single_trial);
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn identical_features_ratio_one() {
        let f = Tensor::new(vec![4, 3], [0.6, 0.8, 0.0].repeat(4)).unwrap();
        assert_eq!(top_singular_value_ratio(&f).unwrap(), 1.0);
    }
}
