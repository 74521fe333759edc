//! Self-supervised, multimodal and nearest-neighbor contrastive terms and
//! their weighted combination.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_h, AugmentConfig};
use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::queue::FeatureQueue;
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor, Var};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Unaligned samples drop out of the multimodal and neighbor terms and
    /// only feed the self-supervised term.
    #[default]
    SkipUnaligned,
}

/// Key used to pick each sample's queue neighbor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NnRetrieval {
    /// Video similarity when the multimodal term is on, IMU similarity otherwise.
    #[default]
    Auto,
    /// Video-to-video similarity; neighbor's IMU, video and text all serve as targets.
    Video,
    /// Similarity of the current multimodal-head output to cached IMU
    /// embeddings; only the cached IMU embedding serves as target.
    Imu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// One learnable temperature per term instead of a shared one.
    #[serde(default)]
    pub per_term_tau: bool,
    /// The neighbor term stays inactive until the queue holds this many entries.
    pub nn_warmup: usize,
    #[serde(default)]
    pub mm_mask_policy: MaskPolicy,
    #[serde(default)]
    pub nn_retrieval: NnRetrieval,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            per_term_tau: false,
            nn_warmup: 128,
            mm_mask_policy: MaskPolicy::SkipUnaligned,
            nn_retrieval: NnRetrieval::Auto,
        }
    }
}

impl LossConfig {
    pub fn with_weights(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(f, "must be a finite non-negative real"));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::config("alpha/beta/gamma", "at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// Retrieval mode with `Auto` resolved against the loss weights.
    pub fn retrieval(&self) -> NnRetrieval {
        match self.nn_retrieval {
            NnRetrieval::Auto if self.beta > 0.0 => NnRetrieval::Video,
            NnRetrieval::Auto => NnRetrieval::Imu,
            other => other,
        }
    }

    /// Number of learnable log-temperatures this config uses.
    pub fn tau_count(&self) -> usize {
        if self.per_term_tau {
            3
        } else {
            1
        }
    }

    /// Initial `log τ` values.
    pub fn initial_log_taus(&self) -> Vec<Tensor> {
        vec![Tensor::scalar(TAU_INIT.ln()); self.tau_count()]
    }
}

/// Clamps learnable log-temperatures so that `τ ∈ [TAU_MIN, TAU_MAX]`.
pub fn clamp_log_tau(log_taus: &mut [Tensor]) {
    for t in log_taus {
        let v = t.data()[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
        t.data_mut()[0] = v;
    }
}

/// Log-temperature vars for each term; all three alias one var when shared.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureVars {
    pub ss: Var,
    pub mm: Var,
    pub nn: Var,
}

impl TemperatureVars {
    pub fn bind(graph: &mut Graph, log_taus: &[Tensor]) -> Result<(Self, Vec<Var>)> {
        let vars: Vec<Var> = log_taus.iter().map(|t| graph.param(t.clone())).collect();
        let tv = match vars[..] {
            [s] => Self { ss: s, mm: s, nn: s },
            [a, b, c] => Self { ss: a, mm: b, nn: c },
            _ => return Err(Error::config("log_tau", "expected one shared or three per-term temperatures")),
        };
        Ok((tv, vars))
    }
}

/// One mini-batch of aligned triplets. Absent modalities are `None`.
#[derive(Clone, Debug, Default)]
pub struct BatchView {
    /// `[C × T]` segments.
    pub imu: Vec<Tensor>,
    pub video: Vec<Option<Vec<f64>>>,
    pub text: Vec<Option<Vec<f64>>>,
    pub labels: Vec<Option<usize>>,
}

impl BatchView {
    pub fn len(&self) -> usize {
        self.imu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imu.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.imu.len();
        if self.video.len() != n || self.text.len() != n || self.labels.len() != n {
            return Err(Error::ContractViolation("batch modality lists differ in length".into()));
        }
        for (name, col) in [("video", &self.video), ("text", &self.text)] {
            for (i, v) in col.iter().enumerate() {
                if let Some(v) = v {
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > UNIT_TOL {
                        return Err(Error::ContractViolation(format!(
                            "{name} embedding of row {i} has norm {norm}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn video_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.video[i].is_some()).collect()
    }

    pub fn text_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.text[i].is_some()).collect()
    }

    /// Share of rows carrying a video embedding.
    pub fn aligned_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.video_rows().len() as f64 / self.len() as f64
        }
    }
}

/// Value of one loss term on the graph. Inactive terms are an exact zero
/// constant.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub value: Var,
    pub active: bool,
}

/// Lazily shares the backbone pass and multimodal embeddings of one batch
/// between the loss terms.
pub struct LossContext<'a> {
    pub graph: &'a mut Graph,
    pub encoder: &'a EncoderVars,
    pub batch: &'a BatchView,
    backbone: Option<Var>,
    mm: Option<Var>,
}

fn constant_rows(graph: &mut Graph, rows: Vec<&[f64]>) -> Result<Var> {
    let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.to_vec()).collect();
    Ok(graph.constant(Tensor::from_rows(&rows)?))
}

impl<'a> LossContext<'a> {
    pub fn new(graph: &'a mut Graph, encoder: &'a EncoderVars, batch: &'a BatchView) -> Result<Self> {
        batch.validate()?;
        Ok(Self {
            graph,
            encoder,
            batch,
            backbone: None,
            mm: None,
        })
    }

    fn zero(&mut self) -> LossTerm {
        LossTerm {
            value: self.graph.constant(Tensor::scalar(0.0)),
            active: false,
        }
    }

    pub fn backbone(&mut self) -> Result<Var> {
        if let Some(v) = self.backbone {
            return Ok(v);
        }
        let v = self.encoder.encode_backbone(self.graph, &self.batch.imu)?;
        self.backbone = Some(v);
        Ok(v)
    }

    /// Multimodal-head embeddings of the whole batch, `[n × embed_dim]`.
    pub fn mm_embeddings(&mut self) -> Result<Var> {
        if let Some(v) = self.mm {
            return Ok(v);
        }
        let h = self.backbone()?;
        let v = self.encoder.head_mm(self.graph, h)?;
        self.mm = Some(v);
        Ok(v)
    }

    /// InfoNCE between self-supervision-head embeddings of each segment and
    /// of its augmented view.
    pub fn loss_ss(&mut self, rng: &mut SeededRng, aug: &AugmentConfig, log_tau: Var) -> Result<LossTerm> {
        let n = self.batch.len();
        if n < 2 {
            return Err(Error::EmptyBatch {
                op: "loss_ss",
                needed: 2,
                got: n,
            });
        }
        let views = self
            .batch
            .imu
            .iter()
            .map(|m| apply_h(m, rng, aug))
            .collect::<Result<Vec<_>>>()?;
        let h = self.backbone()?;
        let anchors = self.encoder.head_ss(self.graph, h)?;
        let hv = self.encoder.encode_backbone(self.graph, &views)?;
        let targets = self.encoder.head_ss(self.graph, hv)?;
        Ok(LossTerm {
            value: self.graph.info_nce(anchors, targets, log_tau)?,
            active: true,
        })
    }

    fn aligned_term(&mut self, rows: &[usize], targets: Vec<&[f64]>, log_tau: Var) -> Result<Var> {
        let mm = self.mm_embeddings()?;
        let anchors = self.graph.select_rows(mm, rows)?;
        let targets = constant_rows(self.graph, targets)?;
        self.graph.info_nce(anchors, targets, log_tau)
    }

    /// IMU→video plus IMU→text InfoNCE over the aligned rows of each
    /// modality. A modality with fewer than two aligned rows contributes 0;
    /// with neither present the term is inactive.
    pub fn loss_mm(&mut self, log_tau: Var) -> Result<LossTerm> {
        let batch = self.batch;
        let mut parts = Vec::new();
        for col in [&batch.video, &batch.text] {
            let rows: Vec<usize> = (0..batch.len()).filter(|&i| col[i].is_some()).collect();
            if rows.len() >= 2 {
                let targets = rows.iter().map(|&i| col[i].as_deref().unwrap()).collect();
                parts.push((self.aligned_term(&rows, targets, log_tau)?, 1.0));
            }
        }
        if parts.is_empty() {
            return Ok(self.zero());
        }
        Ok(LossTerm {
            value: self.graph.weighted_sum(&parts)?,
            active: true,
        })
    }

    /// For every video-aligned row, retrieves the queue entry with the most
    /// similar video embedding and contrasts the row's multimodal embedding
    /// against that entry's cached IMU, video and text vectors. The text
    /// term uses only rows whose neighbor carries text.
    ///
    /// With [`NnRetrieval::Imu`] every row participates, neighbors come from
    /// IMU similarity and only the cached IMU vector is a target.
    pub fn loss_nn(&mut self, queue: &FeatureQueue, log_tau: Var, retrieval: NnRetrieval) -> Result<LossTerm> {
        if retrieval == NnRetrieval::Imu {
            return self.loss_nn_imu(queue, log_tau);
        }
        let batch = self.batch;
        let rows = batch.video_rows();
        if queue.is_empty() || rows.is_empty() {
            return Ok(self.zero());
        }
        let queries: Vec<Vec<f64>> = rows.iter().map(|&i| batch.video[i].clone().unwrap()).collect();
        let hits = queue.batch_retrieve(&queries)?;
        let neighbors: Vec<_> = hits.iter().map(|(k, _)| queue.get(*k).expect("retrieved index")).collect();
        let mut parts = Vec::new();
        if rows.len() >= 2 {
            let zm = neighbors.iter().map(|e| e.z_m.as_slice()).collect();
            parts.push((self.aligned_term(&rows, zm, log_tau)?, 1.0));
            let zv = neighbors.iter().map(|e| e.z_v.as_slice()).collect();
            parts.push((self.aligned_term(&rows, zv, log_tau)?, 1.0));
        }
        let (t_rows, zt): (Vec<usize>, Vec<&[f64]>) = rows
            .iter()
            .zip(&neighbors)
            .filter_map(|(&r, e)| e.z_t.as_deref().map(|t| (r, t)))
            .unzip();
        if t_rows.len() >= 2 {
            parts.push((self.aligned_term(&t_rows, zt, log_tau)?, 1.0));
        }
        if parts.is_empty() {
            return Ok(self.zero());
        }
        Ok(LossTerm {
            value: self.graph.weighted_sum(&parts)?,
            active: true,
        })
    }

    fn loss_nn_imu(&mut self, queue: &FeatureQueue, log_tau: Var) -> Result<LossTerm> {
        let n = self.batch.len();
        if queue.is_empty() || n < 2 {
            return Ok(self.zero());
        }
        let mm = self.mm_embeddings()?;
        let value = self.graph.value(mm).clone();
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let (k, _) = queue.nearest_by_imu(value.row(i))?;
            targets.push(queue.get(k).expect("retrieved index").z_m.as_slice());
        }
        let rows: Vec<usize> = (0..n).collect();
        Ok(LossTerm {
            value: self.aligned_term(&rows, targets, log_tau)?,
            active: true,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_ss: f64,
    pub l_mm: f64,
    pub l_nn: f64,
}

#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub parts: LossParts,
    /// Multimodal loss enabled but no modality had two aligned rows.
    pub mm_starved: bool,
    /// Neighbor loss enabled but the queue was empty, warming up, or no row
    /// was video-aligned.
    pub nn_starved: bool,
    /// Multimodal embeddings, if any term computed them.
    pub mm_embeddings: Option<Var>,
}

/// `α·L_SS + β·L_MM + γ·L_NN`. Terms with zero weight are not evaluated.
pub fn combined_loss(
    ctx: &mut LossContext<'_>,
    queue: &FeatureQueue,
    rng: &mut SeededRng,
    cfg: &LossConfig,
    aug: &AugmentConfig,
    taus: TemperatureVars,
) -> Result<CombinedLoss> {
    cfg.validate()?;
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    let (mut mm_starved, mut nn_starved) = (false, false);
    if cfg.alpha > 0.0 {
        let t = ctx.loss_ss(rng, aug, taus.ss)?;
        parts.l_ss = ctx.graph.value(t.value).item();
        terms.push((t.value, cfg.alpha));
    }
    if cfg.beta > 0.0 {
        let t = ctx.loss_mm(taus.mm)?;
        parts.l_mm = ctx.graph.value(t.value).item();
        mm_starved = !t.active;
        if t.active {
            terms.push((t.value, cfg.beta));
        }
    }
    if cfg.gamma > 0.0 {
        if queue.len() < cfg.nn_warmup.max(1) {
            nn_starved = true;
        } else {
            let t = ctx.loss_nn(queue, taus.nn, cfg.retrieval())?;
            parts.l_nn = ctx.graph.value(t.value).item();
            nn_starved = !t.active;
            if t.active {
                terms.push((t.value, cfg.gamma));
            }
        }
    }
    let total = if terms.is_empty() {
        ctx.graph.constant(Tensor::scalar(0.0))
    } else {
        ctx.graph.weighted_sum(&terms)?
    };
    Ok(CombinedLoss {
        total,
        parts,
        mm_starved,
        nn_starved,
        mm_embeddings: ctx.mm,
    })
}
