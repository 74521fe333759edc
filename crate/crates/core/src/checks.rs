//! Finite-difference verification of the loss terms on a tiny configuration.

use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::encoder::{init_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, BatchView, LossConfig, LossContext, NnRetrieval, TemperatureVars, TAU_INIT};
use crate::queue::{FeatureQueue, QueueEntry};
use crate::rng::SeededRng;
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTermKind {
    Ss,
    Mm,
    Nn,
    Combined,
}

impl LossTermKind {
    pub const ALL: [LossTermKind; 4] = [Self::Ss, Self::Mm, Self::Nn, Self::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ss => "ss",
            Self::Mm => "mm",
            Self::Nn => "nn",
            Self::Combined => "combined",
        }
    }
}

impl FromStr for LossTermKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("terms", format!("unknown term {s:?} (ss, mm, nn, combined)")))
    }
}

/// Tiny problem: `T = 32`, batch 4, embedding dimension 16, queue of 32.
pub struct TinySetup {
    pub params: EncoderParams,
    pub log_tau: Tensor,
    pub batch: BatchView,
    pub queue: FeatureQueue,
    pub augment: AugmentConfig,
    pub seed: u64,
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        in_channels: 6,
        conv_channels: vec![4],
        kernel: 5,
        pool_window: 2,
        gn_groups: 2,
        gru_hidden: 6,
        head_hidden: 12,
        embed_dim: 16,
    }
}

fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn tiny_setup(seed: u64) -> Result<TinySetup> {
    const T: usize = 32;
    const N: usize = 4;
    const K: usize = 32;
    let cfg = tiny_encoder_config();
    let d = cfg.embed_dim;
    let mut rng = SeededRng::derive(seed, 0x6C);
    let params = init_encoder(&cfg, &mut rng)?;
    let imu = (0..N)
        .map(|_| Tensor::new(vec![6, T], (0..6 * T).map(|_| rng.normal()).collect()))
        .collect::<Result<Vec<_>>>()?;
    let batch = BatchView {
        imu,
        video: (0..N).map(|_| Some(unit(&mut rng, d))).collect(),
        text: (0..N).map(|_| Some(unit(&mut rng, d))).collect(),
        labels: vec![None; N],
    };
    let mut queue = FeatureQueue::new(K)?;
    let entries = (0..K as u64)
        .map(|s| QueueEntry {
            z_m: unit(&mut rng, d),
            z_v: unit(&mut rng, d),
            z_t: (s % 5 != 0).then(|| unit(&mut rng, d)),
            insert_step: s,
        })
        .collect();
    queue.push_batch(entries)?;
    Ok(TinySetup {
        params,
        log_tau: Tensor::scalar((2.0 * TAU_INIT).ln()),
        batch,
        queue,
        augment: AugmentConfig::default(),
        seed,
    })
}

impl TinySetup {
    /// Value and gradients (encoder tensors, then `log τ`) of one term.
    pub fn evaluate(&self, term: LossTermKind, tensors: &[Tensor], corrupt: bool) -> Result<(f64, Vec<Tensor>)> {
        let mut params = self.params.clone();
        for (dst, src) in params.tensors_mut().into_iter().zip(tensors) {
            *dst = src.clone();
        }
        let mut graph = if corrupt { Graph::with_corrupted_adjoint() } else { Graph::new() };
        let enc = params.bind(&mut graph);
        let (taus, tau_vars) = TemperatureVars::bind(&mut graph, std::slice::from_ref(&tensors[tensors.len() - 1]))?;
        let mut rng = SeededRng::derive(self.seed, 0xA5);
        let mut ctx = LossContext::new(&mut graph, &enc, &self.batch)?;
        let loss = match term {
            LossTermKind::Ss => ctx.loss_ss(&mut rng, &self.augment, taus.ss)?.value,
            LossTermKind::Mm => ctx.loss_mm(taus.mm)?.value,
            LossTermKind::Nn => ctx.loss_nn(&self.queue, taus.nn, NnRetrieval::Video)?.value,
            LossTermKind::Combined => {
                let cfg = LossConfig {
                    nn_warmup: 0,
                    nn_retrieval: NnRetrieval::Video,
                    ..LossConfig::default()
                };
                combined_loss(&mut ctx, &self.queue, &mut rng, &cfg, &self.augment, taus)?.total
            }
        };
        graph.backward(loss)?;
        let mut grads = enc.grads(&graph);
        grads.push(graph.grad_or_zeros(tau_vars[0]));
        Ok((graph.value(loss).item(), grads))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self.params.tensors().into_iter().cloned().collect();
        v.push(self.log_tau.clone());
        v
    }
}

/// Worst relative error between analytic and central-difference gradients
/// of `term` over every encoder parameter and `log τ`.
pub fn check_loss_term(term: LossTermKind, seed: u64, corrupt_adjoint: bool) -> Result<GradCheckReport> {
    let setup = tiny_setup(seed)?;
    let params = setup.tensors();
    // analytic gradients may come from a corrupted graph; values never do
    let analytic = setup.evaluate(term, &params, corrupt_adjoint)?.1;
    let mut first = true;
    Ok(grad_check(
        |p| {
            let (v, g) = setup.evaluate(term, p, false)?;
            if std::mem::take(&mut first) {
                Ok((v, analytic.clone()))
            } else {
                Ok((v, g))
            }
        },
        &params,
        GRADCHECK_EPS,
    ))
}
