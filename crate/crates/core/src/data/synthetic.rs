use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{assemble, normalize, AlignedTriplet, Dataset, IMU_CHANNELS};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Parameters of the synthetic aligned-triplet generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub segments_per_class: usize,
    pub t: usize,
    pub sample_rate_hz: f64,
    pub embed_dim: usize,
    /// Gaussian IMU noise.
    pub imu_noise: f64,
    pub video_noise: f64,
    pub text_noise: f64,
    /// Classes sharing one text prototype.
    pub text_coarseness: usize,
    /// Log-normal spread of the per-sample amplitude of each class sinusoid.
    pub amplitude_jitter: f64,
    /// Peak per-channel amplitude of one class-independent sinusoid added to
    /// every segment.
    pub distractor_amplitude: f64,
    /// Relative frequency jitter of the class sinusoids.
    pub frequency_jitter: f64,
    /// Classes `2k` and `2k+1` share sinusoids and differ only in the
    /// direction of a linear amplitude envelope `1 ± slope·(2t/D − 1)`:
    /// rising for even classes, falling for odd ones.
    pub envelope_slope: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            segments_per_class: 250,
            t: 100,
            sample_rate_hz: 20.0,
            embed_dim: 64,
            imu_noise: 0.5,
            video_noise: 0.1,
            text_noise: 0.1,
            text_coarseness: 2,
            amplitude_jitter: 0.3,
            distractor_amplitude: 1.0,
            frequency_jitter: 0.05,
            envelope_slope: 0.8,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least two classes"));
        }
        if self.segments_per_class < 2 {
            return Err(Error::config("segments_per_class", "need at least two segments per class"));
        }
        if self.t < 2 {
            return Err(Error::config("t", "segments need at least two samples"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("sample_rate_hz", "must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim", "must be at least 2"));
        }
        for (f, v) in [
            ("imu_noise", self.imu_noise),
            ("video_noise", self.video_noise),
            ("text_noise", self.text_noise),
            ("amplitude_jitter", self.amplitude_jitter),
            ("distractor_amplitude", self.distractor_amplitude),
            ("frequency_jitter", self.frequency_jitter),
            ("envelope_slope", self.envelope_slope),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(f, "noise levels must be finite and >= 0"));
            }
        }
        if self.envelope_slope > 1.0 {
            return Err(Error::config("envelope_slope", "must be at most 1"));
        }
        if self.n_classes % 2 != 0 {
            return Err(Error::config("n_classes", "classes come in envelope pairs and must be even"));
        }
        if self.text_coarseness == 0 || self.n_classes % self.text_coarseness != 0 {
            return Err(Error::config("text_coarseness", "must divide n_classes"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn band(&self) -> (f64, f64) {
        // keep well inside Nyquist and above one cycle per segment
        let duration = self.t as f64 / self.sample_rate_hz;
        let lo = (1.5 / duration).max(0.05 * self.sample_rate_hz);
        let hi = 0.2 * self.sample_rate_hz;
        (lo, hi.max(lo * 1.5))
    }
}

struct ClassSignal {
    freq: [f64; 2],
    amp: [[f64; 2]; IMU_CHANNELS],
}

fn random_unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    normalize(&mut v);
    v
}

fn noisy_unit(proto: &[f64], sigma: f64, rng: &mut SeededRng) -> Vec<f64> {
    let mut v: Vec<f64> = proto.iter().map(|p| p + sigma * rng.normal()).collect();
    normalize(&mut v);
    v
}

/// Generates the labeled synthetic dataset.
///
/// Each pair of classes owns two sinusoid frequencies and per-channel
/// amplitudes, and the two classes of a pair differ in the direction of the
/// amplitude envelope. A segment draws a phase and log-normal amplitude jitter for each sinusoid,
/// adds one class-independent distractor sinusoid and Gaussian noise. Video
/// embeddings scatter around one random unit prototype per class, text
/// embeddings around one prototype per group of `text_coarseness` classes.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut class_rng = SeededRng::derive(spec.seed, 1);
    let (lo, hi) = spec.band();
    let pairs: Vec<ClassSignal> = (0..spec.n_classes / 2)
        .map(|_| {
            let freq = [lo + (hi - lo) * class_rng.uniform(), lo + (hi - lo) * class_rng.uniform()];
            let mut amp = [[0.0; 2]; IMU_CHANNELS];
            for a in amp.iter_mut() {
                for x in a.iter_mut() {
                    *x = 2.0 * class_rng.uniform() - 1.0;
                }
            }
            ClassSignal { freq, amp }
        })
        .collect();
    let video_protos: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| random_unit(&mut class_rng, spec.embed_dim)).collect();
    let text_protos: Vec<Vec<f64>> = (0..spec.n_classes / spec.text_coarseness)
        .map(|_| random_unit(&mut class_rng, spec.embed_dim))
        .collect();

    let mut rng = SeededRng::derive(spec.seed, 2);
    let dt = 1.0 / spec.sample_rate_hz;
    let mut segments = Vec::with_capacity(spec.n_classes * spec.segments_per_class);
    let duration = spec.t as f64 * dt;
    for c in 0..spec.n_classes {
        let cls = &pairs[c / 2];
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        for k in 0..spec.segments_per_class {
            let mut comps = Vec::with_capacity(3);
            for s in 0..2 {
                let f = cls.freq[s] * (1.0 + spec.frequency_jitter * rng.normal());
                let phase = 2.0 * PI * rng.uniform();
                let a = (spec.amplitude_jitter * rng.normal()).exp();
                let amps: Vec<f64> = (0..IMU_CHANNELS).map(|ch| a * cls.amp[ch][s]).collect();
                comps.push((f, phase, amps));
            }
            let f = lo + (hi - lo) * rng.uniform();
            let phase = 2.0 * PI * rng.uniform();
            let amps: Vec<f64> = (0..IMU_CHANNELS)
                .map(|_| spec.distractor_amplitude * (2.0 * rng.uniform() - 1.0))
                .collect();
            comps.push((f, phase, amps));

            let mut data = vec![0.0; IMU_CHANNELS * spec.t];
            for ch in 0..IMU_CHANNELS {
                for i in 0..spec.t {
                    let time = i as f64 * dt;
                    let env = 1.0 + sign * spec.envelope_slope * (2.0 * time / duration - 1.0);
                    let clean: f64 = comps
                        .iter()
                        .enumerate()
                        .map(|(j, (f, p, a))| {
                            let e = if j < 2 { env } else { 1.0 };
                            e * a[ch] * (2.0 * PI * f * time + p).sin()
                        })
                        .sum();
                    data[ch * spec.t + i] = clean + spec.imu_noise * rng.normal();
                }
            }
            let video_emb = noisy_unit(&video_protos[c], spec.video_noise, &mut rng);
            let text_emb = noisy_unit(&text_protos[c / spec.text_coarseness], spec.text_noise, &mut rng);
            segments.push(AlignedTriplet {
                imu: Tensor::new(vec![IMU_CHANNELS, spec.t], data)?,
                video_emb: Some(video_emb),
                text_emb: Some(text_emb),
                label: Some(c),
                source_id: format!("syn-{c}-{k}"),
            });
        }
    }
    let names = (0..spec.n_classes).map(|c| format!("class_{c}")).collect();
    assemble(segments, names, spec.sample_rate_hz, spec.test_fraction, spec.seed, true)
}
