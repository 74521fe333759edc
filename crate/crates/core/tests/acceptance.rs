//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs the full synthetic experiment grid (several minutes).

mod common;

use std::collections::VecDeque;
use std::fs;
use std::time::Instant;

use primus::ablation::{run_one, AblationRun, Objective};
use primus::checks::{check_loss_term, LossTermKind, GRADCHECK_TOL};
use primus::data::{gen_synthetic, load_dataset, save_dataset, strip_alignment, SyntheticSpec};
use primus::encoder::{init_encoder, EncoderConfig};
use primus::probe::{few_shot_eval, EvalConfig, ProbeReport};
use primus::queue::{FeatureQueue, QueueEntry};
use primus::rng::SeededRng;
use primus::tensor::{Graph, Tensor};
use primus::train::{pretrain, RunOptions, TrainConfig};
use primus::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn nce(a: &[Vec<f64>], t: &[Vec<f64>], log_tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(a).unwrap());
    let t = g.constant(Tensor::from_rows(t).unwrap());
    let tau = g.constant(Tensor::scalar(log_tau));
    let l = g.info_nce(a, t, tau).unwrap();
    g.value(l).item()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for term in LossTermKind::ALL {
        let r = check_loss_term(term, 0, false).unwrap();
        let e = if r.failure.is_some() { f64::INFINITY } else { r.max_rel_error };
        worst = worst.max(e);
        parts.push(format!("{} {:.2e}", term.name(), e));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < GRADCHECK_TOL && secs < 60.0, format!("{} in {secs:.1}s", parts.join(", ")))
}

fn info_nce_bounds() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut ok = true;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_const = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + rng.below(63);
        let d = 2 + rng.below(31);
        let log_tau = (0.01f64.ln()) * rng.uniform();
        // every anchor paired with itself, so each positive is the row maximum
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let v = nce(&rows, &rows, log_tau);
        let log_n = (n as f64).ln();
        ok &= v >= 0.0 && v <= log_n + 1e-12;
        worst_excess = worst_excess.max(v - log_n);
        let c = vec![rows[0].clone(); n];
        let vc = nce(&c, &c, log_tau);
        worst_const = worst_const.max((vc - log_n).abs());
        ok &= (vc - log_n).abs() < 1e-9;
    }
    let single = nce(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 0.07f64.ln());
    ok &= single == 0.0;
    outcome(
        ok,
        format!("max(L - log n) = {worst_excess:.3e}, constant-batch error {worst_const:.1e}, n=1 gives {single}"),
    )
}

fn queue_oracles() -> Outcome {
    let mut rng = SeededRng::new(3);
    let d = 6;
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..100 {
        let size = 1 + rng.below(256);
        let mut entries: Vec<QueueEntry> = Vec::with_capacity(size);
        for s in 0..size {
            // duplicate earlier video vectors now and then to force ties
            let z_v = if s > 0 && rng.uniform() < 0.2 {
                entries[rng.below(s)].z_v.clone()
            } else {
                unit(&mut rng, d)
            };
            entries.push(QueueEntry {
                z_m: unit(&mut rng, d),
                z_v,
                z_t: None,
                insert_step: s as u64,
            });
        }
        let query = if rng.uniform() < 0.5 {
            entries[rng.below(size)].z_v.clone()
        } else {
            unit(&mut rng, d)
        };
        let mut q = FeatureQueue::new(256).unwrap();
        q.push_batch(entries.clone()).unwrap();
        let got = q.nearest_by_video(&query).unwrap().0;
        let sims: Vec<f64> = entries.iter().map(|e| e.z_v.iter().zip(&query).map(|(a, b)| a * b).sum()).collect();
        let mut best = 0;
        for k in 1..size {
            if sims[k] > sims[best] {
                best = k;
            }
        }
        if sims.iter().filter(|&&s| s == sims[best]).count() > 1 {
            ties += 1;
        }
        mismatches += (got != best) as usize;
    }

    let cap = 97;
    let mut q = FeatureQueue::new(cap).unwrap();
    let mut replay: VecDeque<QueueEntry> = VecDeque::new();
    let mut pushed = 0u64;
    while pushed < 10_000 {
        let k = (1 + rng.below(40)).min((10_000 - pushed) as usize);
        let batch: Vec<QueueEntry> = (0..k)
            .map(|i| QueueEntry {
                z_m: unit(&mut rng, 2),
                z_v: unit(&mut rng, 2),
                z_t: None,
                insert_step: pushed + i as u64,
            })
            .collect();
        for e in &batch {
            replay.push_back(e.clone());
            if replay.len() > cap {
                replay.pop_front();
            }
        }
        q.push_batch(batch).unwrap();
        pushed += k as u64;
    }
    let fifo_ok = q.iter().eq(replay.iter());
    outcome(
        mismatches == 0 && fifo_ok,
        format!("{mismatches}/100 retrieval mismatches ({ties} trials with ties), FIFO replay after {pushed} pushes: {fifo_ok}"),
    )
}

fn param_budget() -> Outcome {
    let cfg = EncoderConfig::default();
    let (c, k, h, hh, e) = (&cfg.conv_channels, cfg.kernel, cfg.gru_hidden, cfg.head_hidden, cfg.embed_dim);
    let conv = (6 * c[0] * k + 3 * c[0]) + (c[0] * c[1] * k + 3 * c[1]) + (c[1] * c[2] * k + 3 * c[2]);
    let gru = 3 * h * (c[2] + h) + 6 * h;
    let heads = 2 * (h * hh + hh + hh * e + e);
    let hand = conv + gru + heads;
    let got = init_encoder(&cfg, &mut SeededRng::new(0)).unwrap().param_count();
    outcome(
        got == hand && cfg.param_count() == hand && (1_100_000..=1_700_000).contains(&got),
        format!("param_count {got}, hand-derived {hand}"),
    )
}

fn determinism() -> Outcome {
    let ds = common::tiny_dataset(11);
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..common::tiny_config()
    };
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let opts = |i: usize| RunOptions {
        checkpoint_dir: Some(dirs[i].path().to_path_buf()),
        ..RunOptions::default()
    };
    let a = pretrain(&ds, &cfg, &opts(0)).unwrap();
    let b = pretrain(&ds, &cfg, &opts(1)).unwrap();
    let same = fs::read(a.final_checkpoint.as_ref().unwrap()).unwrap() == fs::read(b.final_checkpoint.as_ref().unwrap()).unwrap();

    pretrain(
        &ds,
        &cfg,
        &RunOptions {
            stop_after_steps: Some(9),
            ..opts(2)
        },
    )
    .unwrap();
    let resumed = pretrain(
        &ds,
        &cfg,
        &RunOptions {
            resume_from: Some(dirs[2].path().join("ckpt-00000008.bin")),
            ..opts(2)
        },
    )
    .unwrap();
    let tail_ok = resumed.log.as_slice() == &a.log[8..];
    let final_ok = fs::read(resumed.final_checkpoint.unwrap()).unwrap() == fs::read(a.final_checkpoint.unwrap()).unwrap();
    outcome(
        same && tail_ok && final_ok,
        format!(
            "identical checkpoints: {same}; resumed {} of {} steps bit-exact: {tail_ok}; final checkpoint equal: {final_ok}",
            resumed.log.len(),
            a.log.len()
        ),
    )
}

fn dataset_round_trip() -> Outcome {
    let mut rng = SeededRng::new(9);
    let mut equal = 0;
    let mut faults = 0;
    let mut detected = 0;
    for i in 0..50u64 {
        let coarse = 1 + rng.below(2);
        let spec = SyntheticSpec {
            n_classes: 2 * coarse * (1 + rng.below(3)),
            segments_per_class: 3 + rng.below(10),
            t: 8 + rng.below(60),
            embed_dim: 2 + rng.below(30),
            text_coarseness: coarse,
            imu_noise: rng.uniform(),
            seed: i,
            ..SyntheticSpec::default()
        };
        let ds = gen_synthetic(&spec).unwrap();
        let ds = strip_alignment(&ds, rng.uniform(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        equal += (load_dataset(dir.path()).unwrap() == ds) as usize;
        for blob in ["imu.bin", "video.bin", "text.bin", "labels.bin"] {
            let p = dir.path().join(blob);
            let clean = fs::read(&p).unwrap();
            let mut flipped = clean.clone();
            let at = rng.below(clean.len());
            flipped[at] ^= 1 << rng.below(8);
            let mut truncated = clean.clone();
            truncated.pop();
            for bad in [flipped, truncated] {
                fs::write(&p, &bad).unwrap();
                faults += 1;
                detected += matches!(load_dataset(dir.path()), Err(Error::CorruptDataset(_))) as usize;
            }
            fs::write(&p, &clean).unwrap();
        }
    }
    outcome(
        equal == 50 && detected == faults,
        format!("{equal}/50 datasets equal after reload, {detected}/{faults} injected faults detected"),
    )
}

// ----------------------------------------------------------- experiments

struct Experiments {
    eval: EvalConfig,
    random: Vec<ProbeReport>,
    runs: Vec<AblationRun>,
    primus_secs: f64,
}

impl Experiments {
    fn run(&self, name: &str, fraction: f64) -> &AblationRun {
        self.runs
            .iter()
            .find(|r| r.objective.name == name && r.aligned_fraction == fraction)
            .expect("experiment ran")
    }

    fn at(&self, name: &str, fraction: f64, shots: usize) -> &ProbeReport {
        report(&self.run(name, fraction).reports, shots)
    }
}

fn report(reports: &[ProbeReport], shots: usize) -> &ProbeReport {
    reports.iter().find(|r| r.n_per_class == shots).expect("shot count evaluated")
}

fn run_experiments() -> Experiments {
    let dataset = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let base = common::experiment_config();
    let eval = EvalConfig {
        shots: vec![10, 100],
        trials: 5,
        ..EvalConfig::default()
    };
    let init = init_encoder(&base.encoder, &mut SeededRng::derive(base.seed, 0)).unwrap();
    let random = few_shot_eval(&init, &dataset, &eval, "random-init", 1.0).unwrap();
    let grid = [
        ((1.0, 0.0, 0.0), 0.0),
        ((0.0, 1.0, 0.0), 1.0),
        ((1.0, 1.0, 0.0), 1.0),
        ((1.0, 0.0, 1.0), 1.0),
        ((0.0, 1.0, 1.0), 1.0),
        ((1.0, 1.0, 1.0), 1.0),
        ((1.0, 1.0, 1.0), 0.1),
    ];
    let mut runs = Vec::new();
    let mut primus_secs = 0.0;
    for ((a, b, g), fraction) in grid {
        let objective = Objective::from_weights(a, b, g);
        let start = Instant::now();
        let run = run_one(&dataset, &objective, fraction, &base, &eval).unwrap();
        let secs = start.elapsed().as_secs_f64();
        if objective.name == "PRIMUS" && fraction == 1.0 {
            primus_secs = secs;
        }
        let accs: Vec<String> = run.reports.iter().map(|r| format!("{}-shot {:.4}±{:.4}", r.n_per_class, r.mean, r.stderr)).collect();
        eprintln!("  {} @ aligned {fraction}: {} ({secs:.0}s)", objective.name, accs.join(", "));
        runs.push(run);
    }
    Experiments {
        eval,
        random,
        runs,
        primus_secs,
    }
}

fn learning_signal(x: &Experiments) -> Outcome {
    let p = x.at("PRIMUS", 1.0, 10);
    let r = report(&x.random, 10);
    let gain = p.mean - r.mean;
    outcome(
        gain >= 0.15 && x.primus_secs < 900.0,
        format!(
            "10-shot PRIMUS {:.4} vs random init {:.4} (+{:.1} points over {} paired trials), pretrain+probe {:.0}s",
            p.mean,
            r.mean,
            100.0 * gain,
            x.eval.trials,
            x.primus_secs
        ),
    )
}

fn visible_margin(a: &ProbeReport, b: &ProbeReport) -> bool {
    let diff = a.mean - b.mean;
    diff >= 0.05 && diff > 2.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
}

fn ablation_direction(x: &Experiments) -> Outcome {
    let ss = x.at("SS", 0.0, 100);
    let mut ok = true;
    let mut parts = vec![format!("SS {:.4}", ss.mean)];
    for name in ["MM", "MM+NN", "PRIMUS"] {
        let r = x.at(name, 1.0, 100);
        ok &= visible_margin(r, ss);
        parts.push(format!("{name} {:.4}±{:.4}", r.mean, r.stderr));
    }
    let ssnn = x.run("SS+NN", 1.0);
    let multi = ["SS+MM", "SS+NN", "MM+NN", "PRIMUS"];
    let lowest = multi
        .iter()
        .min_by(|a, b| x.at(a, 1.0, 100).mean.total_cmp(&x.at(b, 1.0, 100).mean))
        .unwrap();
    let collapsed = ssnn.diagnostic.as_ref().is_some_and(|d| d.collapsed);
    ok &= collapsed || *lowest == "SS+NN";
    parts.push(format!(
        "SS+NN {:.4} (collapsed: {collapsed}, lowest multi-term: {lowest})",
        x.at("SS+NN", 1.0, 100).mean
    ));
    outcome(ok, format!("100-shot: {}", parts.join(", ")))
}

fn data_efficiency(x: &Experiments) -> Outcome {
    let low = x.at("PRIMUS", 0.1, 100);
    let full = x.at("PRIMUS", 1.0, 100);
    let ss = x.at("SS", 0.0, 100);
    let ok = low.mean - ss.mean >= 0.05 && full.mean - low.mean <= 0.05;
    outcome(
        ok,
        format!(
            "100-shot: PRIMUS@0.1 {:.4}±{:.4}, PRIMUS@1.0 {:.4}±{:.4}, SS@0 {:.4}±{:.4}",
            low.mean, low.stderr, full.mean, full.stderr, ss.mean, ss.stderr
        ),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "criterion {n} [{name}]: {} ({}; {:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        results.push((n, name, o));
    };
    record(1, "gradient correctness", &gradients);
    record(2, "InfoNCE bounds", &info_nce_bounds);
    record(3, "queue oracle equivalence", &queue_oracles);
    record(7, "parameter budget", &param_budget);
    record(8, "determinism and checkpointing", &determinism);
    record(9, "dataset round-trip", &dataset_round_trip);

    eprintln!("running the synthetic pretraining experiments");
    let x = run_experiments();
    record(4, "end-to-end learning signal", &|| learning_signal(&x));
    record(5, "ablation direction", &|| ablation_direction(&x));
    record(6, "data efficiency direction", &|| data_efficiency(&x));

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
