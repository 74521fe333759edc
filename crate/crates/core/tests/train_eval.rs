mod common;

use std::fs;

use common::*;
use primus::ablation::{run_ablation, run_one, ExperimentGrid, Objective};
use primus::encoder::{decode_checkpoint, encode_checkpoint, init_encoder, load_encoder, save_encoder, EncoderConfig};
use primus::losses::LossConfig;
use primus::probe::*;
use primus::results::{emit_results, read_results, Format};
use primus::rng::SeededRng;
use primus::tensor::Tensor;
use primus::train::*;
use primus::Error;

#[test]
fn default_encoder_parameter_count() {
    // conv blocks: weights + bias + group-norm scale/shift
    let conv1 = 64 * 6 * 7 + 64 + 2 * 64;
    let conv2 = 128 * 64 * 7 + 128 + 2 * 128;
    let conv3 = 256 * 128 * 7 + 256 + 2 * 256;
    // GRU: input and recurrent weights for three gates, two bias vectors
    let gru = 3 * 256 * 256 + 3 * 256 * 256 + 2 * 3 * 256;
    // two heads: 256 -> 512 -> 512
    let head = 256 * 512 + 512 + 512 * 512 + 512;
    let expected = conv1 + conv2 + conv3 + gru + 2 * head;
    assert_eq!(expected, 1_473_984);
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.param_count(), expected);
    let params = init_encoder(&cfg, &mut SeededRng::new(0)).unwrap();
    assert_eq!(params.param_count(), expected);
    assert_eq!(params.flatten().len(), expected);
}

#[test]
fn embeddings_are_unit_norm_and_underflow_is_reported() {
    let cfg = small_encoder();
    let params = init_encoder(&cfg, &mut SeededRng::new(3)).unwrap();
    let mut rng = SeededRng::new(4);
    let segs: Vec<Tensor> = (0..5)
        .map(|_| Tensor::new(vec![6, 100], (0..600).map(|_| rng.normal()).collect()).unwrap())
        .collect();
    let e = params.embed(&segs).unwrap();
    assert_eq!(e.shape(), &[5, 64]);
    for i in 0..5 {
        let n: f64 = e.row(i).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
    let short = Tensor::zeros(vec![6, cfg.min_input_len() - 1]);
    match params.embed(&[short]) {
        Err(Error::Dimension { detail, .. }) => assert!(detail.contains(&cfg.min_input_len().to_string()), "{detail}"),
        other => panic!("{other:?}"),
    }
    let ok = Tensor::new(vec![6, cfg.min_input_len()], (0..6 * cfg.min_input_len()).map(|_| rng.normal()).collect()).unwrap();
    assert!(params.embed(&[ok]).is_ok());
}

#[test]
fn encoder_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_encoder(&small_encoder(), &mut SeededRng::new(1)).unwrap();
    let p = dir.path().join("enc.bin");
    save_encoder(&p, &params).unwrap();
    let back = load_encoder(&p).unwrap();
    assert_eq!(back.flatten(), params.flatten());
    assert_eq!(back.config, params.config);
    let bytes = encode_checkpoint(&params, b"extra").unwrap();
    let (_, appendix) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(appendix, b"extra");
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x10;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let ds = tiny_dataset(1);
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &std::path::Path| {
        pretrain(
            &ds,
            &cfg,
            &RunOptions {
                checkpoint_dir: Some(dir.to_path_buf()),
                ..RunOptions::default()
            },
        )
        .unwrap()
    };
    let ra = run(a.path());
    let rb = run(b.path());
    let ba = fs::read(ra.final_checkpoint.unwrap()).unwrap();
    let bb = fs::read(rb.final_checkpoint.unwrap()).unwrap();
    assert_eq!(ba, bb);
    assert_eq!(ra.log, rb.log);
    assert!(ra.log.iter().any(|r| !r.nn_starved && r.l_nn > 0.0));

    let other = TrainConfig { seed: 8, ..cfg };
    let rc = pretrain(&ds, &other, &RunOptions::default()).unwrap();
    assert_ne!(rc.params.flatten(), ra.params.flatten());
}

#[test]
fn resume_reproduces_remaining_trajectory() {
    let ds = tiny_dataset(2);
    let cfg = TrainConfig {
        checkpoint_every: 5,
        ..tiny_config()
    };
    let full_dir = tempfile::tempdir().unwrap();
    let full = pretrain(
        &ds,
        &cfg,
        &RunOptions {
            checkpoint_dir: Some(full_dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let log_path = part_dir.path().join("train.jsonl");
    // stop mid-epoch, after a checkpoint boundary
    let first = pretrain(
        &ds,
        &cfg,
        &RunOptions {
            checkpoint_dir: Some(part_dir.path().to_path_buf()),
            log_path: Some(log_path.clone()),
            stop_after_steps: Some(11),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(first.log.len(), 11);
    let ckpt = part_dir.path().join("ckpt-00000010.bin");
    let saved = load_training_checkpoint(&ckpt).unwrap();
    assert_eq!(saved.step, 10);

    let resumed = pretrain(
        &ds,
        &cfg,
        &RunOptions {
            checkpoint_dir: Some(part_dir.path().to_path_buf()),
            log_path: Some(log_path.clone()),
            resume_from: Some(ckpt),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.log.as_slice(), &full.log[10..]);
    assert_eq!(resumed.params.flatten(), full.params.flatten());
    let a = fs::read(full.final_checkpoint.unwrap()).unwrap();
    let b = fs::read(resumed.final_checkpoint.unwrap()).unwrap();
    assert_eq!(a, b);
    // the appended log holds the interrupted prefix and the resumed remainder
    assert_eq!(read_log(&log_path).unwrap().len(), 11 + full.log.len() - 10);
}

#[test]
fn resume_rejects_changed_config() {
    let ds = tiny_dataset(2);
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(
        &ds,
        &TrainConfig { epochs: 1, ..cfg.clone() },
        &RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let changed = TrainConfig { lr: 5e-4, ..cfg };
    let r = pretrain(
        &ds,
        &changed,
        &RunOptions {
            resume_from: out.final_checkpoint,
            ..RunOptions::default()
        },
    );
    assert!(matches!(r, Err(Error::Config { .. })), "{r:?}");
}

#[test]
fn loss_decreases_over_training() {
    let ds = tiny_dataset(3);
    let cfg = TrainConfig {
        epochs: 6,
        loss: LossConfig::with_weights(0.0, 1.0, 0.0),
        ..tiny_config()
    };
    let out = pretrain(&ds, &cfg, &RunOptions::default()).unwrap();
    let mean = |e: usize| {
        let v: Vec<f64> = out.log.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(5) < mean(0), "{} vs {}", mean(5), mean(0));
    assert!(out.log.iter().all(|r| (0.01..=1.0).contains(&r.tau)));
}

#[test]
fn invalid_training_configs() {
    let ds = tiny_dataset(0);
    let zero = TrainConfig {
        loss: LossConfig::with_weights(0.0, 0.0, 0.0),
        ..tiny_config()
    };
    assert!(matches!(pretrain(&ds, &zero, &RunOptions::default()), Err(Error::Config { .. })));
    let big = TrainConfig {
        batch_size: 1000,
        ..tiny_config()
    };
    assert!(matches!(pretrain(&ds, &big, &RunOptions::default()), Err(Error::Data(_))));
    let unaligned = TrainConfig {
        aligned_fraction: 0.0,
        loss: LossConfig::with_weights(0.0, 1.0, 0.0),
        ..tiny_config()
    };
    assert!(matches!(pretrain(&ds, &unaligned, &RunOptions::default()), Err(Error::Data(_))));
}

#[test]
fn partial_alignment_is_reported() {
    let ds = tiny_dataset(4);
    let cfg = TrainConfig {
        epochs: 1,
        aligned_fraction: 0.25,
        ..tiny_config()
    };
    let out = pretrain(&ds, &cfg, &RunOptions::default()).unwrap();
    let stripped = prepare_training_data(&ds, &cfg).unwrap();
    assert_eq!(stripped.video_aligned_count(), 40);
    let expected = stripped.train.clone().filter(|&i| stripped.segments[i].video_emb.is_some()).count();
    assert_eq!(out.aligned_train, expected);
    assert!(out.log.iter().all(|r| r.aligned_fraction <= 1.0));
}

fn blobs(n_per: usize, k: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        for _ in 0..n_per {
            let mut v: Vec<f64> = (0..k).map(|_| 0.3 * rng.normal()).collect();
            v[c] += sep;
            rows.push(v);
            labels.push(c);
        }
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

#[test]
fn probe_separates_clean_blobs() {
    let (x, y) = blobs(40, 4, 5.0, 0);
    let train: Vec<usize> = (0..160).filter(|i| i % 4 != 0).collect();
    let eval: Vec<usize> = (0..160).filter(|i| i % 4 == 0).collect();
    let acc = linear_probe(&x, &y, &train, &eval, &ProbeConfig::default()).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let (x, mut y) = blobs(100, 4, 5.0, 1);
    SeededRng::new(9).shuffle(&mut y);
    let train: Vec<usize> = (0..400).filter(|i| i % 2 == 0).collect();
    let eval: Vec<usize> = (0..400).filter(|i| i % 2 == 1).collect();
    let acc = linear_probe(&x, &y, &train, &eval, &ProbeConfig::default()).unwrap();
    assert!((acc - 0.25).abs() < 0.1, "{acc}");
}

#[test]
fn probe_rejects_overlap_and_single_class() {
    let (x, y) = blobs(5, 2, 5.0, 0);
    let cfg = ProbeConfig::default();
    assert!(matches!(linear_probe(&x, &y, &[0, 1, 6], &[1, 7], &cfg), Err(Error::Data(_))));
    assert!(matches!(linear_probe(&x, &y, &[0, 1, 2], &[7, 8], &cfg), Err(Error::Data(_))));
}

#[test]
fn evaluation_leaves_encoder_untouched_and_is_deterministic() {
    let ds = tiny_dataset(5);
    let params = init_encoder(&tiny_encoder(), &mut SeededRng::new(0)).unwrap();
    let before = params.flatten();
    let eval = EvalConfig {
        shots: vec![2, 8],
        trials: 3,
        ..EvalConfig::default()
    };
    let a = few_shot_eval(&params, &ds, &eval, "random", 1.0).unwrap();
    let b = few_shot_eval(&params, &ds, &eval, "random", 1.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert_eq!(a[1].accuracies.len(), 3);
    assert_eq!(params.flatten(), before);
    let ft = EvalConfig {
        shots: vec![4],
        trials: 1,
        protocol: Protocol::FineTune(FineTuneConfig {
            epochs: 2,
            ..FineTuneConfig::default()
        }),
        ..EvalConfig::default()
    };
    let r = few_shot_eval(&params, &ds, &ft, "finetune", 1.0).unwrap();
    assert!(r[0].single_trial && (0.0..=1.0).contains(&r[0].mean));
    assert_eq!(params.flatten(), before);
}

#[test]
fn too_many_shots_is_a_data_error() {
    let ds = tiny_dataset(5);
    let params = init_encoder(&tiny_encoder(), &mut SeededRng::new(0)).unwrap();
    let eval = EvalConfig {
        shots: vec![1000],
        ..EvalConfig::default()
    };
    assert!(matches!(few_shot_eval(&params, &ds, &eval, "x", 1.0), Err(Error::Data(_))));
}

#[test]
fn collapse_diagnostic_flags_degenerate_features() {
    let rank_one = Tensor::from_rows(&(0..20).map(|i| vec![i as f64, 2.0 * i as f64, 0.5]).collect::<Vec<_>>()).unwrap();
    let d = collapse_diagnostic(&rank_one, 0.9, 4).unwrap();
    assert!((d.top_sv_ratio - 1.0).abs() < 1e-9);
    assert!(d.collapsed);
    let (spread, _) = blobs(30, 4, 3.0, 2);
    let d = collapse_diagnostic(&spread, 0.9, 4).unwrap();
    assert!(!d.collapsed);
    let d = collapse_diagnostic(&spread, 0.27, 4).unwrap();
    assert!(d.collapsed);
}

#[test]
fn results_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let reports = vec![
        ProbeReport::from_accuracies("synthetic-har", "PRIMUS", 0.1, 10, vec![0.5, 0.625, 0.75]),
        ProbeReport::from_accuracies("synthetic-har", "SS", 1.0, 100, vec![0.3]),
    ];
    for (name, fmt) in [("r.csv", Format::Csv), ("r.json", Format::Json)] {
        let p = dir.path().join(name);
        emit_results(&reports, &p, fmt).unwrap();
        assert_eq!(read_results(&p).unwrap(), reports);
    }
    let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 + 2);
    assert!(text.starts_with("task,objective,aligned_fraction,n_per_class,trial,accuracy,mean,stderr"));
    assert!(matches!(emit_results(&[], &dir.path().join("e.csv"), Format::Csv), Err(Error::Data(_))));
}

#[test]
fn single_cell_grid_matches_direct_run() {
    let ds = tiny_dataset(6);
    let base = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let eval = EvalConfig {
        shots: vec![4],
        trials: 2,
        ..EvalConfig::default()
    };
    let obj = Objective::from_weights(1.0, 1.0, 0.0);
    let grid = ExperimentGrid {
        objectives: vec![obj.clone()],
        aligned_fractions: vec![0.5],
        eval: eval.clone(),
    };
    let table = run_ablation(&ds, &grid, &base).unwrap();
    let direct = run_one(&ds, &obj, 0.5, &base, &eval).unwrap();
    assert_eq!(table.runs, vec![direct]);
    assert_eq!(table.reports().len(), 1);
    assert!(table.find("SS+MM", 0.5).is_some());

    let empty = ExperimentGrid {
        objectives: vec![],
        ..grid
    };
    assert!(matches!(run_ablation(&ds, &empty, &base), Err(Error::Config { .. })));
}

#[test]
fn failing_grid_cell_is_recorded() {
    let ds = tiny_dataset(6);
    let base = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let grid = ExperimentGrid {
        objectives: vec![Objective::from_weights(0.0, 1.0, 0.0), Objective::from_weights(1.0, 0.0, 0.0)],
        aligned_fractions: vec![0.0],
        eval: EvalConfig {
            shots: vec![4],
            trials: 1,
            ..EvalConfig::default()
        },
    };
    let table = run_ablation(&ds, &grid, &base).unwrap();
    assert!(table.runs[0].error.is_some());
    assert!(table.runs[1].error.is_none());
    assert_eq!(table.reports().len(), 1);
}

#[test]
fn single_point_encoder_probes_at_chance_and_is_flagged() {
    let x = Tensor::from_rows(&vec![vec![0.6, 0.8, 0.0]; 200]).unwrap();
    let y: Vec<usize> = (0..200).map(|i| i % 4).collect();
    let train: Vec<usize> = (0..100).collect();
    let eval: Vec<usize> = (100..200).collect();
    let acc = linear_probe(&x, &y, &train, &eval, &ProbeConfig::default()).unwrap();
    assert!((acc - 0.25).abs() <= 0.02, "{acc}");
    let d = collapse_diagnostic(&x, acc, 4).unwrap();
    assert!(d.collapsed);
    assert_eq!(d.top_sv_ratio, 1.0);
}
