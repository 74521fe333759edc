use std::fs;
use std::io::Write;

use primus::data::*;
use primus::rng::SeededRng;
use primus::Error;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 4,
        segments_per_class: 20,
        t: 60,
        embed_dim: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = gen_synthetic(&small_spec(3)).unwrap();
    let b = gen_synthetic(&small_spec(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
    let c = gen_synthetic(&small_spec(4)).unwrap();
    assert_ne!(content_hash(&a).unwrap(), content_hash(&c).unwrap());
}

#[test]
fn zero_noise_gives_identical_class_video() {
    let spec = SyntheticSpec {
        imu_noise: 0.0,
        video_noise: 0.0,
        text_noise: 0.0,
        ..small_spec(1)
    };
    let ds = gen_synthetic(&spec).unwrap();
    for c in 0..4 {
        let v: Vec<&Vec<f64>> = ds
            .segments
            .iter()
            .filter(|s| s.label == Some(c))
            .map(|s| s.video_emb.as_ref().unwrap())
            .collect();
        assert!(v.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn default_dataset_shape_and_split() {
    let ds = gen_synthetic(&SyntheticSpec::default()).unwrap();
    assert_eq!(ds.len(), 2000);
    assert_eq!(ds.train.len(), 1600);
    assert_eq!(ds.segment_len(), 100);
    assert_eq!(ds.embed_dim(), 64);
    for c in 0..8 {
        let n_test = ds.test.clone().filter(|&i| ds.segments[i].label == Some(c)).count();
        assert_eq!(n_test, 50);
    }
    // z-normalized on the training split
    let norm = ds.normalization.as_ref().unwrap();
    assert_eq!(norm.mean.len(), 6);
    for ch in 0..6 {
        let vals: Vec<f64> = ds.train.clone().flat_map(|i| ds.segments[i].imu.row(ch).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-4, "channel {ch} mean {m}");
    }
}

/// Softmax regression by plain gradient descent, independent of the probe code.
fn oracle_logreg(x: &[Vec<f64>], y: &[usize], k: usize, iters: usize, lr: f64) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; k];
    for _ in 0..iters {
        let mut g = vec![vec![0.0; d + 1]; k];
        for (xi, &yi) in x.iter().zip(y) {
            let s: Vec<f64> = w
                .iter()
                .map(|wc| wc[d] + wc.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..k {
                let p = (s[c] - mx).exp() / z - (c == yi) as u8 as f64;
                for j in 0..d {
                    g[c][j] += p * xi[j];
                }
                g[c][d] += p;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= lr * g[c][j] / x.len() as f64;
            }
        }
    }
    w
}

#[test]
fn video_embeddings_are_linearly_separable() {
    let ds = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let rows = |r: std::ops::Range<usize>| -> (Vec<Vec<f64>>, Vec<usize>) {
        r.map(|i| (ds.segments[i].video_emb.clone().unwrap(), ds.segments[i].label.unwrap()))
            .unzip()
    };
    let (xtr, ytr) = rows(ds.train.clone());
    let (xte, yte) = rows(ds.test.clone());
    let w = oracle_logreg(&xtr, &ytr, 8, 200, 5.0);
    let correct = xte
        .iter()
        .zip(&yte)
        .filter(|(x, &y)| {
            let s: Vec<f64> = w.iter().map(|wc| wc[64] + wc.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()).collect();
            let best = (0..8).fold(0, |b, c| if s[c] > s[b] { c } else { b });
            best == y
        })
        .count();
    let acc = correct as f64 / xte.len() as f64;
    assert!(acc > 0.95, "video probe accuracy {acc}");
}

#[test]
fn invalid_spec_rejected() {
    let bad = SyntheticSpec {
        text_coarseness: 3,
        ..SyntheticSpec::default()
    };
    assert!(matches!(gen_synthetic(&bad), Err(Error::Config { .. })));
    let bad = SyntheticSpec {
        imu_noise: -1.0,
        ..SyntheticSpec::default()
    };
    assert!(matches!(gen_synthetic(&bad), Err(Error::Config { .. })));
}

#[test]
fn strip_alignment_counts() {
    let spec = SyntheticSpec {
        n_classes: 4,
        segments_per_class: 2500,
        t: 8,
        embed_dim: 4,
        ..SyntheticSpec::default()
    };
    let ds = gen_synthetic(&spec).unwrap();
    assert_eq!(ds.len(), 10_000);
    let kept = strip_alignment(&ds, 0.1, &mut SeededRng::new(5)).unwrap();
    assert_eq!(kept.video_aligned_count(), 1000);
    assert_eq!(kept.text_aligned_count(), 1000);
    assert_eq!(kept.labels(), ds.labels());
    let same = strip_alignment(&ds, 1.0, &mut SeededRng::new(5)).unwrap();
    assert_eq!(same, ds);
    let none = strip_alignment(&ds, 0.0, &mut SeededRng::new(5)).unwrap();
    assert_eq!(none.video_aligned_count(), 0);
    let again = strip_alignment(&ds, 0.1, &mut SeededRng::new(5)).unwrap();
    assert_eq!(again, kept);
    for f in [0.01, 0.33, 0.5, 0.77] {
        let s = strip_alignment(&ds, f, &mut SeededRng::new(9)).unwrap();
        let stripped = ds.len() - s.video_aligned_count();
        assert_eq!(stripped, ((1.0 - f) * 10_000.0f64).round() as usize);
    }
}

#[test]
fn few_shot_sampling() {
    let ds = gen_synthetic(&small_spec(2)).unwrap();
    let all = max_shots(&ds);
    assert_eq!(all, 16);
    let full = sample_few_shot(&ds, all, 0).unwrap();
    assert_eq!(full, ds.train_indices());
    let a = sample_few_shot(&ds, 5, 1).unwrap();
    let b = sample_few_shot(&ds, 5, 2).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, sample_few_shot(&ds, 5, 1).unwrap());
    for c in 0..4 {
        assert_eq!(a.iter().filter(|&&i| ds.segments[i].label == Some(c)).count(), 5);
    }
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert!(a.iter().all(|&i| ds.train.contains(&i)));
}

#[test]
fn few_shot_insufficient_class_names_it() {
    let spec = SyntheticSpec {
        n_classes: 2,
        segments_per_class: 4,
        t: 8,
        embed_dim: 4,
        ..SyntheticSpec::default()
    };
    let ds = gen_synthetic(&spec).unwrap();
    // 4 per class, one held out: 3 training rows each
    match sample_few_shot(&ds, 5, 0) {
        Err(Error::Data(msg)) => assert!(msg.contains("class_0"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn save_load_round_trip_with_partial_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(&small_spec(8)).unwrap();
    let ds = strip_alignment(&ds, 0.4, &mut SeededRng::new(1)).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn round_trip_rounds_to_f32() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = gen_synthetic(&small_spec(8)).unwrap();
    ds.segments[0].imu.data_mut()[0] = 0.1;
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.segments[0].imu.data()[0], 0.1f32 as f64);
}

#[test]
fn truncated_blob_fails_crc() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&gen_synthetic(&small_spec(1)).unwrap(), dir.path()).unwrap();
    let p = dir.path().join("imu.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::CorruptDataset(msg)) => assert!(msg.contains("CRC"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_count_mismatch_detected() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&gen_synthetic(&small_spec(1)).unwrap(), dir.path()).unwrap();
    let p = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    m["n_segments"] = serde_json::json!(79);
    fs::write(&p, m.to_string()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptDataset(_))));
}

#[test]
fn version_mismatch_detected() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&gen_synthetic(&small_spec(1)).unwrap(), dir.path()).unwrap();
    let p = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    m["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
    fs::write(&p, m.to_string()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptDataset(_))));
}

fn write_csv(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
    p
}

fn har_csv(rows_a: usize, rows_b: usize, with_ts: bool) -> String {
    let mut s = String::from(if with_ts { "t,acc_x,acc_y,acc_z,gyr_x,gyr_y,gyr_z,label\n" } else { "acc_x,acc_y,acc_z,gyr_x,gyr_y,gyr_z,label\n" });
    for i in 0..rows_a + rows_b {
        let label = if i < rows_a { "walk" } else { "sit" };
        let v = (i as f64 * 0.3).sin();
        if with_ts {
            s.push_str(&format!("{},", i as f64 * 0.05));
        }
        s.push_str(&format!("{v},{},{},{},{},{},{label}\n", 2.0 * v, -v, v + 1.0, 0.5, i % 7));
    }
    s
}

#[test]
fn csv_import_two_classes() {
    let dir = tempfile::tempdir().unwrap();
    // 20 Hz, 5 s windows: 100 samples; 350 rows -> 3 windows, 230 rows -> 2 windows
    let p = write_csv(dir.path(), "har.csv", &har_csv(350, 230, true));
    let schema = CsvSchema {
        timestamp: Some("t".into()),
        ..CsvSchema::default()
    };
    let ds = import_csv(&p, &schema, 20.0).unwrap();
    assert_eq!(ds.n_classes(), 2);
    assert_eq!(ds.class_names, vec!["sit".to_string(), "walk".to_string()]);
    assert_eq!(ds.len(), 5);
    assert_eq!(ds.video_aligned_count(), 0);
    assert_eq!(ds.segments.iter().filter(|s| s.label == Some(1)).count(), 3);
    assert_eq!(ds.segment_len(), 100);
}

#[test]
fn csv_missing_gyro_column() {
    let dir = tempfile::tempdir().unwrap();
    let text = har_csv(120, 0, false).replace("gyr_z", "temp");
    let p = write_csv(dir.path(), "bad.csv", &text);
    assert!(matches!(import_csv(&p, &CsvSchema::default(), 20.0), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn csv_non_numeric_cell_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = har_csv(120, 0, false);
    text = text.replacen("\n0,", "\nabc,", 1);
    let p = write_csv(dir.path(), "bad.csv", &text);
    assert!(matches!(import_csv(&p, &CsvSchema::default(), 20.0), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn csv_inconsistent_rate() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_csv(dir.path(), "r.csv", &har_csv(150, 0, true));
    let schema = CsvSchema {
        timestamp: Some("t".into()),
        ..CsvSchema::default()
    };
    assert!(matches!(import_csv(&p, &schema, 50.0), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn csv_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_csv(dir.path(), "e.csv", "");
    assert!(matches!(import_csv(&p, &CsvSchema::default(), 20.0), Err(Error::Data(_))));
}
