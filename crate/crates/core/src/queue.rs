//! Fixed-capacity FIFO of cached (IMU, video, text) embedding triples with
//! exact nearest-neighbor retrieval by video similarity.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub z_m: Vec<f64>,
    pub z_v: Vec<f64>,
    /// Absent when the source sample had no text.
    pub z_t: Option<Vec<f64>>,
    pub insert_step: u64,
}

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::ContractViolation(format!(
            "queue entry {name} has norm {norm}, expected unit norm"
        )));
    }
    Ok(())
}

impl QueueEntry {
    fn validate(&self) -> Result<()> {
        check_unit("z_m", &self.z_m)?;
        check_unit("z_v", &self.z_v)?;
        if let Some(t) = &self.z_t {
            check_unit("z_t", t)?;
        }
        Ok(())
    }
}

/// Ring buffer; index 0 is always the oldest live entry.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    slots: Vec<QueueEntry>,
    /// Next slot to overwrite once the buffer is full.
    cursor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub size: usize,
    pub oldest_step: Option<u64>,
    pub newest_step: Option<u64>,
    pub mean_pairwise_video_similarity: Option<f64>,
    pub sampled_pairs: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("queue_capacity", "must be positive"));
        }
        Ok(Self {
            capacity,
            slots: Vec::with_capacity(capacity.min(4096)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Entry `i` in age order (0 = oldest).
    pub fn get(&self, i: usize) -> Option<&QueueEntry> {
        if i >= self.slots.len() {
            return None;
        }
        let start = if self.slots.len() == self.capacity { self.cursor } else { 0 };
        Some(&self.slots[(start + i) % self.slots.len()])
    }

    /// Entries oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        (0..self.len()).map(move |i| self.get(i).expect("in range"))
    }

    /// Appends in order, evicting the oldest beyond capacity. All entries are
    /// validated before any is inserted.
    pub fn push_batch(&mut self, entries: Vec<QueueEntry>) -> Result<()> {
        for e in &entries {
            e.validate()?;
        }
        for e in entries {
            if self.slots.len() < self.capacity {
                self.slots.push(e);
            } else {
                self.slots[self.cursor] = e;
                self.cursor = (self.cursor + 1) % self.capacity;
            }
        }
        Ok(())
    }

    /// `argmax_k z_k^v · query`, smallest index on ties.
    pub fn nearest_by_video(&self, query: &[f64]) -> Result<(usize, f64)> {
        self.nearest_by(query, "nearest_by_video", |e| &e.z_v)
    }

    /// Same retrieval rule keyed on the cached IMU embeddings instead.
    pub fn nearest_by_imu(&self, query: &[f64]) -> Result<(usize, f64)> {
        self.nearest_by(query, "nearest_by_imu", |e| &e.z_m)
    }

    fn nearest_by(&self, query: &[f64], op: &'static str, key: impl Fn(&QueueEntry) -> &[f64]) -> Result<(usize, f64)> {
        if self.is_empty() {
            return Err(Error::EmptyQueue);
        }
        check_unit("query", query)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (k, e) in self.iter().enumerate() {
            let z = key(e);
            if z.len() != query.len() {
                return Err(Error::dim(op, format!("query dim {} vs entry dim {}", query.len(), z.len())));
            }
            let s = dot(z, query);
            if s > best.1 {
                best = (k, s);
            }
        }
        Ok((best.0, best.1.clamp(-1.0, 1.0)))
    }

    /// [`FeatureQueue::nearest_by_video`] for every query against the current
    /// contents; the borrow guarantees nothing is pushed meanwhile.
    pub fn batch_retrieve(&self, queries: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
        queries.iter().map(|q| self.nearest_by_video(q)).collect()
    }

    /// Size, insert-step range, and the mean video cosine similarity over
    /// up to `max_pairs` distinct pairs sampled with `seed` (all pairs when
    /// that is fewer).
    pub fn snapshot_stats(&self, seed: u64, max_pairs: usize) -> QueueStats {
        let n = self.len();
        let mut stats = QueueStats {
            size: n,
            oldest_step: self.get(0).map(|e| e.insert_step),
            newest_step: n.checked_sub(1).and_then(|i| self.get(i)).map(|e| e.insert_step),
            mean_pairwise_video_similarity: None,
            sampled_pairs: 0,
        };
        if n < 2 {
            return stats;
        }
        let total_pairs = n * (n - 1) / 2;
        let (sum, count) = if total_pairs <= max_pairs {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += dot(&self.get(i).unwrap().z_v, &self.get(j).unwrap().z_v);
                }
            }
            (s, total_pairs)
        } else {
            let mut rng = SeededRng::new(seed);
            let mut s = 0.0;
            for _ in 0..max_pairs {
                let i = rng.below(n);
                let mut j = rng.below(n - 1);
                if j >= i {
                    j += 1;
                }
                s += dot(&self.get(i).unwrap().z_v, &self.get(j).unwrap().z_v);
            }
            (s, max_pairs)
        };
        stats.mean_pairwise_video_similarity = Some(sum / count as f64);
        stats.sampled_pairs = count;
        stats
    }

    /// Debug dump: one JSON object per line with the insert step and base64
    /// little-endian f64 vectors.
    pub fn dump_jsonl(&self) -> String {
        let enc = |v: &[f64]| {
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            B64.encode(bytes)
        };
        let mut out = String::new();
        for e in self.iter() {
            let line = DumpLine {
                insert_step: e.insert_step,
                z_m: enc(&e.z_m),
                z_v: enc(&e.z_v),
                z_t: e.z_t.as_deref().map(enc),
            };
            out.push_str(&serde_json::to_string(&line).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a queue from [`FeatureQueue::dump_jsonl`] output.
    pub fn from_jsonl(text: &str, capacity: usize) -> Result<Self> {
        let dec = |s: &str, line: usize| -> Result<Vec<f64>> {
            let bytes = B64.decode(s).map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Parse {
                    line,
                    reason: "vector byte length not a multiple of 8".into(),
                });
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut q = Self::new(capacity)?;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: DumpLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(QueueEntry {
                z_m: dec(&line.z_m, i + 1)?,
                z_v: dec(&line.z_v, i + 1)?,
                z_t: line.z_t.as_deref().map(|s| dec(s, i + 1)).transpose()?,
                insert_step: line.insert_step,
            });
        }
        q.push_batch(entries)?;
        Ok(q)
    }
}

#[derive(Serialize, Deserialize)]
struct DumpLine {
    insert_step: u64,
    z_m: String,
    z_v: String,
    z_t: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn entry(rng: &mut SeededRng, d: usize, step: u64) -> QueueEntry {
        QueueEntry {
            z_m: unit(rng, d),
            z_v: unit(rng, d),
            z_t: Some(unit(rng, d)),
            insert_step: step,
        }
    }

    #[test]
    fn fifo_eviction_small() {
        let mut rng = SeededRng::new(0);
        let mut q = FeatureQueue::new(2).unwrap();
        let es: Vec<_> = (1..=3).map(|s| entry(&mut rng, 4, s)).collect();
        q.push_batch(es).unwrap();
        let steps: Vec<u64> = q.iter().map(|e| e.insert_step).collect();
        assert_eq!(steps, vec![2, 3]);
        let before = q.clone();
        q.push_batch(vec![]).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn rejects_non_unit_entries_atomically() {
        let mut rng = SeededRng::new(1);
        let mut q = FeatureQueue::new(4).unwrap();
        let good = entry(&mut rng, 3, 0);
        let mut bad = entry(&mut rng, 3, 1);
        bad.z_v = vec![1.0, 1.0, 0.0];
        assert!(matches!(q.push_batch(vec![good, bad]), Err(Error::ContractViolation(_))));
        assert!(q.is_empty());
    }

    #[test]
    fn nearest_examples() {
        let mut rng = SeededRng::new(2);
        let mut q = FeatureQueue::new(8).unwrap();
        let es: Vec<_> = (0..5).map(|s| entry(&mut rng, 6, s)).collect();
        let target = es[3].z_v.clone();
        q.push_batch(es).unwrap();
        let (i, s) = q.nearest_by_video(&target).unwrap();
        assert_eq!(i, 3);
        assert!((s - 1.0).abs() < 1e-12);

        let mut single = FeatureQueue::new(3).unwrap();
        single.push_batch(vec![entry(&mut rng, 6, 0)]).unwrap();
        let far = unit(&mut rng, 6);
        assert_eq!(single.nearest_by_video(&far).unwrap().0, 0);

        let empty = FeatureQueue::new(3).unwrap();
        assert!(matches!(empty.nearest_by_video(&far), Err(Error::EmptyQueue)));
    }

    #[test]
    fn ties_resolve_to_smallest_index() {
        let mut rng = SeededRng::new(3);
        let mut q = FeatureQueue::new(4).unwrap();
        let mut a = entry(&mut rng, 3, 0);
        a.z_v = vec![0.0, 1.0, 0.0];
        let mut b = entry(&mut rng, 3, 1);
        b.z_v = vec![1.0, 0.0, 0.0];
        let mut c = entry(&mut rng, 3, 2);
        c.z_v = vec![1.0, 0.0, 0.0];
        q.push_batch(vec![a, b, c]).unwrap();
        assert_eq!(q.nearest_by_video(&[1.0, 0.0, 0.0]).unwrap().0, 1);
    }

    #[test]
    fn batch_retrieve_composition() {
        let mut rng = SeededRng::new(4);
        let mut q = FeatureQueue::new(32).unwrap();
        q.push_batch((0..40).map(|s| entry(&mut rng, 5, s)).collect()).unwrap();
        let queries: Vec<Vec<f64>> = (0..10).map(|_| unit(&mut rng, 5)).collect();
        let batch = q.batch_retrieve(&queries).unwrap();
        for (qv, r) in queries.iter().zip(&batch) {
            assert_eq!(*r, q.nearest_by_video(qv).unwrap());
        }
        let dup = q.batch_retrieve(&[queries[0].clone(), queries[0].clone()]).unwrap();
        assert_eq!(dup[0], dup[1]);
        assert!(q.batch_retrieve(&[]).unwrap().is_empty());
    }

    #[test]
    fn stats_examples() {
        let q = FeatureQueue::new(4).unwrap();
        let s = q.snapshot_stats(0, 100);
        assert_eq!(s.size, 0);
        assert!(s.oldest_step.is_none() && s.newest_step.is_none());

        let mut rng = SeededRng::new(5);
        let mut q = FeatureQueue::new(10).unwrap();
        let mut e = entry(&mut rng, 4, 0);
        let es: Vec<_> = (0..6)
            .map(|s| {
                e.insert_step = s;
                e.clone()
            })
            .collect();
        q.push_batch(es).unwrap();
        let s = q.snapshot_stats(0, 1000);
        assert!((s.mean_pairwise_video_similarity.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!((s.oldest_step, s.newest_step), (Some(0), Some(5)));
    }

    #[test]
    fn sampled_mean_close_to_exhaustive() {
        let mut rng = SeededRng::new(6);
        let mut q = FeatureQueue::new(200).unwrap();
        q.push_batch((0..200).map(|s| entry(&mut rng, 3, s)).collect()).unwrap();
        let exact = q.snapshot_stats(0, usize::MAX);
        let sampled = q.snapshot_stats(11, 2000);
        assert_eq!(exact.sampled_pairs, 200 * 199 / 2);
        // population spread of pairwise similarities, exhaustive
        let mean = exact.mean_pairwise_video_similarity.unwrap();
        let mut var = 0.0;
        for i in 0..200 {
            for j in i + 1..200 {
                let s = dot(&q.get(i).unwrap().z_v, &q.get(j).unwrap().z_v);
                var += (s - mean).powi(2);
            }
        }
        var /= exact.sampled_pairs as f64;
        let sigma = (var / 2000.0).sqrt();
        let diff = (sampled.mean_pairwise_video_similarity.unwrap() - mean).abs();
        assert!(diff < 3.0 * sigma, "diff {diff} sigma {sigma}");
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = SeededRng::new(7);
        let mut q = FeatureQueue::new(5).unwrap();
        let mut es: Vec<_> = (0..7).map(|s| entry(&mut rng, 3, s)).collect();
        es[6].z_t = None;
        q.push_batch(es).unwrap();
        let back = FeatureQueue::from_jsonl(&q.dump_jsonl(), 5).unwrap();
        assert_eq!(back.iter().collect::<Vec<_>>(), q.iter().collect::<Vec<_>>());
    }
}
