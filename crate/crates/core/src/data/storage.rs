use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AlignedTriplet, Dataset, Normalization, IMU_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOBS: [&str; 4] = ["imu.bin", "video.bin", "text.bin", "labels.bin"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub video_aligned: usize,
    pub text_aligned: usize,
    pub labeled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_segments: usize,
    pub channels: usize,
    pub t: usize,
    pub sample_rate_hz: f64,
    pub embed_dim: usize,
    pub class_names: Vec<String>,
    /// Half-open `[start, end)` index ranges.
    pub splits: BTreeMap<String, [usize; 2]>,
    pub alignment: AlignmentStats,
    pub normalization: Option<Normalization>,
    pub source_ids: Vec<String>,
    pub blobs: BTreeMap<String, BlobInfo>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptDataset(msg.into())
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn bitmap_len(n: usize) -> usize {
    n.div_ceil(8)
}

fn encode_optional(rows: &[Option<&Vec<f64>>], d: usize) -> Vec<u8> {
    let n = rows.len();
    let mut out = vec![0u8; bitmap_len(n)];
    for (i, r) in rows.iter().enumerate() {
        if r.is_some() {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    let zeros = vec![0.0; d];
    for r in rows {
        put_f32s(&mut out, r.map_or(&zeros[..], |v| &v[..]));
    }
    out
}

fn encode(ds: &Dataset) -> Result<(DatasetManifest, Vec<Vec<u8>>)> {
    ds.validate()?;
    let n = ds.len();
    let t = ds.segment_len();
    let d = ds.embed_dim();
    let mut imu = Vec::with_capacity(n * IMU_CHANNELS * t * 4);
    for s in &ds.segments {
        put_f32s(&mut imu, s.imu.data());
    }
    let video = encode_optional(&ds.segments.iter().map(|s| s.video_emb.as_ref()).collect::<Vec<_>>(), d);
    let text = encode_optional(&ds.segments.iter().map(|s| s.text_emb.as_ref()).collect::<Vec<_>>(), d);
    let mut labels = Vec::with_capacity(n * 4);
    for s in &ds.segments {
        let l = s.label.map_or(-1, |l| l as i32);
        labels.extend_from_slice(&l.to_le_bytes());
    }
    let blobs = vec![imu, video, text, labels];
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        n_segments: n,
        channels: IMU_CHANNELS,
        t,
        sample_rate_hz: ds.sample_rate_hz,
        embed_dim: d,
        class_names: ds.class_names.clone(),
        splits: BTreeMap::from([
            ("train".to_string(), [ds.train.start, ds.train.end]),
            ("test".to_string(), [ds.test.start, ds.test.end]),
        ]),
        alignment: AlignmentStats {
            video_aligned: ds.video_aligned_count(),
            text_aligned: ds.text_aligned_count(),
            labeled: ds.segments.iter().filter(|s| s.label.is_some()).count(),
        },
        normalization: ds.normalization.clone(),
        source_ids: ds.segments.iter().map(|s| s.source_id.clone()).collect(),
        blobs: BLOBS
            .iter()
            .zip(&blobs)
            .map(|(name, b)| {
                (
                    name.to_string(),
                    BlobInfo {
                        bytes: b.len() as u64,
                        crc32: crc32fast::hash(b),
                    },
                )
            })
            .collect(),
    };
    Ok((manifest, blobs))
}

/// Writes `manifest.json` plus four little-endian blobs into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let (manifest, blobs) = encode(ds)?;
    fs::create_dir_all(dir)?;
    for (name, b) in BLOBS.iter().zip(&blobs) {
        fs::write(dir.join(name), b)?;
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string(&manifest)?)?;
    Ok(manifest)
}

/// `sha256:<hex>` over the canonical manifest and blob bytes.
pub fn content_hash(ds: &Dataset) -> Result<String> {
    let (manifest, blobs) = encode(ds)?;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&manifest)?.as_bytes());
    for b in &blobs {
        h.update((b.len() as u64).to_le_bytes());
        h.update(b);
    }
    Ok(format!("sha256:{}", hex::encode(h.finalize())))
}

fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

fn decode_optional(bytes: &[u8], n: usize, d: usize) -> Vec<Option<Vec<f64>>> {
    let (bits, rows) = bytes.split_at(bitmap_len(n));
    (0..n)
        .map(|i| (bits[i / 8] >> (i % 8) & 1 == 1).then(|| read_f32s(&rows[i * d * 4..(i + 1) * d * 4])))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.channels != IMU_CHANNELS {
        return Err(corrupt(format!("{} channels, expected {IMU_CHANNELS}", m.channels)));
    }
    let n = m.n_segments;
    let expected = [
        n * m.channels * m.t * 4,
        bitmap_len(n) + n * m.embed_dim * 4,
        bitmap_len(n) + n * m.embed_dim * 4,
        n * 4,
    ];
    let mut blobs = Vec::with_capacity(BLOBS.len());
    for (name, want) in BLOBS.iter().zip(expected) {
        let info = m.blobs.get(*name).ok_or_else(|| corrupt(format!("manifest lacks blob {name}")))?;
        let bytes = fs::read(dir.join(name))?;
        let crc = crc32fast::hash(&bytes);
        if crc != info.crc32 || bytes.len() as u64 != info.bytes {
            return Err(corrupt(format!(
                "{name}: CRC32 {crc:08x} over {} bytes, manifest records {:08x} over {} bytes",
                bytes.len(),
                info.crc32,
                info.bytes
            )));
        }
        if bytes.len() != want {
            return Err(corrupt(format!(
                "{name}: {} bytes but manifest counts imply {want}",
                bytes.len()
            )));
        }
        blobs.push(bytes);
    }
    if m.source_ids.len() != n {
        return Err(corrupt("source id count differs from n_segments"));
    }
    let split = |k: &str| -> Result<std::ops::Range<usize>> {
        let [a, b] = *m.splits.get(k).ok_or_else(|| corrupt(format!("manifest lacks split {k}")))?;
        Ok(a..b)
    };
    let (train, test) = (split("train")?, split("test")?);

    let imu = read_f32s(&blobs[0]);
    let video = decode_optional(&blobs[1], n, m.embed_dim);
    let text = decode_optional(&blobs[2], n, m.embed_dim);
    let seg_len = m.channels * m.t;
    let mut segments = Vec::with_capacity(n);
    for (i, ((v, t), id)) in video.into_iter().zip(text).zip(m.source_ids).enumerate() {
        let l = i32::from_le_bytes(blobs[3][i * 4..i * 4 + 4].try_into().unwrap());
        let label = match l {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(corrupt(format!("segment {i} has label {l}"))),
        };
        segments.push(AlignedTriplet {
            imu: Tensor::new(vec![m.channels, m.t], imu[i * seg_len..(i + 1) * seg_len].to_vec())
                .map_err(|e| corrupt(e.to_string()))?,
            video_emb: v,
            text_emb: t,
            label,
            source_id: id,
        });
    }
    let ds = Dataset {
        segments,
        sample_rate_hz: m.sample_rate_hz,
        class_names: m.class_names,
        train,
        test,
        normalization: m.normalization,
    };
    ds.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(ds)
}
