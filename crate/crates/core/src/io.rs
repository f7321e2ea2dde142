//! On-disk interchange formats.
//!
//! Everything binary is little-endian with a four-byte magic:
//!
//! * `GAHT` — box trajectories: version u16, N u16, T u16, then N*T*4 f64
//!   coordinates (x1, y1, x2, y2 per object per frame).
//! * `GAHM` — plain arrays: version u16, rank u16, one u32 per dim, then the
//!   f64 payload in row-major order. Used for feature maps (rank 4) and
//!   precomputed object features (rank 3).
//! * `GAHC` — binary codes: K u16, Υ u16, M u64, then M*Υ*⌈K/8⌉ bytes,
//!   sample-major; bit j lives in byte ⌊j/8⌋ at position j mod 8.
//! * `GAHF` — filter matrix: K u16, then K² f64 row-major.
//! * `GAHW` — checkpoints: version u16, manifest length u32, JSON manifest,
//!   then packed f64 parameter payload in manifest order.
//!
//! Labels, dataset manifests, and evaluation reports are JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{BBox, BoxTrajectorySet};

const TRAJ_MAGIC: &[u8; 4] = b"GAHT";
const ARRAY_MAGIC: &[u8; 4] = b"GAHM";
const CODE_MAGIC: &[u8; 4] = b"GAHC";
const FILTER_MAGIC: &[u8; 4] = b"GAHF";
const CHECKPOINT_MAGIC: &[u8; 4] = b"GAHW";

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: std::io::Read> Reader<R> {
    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let mut got = [0u8; 4];
        self.inner.read_exact(&mut got)?;
        if &got != want {
            return Err(bad(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.inner.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; count * 8];
        self.inner.read_exact(&mut raw)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn bytes(&mut self, count: usize) -> Result<Vec<u8>> {
        let mut raw = vec![0u8; count];
        self.inner.read_exact(&mut raw)?;
        Ok(raw)
    }

    /// Errors when payload bytes remain past the declared end.
    fn expect_eof(&mut self, what: &str) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(bad(format!("{what}: trailing bytes after payload"))),
        }
    }
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader { inner: BufReader::new(File::open(path)?) })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_f64s(w: &mut impl std::io::Write, vals: &[f64]) -> Result<()> {
    // One buffered pass; per-value write_all is measurably slower on the
    // feature-map blobs.
    let mut raw = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&raw)?;
    Ok(())
}

// ---- trajectories ("GAHT") ----

pub fn write_trajectories(path: &Path, traj: &BoxTrajectorySet) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(TRAJ_MAGIC)?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&(traj.objects() as u16).to_le_bytes())?;
    w.write_all(&(traj.frames() as u16).to_le_bytes())?;
    let coords: Vec<f64> =
        traj.boxes().iter().flat_map(|b| [b.x1, b.y1, b.x2, b.y2]).collect();
    write_f64s(&mut w, &coords)?;
    w.flush()?;
    Ok(())
}

/// Scene dimensions are not stored in the file; the caller supplies them
/// (normally from the dataset manifest) so containment can be re-checked.
pub fn read_trajectories(
    path: &Path,
    scene_width: f64,
    scene_height: f64,
) -> Result<BoxTrajectorySet> {
    let mut r = open(path)?;
    r.magic(TRAJ_MAGIC)?;
    let version = r.u16()?;
    if version != 1 {
        return Err(bad(format!("unsupported trajectory version {version}")));
    }
    let n = r.u16()? as usize;
    let t = r.u16()? as usize;
    let coords = r.f64s(n * t * 4)?;
    r.expect_eof("trajectory file")?;
    let boxes: Vec<BBox> =
        coords.chunks_exact(4).map(|c| BBox::new(c[0], c[1], c[2], c[3])).collect();
    BoxTrajectorySet::new(n, t, scene_width, scene_height, boxes)
}

// ---- arrays ("GAHM") ----

pub fn write_array(path: &Path, a: &Array) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(ARRAY_MAGIC)?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&(a.rank() as u16).to_le_bytes())?;
    for &d in a.shape() {
        if d > u32::MAX as usize {
            return Err(bad(format!("dimension {d} does not fit the array header")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    write_f64s(&mut w, a.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<Array> {
    let mut r = open(path)?;
    r.magic(ARRAY_MAGIC)?;
    let version = r.u16()?;
    if version != 1 {
        return Err(bad(format!("unsupported array version {version}")));
    }
    let rank = r.u16()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let len: usize = shape.iter().product();
    let data = r.f64s(len)?;
    r.expect_eof("array file")?;
    Array::from_vec(shape, data)
}

// ---- binary codes ("GAHC") ----

/// Bit-packed codes for M samples, Υ layers each, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSet {
    k: usize,
    upsilon: usize,
    m: usize,
    data: Vec<u8>,
}

impl CodeSet {
    pub fn new(k: usize, upsilon: usize) -> CodeSet {
        CodeSet { k, upsilon, m: 0, data: Vec::new() }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn upsilon(&self) -> usize {
        self.upsilon
    }

    pub fn samples(&self) -> usize {
        self.m
    }

    pub fn bytes_per_code(&self) -> usize {
        self.k.div_ceil(8)
    }

    /// Appends one sample (all Υ layers, shallow to deep).
    pub fn push(&mut self, layers: &[Vec<u8>]) -> Result<()> {
        if layers.len() != self.upsilon {
            return Err(bad(format!(
                "expected {} layer codes per sample, got {}",
                self.upsilon,
                layers.len()
            )));
        }
        for code in layers {
            if code.len() != self.bytes_per_code() {
                return Err(bad(format!(
                    "code is {} bytes, expected {} for K={}",
                    code.len(),
                    self.bytes_per_code(),
                    self.k
                )));
            }
            self.data.extend_from_slice(code);
        }
        self.m += 1;
        Ok(())
    }

    pub fn code(&self, sample: usize, layer: usize) -> &[u8] {
        let bpc = self.bytes_per_code();
        let start = (sample * self.upsilon + layer) * bpc;
        &self.data[start..start + bpc]
    }

    /// Payload size in bytes, headers excluded.
    pub fn payload_bytes(&self) -> usize {
        self.data.len()
    }
}

/// Packs a ±1 code into bytes: bit j of byte j/8 (LSB first) is set when
/// entry j is positive.
pub fn pack_code(bits: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (j, &v) in bits.iter().enumerate() {
        if v > 0.0 {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

/// Inverse of [`pack_code`]: set bits become +1.0, clear bits -1.0.
pub fn unpack_code(bytes: &[u8], k: usize) -> Vec<f64> {
    (0..k).map(|j| if bytes[j / 8] >> (j % 8) & 1 == 1 { 1.0 } else { -1.0 }).collect()
}

pub fn write_codes(path: &Path, codes: &CodeSet) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(CODE_MAGIC)?;
    w.write_all(&(codes.k as u16).to_le_bytes())?;
    w.write_all(&(codes.upsilon as u16).to_le_bytes())?;
    w.write_all(&(codes.m as u64).to_le_bytes())?;
    w.write_all(&codes.data)?;
    w.flush()?;
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<CodeSet> {
    let mut r = open(path)?;
    r.magic(CODE_MAGIC)?;
    let k = r.u16()? as usize;
    let upsilon = r.u16()? as usize;
    let m = r.u64()? as usize;
    if k == 0 || upsilon == 0 {
        return Err(bad("code file declares zero-sized codes"));
    }
    let data = r.bytes(m * upsilon * k.div_ceil(8))?;
    r.expect_eof("code file")?;
    Ok(CodeSet { k, upsilon, m, data })
}

// ---- filter matrix ("GAHF") ----

pub fn write_filter(path: &Path, f: &Array) -> Result<()> {
    if f.rank() != 2 || f.shape()[0] != f.shape()[1] {
        return Err(bad(format!("filter must be square, got {:?}", f.shape())));
    }
    let mut w = create(path)?;
    w.write_all(FILTER_MAGIC)?;
    w.write_all(&(f.shape()[0] as u16).to_le_bytes())?;
    write_f64s(&mut w, f.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_filter(path: &Path) -> Result<Array> {
    let mut r = open(path)?;
    r.magic(FILTER_MAGIC)?;
    let k = r.u16()? as usize;
    let data = r.f64s(k * k)?;
    r.expect_eof("filter file")?;
    Array::from_vec(vec![k, k], data)
}

// ---- checkpoints ("GAHW") ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    /// "stvh" or "mstvh".
    pub model: String,
    pub dims: BTreeMap<String, usize>,
    /// Parameter names with shapes, in payload order.
    pub params: Vec<(String, Vec<usize>)>,
}

impl CheckpointManifest {
    pub fn payload_len(&self) -> usize {
        self.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| bad(format!("checkpoint manifest missing dim {name:?}")))
    }
}

pub fn write_checkpoint(
    path: &Path,
    manifest: &CheckpointManifest,
    payload: &[f64],
) -> Result<()> {
    if payload.len() != manifest.payload_len() {
        return Err(bad(format!(
            "checkpoint payload has {} values, manifest declares {}",
            payload.len(),
            manifest.payload_len()
        )));
    }
    let json = serde_json::to_vec(manifest)?;
    let mut w = create(path)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    write_f64s(&mut w, payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, Vec<f64>)> {
    let mut r = open(path)?;
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != 1 {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let manifest_len = r.u32()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(&r.bytes(manifest_len)?)?;
    let payload = r.f64s(manifest.payload_len())?;
    r.expect_eof("checkpoint file")?;
    Ok((manifest, payload))
}

// ---- JSON sidecars ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleLabels {
    pub activity: usize,
    pub appearance: usize,
    /// Per-object action labels, N entries in clip order.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub actions: Vec<usize>,
    #[serde(rename = "video-id", skip_serializing_if = "Option::is_none", default)]
    pub video_id: Option<String>,
}

/// Keyed by sample id; BTreeMap keeps file output order-stable.
pub type LabelMap = BTreeMap<String, SampleLabels>;

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub label_space: String,
    pub k: usize,
    pub value: f64,
    pub per_query: Vec<f64>,
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, report)?;
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Dataset directory manifest. One directory holds `manifest.json`,
/// `labels.json`, and per-sample blobs named by [`sample_id`]: `.traj`
/// trajectories plus either `.fmap` feature maps (rank 4) or `.feat`
/// precomputed object features (rank 3).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub samples: usize,
    pub n: usize,
    pub t: usize,
    pub d_v: usize,
    pub map_width: usize,
    pub map_height: usize,
    pub scene_width: f64,
    pub scene_height: f64,
    pub activities: usize,
    pub appearances: usize,
    pub actions: usize,
    /// True when samples carry `.feat` object features instead of `.fmap`
    /// maps (externally produced features, no RoI pooling step).
    pub precomputed: bool,
    /// Echo of the generator settings that produced the data, if any.
    pub generator: serde_json::Value,
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}
