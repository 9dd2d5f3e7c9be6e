//! Exams on disk and in memory.
//!
//! A dataset directory holds one `ECG1` signal file per exam plus a
//! `manifest.jsonl` with one [`ManifestEntry`] per line.
//!
//! `ECG1` layout (little-endian): magic, u32 version, u32 leads, u32 samples,
//! u32 sample rate in Hz, then `leads × samples` f32 values, lead-major.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adjudicator::ExamMeasures;
use crate::classes::N_CLASSES;
use crate::error::{Error, Result};
use crate::model::io::write_atomic;
use crate::tensor::Tensor;

pub const SIGNAL_MAGIC: [u8; 4] = *b"ECG1";
pub const SIGNAL_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const HEADER_LEN: usize = 20;

/// A multi-lead recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    /// `[leads, samples]`
    pub data: Tensor<f32>,
    pub sample_rate_hz: u32,
}

impl Signal {
    pub fn leads(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        let n = self.samples();
        &self.data.data()[i * n..(i + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&SIGNAL_MAGIC);
        for v in [
            SIGNAL_VERSION,
            self.leads() as u32,
            self.samples() as u32,
            self.sample_rate_hz,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("signal magic".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != SIGNAL_MAGIC {
            return Err(Error::BadMagic {
                expected: SIGNAL_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated("signal header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != SIGNAL_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: SIGNAL_VERSION,
                found: word(0),
            });
        }
        let (leads, samples, rate) = (word(1) as usize, word(2) as usize, word(3));
        if leads == 0 || samples == 0 || rate == 0 {
            return Err(Error::Format(format!(
                "degenerate signal header: {leads} leads, {samples} samples, {rate} Hz"
            )));
        }
        let body = &bytes[HEADER_LEN..];
        let expected = leads * samples * 4;
        if body.len() < expected {
            return Err(Error::Truncated("signal values".into()));
        }
        if body.len() > expected {
            return Err(Error::Format("trailing bytes after signal values".into()));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            data: Tensor::from_vec(&[leads, samples], data)?,
            sample_rate_hz: rate,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One manifest line. `path` is relative to the dataset directory. SDNN is in
/// milliseconds, like the interval fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub labels: [bool; N_CLASSES],
    pub heart_rate: Option<f64>,
    pub qrs_ms: Option<f64>,
    pub pr_ms: Option<f64>,
    pub sdnn: Option<f64>,
}

impl ManifestEntry {
    pub fn measures(&self) -> ExamMeasures {
        ExamMeasures {
            heart_rate: self.heart_rate,
            qrs_ms: self.qrs_ms,
            pr_ms: self.pr_ms,
            sdnn: self.sdnn,
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// One exam with its signal loaded.
#[derive(Clone, Debug)]
pub struct ExamRecord {
    pub id: String,
    pub signal: Signal,
    pub labels: [bool; N_CLASSES],
    pub measures: ExamMeasures,
}

/// Reads a dataset directory's manifest and every signal it names.
pub fn load_dataset(dir: &Path) -> Result<Vec<ExamRecord>> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    manifest
        .into_iter()
        .map(|e| {
            let signal = Signal::read(&dir.join(&e.path))?;
            Ok(ExamRecord {
                measures: e.measures(),
                id: e.id,
                signal,
                labels: e.labels,
            })
        })
        .collect()
}

/// Symmetric zero-pad or center-crop of every lead to `target` samples.
pub fn fit_length(signal: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let (leads, len) = signal.dims2()?;
    if len == target {
        return Ok(signal.clone());
    }
    let mut out = vec![0.0f32; leads * target];
    for c in 0..leads {
        let src = &signal.data()[c * len..(c + 1) * len];
        let dst = &mut out[c * target..(c + 1) * target];
        if len > target {
            let start = (len - target) / 2;
            dst.copy_from_slice(&src[start..start + target]);
        } else {
            let start = (target - len) / 2;
            dst[start..start + len].copy_from_slice(src);
        }
    }
    Tensor::from_vec(&[leads, target], out)
}

/// Averages non-overlapping blocks of `factor` samples.
pub fn decimate(signal: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (leads, len) = signal.dims2()?;
    if factor == 0 || len % factor != 0 {
        return Err(Error::Input(format!("cannot decimate {len} samples by {factor}")));
    }
    let out_len = len / factor;
    let scale = 1.0 / factor as f32;
    let out = signal
        .data()
        .chunks_exact(factor)
        .map(|c| c.iter().sum::<f32>() * scale)
        .collect();
    Tensor::from_vec(&[leads, out_len], out)
}

/// Brings a recording to the network's input length. A length that is an
/// exact multiple of the target is decimated (a reduced-resolution model);
/// anything else is padded or cropped.
pub fn prepare_input(signal: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let (_, len) = signal.dims2()?;
    if len > target && len % target == 0 {
        decimate(signal, len / target)
    } else {
        fit_length(signal, target)
    }
}

/// Network-ready inputs and labels, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub leads: usize,
    pub samples: usize,
    inputs: Vec<f32>,
    labels: Vec<[bool; N_CLASSES]>,
}

impl LabeledSet {
    pub fn from_exams(exams: &[ExamRecord], leads: usize, samples: usize) -> Result<Self> {
        let mut set = Self {
            ids: Vec::with_capacity(exams.len()),
            leads,
            samples,
            inputs: Vec::with_capacity(exams.len() * leads * samples),
            labels: Vec::with_capacity(exams.len()),
        };
        for e in exams {
            set.push(&e.id, &e.signal.data, e.labels)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, id: &str, signal: &Tensor<f32>, labels: [bool; N_CLASSES]) -> Result<()> {
        let x = prepare_input(signal, self.samples)?;
        if x.shape()[0] != self.leads {
            return Err(Error::Shape(format!(
                "exam {id} has {} leads, expected {}",
                x.shape()[0],
                self.leads
            )));
        }
        self.ids.push(id.to_string());
        self.inputs.extend_from_slice(x.data());
        self.labels.push(labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> &[[bool; N_CLASSES]] {
        &self.labels
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let per = self.leads * self.samples;
        let mut out = Self {
            ids: Vec::with_capacity(indices.len()),
            leads: self.leads,
            samples: self.samples,
            inputs: Vec::with_capacity(indices.len() * per),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            out.ids.push(self.ids[i].clone());
            out.inputs.extend_from_slice(&self.inputs[i * per..(i + 1) * per]);
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// `[B, leads, samples]` inputs and `[B, classes]` 0/1 targets.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let per = self.leads * self.samples;
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len() * N_CLASSES);
        for &i in indices {
            x.extend_from_slice(&self.inputs[i * per..(i + 1) * per]);
            y.extend(self.labels[i].iter().map(|&l| if l { 1.0 } else { 0.0 }));
        }
        let b = indices.len();
        (
            Tensor::from_vec(&[b, self.leads, self.samples], x).expect("batch shape"),
            Tensor::from_vec(&[b, N_CLASSES], y).expect("label shape"),
        )
    }
}

/// Writes `value` as pretty JSON, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

/// Appends lines to a buffer and writes them on `finish`.
pub struct JsonlWriter {
    path: PathBuf,
    buf: Vec<u8>,
}

impl JsonlWriter {
    pub fn new(path: &Path) -> Self {
        Self {
            path: path.to_path_buf(),
            buf: Vec::new(),
        }
    }

    pub fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.buf, value)?;
        self.buf.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        write_atomic(&self.path, &self.buf)
    }
}
