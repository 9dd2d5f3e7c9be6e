//! `RNW1` weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RNW1"                    4 bytes
//! version                   u32
//! header length             u32
//! header                    JSON {"config": ResNetConfig, "filter_schedule": [..]}
//! per tensor, canonical order:
//!   name length u16, name bytes, rank u8, rank × u32 dims, f32 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ResNetConfig;
use super::network::ResNet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: [u8; 4] = *b"RNW1";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ResNetConfig,
    filter_schedule: Vec<usize>,
}

/// The serialized form of a network: its config plus every named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ResNetConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl ModelWeights {
    pub fn from_model(model: &ResNet<f32>) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, _, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the network, checking that every tensor the config implies is
    /// present exactly once with its derived shape.
    pub fn into_model(self) -> Result<ResNet<f32>> {
        let mut model = ResNet::<f32>::build(&self.config, 0)?;
        let slots = model.named_tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "config implies {} tensors, file holds {}",
                slots.len(),
                self.tensors.len()
            )));
        }
        for ((name, _, slot), (fname, t)) in slots.into_iter().zip(self.tensors) {
            if name != fname {
                return Err(Error::ConfigMismatch(format!(
                    "expected tensor {name:?}, found {fname:?}"
                )));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            filter_schedule: self.config.filter_schedule(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, t) in &self.tensors {
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != WEIGHT_MAGIC {
            return Err(Error::BadMagic {
                expected: WEIGHT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: WEIGHT_VERSION,
                found: version,
            });
        }
        let header_len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "config header")?)
            .map_err(|e| Error::Format(format!("config header: {e}")))?;
        header.config.validate()?;
        if header.filter_schedule != header.config.filter_schedule() {
            return Err(Error::ConfigMismatch(format!(
                "filter schedule {:?} disagrees with config-derived {:?}",
                header.filter_schedule,
                header.config.filter_schedule()
            )));
        }
        let mut tensors = Vec::new();
        while !r.at_end() {
            let name_len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4, &format!("values of {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self {
            config: header.config,
            tensors,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_weights(model: &ResNet<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &ModelWeights::from_model(model).to_bytes()?)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    ModelWeights::from_bytes(&bytes)
}

/// Loads a model and insists its architecture equals `expected`.
pub fn load_model_expecting(path: &Path, expected: &ResNetConfig) -> Result<ResNet<f32>> {
    let weights = load_weights(path)?;
    if &weights.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "weights were saved for {:?}, expected {:?}",
            weights.config, expected
        )));
    }
    weights.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> ResNet<f32> {
        ResNet::build(&ResNetConfig::miniature(2, 64, 4), 7).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let net = mini();
        let bytes = ModelWeights::from_model(&net).to_bytes().unwrap();
        let back = ModelWeights::from_bytes(&bytes).unwrap().into_model().unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn distinct_errors() {
        let bytes = ModelWeights::from_model(&mini()).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            ModelWeights::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        for cut in [2, 10, bytes.len() - 3] {
            assert!(
                matches!(ModelWeights::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut w = ModelWeights::from_model(&mini());
        w.tensors[0].1 = Tensor::zeros(&[4, 12, 15]);
        assert!(matches!(w.into_model(), Err(Error::Shape(_))));
    }

    #[test]
    fn different_depth_is_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rnw");
        save_weights(&mini(), &path).unwrap();
        let other = ResNetConfig::miniature(1, 64, 4);
        assert!(matches!(
            load_model_expecting(&path, &other),
            Err(Error::ConfigMismatch(_))
        ));
        let mut w = load_weights(&path).unwrap();
        w.config = other;
        assert!(matches!(w.into_model(), Err(Error::ConfigMismatch(_))));
    }
}
