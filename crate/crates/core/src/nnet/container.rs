//! `NNET1` model container:
//!
//! ```text
//! b"NNET1"
//! u32 LE   header length
//! [u8]     JSON header
//! u64 LE   parameter count
//! [f64 LE] parameters
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, SdaeEncoder, Shape, TrainMetrics, TrainedModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"NNET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContainerHeader {
    Classifier { spec: NetworkSpec, metrics: TrainMetrics },
    Sdae { input: Shape, widths: Vec<usize>, reconstruction_mse: Vec<f64> },
}

pub fn write_container(header: &ContainerHeader, params: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(5 + 4 + json.len() + 8 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn read_container(bytes: &[u8]) -> Result<(ContainerHeader, Vec<f64>)> {
    let bad = |m: &str| Error::ModelFormat(m.to_string());
    if !bytes.starts_with(MAGIC) {
        return Err(bad("missing NNET1 magic"));
    }
    let mut pos = MAGIC.len();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad("truncated container"))?;
        *pos += n;
        Ok(s)
    };
    let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let header: ContainerHeader = serde_json::from_slice(take(&mut pos, hlen)?)?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let blob = take(&mut pos, count.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    let params = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, params))
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ContainerHeader::Classifier { spec: self.spec.clone(), metrics: self.metrics.clone() };
        write_container(&header, &self.network.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match read_container(bytes)? {
            (ContainerHeader::Classifier { spec, metrics }, params) => {
                let mut network = Network::build(&spec)?;
                network.set_params(&params).map_err(|e| Error::ModelFormat(e.to_string()))?;
                Ok(Self { spec, network, metrics })
            }
            _ => Err(Error::ModelFormat("container does not hold a classifier".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl SdaeEncoder {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ContainerHeader::Sdae {
            input: self.input,
            widths: self.widths(),
            reconstruction_mse: self.reconstruction_mse.clone(),
        };
        write_container(&header, &self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match read_container(bytes)? {
            (ContainerHeader::Sdae { input, widths, reconstruction_mse }, params) => {
                let mut enc = SdaeEncoder::from_params(input, &widths, &params)?;
                enc.reconstruction_mse = reconstruction_mse;
                Ok(enc)
            }
            _ => Err(Error::ModelFormat("container does not hold an SDAE encoder".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ArchSpec;

    #[test]
    fn classifier_round_trip() {
        let spec = ArchSpec::mlp(3, 0.1, 4, 1).bind(Shape::image(2, 2), 3, 9);
        let mut rng = crate::seed::rng(1);
        let network = Network::init(&spec, &mut rng).unwrap();
        let model = TrainedModel { spec, network, metrics: TrainMetrics::default() };
        let bytes = model.to_bytes().unwrap();
        assert!(bytes.starts_with(b"NNET1"));
        let back = TrainedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.network.params(), model.network.params());
        assert_eq!(back.spec, model.spec);
        assert!(TrainedModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TrainedModel::from_bytes(b"NNET2xxxx").is_err());
    }
}
