//! Binary model serialization: a fixed magic header, a length-prefixed
//! JSON directory describing the shape of every parameter region, then the
//! raw little-endian f64 region data in directory order. Loading is
//! bit-exact: save -> load -> save reproduces identical bytes.

use crate::model::{ModelConfig, ModelError, ParameterStore, REGION_NAMES};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

/// 16 bytes: format name + two-digit version.
const MAGIC: &[u8; 16] = b"CTXPART-PARAMS01";

#[derive(Debug, Error)]
pub enum ParamsIoError {
    #[error("not a parameter file (bad magic header)")]
    BadMagic,
    #[error("malformed region directory: {0}")]
    BadDirectory(#[from] serde_json::Error),
    #[error("region {index} is {found}, expected {expected}")]
    RegionNameMismatch {
        index: usize,
        expected: &'static str,
        found: String,
    },
    #[error("region {name} has shape {got:?}, expected {expected:?}")]
    RegionShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("directory lists {got} regions, expected {expected}")]
    RegionCount { expected: usize, got: usize },
    #[error("trailing bytes after parameter data")]
    TrailingBytes,
    #[error("non-finite value in region {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct RegionEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Directory {
    vocab: usize,
    dim: usize,
    hidden: usize,
    segments: usize,
    seq_max: usize,
    regions: Vec<RegionEntry>,
}

/// Write `params` with its model shape. f64 only — persisted artifacts pin
/// the double-precision configuration.
pub fn save_params<W: Write>(
    config: &ModelConfig,
    params: &ParameterStore<f64>,
    mut w: W,
) -> Result<(), ParamsIoError> {
    config.validate()?;
    let regions = params.regions();
    let directory = Directory {
        vocab: config.vocab,
        dim: config.dim,
        hidden: config.hidden,
        segments: config.segments,
        seq_max: config.seq_max,
        regions: regions
            .iter()
            .map(|(name, t)| RegionEntry {
                name: (*name).to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let dir_bytes = serde_json::to_vec(&directory)?;
    w.write_all(MAGIC)?;
    w.write_all(&(dir_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&dir_bytes)?;
    for (_, t) in regions.iter() {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a parameter file back into its config and store, verifying the
/// directory against the expected region layout.
pub fn load_params<R: Read>(mut r: R) -> Result<(ModelConfig, ParameterStore<f64>), ParamsIoError> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ParamsIoError::BadMagic);
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut dir_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut dir_bytes)?;
    let directory: Directory = serde_json::from_slice(&dir_bytes)?;

    let config = ModelConfig {
        vocab: directory.vocab,
        dim: directory.dim,
        hidden: directory.hidden,
        segments: directory.segments,
        seq_max: directory.seq_max,
    };
    config.validate()?;

    // region layout must match what this build writes
    if directory.regions.len() != REGION_NAMES.len() {
        return Err(ParamsIoError::RegionCount {
            expected: REGION_NAMES.len(),
            got: directory.regions.len(),
        });
    }
    for (i, (name, entry)) in REGION_NAMES.iter().zip(&directory.regions).enumerate() {
        if entry.name != *name {
            return Err(ParamsIoError::RegionNameMismatch {
                index: i,
                expected: name,
                found: entry.name.clone(),
            });
        }
    }
    let mut params = zero_store(&config);
    for ((name, target), entry) in params.regions_mut().into_iter().zip(&directory.regions) {
        if (entry.rows, entry.cols) != target.shape() {
            return Err(ParamsIoError::RegionShapeMismatch {
                name: entry.name.clone(),
                expected: target.shape(),
                got: (entry.rows, entry.cols),
            });
        }
        let mut buf = [0u8; 8];
        for v in target.data_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(ParamsIoError::NonFinite(name.to_string()));
            }
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok((config, params)),
        _ => Err(ParamsIoError::TrailingBytes),
    }
}

fn zero_store(config: &ModelConfig) -> ParameterStore<f64> {
    let (v, d, h, n) = (config.vocab, config.dim, config.hidden, config.segments);
    ParameterStore {
        embed: Tensor::zeros(v, d),
        attn_qkv: Tensor::zeros(d, 3 * d),
        attn_out: Tensor::zeros(d, d),
        ffn_in: Tensor::zeros(h, d),
        ffn_bias1: Tensor::zeros(1, h),
        ffn_out: Tensor::zeros(d, h),
        ffn_bias2: Tensor::zeros(1, d),
        gate: Tensor::zeros(n, d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab: 13,
            dim: 4,
            hidden: 6,
            segments: 3,
            seq_max: 10,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let config = config();
        let params = init_params::<f64>(&config, 77).unwrap();
        let mut bytes = Vec::new();
        save_params(&config, &params, &mut bytes).unwrap();
        let (config2, params2) = load_params(bytes.as_slice()).unwrap();
        assert_eq!(config, config2);
        for ((_, a), (_, b)) in params.regions().iter().zip(params2.regions().iter()) {
            assert_eq!(a.data(), b.data());
        }
        // second save is byte-identical
        let mut bytes2 = Vec::new();
        save_params(&config2, &params2, &mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Vec::new();
        save_params(&config(), &init_params::<f64>(&config(), 1).unwrap(), &mut bytes).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(
            load_params(bytes.as_slice()),
            Err(ParamsIoError::BadMagic)
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let mut bytes = Vec::new();
        save_params(&config(), &init_params::<f64>(&config(), 2).unwrap(), &mut bytes).unwrap();

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            load_params(truncated),
            Err(ParamsIoError::Io(_))
        ));

        let mut padded = bytes.clone();
        padded.push(0);
        assert!(matches!(
            load_params(padded.as_slice()),
            Err(ParamsIoError::TrailingBytes)
        ));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let config = config();
        let mut params = init_params::<f64>(&config, 3).unwrap();
        *params.embed.at_mut(0, 0) = 1.0; // placeholder; corrupt bytes below
        let mut bytes = Vec::new();
        save_params(&config, &params, &mut bytes).unwrap();
        // overwrite the first data value with NaN bytes: header is
        // 16 (magic) + 4 (len) + directory
        let dir_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let data_start = 20 + dir_len;
        bytes[data_start..data_start + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            load_params(bytes.as_slice()),
            Err(ParamsIoError::NonFinite(_))
        ));
    }
}
