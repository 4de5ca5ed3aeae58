//! Flat binary checkpoints: magic, little-endian header length, JSON header,
//! then every array as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"AUTOCLCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    /// Number of `f64` elements.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

/// Serialize named arrays with an arbitrary JSON config.
pub fn to_bytes(kind: &str, config: serde_json::Value, arrays: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, t) in arrays {
        entries.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() });
        offset += t.len() * 8;
    }
    let header = serde_json::to_vec(&Header { kind: kind.to_string(), config, arrays: entries })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a checkpoint into its header and arrays.
pub fn from_bytes(bytes: &[u8]) -> Result<(Header, Vec<Tensor>)> {
    let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(&e.to_string()))?;
    let data = &bytes[data_start..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(bad(&format!("{}: shape/len mismatch", e.name)));
        }
        let end = e.offset.checked_add(e.len * 8).filter(|&end| end <= data.len()).ok_or_else(|| bad("truncated data"))?;
        let values = data[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(Tensor::new(e.shape.clone(), values)?);
    }
    Ok((header, arrays))
}

pub fn encoder_to_bytes(params: &EncoderParams) -> Result<Vec<u8>> {
    let named: Vec<(String, &Tensor)> = params
        .config
        .layout()
        .into_iter()
        .map(|(n, _)| n)
        .zip(&params.tensors)
        .collect();
    to_bytes("encoder", serde_json::to_value(&params.config)?, &named)
}

pub fn encoder_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let (header, arrays) = from_bytes(bytes)?;
    if header.kind != "encoder" {
        return Err(Error::Data(format!("checkpoint kind {:?} is not an encoder", header.kind)));
    }
    let config: EncoderConfig = serde_json::from_value(header.config)?;
    EncoderParams::from_tensors(config, arrays)
}

pub fn save_encoder(path: &Path, params: &EncoderParams) -> Result<()> {
    fs::write(path, encoder_to_bytes(params)?)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    encoder_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;

    #[test]
    fn encoder_round_trip_is_exact() {
        let p = init_encoder(&EncoderConfig::new(3, 2, 5, 4), 9).unwrap();
        let bytes = encoder_to_bytes(&p).unwrap();
        assert_eq!(encoder_from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn header_offsets_are_contiguous() {
        let p = init_encoder(&EncoderConfig::new(1, 1, 2, 2), 0).unwrap();
        let (h, _) = from_bytes(&encoder_to_bytes(&p).unwrap()).unwrap();
        let mut expected = 0;
        for e in &h.arrays {
            assert_eq!(e.offset, expected);
            expected += e.len * 8;
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(matches!(from_bytes(b"nonsense"), Err(Error::Data(_))));
        let p = init_encoder(&EncoderConfig::new(1, 1, 2, 2), 0).unwrap();
        let bytes = encoder_to_bytes(&p).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let p = init_encoder(&EncoderConfig::new(2, 2, 3, 3), 1).unwrap();
        save_encoder(&path, &p).unwrap();
        assert_eq!(load_encoder(&path).unwrap(), p);
    }
}
