//! Binary checkpoint format.
//!
//! ```text
//! "CTXF"  u32 version  u32 json_len  json_config
//! repeated: u32 name_len  name  u8 rank  u64 dims[rank]  f32 data[prod(dims)]
//! ```
//! All integers and floats are little-endian. The JSON object holds the
//! encoder config; wrappers (sentence encoder, classifier) add their own keys
//! to it and append their own tensors after the encoder's.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use super::params::{EncoderParams, Tensor};
use super::{EncoderConfig, EncoderError};
use crate::util::write_atomic;

const MAGIC: &[u8; 4] = b"CTXF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn write_tensor_file(path: &Path, config: &Map<String, Value>, tensors: &[(String, &Tensor<f32>)]) -> Result<(), EncoderError> {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + tensors.iter().map(|(_, t)| 4 * t.len() + 64).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EncoderError> {
        if self.buf.len() - self.pos < n {
            return Err(EncoderError::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn parse_tensor_bytes(bytes: &[u8]) -> Result<(Map<String, Value>, NamedTensors), EncoderError> {
    let corrupt = |m: String| EncoderError::CorruptCheckpoint(m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let json_len = r.u32("config length")? as usize;
    let config: Map<String, Value> = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| corrupt(format!("config is not a JSON object: {e}")))?;
    let mut tensors = Vec::new();
    while !r.at_end() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(format!("tensor {name} has an absurd shape {shape:?}")))?;
        let raw = r.take(n, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor { shape, data }));
    }
    Ok((config, tensors))
}

pub fn read_tensor_file(path: &Path) -> Result<(Map<String, Value>, NamedTensors), EncoderError> {
    parse_tensor_bytes(&fs::read(path)?)
}

/// Takes the encoder's tensors (in canonical order) off the front of
/// `tensors` and returns the rest.
pub(crate) fn split_encoder(
    config: &Map<String, Value>,
    tensors: NamedTensors,
) -> Result<(EncoderParams, NamedTensors), EncoderError> {
    let cfg: EncoderConfig = serde_json::from_value(Value::Object(config.clone()))
        .map_err(|e| EncoderError::CorruptCheckpoint(format!("invalid encoder config: {e}")))?;
    cfg.validate()
        .map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
    let mut template = EncoderParams::shape_template(&cfg);
    let mut it = tensors.into_iter();
    for (name, slot) in template.entries_mut() {
        let (got_name, t) = it
            .next()
            .ok_or_else(|| EncoderError::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if got_name != name || t.shape != slot.shape {
            return Err(EncoderError::CorruptCheckpoint(format!(
                "expected {name} {:?}, found {got_name} {:?}",
                slot.shape, t.shape
            )));
        }
        *slot = t;
    }
    let params = EncoderParams::from_weights(cfg, template)?;
    Ok((params, it.collect()))
}

pub(crate) fn config_map(params: &EncoderParams) -> Map<String, Value> {
    match serde_json::to_value(params.config()).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

pub(crate) fn save_bundle(
    path: &Path,
    params: &EncoderParams,
    extra_config: Map<String, Value>,
    extra_tensors: &[(String, &Tensor<f32>)],
) -> Result<(), EncoderError> {
    let mut config = config_map(params);
    config.extend(extra_config);
    let mut tensors = params.weights().entries();
    tensors.extend(extra_tensors.iter().map(|(n, t)| (n.clone(), *t)));
    write_tensor_file(path, &config, &tensors)
}

pub(crate) fn load_bundle(path: &Path) -> Result<(EncoderParams, Map<String, Value>, NamedTensors), EncoderError> {
    let (config, tensors) = read_tensor_file(path)?;
    let (params, rest) = split_encoder(&config, tensors)?;
    Ok((params, config, rest))
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<(), EncoderError> {
    save_bundle(path, params, Map::new(), &[])
}

/// Loads an encoder checkpoint. Tensors appended by wrappers are ignored.
pub fn load_checkpoint(path: &Path) -> Result<EncoderParams, EncoderError> {
    load_bundle(path).map(|(p, _, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            hidden_size: 8,
            num_hidden_layers: 1,
            num_attention_heads: 2,
            intermediate_size: 12,
            max_position_embeddings: 6,
            vocab_size: 20,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = init_params(&tiny(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctxf");
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        for ((_, a), (_, b)) in back.weights().entries().into_iter().zip(p.weights().entries()) {
            let abits: Vec<u32> = a.data.iter().map(|x| x.to_bits()).collect();
            let bbits: Vec<u32> = b.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
    }

    #[test]
    fn header_layout() {
        let p = init_params(&tiny(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctxf");
        save_checkpoint(&p, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CTXF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let jl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cfg: EncoderConfig = serde_json::from_slice(&bytes[12..12 + jl]).unwrap();
        assert_eq!(&cfg, p.config());
        let first_name_len = u32::from_le_bytes(bytes[12 + jl..16 + jl].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16 + jl..16 + jl + first_name_len], b"embeddings.word");
    }

    #[test]
    fn truncation_detected_everywhere() {
        let p = init_params(&tiny(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctxf");
        save_checkpoint(&p, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [0, 3, 7, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let res = parse_tensor_bytes(&bytes[..cut])
                .and_then(|(c, t)| split_encoder(&c, t).map(|_| ()));
            assert!(matches!(res, Err(EncoderError::CorruptCheckpoint(_))), "cut at {cut}");
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let p = init_params(&tiny(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctxf");
        save_checkpoint(&p, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(EncoderError::VersionMismatch { found: 99, expected: 1 })
        ));
    }
}
