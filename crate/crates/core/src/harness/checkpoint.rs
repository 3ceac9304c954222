//! Parameter checkpoints.
//!
//! Layout: one UTF-8 manifest line `advopt-checkpoint v1 <layout JSON>\n`,
//! then the parameter count as a little-endian `u64`, then that many
//! little-endian `f64` values. Nothing may follow.

use std::path::Path;

use super::HarnessError;
use crate::ad::{ParamVector, Segment};

const MAGIC: &str = "advopt-checkpoint v1 ";

pub fn encode_checkpoint(params: &ParamVector) -> Vec<u8> {
    let layout = serde_json::to_string(&params.layout).expect("layout serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + layout.len() + 9 + 8 * params.len());
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(layout.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamVector, HarnessError> {
    let bad = |m: String| HarnessError::Checkpoint(m);
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing manifest line".into()))?;
    let manifest = std::str::from_utf8(&bytes[..nl]).map_err(|e| bad(format!("manifest is not UTF-8: {e}")))?;
    let json = manifest.strip_prefix(MAGIC).ok_or_else(|| bad(format!("unrecognized header {:?}", truncate(manifest))))?;
    let layout: Vec<Segment> = serde_json::from_str(json).map_err(|e| bad(format!("layout: {e}")))?;
    let body = &bytes[nl + 1..];
    if body.len() < 8 {
        return Err(bad("missing parameter count".into()));
    }
    let n = u64::from_le_bytes(body[..8].try_into().expect("8 bytes")) as usize;
    let payload = &body[8..];
    if payload.len() != n.saturating_mul(8) {
        return Err(bad(format!("expected {n} values ({} bytes), found {} bytes", n.saturating_mul(8), payload.len())));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(ParamVector::new(data, layout)?)
}

fn truncate(s: &str) -> &str {
    &s[..s.char_indices().nth(40).map_or(s.len(), |(i, _)| i)]
}

pub fn save_checkpoint(params: &ParamVector, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        let layout = vec![
            Segment { name: "affine0.weight".into(), offset: 0, shape: vec![2, 2] },
            Segment { name: "affine0.bias".into(), offset: 4, shape: vec![2] },
        ];
        ParamVector::new(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, 7.0], layout).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample();
        let q = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(p.layout, q.layout);
        assert!(p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        assert!(decode_checkpoint(b"not a checkpoint\n").is_err());
    }
}
