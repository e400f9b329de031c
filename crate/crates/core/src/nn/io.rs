//! Network parameter files.
//!
//! Layout: the magic line `CAPNET1\n`, one line of JSON header, then the
//! flattened parameters as little-endian `f64` (per layer: `W` row-major,
//! then `b`). Decoding rejects any inconsistency instead of panicking.

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Layer, Mlp, OutputTransform};
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"CAPNET1\n";

/// Guard against absurd allocations from corrupted headers.
const MAX_PARAMS: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetHeader {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub output: OutputTransform,
    pub param_count: usize,
}

pub fn encode(net: &Mlp) -> Vec<u8> {
    let header = NetHeader {
        dims: net.dims(),
        activation: net.activation(),
        output: net.output_transform(),
        param_count: net.param_count(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for value in net.params_flat() {
        out.extend(value.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Mlp> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::NetworkFormat("missing magic line".into()))?;
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::NetworkFormat("unterminated header".into()))?;
    let header: NetHeader = serde_json::from_slice(&rest[..newline])
        .map_err(|e| Error::NetworkFormat(format!("bad header: {e}")))?;
    let payload = &rest[newline + 1..];

    if header.dims.len() < 2 || header.dims.contains(&0) {
        return Err(Error::NetworkFormat(format!("invalid dims {:?}", header.dims)));
    }
    let mut expected = 0usize;
    for w in header.dims.windows(2) {
        let layer = w[0]
            .checked_mul(w[1])
            .and_then(|n| n.checked_add(w[1]))
            .ok_or_else(|| Error::NetworkFormat("parameter count overflows".into()))?;
        expected = expected
            .checked_add(layer)
            .filter(|&n| n <= MAX_PARAMS)
            .ok_or_else(|| Error::NetworkFormat("parameter count too large".into()))?;
    }
    if header.param_count != expected {
        return Err(Error::NetworkFormat(format!(
            "header says {} parameters, dims imply {expected}",
            header.param_count
        )));
    }
    if payload.len() != expected * 8 {
        return Err(Error::NetworkFormat(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut layers = Vec::with_capacity(header.dims.len() - 1);
    for w in header.dims.windows(2) {
        let (input, output) = (w[0], w[1]);
        let weights: Vec<f64> = values.by_ref().take(input * output).collect();
        let biases: Vec<f64> = values.by_ref().take(output).collect();
        let w = ndarray::Array2::from_shape_vec((output, input), weights)
            .map_err(|e| Error::NetworkFormat(e.to_string()))?;
        layers.push(Layer {
            w,
            b: ndarray::Array1::from(biases),
        });
    }
    Ok(Mlp::from_layers(layers, header.activation, header.output))
}

pub fn save(net: &Mlp, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Mlp> {
    decode(&std::fs::read(path)?)
}
