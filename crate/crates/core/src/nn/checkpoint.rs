//! Binary checkpoints: magic, little-endian JSON header length, JSON
//! topology header, then parameters and running statistics as f64 LE.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, Role};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RSRCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    role: Role,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    pretrained: bool,
    param_count: usize,
    running_count: usize,
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        role: net.role,
        input_shape: net.input_shape,
        layers: net.layers.clone(),
        pretrained: net.pretrained,
        param_count: net.params.len(),
        running_count: net.running.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * (net.params.len() + net.running.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in net.params.iter().chain(&net.running) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint. When `expected` is given, the stored topology must
/// match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&Network>) -> Result<Network> {
    let bad = |detail: &str| Error::Parse {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let mut net = Network::new(header.role, header.input_shape, header.layers)?;
    if net.params.len() != header.param_count || net.running.len() != header.running_count {
        return Err(bad("parameter counts disagree with topology"));
    }
    let floats = &bytes[16 + hlen..];
    if floats.len() != 8 * (header.param_count + header.running_count) {
        return Err(bad("truncated parameter block"));
    }
    let mut values = floats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for p in net.params.iter_mut().chain(net.running.iter_mut()) {
        *p = values.next().expect("length checked");
    }
    net.pretrained = header.pretrained;
    if let Some(expected) = expected {
        if !net.same_topology(expected) {
            return Err(Error::TopologyMismatch(format!(
                "checkpoint {} holds a {:?} with input {:?} and {} layers; expected {:?} with input {:?} and {} layers",
                path.display(),
                net.role,
                net.input_shape,
                net.layers.len(),
                expected.role,
                expected.input_shape,
                expected.layers.len()
            )));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_encoder, build_generator, EncoderConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let mut g = build_generator(1, 8).unwrap();
        g.randomize(5, 0.3);
        g.running[3] = 0.123456789;
        save_checkpoint(&g, &path).unwrap();
        let back = load_checkpoint(&path, Some(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn topology_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let g = build_generator(1, 8).unwrap();
        save_checkpoint(&g, &path).unwrap();
        let other = build_generator(2, 8).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(Error::TopologyMismatch(_))
        ));
        let enc = build_encoder(&EncoderConfig::default()).unwrap();
        assert!(load_checkpoint(&path, Some(&enc)).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
