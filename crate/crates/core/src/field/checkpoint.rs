//! Checkpoint files: `DDFM1\n`, one JSON header line, then every parameter
//! as little-endian `f32` in layer order (weights row-major, then bias).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::siren::{Dense, Siren};
use super::{PddfModel, SirenConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"DDFM1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: SirenConfig,
    /// `[out, in]` per layer.
    pub shapes: Vec<[usize; 2]>,
    /// Free-form training metadata.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(model: &PddfModel, metadata: serde_json::Value, mut out: W) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        shapes: model.net.layers.iter().map(|l| [l.fan_out(), l.fan_in()]).collect(),
        metadata,
    };
    out.write_all(MAGIC)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for value in model.net.flat_params() {
        out.write_all(&(value as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &PddfModel, metadata: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, metadata, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(PddfModel, CheckpointHeader)> {
    let mut input = BufReader::new(input);
    let mut magic = [0u8; 6];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint", "file too short for magic"))?;
    if magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic, expected DDFM1"));
    }
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("checkpoint", "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line)?;
    header.config.validate()?;
    let expected = header.config.weight_shapes();
    if header.shapes != expected {
        return Err(Error::format(
            "checkpoint",
            format!("layer shapes {:?} disagree with config {:?}", header.shapes, expected),
        ));
    }
    let count: usize = expected.iter().map(|[o, i]| o * i + o).sum();
    let mut payload = Vec::with_capacity(count * 4);
    input.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} parameter bytes, found {}", count * 4, payload.len()),
        ));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut net = Siren {
        layers: expected.iter().map(|&[o, i]| Dense::zeros(i, o)).collect(),
        omega: header.config.omega_0,
    };
    net.set_flat_params(&flat);
    Ok((
        PddfModel {
            config: header.config.clone(),
            net,
        },
        header,
    ))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PddfModel, CheckpointHeader)> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PddfModel {
        PddfModel::new(&SirenConfig::new(vec![8, 8])).unwrap()
    }

    fn bytes(model: &PddfModel) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(model, serde_json::json!({"iterations": 3}), &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let buf = bytes(&m);
        let (back, header) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.metadata["iterations"], 3);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let buf = bytes(&model());
        let err = read_checkpoint(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { what: "checkpoint", .. }), "{err}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let buf = bytes(&model());
        let text = String::from_utf8_lossy(&buf[..200]).replace("[8,6]", "[9,6]");
        let mut tampered = text.into_bytes();
        tampered.extend_from_slice(&buf[200..]);
        let err = read_checkpoint(&tampered[..]).unwrap_err();
        assert!(err.to_string().contains("layer shapes"), "{err}");
    }

    #[test]
    fn bad_magic_is_reported() {
        assert!(read_checkpoint(&b"DDFD1\n{}\n"[..]).is_err());
    }
}
