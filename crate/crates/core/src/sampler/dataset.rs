//! Dataset files: `DDFD1\n`, one JSON header line, then fixed-width
//! little-endian records of `3 f32 p, 3 f32 v, u8 kind, u8 visible,
//! f32 depth, 3 f32 normal` (42 bytes; the normal is zero when invisible).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{draw_samples, DatasetSpec, Oracle, SampleType, TrainingSample, TypeCounts};
use crate::error::{Error, Result};
use crate::geometry::{OrientedPoint, Vec3};

const MAGIC: &[u8] = b"DDFD1\n";
pub const RECORD_BYTES: usize = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub counts: TypeCounts,
    pub epsilon_o: f64,
    pub boundary_bias: f64,
    pub seed: u64,
    pub oracle: String,
}

/// Samples grouped by type, in `SampleType::ALL` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    pub fn of_kind(&self, kind: SampleType) -> impl Iterator<Item = &TrainingSample> {
        self.samples.iter().filter(move |s| s.kind == kind)
    }
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize_vec(v: &Vec3) -> Vec3 {
    v.map(quantize)
}

/// Rounds a sample to what the file can store.
fn stored(s: &TrainingSample) -> TrainingSample {
    TrainingSample {
        op: OrientedPoint {
            p: quantize_vec(&s.op.p),
            v: quantize_vec(&s.op.v),
        },
        visible: s.visible,
        depth: if s.visible { quantize(s.depth) } else { 0.0 },
        normal: s.normal.filter(|_| s.visible).map(|n| quantize_vec(&n)),
        kind: s.kind,
    }
}

/// Draws every sample type and writes the dataset to `path`; returns the
/// stored (f32-rounded) samples.
pub fn build_dataset(oracle: &Oracle, spec: &DatasetSpec, path: impl AsRef<Path>) -> Result<Dataset> {
    let dataset = generate(oracle, spec)?;
    write_dataset(&dataset, BufWriter::new(File::create(path)?))?;
    Ok(dataset)
}

/// Draws every sample type in memory, rounded as if stored.
pub fn generate(oracle: &Oracle, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec
        .counts
        .total()
        .ok_or_else(|| Error::invalid("sample counts overflow"))?;
    total
        .checked_mul(RECORD_BYTES)
        .ok_or_else(|| Error::invalid("dataset size overflows"))?;
    let mut samples = Vec::with_capacity(total);
    for kind in SampleType::ALL {
        let seed = spec.seed.wrapping_add(kind.index() as u64);
        let drawn = draw_samples(oracle, kind, spec.counts.get(kind), spec, seed)?;
        samples.extend(drawn.iter().map(stored));
    }
    Ok(Dataset {
        header: DatasetHeader {
            counts: spec.counts,
            epsilon_o: spec.offset_epsilon,
            boundary_bias: spec.boundary_bias,
            seed: spec.seed,
            oracle: oracle.describe(),
        },
        samples,
    })
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    serde_json::to_writer(&mut out, &dataset.header)?;
    out.write_all(b"\n")?;
    let mut record = [0u8; RECORD_BYTES];
    for s in &dataset.samples {
        let put = |record: &mut [u8; RECORD_BYTES], at: usize, x: f64| {
            record[at..at + 4].copy_from_slice(&(x as f32).to_le_bytes());
        };
        let n = s.normal.unwrap_or_else(Vec3::zeros);
        for k in 0..3 {
            put(&mut record, 4 * k, s.op.p[k]);
            put(&mut record, 12 + 4 * k, s.op.v[k]);
            put(&mut record, 30 + 4 * k, n[k]);
        }
        record[24] = s.kind.index() as u8;
        record[25] = s.visible as u8;
        put(&mut record, 26, s.depth);
        out.write_all(&record)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut input = BufReader::new(input);
    let mut magic = [0u8; 6];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::format("dataset", "file too short for magic"))?;
    if magic != MAGIC {
        return Err(Error::format("dataset", "bad magic, expected DDFD1"));
    }
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("dataset", "truncated header"));
    }
    let header: DatasetHeader = serde_json::from_slice(&line)?;
    let total = header
        .counts
        .total()
        .ok_or_else(|| Error::format("dataset", "sample counts overflow"))?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if Some(payload.len()) != total.checked_mul(RECORD_BYTES) {
        return Err(Error::format(
            "dataset",
            format!("expected {total} records, found {} bytes", payload.len()),
        ));
    }
    let f = |r: &[u8], at: usize| f32::from_le_bytes([r[at], r[at + 1], r[at + 2], r[at + 3]]) as f64;
    let vec = |r: &[u8], at: usize| Vec3::new(f(r, at), f(r, at + 4), f(r, at + 8));
    let mut samples = Vec::with_capacity(total);
    for r in payload.chunks_exact(RECORD_BYTES) {
        let kind = SampleType::from_index(r[24] as usize)
            .ok_or_else(|| Error::format("dataset", format!("unknown sample kind {}", r[24])))?;
        let visible = match r[25] {
            0 => false,
            1 => true,
            other => return Err(Error::format("dataset", format!("bad visibility flag {other}"))),
        };
        samples.push(TrainingSample {
            op: OrientedPoint {
                p: vec(r, 0),
                v: vec(r, 12),
            },
            visible,
            depth: f(r, 26),
            normal: visible.then(|| vec(r, 30)),
            kind,
        });
    }
    for kind in SampleType::ALL {
        let found = samples.iter().filter(|s| s.kind == kind).count();
        if found != header.counts.get(kind) {
            return Err(Error::format(
                "dataset",
                format!(
                    "header promises {} {kind} samples, found {found}",
                    header.counts.get(kind)
                ),
            ));
        }
    }
    Ok(Dataset { header, samples })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AnalyticShape;

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            counts: TypeCounts::new(300, 300, 100, 100, 100, 100),
            seed,
            ..DatasetSpec::default()
        }
    }

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(d, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let oracle = Oracle::analytic(AnalyticShape::sphere(0.9));
        let d = generate(&oracle, &small_spec(1)).unwrap();
        let buf = bytes(&d);
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, d);
        assert_eq!(bytes(&back), buf);
        let header_end = 6 + buf[6..].iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(buf.len() - header_end, 1000 * RECORD_BYTES);
    }

    #[test]
    fn empty_spec_writes_header_only() {
        let oracle = Oracle::analytic(AnalyticShape::sphere(0.9));
        let spec = DatasetSpec {
            counts: TypeCounts::new(0, 0, 0, 0, 0, 0),
            ..DatasetSpec::default()
        };
        let d = generate(&oracle, &spec).unwrap();
        let buf = bytes(&d);
        assert!(buf.starts_with(MAGIC));
        assert_eq!(read_dataset(&buf[..]).unwrap().samples.len(), 0);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let oracle = Oracle::analytic(AnalyticShape::sphere(0.9));
        let a = bytes(&generate(&oracle, &small_spec(7)).unwrap());
        let b = bytes(&generate(&oracle, &small_spec(7)).unwrap());
        let c = bytes(&generate(&oracle, &small_spec(8)).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let oracle = Oracle::analytic(AnalyticShape::sphere(0.9));
        let buf = bytes(&generate(&oracle, &small_spec(1)).unwrap());
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
    }
}
