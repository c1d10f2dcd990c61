//! Binary dataset files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header   magic "UMDS" | version u32 | input_dim u32 | n_sources u32 | n_samples u64
//! sources  n_sources x ( source_id u16 | n_classes u32 | samples_per_class u32
//!                        | cluster_spread f64 | inter_class_separation f64
//!                        | difficulty_drift f64 )
//! records  n_samples x ( source_id u16 | class_id u16 | split u8 | input_dim x f64 )
//! ```
//!
//! `split` is 0 for unassigned, 1 train, 2 val, 3 test. Split index lists
//! are rebuilt in record order, which matches how they are stored in memory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Dataset, Sample, SourceRegistry, SourceSpec, SourceSplits};
use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"UMDS";
pub const DATASET_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;
const SOURCE_LEN: usize = 2 + 4 + 4 + 8 + 8 + 8;

fn record_len(input_dim: usize) -> usize {
    2 + 2 + 1 + 8 * input_dim
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let mut tag = vec![0u8; d.samples.len()];
    for s in d.registry.splits.values() {
        for (code, list) in [(1u8, &s.train), (2, &s.val), (3, &s.test)] {
            for &i in list {
                tag[i] = code;
            }
        }
    }
    let mut out = Vec::with_capacity(
        HEADER_LEN + SOURCE_LEN * d.registry.m() + record_len(d.input_dim) * d.samples.len(),
    );
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(d.registry.m() as u32).to_le_bytes());
    out.extend_from_slice(&(d.samples.len() as u64).to_le_bytes());
    for s in &d.registry.sources {
        out.extend_from_slice(&s.source_id.to_le_bytes());
        out.extend_from_slice(&(s.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&(s.samples_per_class as u32).to_le_bytes());
        out.extend_from_slice(&s.cluster_spread.to_le_bytes());
        out.extend_from_slice(&s.inter_class_separation.to_le_bytes());
        out.extend_from_slice(&s.difficulty_drift.to_le_bytes());
    }
    for (s, t) in d.samples.iter().zip(&tag) {
        if s.features.len() != d.input_dim {
            return Err(Error::Dimension("sample feature length differs from input_dim".into()));
        }
        out.extend_from_slice(&s.source_id.to_le_bytes());
        out.extend_from_slice(&s.class_id.to_le_bytes());
        out.push(*t);
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(buf: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::format(path, "bad magic; not a dataset file"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(
            path,
            format!("dataset version {version} unsupported (expected {DATASET_VERSION})"),
        ));
    }
    let input_dim = r.u32()? as usize;
    let n_sources = r.u32()? as usize;
    let n_samples = r.u64()? as usize;

    let expected = HEADER_LEN as u128
        + SOURCE_LEN as u128 * n_sources as u128
        + record_len(input_dim) as u128 * n_samples as u128;
    if expected != buf.len() as u128 {
        return Err(Error::format(
            path,
            format!(
                "header declares {n_samples} records of dim {input_dim} ({expected} bytes) but file has {} bytes",
                buf.len()
            ),
        ));
    }

    let mut sources = Vec::with_capacity(n_sources);
    for _ in 0..n_sources {
        sources.push(SourceSpec {
            source_id: r.u16()?,
            n_classes: r.u32()? as usize,
            samples_per_class: r.u32()? as usize,
            cluster_spread: r.f64()?,
            inter_class_separation: r.f64()?,
            difficulty_drift: r.f64()?,
        });
    }
    let mut splits: BTreeMap<_, SourceSplits> = BTreeMap::new();
    let mut any_split = false;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let source_id = r.u16()?;
        let class_id = r.u16()?;
        let tag = r.u8()?;
        let features = (0..input_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if tag > 3 {
            return Err(Error::format(path, format!("record {i} has split tag {tag}")));
        }
        if tag > 0 {
            any_split = true;
            let e = splits.entry(source_id).or_default();
            match tag {
                1 => e.train.push(i),
                2 => e.val.push(i),
                _ => e.test.push(i),
            }
        }
        samples.push(Sample {
            source_id,
            class_id,
            features,
        });
    }
    if any_split {
        for s in &sources {
            splits.entry(s.source_id).or_default();
        }
    }
    let d = Dataset {
        input_dim,
        samples,
        registry: SourceRegistry { sources, splits },
    };
    d.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(d)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}
