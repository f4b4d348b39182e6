//! Binary checkpoint format.
//!
//! ```text
//! "SDTF" | version: u32
//! repeated: name_len: u32 | name: utf-8 | rank: u32 | dims: u32 * rank | values: f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian. The first record is `__config`, holding
//! [`ModelConfig::to_fields`]. Records whose name starts with `__` and is not a model
//! tensor are returned to the caller as extras (optimizer state, training position).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDTF";
pub const VERSION: u32 = 1;
pub const CONFIG_RECORD: &str = "__config";

const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Record {
    pub fn from_array(name: impl Into<String>, a: &ArrayD<f64>) -> Self {
        Self { name: name.into(), dims: a.shape().to_vec(), values: a.iter().map(|&v| v as f32).collect() }
    }

    pub fn from_slice(name: impl Into<String>, v: &[f64]) -> Self {
        Self { name: name.into(), dims: vec![v.len()], values: v.iter().map(|&x| x as f32).collect() }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.values.iter().map(|&v| v as f64).collect())
            .expect("dims match value count")
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let expected: usize = r.dims.iter().product();
        if expected != r.values.len() {
            return Err(Error::Checkpoint(format!(
                "record `{}` has {} values for dims {:?}",
                r.name,
                r.values.len(),
                r.dims
            )));
        }
        w.write_all(&u32_of(r.name.len())?.to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&u32_of(r.dims.len())?.to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&u32_of(d)?.to_le_bytes())?;
        }
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads every record. Fails on bad magic, unknown version or truncation.
pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match r.read(&mut first[..1])? {
            0 => break,
            _ => r.read_exact(&mut first[1..]).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?,
        }
        let name_len = u32::from_le_bytes(first) as usize;
        if name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("record name of {name_len} bytes")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("record `{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}` is too large")))?;
        let mut bytes = Vec::new();
        (&mut r).take(count as u64 * 4).read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(Error::Checkpoint(format!("record `{name}` truncated")));
        }
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(Record { name, dims, values });
    }
    Ok(out)
}

/// Config record followed by every model tensor, then `extras`.
pub fn model_records(model: &Model, extras: &[Record]) -> Vec<Record> {
    let mut records = vec![Record::from_slice(CONFIG_RECORD, &model.config().to_fields())];
    records.extend(model.store().tensors().iter().map(|t| Record::from_array(&t.name, &t.value)));
    records.extend_from_slice(extras);
    records
}

pub fn save_checkpoint(model: &Model, extras: &[Record], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_records(BufWriter::new(file), &model_records(model, extras))
}

/// Rebuilds a model from records. Returns the model and the records that are not
/// model tensors.
pub fn model_from_records(records: Vec<Record>) -> Result<(Model, Vec<Record>)> {
    let mut by_name: IndexMap<String, Record> = IndexMap::new();
    for r in records {
        if by_name.contains_key(&r.name) {
            return Err(Error::Checkpoint(format!("duplicate record `{}`", r.name)));
        }
        by_name.insert(r.name.clone(), r);
    }
    let config_record = by_name
        .shift_remove(CONFIG_RECORD)
        .ok_or_else(|| Error::Checkpoint("missing `__config` record".into()))?;
    let fields: Vec<f64> = config_record.values.iter().map(|&v| v as f64).collect();
    let config = ModelConfig::from_fields(&fields)?;
    let mut model = build_model(&config, 0)?;
    for t in model.store_mut().tensors_mut() {
        let r = by_name
            .shift_remove(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", t.name)))?;
        if r.dims != t.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has dims {:?}, model expects {:?}",
                t.name,
                r.dims,
                t.value.shape()
            )));
        }
        t.value = r.to_array();
    }
    Ok((model, by_name.into_values().collect()))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vec<Record>)> {
    let file = File::open(path)?;
    model_from_records(read_records(BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[]).unwrap();
        assert_eq!(buf, b"SDTF\x01\x00\x00\x00");
    }

    #[test]
    fn record_layout_is_exact() {
        let mut buf = Vec::new();
        let r = Record { name: "ab".into(), dims: vec![2], values: vec![1.0, -2.5] };
        write_records(&mut buf, &[r.clone()]).unwrap();
        let mut expected = b"SDTF\x01\x00\x00\x00".to_vec();
        expected.extend([2, 0, 0, 0]);
        expected.extend(b"ab");
        expected.extend([1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_records(&buf[..]).unwrap(), vec![r]);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[Record { name: "x".into(), dims: vec![3], values: vec![0.0; 3] }]).unwrap();
        assert!(read_records(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_records(&bad[..]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let mut m = build_model(&ModelConfig::small(1, 16, 3), 5).unwrap();
        m.round_to_f32();
        let extra = Record::from_slice("__train_state", &[3.0, 7.0]);
        let (back, extras) = model_from_records(model_records(&m, &[extra.clone()])).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.store().tensors().iter().zip(m.store().tensors()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(extras, vec![extra]);
    }
}
