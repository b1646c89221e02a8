//! Weight archive: magic "PCRD", one version byte, then repeated records of
//! (name length, name bytes, rank, dims, row-major f32 data), all integers
//! 32-bit little-endian. Records run until end of file. Round-trips are
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Layout, Params};

pub const MAGIC: [u8; 4] = *b"PCRD";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    BadVersion(u8),
    #[error("truncated archive")]
    Truncated,
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("archive does not match layout: {0}")]
    LayoutMismatch(String),
}

/// One raw record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_records<W: Write>(w: &mut W, records: &[Record]) -> Result<(), ArchiveError> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(rec.dims.len() as u32).to_le_bytes())?;
        for &d in &rec.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &rec.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<Record>, ArchiveError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ArchiveError::Truncated)?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|_| ArchiveError::Truncated)?;
    if version[0] != VERSION {
        return Err(ArchiveError::BadVersion(version[0]));
    }

    let mut records = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| ArchiveError::Truncated)?;
        let name = String::from_utf8(name_bytes).map_err(|_| ArchiveError::BadName)?;

        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf).map_err(|_| ArchiveError::Truncated)?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            r.read_exact(&mut d).map_err(|_| ArchiveError::Truncated)?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v = [0u8; 4];
            r.read_exact(&mut v).map_err(|_| ArchiveError::Truncated)?;
            data.push(f32::from_le_bytes(v));
        }
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

/// Serializes a parameter vector; f64 values are stored as f32.
pub fn params_to_records(params: &Params) -> Vec<Record> {
    params
        .layout
        .tensors
        .iter()
        .map(|spec| Record {
            name: spec.name.clone(),
            dims: spec.dims.clone(),
            data: params.data[spec.offset..spec.offset + spec.len()]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        })
        .collect()
}

/// Rebuilds a parameter vector, checking every tensor name and shape.
pub fn params_from_records(
    layout: std::sync::Arc<Layout>,
    records: &[Record],
) -> Result<Params, ArchiveError> {
    if records.len() != layout.tensors.len() {
        return Err(ArchiveError::LayoutMismatch(format!(
            "expected {} tensors, archive has {}",
            layout.tensors.len(),
            records.len()
        )));
    }
    let mut params = Params::zeros(layout.clone());
    for (spec, rec) in layout.tensors.iter().zip(records.iter()) {
        if spec.name != rec.name || spec.dims != rec.dims {
            return Err(ArchiveError::LayoutMismatch(format!(
                "tensor {} {:?} vs archive {} {:?}",
                spec.name, spec.dims, rec.name, rec.dims
            )));
        }
        for (dst, &src) in params.data[spec.offset..spec.offset + spec.len()]
            .iter_mut()
            .zip(rec.data.iter())
        {
            *dst = src as f64;
        }
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &Params) -> Result<(), ArchiveError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut file, &params_to_records(params))
}

pub fn load_params(path: &Path, layout: std::sync::Arc<Layout>) -> Result<Params, ArchiveError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let records = read_records(&mut file)?;
    params_from_records(layout, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayoutBuilder;

    fn sample_params() -> Params {
        let mut b = LayoutBuilder::new();
        b.linear("enc1", 3, 4);
        b.linear("head", 4, 2);
        Params::init(b.finish(), 21)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = sample_params();
        let mut first = Vec::new();
        write_records(&mut first, &params_to_records(&params)).unwrap();

        let records = read_records(&mut first.as_slice()).unwrap();
        let reloaded = params_from_records(params.layout.clone(), &records).unwrap();
        let mut second = Vec::new();
        write_records(&mut second, &params_to_records(&reloaded)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        write_records(&mut buf, &params_to_records(&sample_params())).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_records(&mut buf.as_slice()),
            Err(ArchiveError::BadMagic)
        ));
    }

    #[test]
    fn bad_version_is_rejected() {
        let mut buf = Vec::new();
        write_records(&mut buf, &params_to_records(&sample_params())).unwrap();
        buf[4] = 9;
        assert!(matches!(
            read_records(&mut buf.as_slice()),
            Err(ArchiveError::BadVersion(9))
        ));
    }

    #[test]
    fn truncated_record_is_rejected() {
        let mut buf = Vec::new();
        write_records(&mut buf, &params_to_records(&sample_params())).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_records(&mut buf.as_slice()),
            Err(ArchiveError::Truncated)
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = sample_params();
        let mut records = params_to_records(&params);
        records[0].dims = vec![2, 6];
        assert!(matches!(
            params_from_records(params.layout.clone(), &records),
            Err(ArchiveError::LayoutMismatch(_))
        ));
    }
}
