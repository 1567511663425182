//! Flat, versioned binary container of named f64 arrays, used for model
//! checkpoints. Layout (little-endian):
//!
//! ```text
//! magic        8 bytes  b"NAMEDARR"
//! version      u32      1
//! array_count  u32
//! per array:
//!   name_len   u32
//!   name       UTF-8 bytes
//!   ndim       u32
//!   dims       u32 * ndim
//!   values     f64 * product(dims)
//! ```
//!
//! Values round-trip bit-exactly.

use std::io::{Read, Write};

#[derive(Debug)]
pub enum ArrayFileError {
    Io(std::io::Error),
    BadMagic,
    BadVersion(u32),
    BadName,
    Truncated,
}

impl std::fmt::Display for ArrayFileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArrayFileError::Io(e) => write!(f, "io error: {e}"),
            ArrayFileError::BadMagic => write!(f, "not a named-array file"),
            ArrayFileError::BadVersion(v) => write!(f, "unsupported version {v}"),
            ArrayFileError::BadName => write!(f, "array name is not valid UTF-8"),
            ArrayFileError::Truncated => write!(f, "file ends mid-array"),
        }
    }
}

impl std::error::Error for ArrayFileError {}

impl From<std::io::Error> for ArrayFileError {
    fn from(e: std::io::Error) -> Self {
        ArrayFileError::Io(e)
    }
}

pub const MAGIC: &[u8; 8] = b"NAMEDARR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_arrays(w: &mut impl Write, arrays: &[NamedArray]) -> Result<(), ArrayFileError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        debug_assert_eq!(a.shape.iter().product::<usize>(), a.values.len());
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for d in &a.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &a.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_arrays(r: &mut impl Read) -> Result<Vec<NamedArray>, ArrayFileError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if &magic != MAGIC {
        return Err(ArrayFileError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(ArrayFileError::BadVersion(version));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(map_eof)?;
        let name = String::from_utf8(name).map_err(|_| ArrayFileError::BadName)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let n = shape.iter().product::<usize>();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(map_eof)?;
            values.push(f64::from_le_bytes(buf));
        }
        out.push(NamedArray {
            name,
            shape,
            values,
        });
    }
    Ok(out)
}

pub fn write_arrays_to_path(
    path: &std::path::Path,
    arrays: &[NamedArray],
) -> Result<(), ArrayFileError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_arrays(&mut f, arrays)?;
    f.flush()?;
    Ok(())
}

pub fn read_arrays_from_path(path: &std::path::Path) -> Result<Vec<NamedArray>, ArrayFileError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_arrays(&mut f)
}

fn read_u32(r: &mut impl Read) -> Result<u32, ArrayFileError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(map_eof)?;
    Ok(u32::from_le_bytes(buf))
}

fn map_eof(e: std::io::Error) -> ArrayFileError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ArrayFileError::Truncated
    } else {
        ArrayFileError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let arrays = vec![
            NamedArray {
                name: "alpha.w".into(),
                shape: vec![2, 3],
                values: vec![1.0, -0.5, 1e-300, f64::MAX, 0.1 + 0.2, -0.0],
            },
            NamedArray {
                name: "empty".into(),
                shape: vec![0],
                values: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_arrays(&mut buf, &arrays).unwrap();
        let back = read_arrays(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in arrays.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        let mut buf = b"NOTMAGIC".to_vec();
        buf.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            read_arrays(&mut buf.as_slice()),
            Err(ArrayFileError::BadMagic)
        ));
    }

    #[test]
    fn detects_truncation() {
        let arrays = vec![NamedArray {
            name: "x".into(),
            shape: vec![4],
            values: vec![1.0, 2.0, 3.0, 4.0],
        }];
        let mut buf = Vec::new();
        write_arrays(&mut buf, &arrays).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(
            read_arrays(&mut buf.as_slice()),
            Err(ArrayFileError::Truncated)
        ));
    }
}
