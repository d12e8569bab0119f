//! Portable byte layout for named arrays.
//!
//! ```text
//! magic     8 bytes  "QNETCKPT"
//! version   u32      1
//! count     u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim x u64)
//!   values   product(dims) x f64
//! ```
//!
//! All integers and floats are little-endian; floats are IEEE-754 binary64,
//! so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"QNETCKPT";
pub const VERSION: u32 = 1;

pub fn write_arrays<W: Write>(mut w: W, arrays: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_arrays<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            _ => return Err(Error::Format(format!("{name}: {ndim}-d arrays unsupported"))),
        };
        let values = read_f64s(&mut r, rows * cols)?;
        out.push((name, Tensor::new(rows, cols, values)?));
    }
    Ok(out)
}

pub fn save(path: &Path, arrays: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_arrays(&mut buf, arrays)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    read_arrays(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(read_arrays(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn layout_is_little_endian() {
        let mut buf = Vec::new();
        write_arrays(&mut buf, &[("w".into(), Tensor::scalar(1.0))]).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[1, 0, 0, 0]);
        assert_eq!(&buf[16..20], &[1, 0, 0, 0]);
        assert_eq!(buf[20], b'w');
        assert_eq!(&buf[buf.len() - 8..], &1.0f64.to_le_bytes());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            arrays in proptest::collection::vec(
                ("[a-z.]{1,12}", 1usize..4, proptest::collection::vec(proptest::num::f64::ANY, 1..13)),
                0..5,
            )
        ) {
            let arrays: Vec<(String, Tensor)> = arrays
                .into_iter()
                .map(|(n, rows, v)| {
                    let cols = v.len();
                    let data: Vec<f64> = (0..rows).flat_map(|_| v.iter().copied()).collect();
                    (n, Tensor::new(rows, cols, data).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_arrays(&mut buf, &arrays).unwrap();
            let back = read_arrays(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), arrays.len());
            for ((n1, t1), (n2, t2)) in arrays.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                for (a, b) in t1.data().iter().zip(t2.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
