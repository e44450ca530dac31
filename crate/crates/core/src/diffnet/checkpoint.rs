//! Binary parameter container.
//!
//! ```text
//! "HTRP" | version: u32 | n_entries: u32
//! per entry: name_len: u32 | name (utf-8) | rank: u32 | dims: u64 * rank
//! values: f64 * total, little-endian
//! ```
//! All integers are little-endian.

use std::io::{Read, Write};

use super::params::{Layout, ParamVector};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HTRP";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParamVector) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let entries = params.layout().entries();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
    }
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamVector> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let n = read_u32(&mut r)?;
    let mut layout = Layout::new();
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        layout.push(name, shape);
    }
    let mut values = Vec::with_capacity(layout.len());
    let mut b = [0u8; 8];
    for _ in 0..layout.len() {
        r.read_exact(&mut b)?;
        values.push(f64::from_le_bytes(b));
    }
    ParamVector::new(layout, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 7)) {
            let mut layout = Layout::new();
            layout.push("policy/l0.weight", vec![2, 3]);
            layout.push("critic/l0.bias", vec![1]);
            let p = ParamVector::new(layout, values).unwrap();
            let mut buf = Vec::new();
            write_params(&mut buf, &p).unwrap();
            let back = read_params(buf.as_slice()).unwrap();
            prop_assert_eq!(back.layout(), p.layout());
            for (a, b) in back.values().iter().zip(p.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_layout() {
        let mut layout = Layout::new();
        layout.push("w", vec![1]);
        let p = ParamVector::new(layout, vec![1.5]).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"HTRP");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[buf.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(read_params(&b"NOPE\x01\0\0\0"[..]), Err(Error::Checkpoint(_))));
    }
}
