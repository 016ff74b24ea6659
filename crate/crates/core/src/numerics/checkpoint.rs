//! Binary parameter checkpoints.
//!
//! Layout, all little-endian: magic `AVMP`, version `u32`, parameter count
//! `u32`, then per parameter: name length `u16`, UTF-8 name, rank `u8`,
//! extents as `u32`, raw `f64` values.

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVMP";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(store, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore> {
    let magic = read_array::<4>(r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_array::<1>(r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(r)?));
        }
        if store.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::from_fn([2, 3], |i| i as f64 * 0.5 - 1.0));
        s.add("bias", Tensor::from_fn([3], |i| -(i as f64)));
        s.add("scalar", Tensor::scalar(f64::MIN_POSITIVE));
        s
    }

    #[test]
    fn header_layout() {
        let bytes = checkpoint_bytes(&sample());
        assert_eq!(&bytes[..4], b"AVMP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 5);
        assert_eq!(&bytes[14..19], b"enc.w");
        assert_eq!(bytes[19], 2);
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let back = read_checkpoint(&mut checkpoint_bytes(&s).as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = checkpoint_bytes(&sample());
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bytes.as_slice()), Err(Error::Checkpoint(_))));
        let mut bytes = checkpoint_bytes(&sample());
        bytes[4] = 9;
        assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
        let bytes = checkpoint_bytes(&sample());
        assert!(read_checkpoint(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
