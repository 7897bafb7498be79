//! `DTN1` tensor files: the magic bytes `DTN1`, three little-endian `u32`
//! dimensions `(m, n, tau)`, then `m*n*tau` little-endian `f64` values in
//! vectorized order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, DynTensor};

pub const MAGIC: &[u8; 4] = b"DTN1";

pub fn write_dtn<W: Write>(mut w: W, t: &DynTensor) -> Result<()> {
    let d = t.dims();
    w.write_all(MAGIC)?;
    for v in [d.rows, d.cols, d.frames] {
        let v =
            u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} overflows u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for v in t.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dtn<R: Read>(mut r: R) -> Result<DynTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let dims = Dims::new(dims[0], dims[1], dims[2]);
    let mut bytes = vec![0u8; dims.len() * 8];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated payload for a {dims} tensor"))
        }
        _ => Error::Io(e),
    })?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    DynTensor::from_vec(dims, data)
}

pub fn save(path: impl AsRef<Path>, t: &DynTensor) -> Result<()> {
    write_dtn(BufWriter::new(File::create(path)?), t)
}

pub fn load(path: impl AsRef<Path>) -> Result<DynTensor> {
    read_dtn(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = DynTensor::from_vec(Dims::new(1, 2, 1), vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_dtn(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"DTN1");
        assert_eq!(&buf[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_dtn(&b"DTN2\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let mut buf = Vec::new();
        write_dtn(&mut buf, &DynTensor::zeros(Dims::new(2, 2, 2))).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_dtn(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(m in 1usize..5, n in 1usize..5, k in 1usize..4, seed in any::<u64>()) {
            let dims = Dims::new(m, n, k);
            let mut s = seed;
            let t = DynTensor::from_fn(dims, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            });
            let mut buf = Vec::new();
            write_dtn(&mut buf, &t).unwrap();
            let back = read_dtn(&buf[..]).unwrap();
            prop_assert_eq!(back.dims(), dims);
            for (a, b) in back.as_slice().iter().zip(t.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
