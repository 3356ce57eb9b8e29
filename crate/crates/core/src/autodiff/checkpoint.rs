//! `LCT1` named-tensor container.
//!
//! Layout (all integers u32 little-endian): magic `LCT1`, record count, then
//! per record: name byte length, UTF-8 name, rank, dims, and the values as
//! IEEE-754 binary64 little-endian.

use std::io::{Read, Write};

use super::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"LCT1";

pub fn write_tensors<W: Write>(
    mut w: W,
    tensors: &[(String, Tensor)],
) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::Format(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r, "record count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| TensorError::Format("truncated name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)
            .map_err(|_| TensorError::Format(format!("truncated values for `{name}`")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let tensors = vec![
            ("a.w".to_string(), Tensor::new(vec![2, 2], vec![0.1, -0.0, 1e-300, f64::MAX]).unwrap()),
            ("b".to_string(), Tensor::scalar(std::f64::consts::PI)),
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        assert_eq!(&buf[..4], b"LCT1");
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncation_is_reported() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensors(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }
}
