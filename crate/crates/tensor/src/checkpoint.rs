//! Little-endian tensor checkpoint:
//! `"CDTR"`, version `u32`, count `u32`, then per tensor
//! name length `u16`, UTF-8 name, rank `u8`, dims `u32`..., `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"CDTR";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| TensorError::Checkpoint(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| TensorError::Checkpoint(format!("dim too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
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
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| TensorError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode([("w", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"CDTR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 1);
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_damage() {
        let t = Tensor::scalar(1.0);
        let mut bytes = encode([("s", &t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(TensorError::Checkpoint(m)) if m.contains("version")));
        assert!(decode(b"XXXX").is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_bit_exact(
            vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40),
            name in "[a-z_.0-9]{1,20}",
        ) {
            let n = vals.len();
            let t = Tensor::new(vec![n], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let bytes = encode([(name.as_str(), &t)]).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            for (a, b) in back[0].1.data().iter().zip(&vals) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
            prop_assert_eq!(encode([(name.as_str(), &back[0].1)]).unwrap(), bytes);
        }
    }
}
