//! Binary weight files.
//!
//! Layout (all integers little-endian): `DCLW`, format version `u32`, tensor
//! count `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, one `u32` per dimension and the `f64` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::msfcn::WeightStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCLW";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(store: &WeightStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &store.tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank of {name} too large")))?;
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension of {name} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.ctx,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8], ctx: &str) -> Result<WeightStore> {
    let mut r = Reader { bytes, pos: 0, ctx };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(ctx, "not a weights file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut store = WeightStore::new();
    for k in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(ctx, format!("tensor {k} name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(ctx, "tensor too large"))?, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::format(ctx, format!("tensor {name}: {e}")))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| Error::format(ctx, format!("duplicate tensor {name}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(ctx, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_weights(path: &Path, store: &WeightStore) -> Result<()> {
    let bytes = encode_weights(store)?;
    // Write-then-rename keeps the previous checkpoint intact on failure.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightStore> {
    let bytes = fs::read(path)?;
    decode_weights(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.weight", Tensor::from_fn(&[2, 3], |i| (i as f64).sin() * 1e-300)).unwrap();
        s.insert("b", Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode_weights(&s).unwrap();
        assert_eq!(&bytes[..4], b"DCLW");
        let back = decode_weights(&bytes, "mem").unwrap();
        for ((ka, a), (kb, b)) in s.tensors.iter().zip(&back.tensors) {
            assert_eq!(ka, kb);
            assert_eq!(a.dims(), b.dims());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = encode_weights(&sample()).unwrap();
        for cut in [2, 9, 20, bytes.len() - 1] {
            let err = decode_weights(&bytes[..cut], "w.bin").unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
            assert!(err.to_string().contains("w.bin"));
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_weights(&v2, "w.bin").unwrap_err(), Error::Version { found: 2, expected: 1 }));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode_weights(&bad, "w.bin").unwrap_err().to_string().contains("magic"));
    }
}
