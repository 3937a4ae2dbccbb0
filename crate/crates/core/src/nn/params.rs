use std::io::{Read, Write};

use crate::error::{invalid, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

const ARCHIVE_MAGIC: &[u8; 8] = b"TXRPARAM";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Ordered, named parameter set of a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Writes the binary parameter archive.
    ///
    /// Layout (little endian): magic `TXRPARAM`, `u32` version, `u8`-prefixed
    /// dtype tag (`f32`/`f64`), `u32` parameter count, then per parameter a
    /// `u32`-prefixed UTF-8 name, `u32` rank, `u64` dims and the raw values.
    pub fn write_archive<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&[S::TAG.len() as u8])?;
        w.write_all(S::TAG.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        let mut buf = Vec::new();
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            buf.clear();
            S::to_le_bytes_vec(p.value.as_slice(), &mut buf);
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_archive<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| invalid!("parameter archive: {m}");
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut tag_len = [0u8; 1];
        read_exact(&mut r, &mut tag_len)?;
        let mut tag = vec![0u8; tag_len[0] as usize];
        read_exact(&mut r, &mut tag)?;
        if tag != S::TAG.as_bytes() {
            return Err(bad(&format!(
                "stored as {}, requested {}",
                String::from_utf8_lossy(&tag),
                S::TAG
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d = [0u8; 8];
                read_exact(&mut r, &mut d)?;
                shape.push(u64::from_le_bytes(d) as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * S::BYTES];
            read_exact(&mut r, &mut bytes)?;
            store.add(name, Tensor::from_vec(&shape, S::from_le_bytes_slice(&bytes))?);
        }
        Ok(store)
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(invalid!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            ));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(invalid!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| invalid!("parameter archive truncated: {e}"))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradients aligned with a [`ParamStore`]; `None` means no contribution.
#[derive(Clone, Debug)]
pub struct ParamGrads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: Tensor<S>) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn accumulate(&mut self, other: ParamGrads<S>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.as_mut_slice() {
                *v = *v * factor;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// True when no parameter received a non-zero gradient entry.
    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_all_zero)
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor<S>>> {
        self.grads.iter().map(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_preserves_bits() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 1e-7]).unwrap());
        store.add("a.bias", Tensor::from_vec(&[2], vec![0.5, f32::MIN_POSITIVE]).unwrap());
        let mut bytes = Vec::new();
        store.write_archive(&mut bytes).unwrap();
        let back = ParamStore::<f32>::read_archive(bytes.as_slice()).unwrap();
        assert_eq!(back, store);
        assert!(ParamStore::<f64>::read_archive(bytes.as_slice()).is_err());
        assert!(ParamStore::<f32>::read_archive(&bytes[..bytes.len() - 1]).is_err());
    }
}
