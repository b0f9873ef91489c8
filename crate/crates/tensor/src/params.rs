use std::collections::HashMap;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Index of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    lookup: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, valid for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points parameter `id` at another tape variable.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    /// Gradients aligned with the store. Parameters the loss did not reach
    /// get zeros.
    pub fn collect<S: Scalar>(&self, store: &ParamStore<S>, grads: &mut Gradients<S>) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    }
}

const MAGIC: &[u8; 8] = b"SGQCKPT1";
const VERSION: u8 = 1;

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "param",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub(crate) fn value_at_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.values[i]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.values.iter()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Checkpoint bytes: magic, version, entry count, an index of
    /// `(name, dtype, shape)` entries, then little-endian payloads in
    /// index order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(S::DTYPE.code());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in &self.values {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses checkpoint bytes. Payloads stored in another precision are
    /// converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut index = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype code {code}")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            index.push((name, dtype, shape));
        }
        let mut store = Self::new();
        for (name, dtype, shape) in index {
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| {
                TensorError::Checkpoint(format!("`{name}` is too large"))
            })?)?;
            let data: Vec<S> = raw
                .chunks_exact(dtype.size_of())
                .map(|c| match dtype {
                    DType::F32 => S::from_f64(f32::read_le(c) as f64),
                    DType::F64 => S::from_f64(f64::read_le(c)),
                })
                .collect();
            store
                .add(name, Tensor::new(shape, data)?)
                .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies values from `other` for every parameter present in both
    /// stores with matching shape. Returns the number copied.
    pub fn load_matching(&mut self, other: &ParamStore<S>) -> Result<usize> {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.by_name(name) {
                if src.shape() != self.values[i].shape() {
                    return Err(TensorError::Checkpoint(format!(
                        "`{name}` has shape {:?}, checkpoint {:?}",
                        self.values[i].shape(),
                        src.shape()
                    )));
                }
                self.values[i] = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.1 - 0.2))
            .unwrap();
        s.add("bias", Tensor::from_f64(vec![1], &[f64::from(f32::MIN_POSITIVE)]).unwrap())
            .unwrap();
        s.add("scalar", Tensor::scalar(-0.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], b"SGQCKPT1");
        assert_eq!(bytes[8], 1);
        let back = ParamStore::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((a, x), (b, y)) in s.iter().zip(back.iter()) {
            assert_eq!(a, b);
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = sample();
        s.save(&path).unwrap();
        assert_eq!(ParamStore::<f32>::load(&path).unwrap(), s);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::<f32>::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ParamStore::<f32>::from_bytes(&extra).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(s.add("bias", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let s = sample();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let loss = tape.sum(b.var(ParamId(0)));
        let mut g = tape.backward(loss).unwrap();
        let grads = b.collect(&s, &mut g);
        assert_eq!(grads[0].data(), &[1.0; 6]);
        assert_eq!(grads[1].data(), &[0.0]);
        assert_eq!(grads[2].shape(), &[] as &[usize]);
    }
}
