//! Named parameter tensors and the GOWT checkpoint format.
//!
//! Layout (little-endian): magic `GOWT`, `u32` tensor count, then per
//! tensor `u16` name length, UTF-8 name, `u8` rank, `rank x u32` dims and
//! the `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const GOWT_MAGIC: &[u8; 4] = b"GOWT";

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for a [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wrap handles that are already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor, returning its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("parameter name too long ({} bytes)", name.len())));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Record every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    /// Record every tensor as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    /// Collect gradients for each bound tensor.
    pub fn gradients(&self, bound: &BoundParams, grads: &Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Copy values of same-named tensors from `other`; shapes must agree.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in other.names.iter().zip(&other.tensors) {
            let Some(i) = self.index_of(name) else {
                return Err(Error::format("GOWT", format!("unexpected tensor `{name}`")));
            };
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::format(
                    "GOWT",
                    format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), self.tensors[i].shape()),
                ));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(GOWT_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let magic: [u8; 4] = read_array(r)?;
        if &magic != GOWT_MAGIC {
            return Err(Error::format("GOWT", "bad magic"));
        }
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("GOWT", "tensor name is not UTF-8"))?;
            let [rank] = read_array::<1>(r)?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_array(r)?) as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::format("GOWT", format!("tensor `{name}` truncated")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_array(r)?));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::format("GOWT", e.to_string()))?;
            set.insert(name, t).map_err(|e| Error::format("GOWT", e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(Error::format("GOWT", format!("{} trailing bytes", r.len())));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format("GOWT", "unexpected end of data"))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut a = [0u8; N];
    read_exact(r, &mut a)?;
    Ok(a)
}
