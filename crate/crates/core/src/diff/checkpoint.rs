//! S4CP binary checkpoint format.
//!
//! ```text
//! magic   "S4CP"
//! version u16
//! count   u32
//! count x { name_len u32, name utf-8, rank u32, dims u32 x rank, values f32 x prod(dims) }
//! ```
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use super::{DiffError, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S4CP";
pub const CHECKPOINT_VERSION: u16 = 1;

const EXACT_SHIFTS: [u32; 3] = [0, 22, 44];
const EXACT_MASK: u64 = (1 << 22) - 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.entries.push((name.into(), tensor.cast()));
    }

    /// Stores `tensor` as f32 plus, when f32 loses bits, three tensors
    /// `name@b0..2` holding the f64 bit pattern in 22-bit integer chunks
    /// (each exact in f32), so every f64 value, subnormals included, round-trips.
    pub fn push_exact<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let name = name.into();
        let x: Vec<f64> = tensor.to_f64_vec();
        let hi: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let shape = tensor.shape().to_vec();
        let exact = x.iter().zip(&hi).all(|(&v, &h)| (h as f64).to_bits() == v.to_bits());
        self.entries.push((name.clone(), Tensor::new(shape.clone(), hi).expect("same length")));
        if !exact {
            for (k, shift) in EXACT_SHIFTS.iter().enumerate() {
                let chunk: Vec<f32> = x.iter().map(|v| ((v.to_bits() >> shift) & EXACT_MASK) as f32).collect();
                self.entries.push((format!("{name}@b{k}"), Tensor::new(shape.clone(), chunk).expect("same length")));
            }
        }
    }

    pub fn from_params<T: Scalar>(params: &ParamStore<T>) -> Self {
        let mut ck = Self::new();
        for (name, t) in params.iter() {
            ck.push_exact(name, t);
        }
        ck
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Values of `name`, exact when [`Self::push_exact`] wrote bit chunks.
    pub fn get_exact(&self, name: &str) -> Option<(Vec<usize>, Vec<f64>)> {
        let t = self.get(name)?;
        let chunks: Vec<&Tensor<f32>> = (0..EXACT_SHIFTS.len()).filter_map(|k| self.get(&format!("{name}@b{k}"))).collect();
        let v = if chunks.len() == EXACT_SHIFTS.len() {
            (0..t.len())
                .map(|i| {
                    let bits = chunks.iter().zip(EXACT_SHIFTS).fold(0u64, |acc, (c, shift)| acc | ((c.data()[i] as u64) << shift));
                    f64::from_bits(bits)
                })
                .collect()
        } else {
            t.data().iter().map(|&x| x as f64).collect()
        };
        Some((t.shape().to_vec(), v))
    }

    /// Overwrites every parameter of `params` from the entry of the same
    /// name, keeping trainability flags.
    pub fn load_into<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<(), DiffError> {
        for i in 0..params.len() {
            let name = params.name(i).to_string();
            let (shape, values) = self
                .get_exact(&name)
                .ok_or_else(|| DiffError::Format(format!("missing tensor {name}")))?;
            let dst = params.tensor_mut(i);
            if shape != dst.shape() {
                return Err(DiffError::Format(format!(
                    "tensor {name}: shape {shape:?} in checkpoint, {:?} expected",
                    dst.shape()
                )));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(values) {
                *d = T::from_f64(s);
            }
            dst.clear_grad();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DiffError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(DiffError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(DiffError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| DiffError::Format("tensor name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(DiffError::Format(format!("rank {rank} too large")));
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| DiffError::Format("tensor too large".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| DiffError::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(DiffError::Format("trailing bytes".into()));
        }
        Ok(Self { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DiffError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DiffError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes atomically: to a sibling temp file, then renames over `path`.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), DiffError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&ck.encode())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, DiffError> {
    Checkpoint::decode(&std::fs::read(path)?)
}
