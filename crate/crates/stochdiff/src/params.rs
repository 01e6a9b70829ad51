//! Named parameter tensors with gradient buffers and checkpoint IO.
//!
//! Iteration order is the insertion order and is stable across runs,
//! which the optimizer and the checkpoint format both rely on.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Tx};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDPC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.grads.push(Tensor::zeros(tensor.shape()));
        self.tensors.push(tensor);
        self.names.push(name);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.grads[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Mutable access to the value and gradient of entry `i` (insertion
    /// order); used by the optimizer update.
    pub fn entry_mut(&mut self, i: usize) -> (&str, &mut Tensor, &mut Tensor) {
        (
            &self.names[i],
            &mut self.tensors[i],
            &mut self.grads[i],
        )
    }

    /// Global L2 norm of all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let mut handles = Vec::with_capacity(self.names.len());
        let mut index = HashMap::with_capacity(self.names.len());
        for (i, (name, tensor)) in self.iter().enumerate() {
            handles.push(tape.leaf(tensor.clone()));
            index.insert(name.to_string(), i);
        }
        BoundParams { handles, index }
    }

    /// Per-entry gradient tensors of one bound evaluation, zeros where a
    /// parameter did not participate in the graph.
    pub fn grads_of(&self, bound: &BoundParams<'_>, grads: &Grads) -> Vec<Tensor> {
        bound
            .handles
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                grads
                    .get(h)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tensors[i].shape()))
            })
            .collect()
    }

    /// Adds per-entry gradient tensors into the gradient buffers.
    pub fn add_grad_vec(&mut self, gv: &[Tensor]) {
        assert_eq!(gv.len(), self.grads.len(), "gradient vector length drift");
        for (buf, g) in self.grads.iter_mut().zip(gv) {
            buf.add_assign(g);
        }
    }

    /// Adds the tape gradients of a bound evaluation into the gradient
    /// buffers, scaled by `scale`.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_>, grads: &Grads, scale: f64) {
        for (i, &h) in bound.handles.iter().enumerate() {
            if let Some(g) = grads.get(h) {
                let buf = &mut self.grads[i];
                assert_eq!(buf.shape(), g.shape(), "gradient shape drift");
                for (b, &v) in buf.data_mut().iter_mut().zip(g.data()) {
                    *b += scale * v;
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.names.len() as u64).to_le_bytes());
        for (name, tensor) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&buf)
    }

    fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { buf, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize;
        let mut out = ParameterSet::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cursor.take(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("non-utf8 name".into()))?
                .to_string();
            let ndim = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(cursor.take(8)?.try_into().unwrap()));
            }
            if out.contains(&name) {
                return Err(Error::CorruptCheckpoint(format!("duplicate entry {name}")));
            }
            out.insert(name, Tensor::new(shape, data).unwrap());
        }
        if cursor.pos != buf.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(out)
    }

    /// Checks that `self` holds exactly the names and shapes of `expected`.
    pub fn validate_layout(&self, expected: &ParameterSet) -> Result<()> {
        for (name, tensor) in expected.iter() {
            match self.get(name) {
                None => {
                    return Err(Error::ShapeMismatch(format!(
                        "checkpoint is missing parameter {name}"
                    )))
                }
                Some(t) if t.shape() != tensor.shape() => {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter {name}: checkpoint shape {:?} vs configured {:?}",
                        t.shape(),
                        tensor.shape()
                    )))
                }
                _ => {}
            }
        }
        if self.len() != expected.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} parameters, configuration wants {}",
                self.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parameter handles of one tape evaluation, in `ParameterSet` order.
pub struct BoundParams<'t> {
    handles: Vec<Tx<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Tx<'t> {
        self.handles[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }
}

/// Writes a checkpoint atomically-ish next to the final path.
pub fn checkpoint_save(params: &ParameterSet, path: &Path) -> Result<()> {
    params.save(path)
}

pub fn checkpoint_load(path: &Path) -> Result<ParameterSet> {
    ParameterSet::load(path)
}
