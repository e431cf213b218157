use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::sync::Arc;

use crate::{Element, Grads, Tape, Tensor, TensorError, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named set of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

/// A store's parameters recorded as leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order, for [`AdamState::step`](crate::AdamState::step).
    pub fn grads<T: Element>(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.values[i])
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[idx])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        self.values[id.0] = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(Arc::clone(v), trainable)).collect() }
    }

    /// Replaces every value with the same-named array from `arrays`.
    pub fn load_from(&mut self, arrays: Vec<(String, Tensor<T>)>) -> Result<(), TensorError> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in arrays {
            let &i =
                self.index.get(&name).ok_or_else(|| TensorError::Checkpoint(format!("unexpected array {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(TensorError::Checkpoint(format!(
                    "array {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(t);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TensorError::Checkpoint(format!("missing array {}", self.names[i])));
        }
        Ok(())
    }
}

impl ParamStore<f32> {
    pub fn write_checkpoint<W: Write>(&self, out: W) -> io::Result<()> {
        write_arrays(out, self.iter())
    }
}

/// Writes named arrays: `u16` name length, UTF-8 name, `u8` rank, `u32` dims,
/// then little-endian `f32` values. All integers little-endian.
pub fn write_arrays<'a, W: Write>(
    mut out: W,
    arrays: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> io::Result<()> {
    for (name, t) in arrays {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "array name too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        let rank = u8::try_from(t.rank()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "rank too large"))?;
        out.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension too large"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(rest: &mut &'a [u8], n: usize) -> Result<&'a [u8], TensorError> {
    if n > rest.len() {
        return Err(TensorError::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    Ok(head)
}

/// Reads every named array until end of input.
pub fn read_arrays<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f32>)>, TensorError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|e| TensorError::Checkpoint(format!("read failed: {e}")))?;
    let mut rest = buf.as_slice();
    let mut arrays = Vec::new();
    while !rest.is_empty() {
        let len = take(&mut rest, 2)?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name = String::from_utf8(take(&mut rest, len)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("array name is not UTF-8".into()))?;
        let rank = take(&mut rest, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = take(&mut rest, 4)?;
            shape.push(u32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut rest, n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        arrays.push((name, Tensor::new(&shape, data)?));
    }
    Ok(arrays)
}
