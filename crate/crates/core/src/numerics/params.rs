//! Named parameter store, tape binding, and the flat binary checkpoint
//! container (magic `CEGI1`; per parameter: name length, name bytes, rank,
//! extents, little-endian f64 payload).

use super::{Result, Scalar, Tape, Tensor, TensorError, VarId};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"CEGI1";

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    entries: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.entries.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterate name-sorted, which fixes checkpoint byte layout.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        write_checkpoint(&mut file, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)
            .map_err(|e| TensorError::Checkpoint(format!("open {}: {e}", path.display())))?;
        read_checkpoint(&mut file)
    }
}

/// Serialize a store into the flat binary container.
pub fn write_checkpoint<F: Scalar, W: Write>(
    out: &mut W,
    store: &ParamStore<F>,
) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, tensor) in store.iter() {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse a checkpoint, validating that every record is complete and the
/// container holds no trailing bytes.
pub fn read_checkpoint<F: Scalar, R: Read>(input: &mut R) -> Result<ParamStore<F>> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| TensorError::Checkpoint(format!("read: {e}")))?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut pos = MAGIC.len();
    let mut store = ParamStore::new();
    let take = |pos: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *pos + n > buf.len() {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {pos}, needed {n} more"
            )));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    while pos < buf.len() {
        let r = take(&mut pos, 4)?;
        let name_len = u32::from_le_bytes(buf[r].try_into().unwrap()) as usize;
        let r = take(&mut pos, name_len)?;
        let name = String::from_utf8(buf[r].to_vec())
            .map_err(|_| TensorError::Checkpoint("parameter name is not utf-8".into()))?;
        let r = take(&mut pos, 4)?;
        let rank = u32::from_le_bytes(buf[r].try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let r = take(&mut pos, 8)?;
            shape.push(u64::from_le_bytes(buf[r].try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let r = take(&mut pos, numel * 8)?;
        let data: Vec<F> = buf[r]
            .chunks_exact(8)
            .map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if store.contains(&name) {
            return Err(TensorError::Checkpoint(format!(
                "duplicate parameter `{name}`"
            )));
        }
        store.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok(store)
}

/// Binds store parameters onto a tape, once each, and folds tape gradients
/// back into the store after a backward pass.
pub struct Binder {
    trainable: bool,
    bound: Vec<(String, VarId)>,
}

impl Binder {
    pub fn new(trainable: bool) -> Self {
        Binder {
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn get<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        name: &str,
    ) -> Result<VarId> {
        if let Some((_, id)) = self.bound.iter().find(|(n, _)| n == name) {
            return Ok(*id);
        }
        let value = Tensor {
            shape: store.get(name)?.shape().to_vec(),
            data: store.get(name)?.data().to_vec(),
            grad: None,
        };
        let id = if self.trainable {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Accumulate the tape's gradients into the store's parameter grads.
    pub fn harvest<F: Scalar>(&self, tape: &Tape<F>, store: &mut ParamStore<F>) -> Result<()> {
        for (name, id) in &self.bound {
            if let Some(g) = tape.grad(*id) {
                store.get_mut(name)?.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips() {
        let mut store = ParamStore::<f64>::new();
        store.insert("b.w", Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        store.insert("a.v", Tensor::from_vec(vec![3], vec![-1.0, 0.5, 9.25]).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store).unwrap();
        assert_eq!(&bytes[..5], b"CEGI1");
        let back: ParamStore<f64> = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("a.v").unwrap().data(), &[-1.0, 0.5, 9.25]);
        assert_eq!(back.get("b.w").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn checkpoint_truncation_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_checkpoint::<f64, _>(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, TensorError::Checkpoint(_)));
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let bytes = b"XXGI1".to_vec();
        let err = read_checkpoint::<f64, _>(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, TensorError::Checkpoint(_)));
    }

    #[test]
    fn binder_reuses_ids_and_harvests() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let mut tape = Tape::new();
        let mut binder = Binder::new(true);
        let a = binder.get(&mut tape, &store, "w").unwrap();
        let b = binder.get(&mut tape, &store, "w").unwrap();
        assert_eq!(a, b);
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        binder.harvest(&tape, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[1.0, 1.0]);
    }
}
